use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::pulse::synthesize_pulse;
use super::scenario::{CowSpec, FaultInjection};
use crate::biosignal::estimate_bpm;
use crate::codec::{encode_uplink, NodeUplinkFrame};
use crate::domain::{FixQuality, GeoFence, GeoFix, LatLon};
use crate::nmea::{parse_sentence, serialize_gga, to_fix};

const METERS_PER_DEG_LAT: f64 = 111_320.0;
/// Random-walk step standard deviation per reporting period, meters.
pub const STEP_SIGMA_M: f64 = 2.0;
/// How far north of the fence a wandering cow is placed, degrees.
const WANDER_OFFSET_DEG: f64 = 0.001;

/// Per-cow world state. Each agent owns its random stream, so agents can be
/// stepped in any order or in parallel with identical results.
#[derive(Debug, Clone)]
pub struct CowAgent {
    pub cattle_id: String,
    pub node_id: u16,
    pub home: LatLon,
    pub altitude: f64,
    pub position: LatLon,
    pub base_bpm: f64,
    /// Transmit offset within the uplink period, seconds.
    pub phase: f64,
    seq: u8,
    wandering: bool,
    wander: Vec<(f64, f64)>,
    shifts: Vec<(f64, f64)>,
    silences: Vec<(f64, f64)>,
    rng: ChaCha8Rng,
}

/// Read-only inputs shared by every agent during a step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub fence: &'a GeoFence,
    pub start_epoch_s: i64,
    pub pulse_window_s: f64,
    pub pulse_jitter: f64,
}

/// One generated uplink.
#[derive(Debug, Clone, PartialEq)]
pub struct Uplink {
    pub t: f64,
    pub node_id: u16,
    pub frame: Vec<u8>,
    pub fix: GeoFix,
}

impl CowAgent {
    pub fn new(spec: &CowSpec, faults: &[FaultInjection], phase: f64, rng: ChaCha8Rng) -> Self {
        let mut wander = Vec::new();
        let mut shifts = Vec::new();
        let mut silences = Vec::new();
        for f in faults {
            match f {
                FaultInjection::WanderOut { cattle_id, start_s, duration_s } if *cattle_id == spec.cattle_id => {
                    wander.push((*start_s, start_s + duration_s))
                }
                FaultInjection::HeartRateShift { cattle_id, start_s, delta_bpm } if *cattle_id == spec.cattle_id => {
                    shifts.push((*start_s, *delta_bpm))
                }
                FaultInjection::NodeSilence { node_id, start_s, end_s } if *node_id == spec.node_id => {
                    silences.push((*start_s, *end_s))
                }
                _ => {}
            }
        }
        let home = LatLon::new(spec.home.lat, spec.home.lon);
        CowAgent {
            cattle_id: spec.cattle_id.clone(),
            node_id: spec.node_id,
            home,
            altitude: spec.home.alt,
            position: home,
            base_bpm: spec.base_bpm,
            phase,
            seq: 0,
            wandering: false,
            wander,
            shifts,
            silences,
            rng,
        }
    }

    pub fn is_wandering(&self, t: f64) -> bool {
        self.wander.iter().any(|&(a, b)| a <= t && t < b)
    }

    pub fn is_silenced(&self, t: f64) -> bool {
        self.silences.iter().any(|&(a, b)| a <= t && t <= b)
    }

    pub fn bpm_at(&self, t: f64) -> f64 {
        self.base_bpm + self.shifts.iter().filter(|(s, _)| *s <= t).map(|(_, d)| d).sum::<f64>()
    }

    /// Position reported through a GGA sentence: serialized, parsed back and
    /// converted, exactly as the collar's receiver would hand it over.
    fn gga_fix(&self, p: LatLon, ctx: &StepContext, t: f64) -> GeoFix {
        let epoch = ctx.start_epoch_s as f64 + t;
        let sod = epoch.rem_euclid(86_400.0);
        let fix = GeoFix {
            position: Some(p),
            altitude: Some(self.altitude),
            quality: FixQuality::StandardFix,
            timestamp: epoch.floor() as u64,
        };
        serialize_gga(&fix, sod)
            .ok()
            .and_then(|line| parse_sentence(&line).ok())
            .and_then(|parsed| parsed.supported())
            .and_then(|s| to_fix(&s).ok())
            .unwrap_or_else(|| GeoFix::no_fix(epoch.floor() as u64))
    }

    fn offset(&self, p: LatLon, north_m: f64, east_m: f64) -> LatLon {
        LatLon::new(
            p.lat + north_m / METERS_PER_DEG_LAT,
            p.lon + east_m / (METERS_PER_DEG_LAT * p.lat.to_radians().cos()),
        )
    }

    fn inside(fix: &GeoFix, fence: &GeoFence) -> bool {
        fix.position.is_some_and(|p| fence.contains(p))
    }

    /// Moves the cow for the reporting instant `t` and returns its fix.
    fn advance_position(&mut self, ctx: &StepContext, t: f64) -> GeoFix {
        let north: f64 = self.rng.sample::<f64, _>(StandardNormal) * STEP_SIGMA_M;
        let east: f64 = self.rng.sample::<f64, _>(StandardNormal) * STEP_SIGMA_M;
        if self.is_wandering(t) {
            self.wandering = true;
            let (_, max) = ctx.fence.bounds();
            let outside = LatLon::new(max.lat + WANDER_OFFSET_DEG, self.position.lon);
            return self.gga_fix(outside, ctx, t);
        }
        if self.wandering {
            self.wandering = false;
            self.position = self.home;
        }
        for sign in [1.0, -1.0] {
            let candidate = self.offset(self.position, sign * north, sign * east);
            let fix = self.gga_fix(candidate, ctx, t);
            if Self::inside(&fix, ctx.fence) {
                self.position = fix.position.unwrap_or(self.position);
                return fix;
            }
        }
        self.gga_fix(self.position, ctx, t)
    }

    /// Advances the cow to reporting instant `t` and builds its uplink, or
    /// `None` while the node is silenced.
    pub fn step(&mut self, ctx: &StepContext, t: f64) -> Option<Uplink> {
        let fix = self.advance_position(ctx, t);
        let bpm = self.bpm_at(t);
        let pulse = synthesize_pulse(bpm, ctx.pulse_window_s, ctx.pulse_jitter, &mut self.rng);
        if self.is_silenced(t) {
            return None;
        }
        let estimate = estimate_bpm(&pulse).ok().map(|e| e.bpm);
        let timestamp = (ctx.start_epoch_s as f64 + t).floor() as u32;
        let frame = NodeUplinkFrame::from_reading(self.node_id, self.seq, timestamp, &fix, estimate, false)
            .and_then(|f| encode_uplink(&f))
            .ok()?;
        self.seq = self.seq.wrapping_add(1);
        Some(Uplink { t, node_id: self.node_id, frame: frame.to_vec(), fix })
    }
}
