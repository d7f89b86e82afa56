//! Herd and shed simulation.
//!
//! Cows report on a fixed period through the LoRa model; shed stations
//! report over a lossless link with 2 ms latency. Frames reach the sink in
//! nondecreasing simulation time.

mod cow;
mod environment;
mod pulse;
mod scenario;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cow::{CowAgent, StepContext, Uplink, STEP_SIGMA_M};
pub use environment::{measure_audio, step_environment, synthesize_audio, EnvModel, EnvState, AUDIO_SAMPLE_RATE};
pub use pulse::{pulse_beats, render_pulse, synthesize_pulse, PULSE_SAMPLE_RATE};
pub use scenario::{
    bundled, generate_scenario, load_scenario, validate, CowSpec, DriftSpec, EnvParameter, FaultInjection, HomePosition,
    PhaseMode, RadioSpec, ReportingSpec, Scenario, ScenarioError, ScenarioErrors, ScenarioSpec, ShedSpec, StationKind,
    StationSpec, BUNDLED, DEFAULT_SCHEDULE, DEFAULT_START,
};

use crate::codec::{encode_station, StationFrame};
use crate::domain::ActivityCode;
use crate::exec::Execution;
use crate::netsim::{Delivery, NetworkSimulator, Outcome, OutcomeRecord};
use crate::time::Timestamp;

/// Lossless station link latency, seconds.
pub const STATION_LATENCY_S: f64 = 0.002;
/// Half-width of the uniform jitter on scheduled visits, seconds.
pub const VISIT_JITTER_S: f64 = 600.0;

const DOMAIN_COW: u64 = 1;
const DOMAIN_ENV: u64 = 2;
const DOMAIN_VISIT: u64 = 3;
const DOMAIN_CHANNEL: u64 = 4;
const DOMAIN_LOSS: u64 = 5;

/// An independent random stream per (seed, purpose, index).
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 48) | index);
    rng
}

/// Receives the frames a simulation produces.
pub trait FrameSink {
    fn uplink(&mut self, bytes: &[u8], arrival: Timestamp);
    fn station(&mut self, bytes: &[u8], arrival: Timestamp);
    /// Simulation clock reached `now`; called once per uplink period.
    fn tick(&mut self, _now: Timestamp) {}
}

impl<S: FrameSink + ?Sized> FrameSink for &mut S {
    fn uplink(&mut self, bytes: &[u8], arrival: Timestamp) {
        (**self).uplink(bytes, arrival)
    }
    fn station(&mut self, bytes: &[u8], arrival: Timestamp) {
        (**self).station(bytes, arrival)
    }
    fn tick(&mut self, now: Timestamp) {
        (**self).tick(now)
    }
}

/// Sink that keeps every frame, for tests and determinism checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RecordingSink {
    pub frames: Vec<(FrameLink, Timestamp, Vec<u8>)>,
    pub ticks: Vec<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameLink {
    Uplink,
    Station,
}

impl FrameSink for RecordingSink {
    fn uplink(&mut self, bytes: &[u8], arrival: Timestamp) {
        self.frames.push((FrameLink::Uplink, arrival, bytes.to_vec()));
    }
    fn station(&mut self, bytes: &[u8], arrival: Timestamp) {
        self.frames.push((FrameLink::Station, arrival, bytes.to_vec()));
    }
    fn tick(&mut self, now: Timestamp) {
        self.ticks.push(now);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NodeCounts {
    pub generated: u64,
    pub delivered: u64,
    pub lost_random: u64,
    pub lost_collision: u64,
    pub deferred: u64,
}

impl NodeCounts {
    fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Delivered => self.delivered += 1,
            Outcome::LostRandom => self.lost_random += 1,
            Outcome::LostCollision => self.lost_collision += 1,
            Outcome::DeferredDutyCycle => self.deferred += 1,
        }
    }

    pub fn lost(&self) -> u64 {
        self.lost_random + self.lost_collision
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    pub nodes: BTreeMap<u16, NodeCounts>,
    pub totals: NodeCounts,
    pub station_frames: BTreeMap<u16, u64>,
    /// Delivered over generated uplinks; `None` when nothing was generated.
    pub delivery_ratio: Option<f64>,
    pub runtime_s: f64,
    #[serde(skip)]
    pub outcomes: Vec<OutcomeRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    pub execution: Execution,
    /// Keep the per-transmission outcome log in the report.
    pub keep_outcomes: bool,
    /// Simulated seconds per wall second; `None` runs as fast as possible.
    pub speed: Option<f64>,
}


/// One scheduled RFID read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Visit {
    pub t: f64,
    pub station_id: u16,
    pub rfid_tag: u32,
    pub activity: ActivityCode,
}

/// Local hour of the first visit of each activity; further visits are
/// spread evenly over the day.
pub fn base_hour(a: ActivityCode) -> f64 {
    match a {
        ActivityCode::Milking => 5.0,
        ActivityCode::Feeding => 6.0,
        ActivityCode::Watering => 7.0,
        ActivityCode::Resting => 10.0,
    }
}

/// Zero-based index of the UTC day containing scenario time `t`.
pub fn day_index(start: Timestamp, t: f64) -> i64 {
    (start.secs() as f64 + t).div_euclid(86_400.0) as i64 - start.secs().div_euclid(86_400)
}

/// Every RFID read of the scenario, sorted by time. A `SkipActivity` fault
/// drops the first visit of that activity on that day.
pub fn visit_schedule(scenario: &Scenario) -> Vec<Visit> {
    let spec = &scenario.spec;
    let start = spec.start_time.secs();
    let first_day = start.div_euclid(86_400);
    let last_day = (start as f64 + spec.duration_s).div_euclid(86_400.0) as i64;
    let station_for = |a: ActivityCode| {
        spec.stations
            .iter()
            .find(|s| s.kind == StationKind::Rfid && s.activity == Some(a))
            .map(|s| s.station_id)
    };
    let mut visits = Vec::new();
    for (i, cow) in spec.herd.iter().enumerate() {
        let mut rng = stream_rng(spec.seed, DOMAIN_VISIT, i as u64);
        for day in first_day..=last_day {
            let n = (day - first_day) as u32;
            let day_start = (day * 86_400 - start) as f64;
            for (&activity, &count) in &cow.expected_activity {
                let Some(station_id) = station_for(activity) else { continue };
                for k in 0..count {
                    let hour = (base_hour(activity) + f64::from(k) * 24.0 / f64::from(count)).rem_euclid(24.0);
                    let jitter = rng.random_range(-VISIT_JITTER_S..=VISIT_JITTER_S);
                    let t = (day_start + hour * 3600.0 + jitter).clamp(day_start, day_start + 86_399.0);
                    let skipped = k == 0
                        && spec.faults.iter().any(|f| {
                            matches!(f, FaultInjection::SkipActivity { cattle_id, activity: a, day: d }
                                if *cattle_id == cow.cattle_id && *a == activity && *d == n)
                        });
                    if !skipped && t >= 0.0 && t < spec.duration_s {
                        visits.push(Visit { t, station_id, rfid_tag: cow.rfid_tag, activity });
                    }
                }
            }
        }
    }
    visits.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.station_id.cmp(&b.station_id)).then(a.rfid_tag.cmp(&b.rfid_tag)));
    visits
}

/// Builds the agents with their transmit phases.
pub fn build_agents(scenario: &Scenario) -> Vec<CowAgent> {
    let spec = &scenario.spec;
    let period = spec.reporting.uplink_period_s;
    let n = spec.herd.len().max(1) as f64;
    spec.herd
        .iter()
        .enumerate()
        .map(|(i, cow)| {
            let mut rng = stream_rng(spec.seed, DOMAIN_COW, i as u64);
            let phase = match spec.radio.phase {
                PhaseMode::Staggered => i as f64 * period / n,
                PhaseMode::Random => rng.random::<f64>() * period,
            };
            CowAgent::new(cow, &spec.faults, phase, rng)
        })
        .collect()
}

enum Pending {
    Station { station_id: u16, frame: Vec<u8> },
    Uplink(Uplink),
}

struct Clock {
    start_ms: i64,
    wall: Instant,
    speed: Option<f64>,
}

impl Clock {
    fn stamp(&self, t: f64) -> Timestamp {
        Timestamp::from_millis(self.start_ms + (t * 1000.0).round() as i64)
    }

    fn pace(&self, t: f64) {
        if let Some(speed) = self.speed.filter(|s| *s > 0.0) {
            let target = Duration::from_secs_f64((t / speed).max(0.0));
            if let Some(wait) = target.checked_sub(self.wall.elapsed()) {
                std::thread::sleep(wait);
            }
        }
    }
}

fn deliver<S: FrameSink>(sink: &mut S, clock: &Clock, mut deliveries: Vec<Delivery>) {
    deliveries.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.node_id.cmp(&b.node_id)));
    for d in deliveries {
        clock.pace(d.arrival);
        sink.uplink(&d.frame, clock.stamp(d.arrival));
    }
}

/// Runs `scenario` to completion, feeding every delivered frame to `sink`.
pub fn run<S: FrameSink>(scenario: &Scenario, mut sink: S, options: RunOptions) -> SimulationReport {
    let wall = Instant::now();
    let spec = &scenario.spec;
    let period = spec.reporting.uplink_period_s;
    let env_period = spec.reporting.environment_period_s;
    let clock = Clock { start_ms: spec.start_time.millis(), wall, speed: options.speed };
    let start_epoch_s = spec.start_time.secs();

    let mut net = NetworkSimulator::new(
        spec.radio.lora.clone(),
        spec.radio.loss_prob,
        stream_rng(spec.seed, DOMAIN_CHANNEL, 0),
        stream_rng(spec.seed, DOMAIN_LOSS, 0),
    );
    for cow in &spec.herd {
        net.register_node(cow.node_id, None);
    }
    let mut agents = build_agents(scenario);
    let ctx = StepContext {
        fence: &scenario.fence,
        start_epoch_s,
        pulse_window_s: spec.reporting.pulse_window_s,
        pulse_jitter: spec.reporting.pulse_jitter,
    };

    let mut env: Vec<(EnvModel, EnvState, ChaCha8Rng, u8)> = spec
        .stations
        .iter()
        .filter(|s| s.kind == StationKind::Environment)
        .map(|s| {
            let model = EnvModel::for_station(&spec.shed, &spec.faults, s.station_id);
            let state = model.initial_state(s.station_id);
            (model, state, stream_rng(spec.seed, DOMAIN_ENV, u64::from(s.station_id)), 0u8)
        })
        .collect();
    let mut rfid_seq: BTreeMap<u16, u8> = BTreeMap::new();
    let visits = visit_schedule(scenario);
    let mut next_visit = 0;
    let mut next_env = 0u64;
    let mut station_frames: BTreeMap<u16, u64> = spec.stations.iter().map(|s| (s.station_id, 0)).collect();
    let mut nodes: BTreeMap<u16, NodeCounts> = spec.herd.iter().map(|c| (c.node_id, NodeCounts::default())).collect();

    let windows = (spec.duration_s / period).ceil() as u64;
    for k in 0..windows {
        let ws = k as f64 * period;
        let we = (ws + period).min(spec.duration_s);

        let uplinks = options.execution.map_mut(&mut agents, |agent| {
            let t = ws + agent.phase;
            if t < spec.duration_s {
                agent.step(&ctx, t)
            } else {
                None
            }
        });
        let mut pending: Vec<(f64, u8, u32, Pending)> = uplinks
            .into_iter()
            .flatten()
            .map(|u| (u.t, 2, u32::from(u.node_id), Pending::Uplink(u)))
            .collect();

        loop {
            let t = next_env as f64 * env_period;
            if t >= we || t >= spec.duration_s {
                break;
            }
            let dt = if next_env == 0 { 0.0 } else { env_period };
            let epoch = (start_epoch_s as f64 + t).floor() as u64;
            for (model, state, rng, seq) in env.iter_mut() {
                let mut sample = step_environment(state, model, dt, epoch, rng);
                sample.audio_level = measure_audio(state.audio, rng);
                let Ok(frame) = StationFrame::environment(sample.station_id, *seq, epoch as u32, sample.temperature, sample.humidity, sample.audio_level)
                    .and_then(|f| encode_station(&f))
                else {
                    continue;
                };
                *seq = seq.wrapping_add(1);
                pending.push((t + STATION_LATENCY_S, 0, u32::from(state.station_id), Pending::Station { station_id: state.station_id, frame }));
            }
            next_env += 1;
        }

        while next_visit < visits.len() && visits[next_visit].t < we {
            let v = visits[next_visit];
            next_visit += 1;
            let seq = rfid_seq.entry(v.station_id).or_insert(0);
            let epoch = (start_epoch_s as f64 + v.t).floor() as u32;
            if let Ok(frame) = encode_station(&StationFrame::rfid(v.station_id, *seq, epoch, v.rfid_tag, v.activity)) {
                *seq = seq.wrapping_add(1);
                pending.push((v.t + STATION_LATENCY_S, 0, u32::from(v.station_id), Pending::Station { station_id: v.station_id, frame }));
            }
        }

        pending.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (t, _, _, ev) in pending {
            deliver(&mut sink, &clock, net.advance(t));
            clock.pace(t);
            match ev {
                Pending::Station { station_id, frame } => {
                    *station_frames.entry(station_id).or_default() += 1;
                    sink.station(&frame, clock.stamp(t));
                }
                Pending::Uplink(u) => {
                    nodes.entry(u.node_id).or_default().generated += 1;
                    net.submit(u.node_id, u.frame, u.t).expect("registered node, ordered submissions");
                }
            }
        }
        deliver(&mut sink, &clock, net.advance(we));
        clock.pace(we);
        sink.tick(clock.stamp(we));
    }
    deliver(&mut sink, &clock, net.flush());

    let outcomes = net.into_log();
    for r in &outcomes {
        nodes.entry(r.node_id).or_default().add(r.outcome);
    }
    let mut totals = NodeCounts::default();
    for c in nodes.values() {
        totals.generated += c.generated;
        totals.delivered += c.delivered;
        totals.lost_random += c.lost_random;
        totals.lost_collision += c.lost_collision;
        totals.deferred += c.deferred;
    }
    SimulationReport {
        scenario: spec.name.clone(),
        seed: spec.seed,
        duration_s: spec.duration_s,
        delivery_ratio: (totals.generated > 0).then(|| totals.delivered as f64 / totals.generated as f64),
        nodes,
        totals,
        station_frames,
        runtime_s: wall.elapsed().as_secs_f64(),
        outcomes: if options.keep_outcomes { outcomes } else { Vec::new() },
    }
}
