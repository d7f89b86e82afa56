use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::scenario::{EnvParameter, FaultInjection, ShedSpec};
use crate::biosignal::{audio_level_db, AudioWindow, DEFAULT_CALIBRATION_DB};
use crate::domain::EnvSample;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ramp {
    parameter: EnvParameter,
    value: f64,
    start: f64,
    end: f64,
}

/// Baselines, drift and ramp overrides for one station.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvModel {
    shed: ShedSpec,
    ramps: Vec<Ramp>,
}

impl EnvModel {
    pub fn new(shed: ShedSpec) -> Self {
        EnvModel { shed, ramps: Vec::new() }
    }

    /// Model for `station_id`, picking up the ramps that apply to it.
    pub fn for_station(shed: &ShedSpec, faults: &[FaultInjection], station_id: u16) -> Self {
        let ramps = faults
            .iter()
            .filter_map(|f| match *f {
                FaultInjection::EnvRamp { parameter, value, start_s, end_s, station_id: target }
                    if target.is_none_or(|s| s == station_id) =>
                {
                    Some(Ramp { parameter, value, start: start_s, end: end_s })
                }
                _ => None,
            })
            .collect();
        EnvModel { shed: shed.clone(), ramps }
    }

    fn baseline(&self, p: EnvParameter) -> f64 {
        match p {
            EnvParameter::Temperature => self.shed.temperature.baseline,
            EnvParameter::Humidity => self.shed.humidity.baseline,
            EnvParameter::Audio => self.shed.audio.baseline,
        }
    }

    fn drift(&self, p: EnvParameter) -> f64 {
        match p {
            EnvParameter::Temperature => self.shed.temperature.drift,
            EnvParameter::Humidity => self.shed.humidity.drift,
            EnvParameter::Audio => self.shed.audio.drift,
        }
    }

    /// Mean the parameter reverts to at time `t`. A ramp moves it linearly
    /// from baseline to its target across its window; outside every window
    /// the baseline applies.
    pub fn mean(&self, p: EnvParameter, t: f64) -> f64 {
        let base = self.baseline(p);
        self.ramps
            .iter()
            .rev()
            .find(|r| r.parameter == p && r.start <= t && t <= r.end)
            .map(|r| base + (r.value - base) * (t - r.start) / (r.end - r.start))
            .unwrap_or(base)
    }

    pub fn initial_state(&self, station_id: u16) -> EnvState {
        EnvState {
            t: 0.0,
            station_id,
            temperature: self.mean(EnvParameter::Temperature, 0.0),
            humidity: self.mean(EnvParameter::Humidity, 0.0),
            audio: self.mean(EnvParameter::Audio, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    /// Seconds since scenario start.
    pub t: f64,
    pub station_id: u16,
    pub temperature: f64,
    pub humidity: f64,
    pub audio: f64,
}

impl EnvState {
    /// Current values at sensor resolution; `epoch_s` is the UTC time of `t`.
    pub fn sample(&self, epoch_s: u64) -> EnvSample {
        EnvSample {
            temperature: (self.temperature * 10.0).round() / 10.0,
            humidity: self.humidity.clamp(0.0, 100.0).round() as u8,
            audio_level: (self.audio * 10.0).round() / 10.0,
            timestamp: epoch_s,
            station_id: self.station_id,
        }
    }
}

/// Advances every parameter by one Ornstein-Uhlenbeck step of `dt` seconds
/// (Euler-Maruyama) and returns the resulting sample.
pub fn step_environment<R: Rng + ?Sized>(state: &mut EnvState, model: &EnvModel, dt: f64, epoch_s: u64, rng: &mut R) -> EnvSample {
    let theta = 1.0 / model.shed.reversion_s;
    state.t += dt;
    for p in [EnvParameter::Temperature, EnvParameter::Humidity, EnvParameter::Audio] {
        let mu = model.mean(p, state.t);
        let sigma = model.drift(p) * (2.0 * theta).sqrt();
        let z: f64 = rng.sample(StandardNormal);
        let x = match p {
            EnvParameter::Temperature => &mut state.temperature,
            EnvParameter::Humidity => &mut state.humidity,
            EnvParameter::Audio => &mut state.audio,
        };
        *x += theta * (mu - *x) * dt + sigma * dt.sqrt() * z;
        if p == EnvParameter::Humidity {
            *x = x.clamp(0.0, 100.0);
        }
    }
    state.sample(epoch_s)
}

pub const AUDIO_SAMPLE_RATE: f64 = 8000.0;
const AUDIO_WINDOW_S: f64 = 0.1;
const AUDIO_TONE_HZ: f64 = 440.0;

/// A microphone window whose calibrated level is `level_db`: a tone with
/// random phase, amplitude capped at full scale.
pub fn synthesize_audio<R: Rng + ?Sized>(level_db: f64, rng: &mut R) -> AudioWindow {
    let rms = 10f64.powf((level_db - DEFAULT_CALIBRATION_DB) / 20.0);
    let amplitude = (rms * 2f64.sqrt()).min(1.0);
    let phase = rng.random::<f64>() * 2.0 * PI;
    let n = (AUDIO_WINDOW_S * AUDIO_SAMPLE_RATE) as usize;
    let samples = (0..n)
        .map(|i| amplitude * (2.0 * PI * AUDIO_TONE_HZ * i as f64 / AUDIO_SAMPLE_RATE + phase).sin())
        .collect();
    AudioWindow::new(samples, AUDIO_SAMPLE_RATE).expect("amplitude within full scale")
}

/// The level a station's microphone reports for a true level of `level_db`.
pub fn measure_audio<R: Rng + ?Sized>(level_db: f64, rng: &mut R) -> f64 {
    audio_level_db(&synthesize_audio(level_db, rng), DEFAULT_CALIBRATION_DB).expect("window long enough")
}
