//! Pulse waveform to BPM, audio window to dB.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Timestamp;

pub const DEFAULT_THRESHOLD_FRACTION: f64 = 0.5;
pub const DEFAULT_REFRACTORY_MS: f64 = 400.0;
/// Minimum waveform length accepted by [`estimate_bpm`], seconds.
pub const MIN_BPM_DURATION_S: f64 = 5.0;
/// Minimum audio window length, seconds.
pub const MIN_AUDIO_DURATION_S: f64 = 0.1;
/// Default microphone calibration offset, dB.
pub const DEFAULT_CALIBRATION_DB: f64 = 94.0;

const FLAT_EPS: f64 = 1e-9;
const SILENCE_RMS: f64 = 1e-9;
const SILENCE_FLOOR_DB: f64 = -120.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BiosignalError {
    #[error("waveform too short: {have_s:.3} s, need {need_s:.3} s")]
    WaveformTooShort { have_s: f64, need_s: f64 },
    #[error("fewer than two beats detected")]
    InsufficientBeats,
    #[error("audio window too short: {have_s:.3} s, need {need_s:.3} s")]
    WindowTooShort { have_s: f64, need_s: f64 },
    #[error("invalid signal: {0}")]
    InvalidSignal(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseWaveform {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub node_id: Option<u16>,
    pub capture_start: Timestamp,
}

impl PulseWaveform {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Self {
        PulseWaveform {
            samples,
            sample_rate,
            node_id: None,
            capture_start: Timestamp::EPOCH,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    fn check(&self) -> Result<(), BiosignalError> {
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return Err(BiosignalError::InvalidSignal("sample rate must be positive"));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(BiosignalError::InvalidSignal("non-finite sample"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpmEstimate {
    pub bpm: f64,
    pub beat_count: u32,
    pub confidence: f64,
}

/// Audio samples normalized to digital full scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioWindow {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl AudioWindow {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self, BiosignalError> {
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(BiosignalError::InvalidSignal("sample rate must be positive"));
        }
        if samples.iter().any(|s| !(-1.0..=1.0).contains(s)) {
            return Err(BiosignalError::InvalidSignal("audio sample outside [-1, 1]"));
        }
        Ok(AudioWindow { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }
}

/// Local maxima above `min + threshold_fraction * (max - min)`, at least
/// `refractory_ms` apart, in ascending index order.
///
/// When two candidates fall inside one refractory period the taller wins.
/// A flat signal yields no peaks.
pub fn detect_peaks(
    w: &PulseWaveform,
    threshold_fraction: f64,
    refractory_ms: f64,
) -> Result<Vec<usize>, BiosignalError> {
    w.check()?;
    if !(0.0..=1.0).contains(&threshold_fraction) {
        return Err(BiosignalError::InvalidSignal("threshold fraction outside [0, 1]"));
    }
    if !(refractory_ms.is_finite() && refractory_ms >= 0.0) {
        return Err(BiosignalError::InvalidSignal("negative refractory period"));
    }
    let refractory = (refractory_ms / 1000.0 * w.sample_rate).ceil() as usize;
    let x = &w.samples;
    if x.len() < 2 * refractory.max(1) {
        return Err(BiosignalError::WaveformTooShort {
            have_s: w.duration_s(),
            need_s: 2.0 * refractory_ms / 1000.0,
        });
    }
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo < FLAT_EPS {
        return Ok(Vec::new());
    }
    let threshold = lo + threshold_fraction * (hi - lo);

    let mut candidates: Vec<usize> = (1..x.len() - 1)
        .filter(|&i| x[i] > threshold && x[i] > x[i - 1] && x[i] >= x[i + 1])
        .collect();
    candidates.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));

    let mut accepted = BTreeSet::new();
    for i in candidates {
        let clear_before = accepted.range(..i).next_back().is_none_or(|&p| i - p >= refractory);
        let clear_after = accepted.range(i..).next().is_none_or(|&n| n - i >= refractory);
        if clear_before && clear_after {
            accepted.insert(i);
        }
    }
    Ok(accepted.into_iter().collect())
}

/// Sub-sample peak position from a parabola through the peak and its neighbors.
fn refine_peak(x: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 >= x.len() {
        return i as f64;
    }
    let (a, b, c) = (x[i - 1], x[i], x[i + 1]);
    let denom = a - 2.0 * b + c;
    if denom.abs() < f64::EPSILON {
        return i as f64;
    }
    i as f64 + (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

/// Heart rate from the mean inter-beat interval, using the default peak
/// detector settings.
pub fn estimate_bpm(w: &PulseWaveform) -> Result<BpmEstimate, BiosignalError> {
    w.check()?;
    if w.duration_s() < MIN_BPM_DURATION_S {
        return Err(BiosignalError::WaveformTooShort {
            have_s: w.duration_s(),
            need_s: MIN_BPM_DURATION_S,
        });
    }
    let peaks = detect_peaks(w, DEFAULT_THRESHOLD_FRACTION, DEFAULT_REFRACTORY_MS)?;
    if peaks.len() < 2 {
        return Err(BiosignalError::InsufficientBeats);
    }
    let times: Vec<f64> = peaks.iter().map(|&i| refine_peak(&w.samples, i) / w.sample_rate).collect();
    let ibis: Vec<f64> = times.windows(2).map(|p| p[1] - p[0]).collect();
    let n = ibis.len() as f64;
    let mean = ibis.iter().sum::<f64>() / n;
    let var = ibis.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let bpm = (60.0 / mean * 10.0).round() / 10.0;
    Ok(BpmEstimate {
        bpm,
        beat_count: peaks.len() as u32,
        confidence: 1.0 - (var.sqrt() / mean).min(1.0),
    })
}

/// Correctly rounded sum (Shewchuk partials), so the result does not depend
/// on how the input is split or repeated.
pub(crate) fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut kept = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // half-way case: round toward the sign of the remaining partials
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Unweighted RMS level relative to digital full scale, plus a calibration
/// offset. A silent window reads `-120 + calibration_offset`.
pub fn audio_level_db(w: &AudioWindow, calibration_offset: f64) -> Result<f64, BiosignalError> {
    if w.duration_s() < MIN_AUDIO_DURATION_S {
        return Err(BiosignalError::WindowTooShort {
            have_s: w.duration_s(),
            need_s: MIN_AUDIO_DURATION_S,
        });
    }
    let mean_square = exact_sum(w.samples.iter().map(|s| s * s)) / w.samples.len() as f64;
    let rms = mean_square.sqrt();
    if rms < SILENCE_RMS {
        return Ok(SILENCE_FLOOR_DB + calibration_offset);
    }
    Ok(20.0 * rms.log10() + calibration_offset)
}
