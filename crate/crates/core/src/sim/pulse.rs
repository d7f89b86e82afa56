use rand::Rng;
use rand_distr::StandardNormal;

use crate::biosignal::PulseWaveform;

pub const PULSE_SAMPLE_RATE: f64 = 50.0;
const BEAT_WIDTH_S: f64 = 0.08;
const BASELINE: f64 = 512.0;
const AMPLITUDE: f64 = 200.0;

/// Beat instants for a window of `duration_s`, one period of margin either
/// side so edge beats look like any other.
pub fn pulse_beats<R: Rng + ?Sized>(base_bpm: f64, duration_s: f64, noise_fraction: f64, rng: &mut R) -> Vec<f64> {
    let period = 60.0 / base_bpm;
    let phase = rng.random::<f64>() * period;
    let sigma = noise_fraction * period;
    let mut beats = Vec::new();
    let mut k = -1.0;
    loop {
        let nominal = phase + k * period;
        if nominal > duration_s + period {
            break;
        }
        let jitter: f64 = rng.sample(StandardNormal);
        beats.push(nominal + sigma * jitter);
        k += 1.0;
    }
    beats
}

/// Renders Gaussian pulses at `beats` on a 50 Hz grid.
pub fn render_pulse(beats: &[f64], duration_s: f64) -> PulseWaveform {
    let n = (duration_s * PULSE_SAMPLE_RATE).round() as usize;
    let mut samples = vec![BASELINE; n];
    let reach = 5.0 * BEAT_WIDTH_S * PULSE_SAMPLE_RATE;
    for &b in beats {
        let centre = b * PULSE_SAMPLE_RATE;
        let lo = (centre - reach).floor().max(0.0) as usize;
        let hi = ((centre + reach).ceil().max(0.0) as usize).min(n);
        for (i, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
            let dt = i as f64 / PULSE_SAMPLE_RATE - b;
            *s += AMPLITUDE * (-dt * dt / (2.0 * BEAT_WIDTH_S * BEAT_WIDTH_S)).exp();
        }
    }
    PulseWaveform::new(samples, PULSE_SAMPLE_RATE)
}

/// A pulse window at `base_bpm` with Gaussian beat-timing jitter of
/// `noise_fraction` periods.
pub fn synthesize_pulse<R: Rng + ?Sized>(base_bpm: f64, duration_s: f64, noise_fraction: f64, rng: &mut R) -> PulseWaveform {
    render_pulse(&pulse_beats(base_bpm, duration_s, noise_fraction, rng), duration_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biosignal::estimate_bpm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clean_80() {
        let w = synthesize_pulse(80.0, 10.0, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(w.samples.len(), 500);
        let e = estimate_bpm(&w).unwrap();
        assert!((e.bpm - 80.0).abs() <= 0.5, "{e:?}");
    }

    #[test]
    fn jittered_60() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let e = estimate_bpm(&synthesize_pulse(60.0, 10.0, 0.05, &mut rng)).unwrap();
        assert!((e.bpm - 60.0).abs() <= 2.0, "{e:?}");
    }
}
