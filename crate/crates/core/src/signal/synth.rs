//! Synthetic test material: harmonic tones and toy room impulse responses.

use std::f64::consts::PI;

use rand::Rng;

use crate::rng::{normal_vec, SeededRng};
use crate::score::{Example, TrainingData};

pub fn sine(freq_hz: f64, len: usize, sample_rate: u32) -> Vec<f64> {
    let sr = f64::from(sample_rate);
    (0..len).map(|n| (2.0 * PI * freq_hz * n as f64 / sr).sin()).collect()
}

/// Sum of all harmonics of `f0` below Nyquist with amplitudes `k^{−rolloff}`
/// and the given phases (cycled if shorter than the harmonic count).
pub fn harmonic_tone(f0: f64, rolloff: f64, phases: &[f64], len: usize, sample_rate: u32) -> Vec<f64> {
    let sr = f64::from(sample_rate);
    let count = ((0.5 * sr) / f0).ceil() as usize;
    let mut out = vec![0.0; len];
    for k in 1..count {
        let f = k as f64 * f0;
        if f >= 0.5 * sr {
            break;
        }
        let amp = (k as f64).powf(-rolloff);
        let phase = if phases.is_empty() { 0.0 } else { phases[(k - 1) % phases.len()] };
        let w = 2.0 * PI * f / sr;
        for (n, o) in out.iter_mut().enumerate() {
            *o += amp * (w * n as f64 + phase).sin();
        }
    }
    out
}

/// Random band-rich harmonic signals.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicSource {
    pub len: usize,
    pub sample_rate: u32,
    /// Fundamental drawn log-uniformly from this range.
    pub f0_hz: (f64, f64),
    /// Amplitude rolloff exponent drawn uniformly from this range.
    pub rolloff: (f64, f64),
    /// Output RMS.
    pub level: f64,
}

impl HarmonicSource {
    pub fn new(len: usize, sample_rate: u32) -> Self {
        Self { len, sample_rate, f0_hz: (100.0, 400.0), rolloff: (0.3, 0.8), level: 0.1 }
    }

    pub fn generate(&self, rng: &mut SeededRng) -> Vec<f64> {
        let f0 = (rng.gen_range(self.f0_hz.0.ln()..=self.f0_hz.1.ln())).exp();
        let rolloff = rng.gen_range(self.rolloff.0..=self.rolloff.1);
        let phases: Vec<f64> = (0..128).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let mut x = harmonic_tone(f0, rolloff, &phases, self.len, self.sample_rate);
        let rms = super::rms(&x);
        if rms > 0.0 {
            x.iter_mut().for_each(|v| *v *= self.level / rms);
        }
        x
    }
}

impl TrainingData for HarmonicSource {
    fn dim(&self) -> usize {
        self.len
    }

    fn draw(&self, rng: &mut SeededRng) -> Example {
        Example::clean(self.generate(rng))
    }
}

/// Exponentially decaying white noise with a unit direct path, `len_secs`
/// long, whose energy falls by 60 dB after `t60_secs`.
pub fn synthetic_rir(t60_secs: f64, sample_rate: u32, len_secs: f64, rng: &mut SeededRng) -> Vec<f64> {
    let sr = f64::from(sample_rate);
    let n = (len_secs * sr).round().max(1.0) as usize;
    // Amplitude decays by 10^{-3} over t60.
    let decay = 3.0 * std::f64::consts::LN_10 / (t60_secs * sr);
    let mut h = normal_vec(rng, n);
    for (i, v) in h.iter_mut().enumerate() {
        *v *= (-decay * i as f64).exp();
    }
    let tail = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut h {
        *v *= 0.5 / tail;
    }
    h[0] = 1.0;
    h
}
