//! Audio and time-frequency plumbing.

mod spectrogram;
mod stft;
pub mod synth;
mod wav;

pub use spectrogram::{db_pixel, write_axes_csv, write_pgm, DB_FLOOR};
pub use stft::{
    compress, compressed_cost, compressed_cost_grad, decompress, istft, spectral_energy, stft, stft_adjoint, PolarTile,
    StftTile, Window, DEFAULT_HOP, DEFAULT_WINDOW,
};
pub use wav::{wav_read, wav_write, WavWriteReport};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Mono real-valued audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// `10·log10(‖reference‖² / ‖estimate − reference‖²)`.
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let signal: f64 = reference.iter().map(|v| v * v).sum();
    let noise: f64 = reference.iter().zip(estimate).map(|(r, e)| (r - e).powi(2)).sum();
    10.0 * (signal / noise).log10()
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}
