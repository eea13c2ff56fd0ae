use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::process::DiffusionProcess;
use crate::score::{Conditioning, ScoreField};
use crate::signal::{istft, stft, Window, DEFAULT_HOP, DEFAULT_WINDOW};
use crate::solver::{sample_chain, SamplerConfig};

/// First-stage estimator mapping an observation to a clean-signal guess.
pub trait Predictor: Sync {
    fn predict(&self, y: &[f64]) -> Result<Vec<f64>>;
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>> + Sync> Predictor for F {
    fn predict(&self, y: &[f64]) -> Result<Vec<f64>> {
        self(y)
    }
}

/// `x̂ = offset + gain · y`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl LinearPredictor {
    /// Linear minimum-mean-square-error estimator for `y = A x + n` given the
    /// first two moments of `x`.
    pub fn lmmse(mean: &DVector<f64>, cov: &DMatrix<f64>, op: &DMatrix<f64>, noise_std: f64) -> Result<Self> {
        check_len(mean.len(), op.ncols())?;
        if !(noise_std > 0.0) {
            return Err(Error::invalid("noise_std must be positive"));
        }
        let innovation =
            op * cov * op.transpose() + DMatrix::identity(op.nrows(), op.nrows()) * (noise_std * noise_std);
        let chol = innovation.cholesky().ok_or(Error::Singular)?;
        let gain = chol.solve(&(op * cov)).transpose();
        let offset = mean - &gain * op * mean;
        Ok(Self { gain, offset })
    }
}

impl Predictor for LinearPredictor {
    fn predict(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len(self.gain.ncols(), y.len())?;
        Ok((&self.offset + &self.gain * DVector::from_column_slice(y)).as_slice().to_vec())
    }
}

/// Short-time Wiener gain for white noise of known level:
/// `G = max(1 − P_n/|Y|², floor)` per time-frequency bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralGainPredictor {
    pub noise_std: f64,
    pub floor: f64,
    pub window_len: usize,
    pub hop: usize,
    pub window: Window,
}

impl SpectralGainPredictor {
    pub fn new(noise_std: f64) -> Self {
        Self { noise_std, floor: 0.1, window_len: DEFAULT_WINDOW, hop: DEFAULT_HOP, window: Window::Hann }
    }
}

impl Predictor for SpectralGainPredictor {
    fn predict(&self, y: &[f64]) -> Result<Vec<f64>> {
        if !(self.noise_std >= 0.0 && (0.0..=1.0).contains(&self.floor)) {
            return Err(Error::invalid(format!("invalid spectral gain settings {self:?}")));
        }
        let mut tile = stft(y, self.window_len, self.hop, self.window)?;
        // Expected |N|² of white noise in one bin: σ²·Σw².
        let w2: f64 = self.window.coefficients(self.window_len).iter().map(|w| w * w).sum();
        let noise_power = self.noise_std * self.noise_std * w2;
        tile.data.mapv_inplace(|c| {
            let p = c.norm_sqr();
            let gain = if p > 0.0 { (1.0 - noise_power / p).max(self.floor) } else { self.floor };
            c * gain
        });
        let mut out = istft(&tile)?;
        out.truncate(y.len());
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StormOutput {
    pub predicted: Vec<f64>,
    pub x: Vec<f64>,
}

/// Predictive stage followed by a task-adapted reverse diffusion anchored at
/// the prediction. With zero steps the prediction is returned unchanged.
pub fn storm_restore<P: Predictor + ?Sized, F: ScoreField + ?Sized>(
    y: &[f64],
    predictor: &P,
    process: &DiffusionProcess,
    field: &F,
    sampler: &SamplerConfig,
    cond: Option<&[f64]>,
    chain: u64,
) -> Result<StormOutput> {
    if !process.requires_y() {
        return Err(Error::invalid(format!("{} is not a task-adapted process", process.kind().name())));
    }
    let predicted = predictor.predict(y)?;
    check_len(y.len(), predicted.len())?;
    if predicted.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step: 0, tau: process.sampling_start() });
    }
    if sampler.steps == 0 {
        return Ok(StormOutput { x: predicted.clone(), predicted });
    }
    let ctx = Conditioning { y: Some(&predicted), cond };
    let x = sample_chain(process, field, sampler, y.len(), ctx, chain, None)?;
    Ok(StormOutput { predicted, x })
}
