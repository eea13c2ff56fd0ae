//! Degradation operators `y = A(x) + n`.
//!
//! Every operator here is linear in the signal; the parametric lowpass is
//! additionally differentiable in its parameters `φ = (cutoff, slope)`.

use std::io::BufRead;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{check_len, Error, Result};

/// Below this many taps convolutions are evaluated directly.
const DIRECT_CONV_TAPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowpassParams {
    pub cutoff_hz: f64,
    pub slope_db_per_octave: f64,
}

/// Gain of the piecewise lowpass: 0 dB up to the cutoff, then falling by
/// `slope` dB per octave.
pub fn parametric_gain(phi: LowpassParams, freq_hz: f64) -> f64 {
    if freq_hz <= phi.cutoff_hz {
        1.0
    } else {
        10f64.powf(-phi.slope_db_per_octave * (freq_hz / phi.cutoff_hz).log2() / 20.0)
    }
}

pub fn parametric_response(phi: LowpassParams, freqs_hz: &[f64]) -> Vec<f64> {
    freqs_hz.iter().map(|&f| parametric_gain(phi, f)).collect()
}

/// `(∂G/∂cutoff, ∂G/∂slope)` at one frequency.
fn parametric_gain_grad(phi: LowpassParams, freq_hz: f64) -> (f64, f64) {
    if freq_hz <= phi.cutoff_hz {
        return (0.0, 0.0);
    }
    let g = parametric_gain(phi, freq_hz);
    let octaves = (freq_hz / phi.cutoff_hz).log2();
    let k = std::f64::consts::LN_10 / 20.0;
    let d_cutoff = g * k * phi.slope_db_per_octave / (phi.cutoff_hz * std::f64::consts::LN_2);
    let d_slope = -g * k * octaves;
    (d_cutoff, d_slope)
}

/// Box constraints for `φ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowpassBounds {
    pub cutoff_hz: (f64, f64),
    pub slope_db_per_octave: (f64, f64),
}

impl LowpassBounds {
    pub fn for_sample_rate(sample_rate: u32) -> Self {
        let nyquist = 0.5 * f64::from(sample_rate);
        Self { cutoff_hz: (0.03 * nyquist, 0.97 * nyquist), slope_db_per_octave: (3.0, 120.0) }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = 0.5 * f64::from(sample_rate);
        let (c, s) = (self.cutoff_hz, self.slope_db_per_octave);
        if !(c.0 > 0.0 && c.1 > c.0 && c.1 < nyquist && s.0 > 0.0 && s.1 > s.0 && s.1.is_finite()) {
            return Err(Error::invalid(format!("invalid lowpass bounds {self:?} at {sample_rate} Hz")));
        }
        Ok(())
    }

    pub fn contains(&self, phi: LowpassParams) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v > lo && v < hi;
        inside(phi.cutoff_hz, self.cutoff_hz) && inside(phi.slope_db_per_octave, self.slope_db_per_octave)
    }

    /// Unconstrained coordinates `u = logit((φ − lo)/(hi − lo))`.
    pub fn to_unconstrained(&self, phi: LowpassParams) -> Result<[f64; 2]> {
        if !self.contains(phi) {
            return Err(Error::invalid(format!("{phi:?} outside bounds {self:?}")));
        }
        let logit = |v: f64, (lo, hi): (f64, f64)| {
            let t = (v - lo) / (hi - lo);
            (t / (1.0 - t)).ln()
        };
        Ok([logit(phi.cutoff_hz, self.cutoff_hz), logit(phi.slope_db_per_octave, self.slope_db_per_octave)])
    }

    pub fn from_unconstrained(&self, u: [f64; 2]) -> LowpassParams {
        let squash = |u: f64, (lo, hi): (f64, f64)| lo + (hi - lo) * sigmoid(u);
        LowpassParams {
            cutoff_hz: squash(u[0], self.cutoff_hz),
            slope_db_per_octave: squash(u[1], self.slope_db_per_octave),
        }
    }

    /// `dφ/du` for each coordinate.
    pub fn jacobian(&self, u: [f64; 2]) -> [f64; 2] {
        let d = |u: f64, (lo, hi): (f64, f64)| {
            let s = sigmoid(u);
            (hi - lo) * s * (1.0 - s)
        };
        [d(u[0], self.cutoff_hz), d(u[1], self.slope_db_per_octave)]
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DegradationOperator {
    Identity,
    /// Elementwise 0/1 mask.
    Mask(Vec<f64>),
    /// Causal FIR filter (typically a windowed-sinc lowpass).
    FirLowpass(Vec<f64>),
    /// Brick-wall lowpass in the DFT of the whole signal.
    IdealLowpass {
        cutoff_hz: f64,
        sample_rate: u32,
    },
    RirConvolution(Vec<f64>),
    /// Zero-phase piecewise lowpass applied in the DFT domain.
    ParametricLowpass {
        phi: LowpassParams,
        sample_rate: u32,
    },
}

impl DegradationOperator {
    pub fn mask(mask: Vec<f64>) -> Result<Self> {
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::invalid("mask entries must be 0 or 1"));
        }
        Ok(Self::Mask(mask))
    }

    pub fn fir(taps: Vec<f64>) -> Result<Self> {
        check_taps(&taps)?;
        Ok(Self::FirLowpass(taps))
    }

    pub fn rir(taps: Vec<f64>) -> Result<Self> {
        check_taps(&taps)?;
        Ok(Self::RirConvolution(taps))
    }

    pub fn ideal_lowpass(cutoff_hz: f64, sample_rate: u32) -> Result<Self> {
        check_cutoff(cutoff_hz, sample_rate)?;
        Ok(Self::IdealLowpass { cutoff_hz, sample_rate })
    }

    pub fn parametric_lowpass(phi: LowpassParams, sample_rate: u32) -> Result<Self> {
        check_cutoff(phi.cutoff_hz, sample_rate)?;
        if !(phi.slope_db_per_octave > 0.0 && phi.slope_db_per_octave.is_finite()) {
            return Err(Error::invalid(format!("slope {} must be positive", phi.slope_db_per_octave)));
        }
        Ok(Self::ParametricLowpass { phi, sample_rate })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Mask(_) => "mask",
            Self::FirLowpass(_) => "fir_lowpass",
            Self::IdealLowpass { .. } => "ideal_lowpass",
            Self::RirConvolution(_) => "rir_convolution",
            Self::ParametricLowpass { .. } => "parametric_lowpass",
        }
    }

    pub fn is_linear(&self) -> bool {
        true
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.is_empty() {
            return Err(Error::EmptySignal);
        }
        match self {
            Self::Identity => Ok(x.to_vec()),
            Self::Mask(m) => {
                check_len(m.len(), x.len())?;
                Ok(x.iter().zip(m).map(|(a, b)| a * b).collect())
            }
            Self::FirLowpass(h) | Self::RirConvolution(h) => Ok(convolve_truncated(x, h)),
            Self::IdealLowpass { cutoff_hz, sample_rate } => {
                Ok(apply_real_gain(x, |f| if f <= *cutoff_hz { 1.0 } else { 0.0 }, *sample_rate))
            }
            Self::ParametricLowpass { phi, sample_rate } => {
                Ok(apply_real_gain(x, |f| parametric_gain(*phi, f), *sample_rate))
            }
        }
    }

    /// `Aᵀv`.
    pub fn adjoint(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.is_empty() {
            return Err(Error::EmptySignal);
        }
        match self {
            Self::FirLowpass(h) | Self::RirConvolution(h) => Ok(correlate_truncated(v, h)),
            // The remaining operators are symmetric.
            _ => self.apply(v),
        }
    }

    /// `∇ₓ⟨A(x), v⟩`.
    pub fn grad_x(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_len(x.len(), v.len())?;
        self.adjoint(v)
    }

    /// `∇_φ⟨A_φ(x), v⟩` as `[∂/∂cutoff, ∂/∂slope]`.
    pub fn grad_phi(&self, x: &[f64], v: &[f64]) -> Result<[f64; 2]> {
        let Self::ParametricLowpass { phi, sample_rate } = self else {
            return Err(Error::Unsupported { op: "grad_phi", kind: self.kind_name() });
        };
        check_len(x.len(), v.len())?;
        if x.is_empty() {
            return Err(Error::EmptySignal);
        }
        let n = x.len();
        let (xs, vs) = (spectrum(x), spectrum(v));
        let mut grad = [0.0; 2];
        for k in 0..n {
            let f = bin_frequency(k, n, *sample_rate);
            let (dc, ds) = parametric_gain_grad(*phi, f);
            if dc == 0.0 && ds == 0.0 {
                continue;
            }
            let cross = (xs[k] * vs[k].conj()).re / n as f64;
            grad[0] += dc * cross;
            grad[1] += ds * cross;
        }
        Ok(grad)
    }

    /// Operator with the same structure and new parameters.
    pub fn with_phi(&self, phi: LowpassParams) -> Result<Self> {
        match self {
            Self::ParametricLowpass { sample_rate, .. } => Self::parametric_lowpass(phi, *sample_rate),
            _ => Err(Error::Unsupported { op: "with_phi", kind: self.kind_name() }),
        }
    }

    pub fn phi(&self) -> Option<LowpassParams> {
        match self {
            Self::ParametricLowpass { phi, .. } => Some(*phi),
            _ => None,
        }
    }
}

fn check_taps(taps: &[f64]) -> Result<()> {
    if taps.is_empty() || taps.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("filter taps must be finite and non-empty"));
    }
    Ok(())
}

fn check_cutoff(cutoff_hz: f64, sample_rate: u32) -> Result<()> {
    let nyquist = 0.5 * f64::from(sample_rate);
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::invalid(format!("cutoff {cutoff_hz} Hz outside (0, {nyquist}) Hz")));
    }
    Ok(())
}

/// Windowed-sinc (Hann) lowpass taps, causal, `taps` long.
pub fn fir_lowpass_taps(cutoff_hz: f64, sample_rate: u32, taps: usize) -> Result<Vec<f64>> {
    check_cutoff(cutoff_hz, sample_rate)?;
    if taps == 0 {
        return Err(Error::invalid("an FIR filter needs at least one tap"));
    }
    let fc = cutoff_hz / f64::from(sample_rate);
    let mid = (taps - 1) as f64 / 2.0;
    let h: Vec<f64> = (0..taps)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * t).sin() / (std::f64::consts::PI * t)
            };
            let w = if taps == 1 {
                1.0
            } else {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (taps - 1) as f64).cos()
            };
            sinc * w
        })
        .collect();
    let dc: f64 = h.iter().sum();
    Ok(h.into_iter().map(|v| v / dc).collect())
}

/// Read filter taps from a single-column CSV (blank lines and `#` comments
/// skipped; a non-numeric first line is treated as a header).
pub fn load_taps_csv<R: BufRead>(reader: R) -> Result<Vec<f64>> {
    let mut taps = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let field = line.split(',').next().unwrap_or("").trim();
        if field.is_empty() || field.starts_with('#') {
            continue;
        }
        match field.parse::<f64>() {
            Ok(v) => taps.push(v),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(Error::invalid(format!("line {}: `{field}` is not a number", i + 1))),
        }
    }
    check_taps(&taps)?;
    Ok(taps)
}

fn bin_frequency(k: usize, n: usize, sample_rate: u32) -> f64 {
    let k = k.min(n - k);
    k as f64 * f64::from(sample_rate) / n as f64
}

fn spectrum(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
    buf
}

/// Zero-phase real even gain applied to the full-length DFT.
fn apply_real_gain(x: &[f64], gain: impl Fn(f64) -> f64, sample_rate: u32) -> Vec<f64> {
    let n = x.len();
    let mut buf = spectrum(x);
    for (k, b) in buf.iter_mut().enumerate() {
        *b *= gain(bin_frequency(k, n, sample_rate));
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Linear convolution of `x` with `h`, keeping the first `x.len()` samples.
fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    if h.len() <= DIRECT_CONV_TAPS {
        let mut y = vec![0.0; x.len()];
        for (n, yn) in y.iter_mut().enumerate() {
            for (k, hk) in h.iter().enumerate().take(n + 1) {
                *yn += hk * x[n - k];
            }
        }
        return y;
    }
    let mut y = fft_convolve(x, h);
    y.truncate(x.len());
    y
}

/// Adjoint of [`convolve_truncated`]: `z[n] = Σ_k h[k]·v[n + k]`.
fn correlate_truncated(v: &[f64], h: &[f64]) -> Vec<f64> {
    let n = v.len();
    if h.len() <= DIRECT_CONV_TAPS {
        return (0..n).map(|i| h.iter().zip(&v[i..]).map(|(a, b)| a * b).sum()).collect();
    }
    let rev: Vec<f64> = v.iter().rev().copied().collect();
    let full = fft_convolve(&rev, h);
    (0..n).map(|i| full[n - 1 - i]).collect()
}

fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let len = a.len() + b.len() - 1;
    let size = len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let (fwd, inv) = (planner.plan_fft_forward(size), planner.plan_fft_inverse(size));
    let pad = |s: &[f64]| {
        let mut buf = vec![Complex64::new(0.0, 0.0); size];
        for (d, &v) in buf.iter_mut().zip(s) {
            d.re = v;
        }
        buf
    };
    let (mut fa, mut fb) = (pad(a), pad(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (p, q) in fa.iter_mut().zip(&fb) {
        *p *= q;
    }
    inv.process(&mut fa);
    fa[..len].iter().map(|c| c.re / size as f64).collect()
}
