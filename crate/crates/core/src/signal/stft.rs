//! Short-time Fourier transform with weighted overlap-add inversion.
//!
//! Signals are padded with `window − hop` zeros at the front (and enough at
//! the back) so that every original sample is covered by the same set of
//! window shifts. With a window whose squared shifts sum to a constant, the
//! analysis/synthesis pair is then an exact inverse and the one-sided
//! spectral energy, suitably normalised, equals the time-domain energy.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 256;
pub const DEFAULT_HOP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    /// Periodic Hann.
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hann" => Some(Self::Hann),
            "rectangular" | "rect" => Some(Self::Rectangular),
            _ => None,
        }
    }

    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Self::Hann => {
                (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
            }
            Self::Rectangular => vec![1.0; n],
        }
    }
}

/// Framing parameters shared by Cartesian and polar tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftLayout {
    pub window_len: usize,
    pub hop: usize,
    pub window: Window,
    /// Length of the analysed waveform.
    pub signal_len: usize,
}

impl StftLayout {
    pub fn new(window_len: usize, hop: usize, window: Window, signal_len: usize) -> Result<Self> {
        let layout = Self { window_len, hop, window, signal_len };
        layout.squared_window_sum()?;
        Ok(layout)
    }

    pub fn bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    fn pad(&self) -> usize {
        self.window_len - self.hop
    }

    pub fn frames(&self) -> usize {
        (self.pad() + self.signal_len.max(1) - 1) / self.hop + 1
    }

    fn buffer_len(&self) -> usize {
        (self.frames() - 1) * self.hop + self.window_len
    }

    /// `Σ_m w²(n − m·hop)`, checked to be constant over one hop.
    fn squared_window_sum(&self) -> Result<f64> {
        let (n, hop) = (self.window_len, self.hop);
        if n < 2 || n % 2 != 0 || hop == 0 || hop > n {
            return Err(Error::NotCola { window: n, hop });
        }
        let w = self.window.coefficients(n);
        let sums: Vec<f64> = (0..hop).map(|i| w.iter().skip(i).step_by(hop).map(|v| v * v).sum()).collect();
        let (lo, hi) = sums.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        if !(lo > 0.0) || hi - lo > 1e-9 * hi {
            return Err(Error::NotCola { window: n, hop });
        }
        Ok(0.5 * (lo + hi))
    }

    /// `N · Σw²/hop`: divides one-sided weighted spectral energy into
    /// time-domain energy.
    pub fn energy_norm(&self) -> f64 {
        let per_sample = self.squared_window_sum().expect("layout validated at construction");
        self.window_len as f64 * per_sample
    }
}

/// Complex STFT, `frames × (window/2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StftTile {
    pub data: Array2<Complex64>,
    pub layout: StftLayout,
}

impl StftTile {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn bins(&self) -> usize {
        self.data.ncols()
    }

    /// Stacked real and imaginary parts, frame-major.
    pub fn to_real_vec(&self) -> Vec<f64> {
        self.data.iter().flat_map(|c| [c.re, c.im]).collect()
    }

    pub fn from_real_vec(values: &[f64], layout: StftLayout) -> Result<Self> {
        let (frames, bins) = (layout.frames(), layout.bins());
        crate::error::check_len(2 * frames * bins, values.len())?;
        let data = Array2::from_shape_fn((frames, bins), |(f, k)| {
            let i = 2 * (f * bins + k);
            Complex64::new(values[i], values[i + 1])
        });
        Ok(Self { data, layout })
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans { forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
}

pub fn stft(x: &[f64], window_len: usize, hop: usize, window: Window) -> Result<StftTile> {
    if x.is_empty() {
        return Err(Error::EmptySignal);
    }
    let layout = StftLayout::new(window_len, hop, window, x.len())?;
    let w = window.coefficients(window_len);
    let mut padded = vec![0.0; layout.buffer_len()];
    padded[layout.pad()..layout.pad() + x.len()].copy_from_slice(x);
    let fft = plans(window_len).forward;
    let mut data = Array2::zeros((layout.frames(), layout.bins()));
    let mut buf = vec![Complex64::new(0.0, 0.0); window_len];
    for (f, mut row) in data.rows_mut().into_iter().enumerate() {
        let frame = &padded[f * hop..f * hop + window_len];
        for ((b, &s), &wi) in buf.iter_mut().zip(frame).zip(&w) {
            *b = Complex64::new(s * wi, 0.0);
        }
        fft.process(&mut buf);
        for (r, b) in row.iter_mut().zip(&buf) {
            *r = *b;
        }
    }
    Ok(StftTile { data, layout })
}

fn overlap_add(
    tile_rows: &Array2<Complex64>,
    layout: &StftLayout,
    mut frame_fn: impl FnMut(&mut [Complex64]),
) -> Vec<f64> {
    let n = layout.window_len;
    let w = layout.window.coefficients(n);
    let mut out = vec![0.0; layout.buffer_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (f, row) in tile_rows.rows().into_iter().enumerate() {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for (b, r) in buf.iter_mut().zip(row.iter()) {
            *b = *r;
        }
        frame_fn(&mut buf);
        for (i, (b, wi)) in buf.iter().zip(&w).enumerate() {
            out[f * layout.hop + i] += wi * b.re;
        }
    }
    out
}

/// Inverse transform; a least-squares estimate for inconsistent tiles.
pub fn istft(tile: &StftTile) -> Result<Vec<f64>> {
    let layout = tile.layout;
    let n = layout.window_len;
    let inverse = plans(n).inverse;
    let out = overlap_add(&tile.data, &layout, |buf| {
        for k in n / 2 + 1..n {
            buf[k] = buf[n - k].conj();
        }
        inverse.process(buf);
        for b in buf.iter_mut() {
            *b /= n as f64;
        }
    });
    let w = layout.window.coefficients(n);
    let pad = layout.pad();
    let mut norm = vec![0.0; out.len()];
    for f in 0..layout.frames() {
        for (i, wi) in w.iter().enumerate() {
            norm[f * layout.hop + i] += wi * wi;
        }
    }
    Ok((pad..pad + layout.signal_len).map(|i| out[i] / norm[i]).collect())
}

/// Adjoint of `x ↦ stft(x)` under the real inner product
/// `⟨G, X⟩ = Σ Re(conj(G)·X)` over the stored one-sided bins.
pub fn stft_adjoint(grad: &StftTile) -> Vec<f64> {
    let layout = grad.layout;
    let inverse = plans(layout.window_len).inverse;
    let out = overlap_add(&grad.data, &layout, |buf| inverse.process(buf));
    let pad = layout.pad();
    out[pad..pad + layout.signal_len].to_vec()
}

fn bin_weight(k: usize, bins: usize) -> f64 {
    if k == 0 || k + 1 == bins {
        1.0
    } else {
        2.0
    }
}

/// Normalised one-sided spectral energy; equals `‖x‖²` for the analysed signal.
pub fn spectral_energy(tile: &StftTile) -> f64 {
    let bins = tile.bins();
    let total: f64 = tile
        .data
        .rows()
        .into_iter()
        .map(|row| row.iter().enumerate().map(|(k, c)| bin_weight(k, bins) * c.norm_sqr()).sum::<f64>())
        .sum();
    total / tile.layout.energy_norm()
}

/// Magnitude-compressed tile in polar form.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarTile {
    pub magnitude: Array2<f64>,
    pub phase: Array2<f64>,
    pub exponent: f64,
    pub layout: StftLayout,
}

impl PolarTile {
    /// Change the compression exponent; the phase field is copied untouched.
    pub fn recompress(&self, exponent: f64) -> Result<Self> {
        check_exponent(exponent)?;
        let ratio = exponent / self.exponent;
        Ok(Self {
            magnitude: self.magnitude.mapv(|m| m.powf(ratio)),
            phase: self.phase.clone(),
            exponent,
            layout: self.layout,
        })
    }
}

fn check_exponent(exponent: f64) -> Result<()> {
    if exponent > 0.0 && exponent <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("compression exponent {exponent} outside (0, 1]")))
    }
}

/// `|X| ↦ |X|^exponent`, phase preserved.
pub fn compress(tile: &StftTile, exponent: f64) -> Result<PolarTile> {
    check_exponent(exponent)?;
    Ok(PolarTile {
        magnitude: tile.data.mapv(|c| c.norm().powf(exponent)),
        phase: tile.data.mapv(|c| c.arg()),
        exponent,
        layout: tile.layout,
    })
}

pub fn decompress(polar: &PolarTile) -> StftTile {
    let inv = 1.0 / polar.exponent;
    let mut data = Array2::zeros(polar.magnitude.raw_dim());
    ndarray::Zip::from(&mut data)
        .and(&polar.magnitude)
        .and(&polar.phase)
        .for_each(|d, &m, &p| *d = Complex64::from_polar(m.powf(inv), p));
    StftTile { data, layout: polar.layout }
}

fn compressed(c: Complex64, exponent: f64) -> Complex64 {
    let m = c.norm();
    if m == 0.0 {
        c
    } else {
        c * m.powf(exponent - 1.0)
    }
}

/// `Σ w_k |c(X) − c(Y)|² / (N·Σw²/hop)` with `c(X) = |X|^p e^{i∠X}`.
///
/// With `exponent = 1` this is exactly `‖x − y‖²`.
pub fn compressed_cost(
    x: &[f64],
    y: &[f64],
    window_len: usize,
    hop: usize,
    window: Window,
    exponent: f64,
) -> Result<f64> {
    Ok(compressed_cost_grad(x, y, window_len, hop, window, exponent)?.0)
}

/// Cost and its gradient with respect to `x`.
pub fn compressed_cost_grad(
    x: &[f64],
    y: &[f64],
    window_len: usize,
    hop: usize,
    window: Window,
    exponent: f64,
) -> Result<(f64, Vec<f64>)> {
    check_exponent(exponent)?;
    crate::error::check_len(x.len(), y.len())?;
    let tx = stft(x, window_len, hop, window)?;
    let ty = stft(y, window_len, hop, window)?;
    let norm = tx.layout.energy_norm();
    let bins = tx.bins();
    let mut cost = 0.0;
    let mut grad = Array2::zeros(tx.data.raw_dim());
    for ((f, k), &cx) in tx.data.indexed_iter() {
        let weight = bin_weight(k, bins) / norm;
        let r = compressed(cx, exponent) - compressed(ty.data[[f, k]], exponent);
        cost += weight * r.norm_sqr();
        let m = cx.norm();
        let g = if exponent == 1.0 {
            2.0 * r
        } else {
            // Radial and tangential sensitivities of c(X) are p·m^{p−1} and m^{p−1}.
            let unit = if m > 0.0 { cx / m } else { Complex64::new(1.0, 0.0) };
            let local = r * unit.conj();
            let scale = m.max(1e-10).powf(exponent - 1.0);
            2.0 * scale * unit * Complex64::new(exponent * local.re, local.im)
        };
        grad[[f, k]] = weight * g;
    }
    Ok((cost, stft_adjoint(&StftTile { data: grad, layout: tx.layout })))
}
