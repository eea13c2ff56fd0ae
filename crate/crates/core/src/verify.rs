//! Independent oracles.
//!
//! Nothing in here reuses the closed forms it is meant to check: the forward
//! simulator only sees drift and diffusion coefficients, the posterior oracle
//! only sees operator matrices obtained by probing, and the finite-difference
//! gradient only sees function values.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::process::{DiffusionProcess, ForwardSde};
use crate::rng::{normal_vec, stream_rng};
use crate::score::{Conditioning, GaussianMixture, GmmScore};
use crate::solver::{integrate, SamplerConfig, SolverKind};

/// Per-coordinate Monte-Carlo estimate of a marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Standard error of the mean, `std / sqrt(paths)`.
    pub std_error: Vec<f64>,
    pub paths: usize,
}

impl McEstimate {
    /// Standard error of the sample standard deviation of a Gaussian,
    /// `std / sqrt(2 (paths − 1))`.
    pub fn std_of_std(&self) -> Vec<f64> {
        let denom = (2.0 * (self.paths as f64 - 1.0)).sqrt();
        self.std.iter().map(|s| s / denom).collect()
    }
}

const MC_BLOCK: usize = 256;

/// Simulate the forward SDE from `x0` up to `tau` and summarise the marginal.
///
/// Uses the drift-implicit Euler–Maruyama scheme on `substeps` uniform steps:
///
/// `x' = x + f(x', τ + h)·h + g(τ)·√h·ε`
///
/// which is solvable in closed form because the drift is affine in the state,
/// and stays well defined up to the pinned end of a bridge (where it returns
/// the pinning point). Paths are simulated in parallel blocks, each block with
/// its own random sub-stream, and reduced in block order.
pub fn mc_forward<S: ForwardSde + ?Sized>(
    process: &S,
    x0: &[f64],
    y: Option<&[f64]>,
    tau: f64,
    paths: usize,
    substeps: usize,
    seed: u64,
) -> Result<McEstimate> {
    if paths < 2 || substeps == 0 {
        return Err(Error::invalid("mc_forward needs at least two paths and one substep"));
    }
    if let Some(y) = y {
        check_len(x0.len(), y.len())?;
    }
    if process.requires_y() != y.is_some() {
        return Err(Error::invalid("observation y must be given exactly when the process requires it"));
    }
    if !(tau > 0.0 && tau <= process.horizon()) {
        return Err(Error::TimeOutOfRange { tau, min: 0.0, max: process.horizon() });
    }
    let d = x0.len();
    let h = tau / substeps as f64;
    let blocks = paths.div_ceil(MC_BLOCK);

    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|block| {
            let mut rng = stream_rng(seed, "mc", block as u64);
            let count = MC_BLOCK.min(paths - block * MC_BLOCK);
            let mut sum = vec![0.0; d];
            let mut sum_sq = vec![0.0; d];
            let mut x = vec![0.0; d];
            for _ in 0..count {
                x.copy_from_slice(x0);
                for step in 0..substeps {
                    let t = step as f64 * h;
                    let g = process.diffusion(t);
                    let drift = process.affine_drift(t + h);
                    let keep = if drift.rate.is_finite() { 1.0 / (1.0 + h * drift.rate) } else { 0.0 };
                    let noise = normal_vec(&mut rng, d);
                    for i in 0..d {
                        let anchor = y.map_or(0.0, |y| drift.anchor * y[i]);
                        x[i] = keep * (x[i] + g * h.sqrt() * noise[i]) + (1.0 - keep) * anchor;
                    }
                }
                for i in 0..d {
                    sum[i] += x[i];
                    sum_sq[i] += x[i] * x[i];
                }
            }
            (sum, sum_sq)
        })
        .collect();

    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for (s, q) in partials {
        for i in 0..d {
            sum[i] += s[i];
            sum_sq[i] += q[i];
        }
    }
    let n = paths as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sum_sq.iter().zip(&mean).map(|(q, m)| ((q - n * m * m) / (n - 1.0)).max(0.0).sqrt()).collect();
    let std_error = std.iter().map(|s| s / n.sqrt()).collect();
    Ok(McEstimate { mean, std, std_error, paths })
}

/// Dense matrix of a linear map obtained by applying it to canonical basis vectors.
pub fn probe_matrix<F>(input_dim: usize, mut apply: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut columns = Vec::with_capacity(input_dim);
    let mut e = vec![0.0; input_dim];
    for j in 0..input_dim {
        e[j] = 1.0;
        columns.push(DVector::from_vec(apply(&e)?));
        e[j] = 0.0;
    }
    if columns.is_empty() {
        return Err(Error::EmptySignal);
    }
    Ok(DMatrix::from_columns(&columns))
}

/// Posterior of `x0 ~ N(prior_mean, prior_cov)` given `y = A x0 + n`,
/// `n ~ N(0, sigma_y² I)`.
pub fn exact_linear_gaussian_posterior(
    prior_mean: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    a: &DMatrix<f64>,
    sigma_y: f64,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = prior_mean.len();
    check_len(d, prior_cov.nrows())?;
    check_len(d, prior_cov.ncols())?;
    check_len(d, a.ncols())?;
    check_len(a.nrows(), y.len())?;
    if !(sigma_y > 0.0) {
        return Err(Error::invalid("sigma_y must be positive"));
    }
    // Gain form: K = Σ Aᵀ (A Σ Aᵀ + σ² I)⁻¹
    let innovation = a * prior_cov * a.transpose() + DMatrix::identity(a.nrows(), a.nrows()) * (sigma_y * sigma_y);
    let chol = innovation.cholesky().ok_or(Error::Singular)?;
    let cross = prior_cov * a.transpose();
    let gain = chol.solve(&cross.transpose()).transpose();
    let mean = prior_mean + &gain * (y - a * prior_mean);
    let cov = prior_cov - &gain * a * prior_cov;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean, cov))
}

/// Exact score of `p_τ(x_τ | y)` for a Gaussian prior observed through a
/// linear operator, diffused by an affine kernel with coefficients `(a, b, σ)`
/// and task anchor `anchor` (zero for VE/VP).
pub fn exact_conditional_score(
    posterior_mean: &DVector<f64>,
    posterior_cov: &DMatrix<f64>,
    kernel_a: f64,
    kernel_b: f64,
    kernel_std: f64,
    anchor: Option<&DVector<f64>>,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = posterior_mean.len();
    let mut mean = posterior_mean * kernel_a;
    if let Some(anchor) = anchor {
        mean += anchor * kernel_b;
    }
    let cov = posterior_cov * (kernel_a * kernel_a) + DMatrix::identity(d, d) * (kernel_std * kernel_std);
    let chol = cov.cholesky().ok_or(Error::Singular)?;
    Ok(-chol.solve(&(x - mean)))
}

/// Probability-flow solution for one-dimensional Gaussian data `N(mean, var)`
/// under an affine process: the flow keeps the standardized position within
/// the Gaussian marginal fixed.
pub fn gaussian_flow(
    process: &DiffusionProcess,
    mean: f64,
    var: f64,
    anchor: f64,
    x_start: f64,
    from: f64,
    to: f64,
) -> f64 {
    let moments = |tau: f64| {
        let c = process.coefficients(tau);
        let b = if process.requires_y() { c.b } else { 0.0 };
        (c.a * mean + b * anchor, (c.a * c.a * var + c.std * c.std).sqrt())
    };
    let (m0, s0) = moments(from);
    let (m1, s1) = moments(to);
    m1 + (x_start - m0) * s1 / s0
}

/// Terminal error of the probability-flow solver against [`gaussian_flow`]
/// for data `N(0.5, 0.8)` (anchor 0.3 for task-adapted processes), started
/// two marginal standard deviations above the mean.
pub fn flow_convergence_error(process: &DiffusionProcess, solver: SolverKind, steps: usize) -> Result<f64> {
    let (mean, var, anchor) = (0.5, 0.8, 0.3);
    let field = GmmScore::new(GaussianMixture::gaussian(vec![mean], DMatrix::from_element(1, 1, var))?, *process);
    let start = process.sampling_start();
    let c = process.coefficients(start);
    let b = if process.requires_y() { c.b } else { 0.0 };
    let x_start = c.a * mean + b * anchor + 2.0 * (c.a * c.a * var + c.std * c.std).sqrt();
    let cfg = SamplerConfig { steps, solver, final_denoise: false, ..SamplerConfig::for_solver(solver) };
    let y = [anchor];
    let ctx = if process.requires_y() { Conditioning::with_y(&y) } else { Conditioning::none() };
    let x = integrate(process, &field, &cfg, vec![x_start], ctx, &mut stream_rng(0, "sample", 0), None)?[0];
    Ok((x - gaussian_flow(process, mean, var, anchor, x_start, start, process.tau_eps())).abs())
}

/// Central-difference gradient of a scalar function.
///
/// The step for coordinate `i` is `eps · max(1, |x_i|)`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = eps * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / ‖b‖`, with the denominator floored at `floor`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(floor)
}

/// Regular 2-D grid restricted to the highest-density region holding
/// `mass` of a mixture.
///
/// The density threshold is the `(1 − mass)` quantile of the log-density of
/// `samples` draws; the grid spans their bounding box.
pub fn mass_region_grid(
    mixture: &GaussianMixture,
    mass: f64,
    per_axis: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if mixture.dim() != 2 || per_axis < 2 || samples == 0 || !(0.0..1.0).contains(&mass) {
        return Err(Error::invalid("mass_region_grid needs a 2-D mixture, a grid and a mass in (0, 1)"));
    }
    let mut rng = stream_rng(seed, "mass-grid", 0);
    let draws: Vec<Vec<f64>> = (0..samples).map(|_| mixture.sample(&mut rng)).collect();
    let mut logp = draws.iter().map(|x| mixture.log_density(x)).collect::<Result<Vec<_>>>()?;
    logp.sort_by(f64::total_cmp);
    let threshold = logp[((1.0 - mass) * samples as f64) as usize];
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for x in &draws {
        for k in 0..2 {
            lo[k] = lo[k].min(x[k]);
            hi[k] = hi[k].max(x[k]);
        }
    }
    let mut grid = Vec::new();
    for i in 0..per_axis {
        for j in 0..per_axis {
            let t = |n: usize, k: usize| lo[k] + (hi[k] - lo[k]) * n as f64 / (per_axis - 1) as f64;
            let p = vec![t(i, 0), t(j, 1)];
            if mixture.log_density(&p)? >= threshold {
                grid.push(p);
            }
        }
    }
    Ok(grid)
}

/// Average cosine similarity between paired vectors.
pub fn mean_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::EmptySignal);
    }
    let mut total = 0.0;
    for (u, v) in a.iter().zip(b) {
        check_len(u.len(), v.len())?;
        let dot: f64 = u.iter().zip(v).map(|(p, q)| p * q).sum();
        let nu = u.iter().map(|p| p * p).sum::<f64>().sqrt();
        let nv = v.iter().map(|q| q * q).sum::<f64>().sqrt();
        total += dot / (nu * nv).max(f64::MIN_POSITIVE);
    }
    Ok(total / a.len() as f64)
}
