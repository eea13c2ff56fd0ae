//! Gaussian mixtures as analytic data distributions.
//!
//! Under an affine kernel `x_τ = a·x0 + b·y + σ·ε`, a mixture with components
//! `N(μ_k, Σ_k)` diffuses into the mixture with components
//! `N(a·μ_k + b·y, a²Σ_k + σ²I)`, so its score is available in closed form at
//! every process time.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::process::DiffusionProcess;
use crate::rng::normal_vec;
use crate::score::{Conditioning, ScoreField};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    chols: Vec<DMatrix<f64>>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::invalid("mixture needs matching, non-empty weights, means and covariances"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights must be a probability vector (sum {total})")));
        }
        let d = means[0].len();
        let mut chols = Vec::with_capacity(covs.len());
        for (m, c) in means.iter().zip(&covs) {
            check_len(d, m.len())?;
            check_len(d, c.nrows())?;
            check_len(d, c.ncols())?;
            if (c - c.transpose()).amax() > 1e-12 * c.amax().max(1.0) {
                return Err(Error::invalid("mixture covariance is not symmetric"));
            }
            let chol =
                c.clone().cholesky().ok_or_else(|| Error::invalid("mixture covariance is not positive definite"))?;
            chols.push(chol.l());
        }
        Ok(Self { weights, means, covs, chols })
    }

    /// Mixture with diagonal covariances given as per-coordinate variances.
    pub fn diagonal(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> Result<Self> {
        let means = means.into_iter().map(DVector::from_vec).collect();
        let covs = variances.into_iter().map(|v| DMatrix::from_diagonal(&DVector::from_vec(v))).collect();
        Self::new(weights, means, covs)
    }

    pub fn gaussian(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![DVector::from_vec(mean)], vec![cov])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    pub fn mean(&self) -> DVector<f64> {
        self.weights.iter().zip(&self.means).fold(DVector::zeros(self.dim()), |acc, (w, m)| acc + m * *w)
    }

    /// Overall covariance (within-component plus between-component spread).
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let d = self.dim();
        let mut cov = DMatrix::zeros(d, d);
        for ((w, m), c) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let dm = m - &mu;
            cov += (c + &dm * dm.transpose()) * *w;
        }
        cov
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let e = DVector::from_vec(normal_vec(rng, self.dim()));
        (&self.means[k] + &self.chols[k] * e).as_slice().to_vec()
    }

    /// Mixture of `a·x0 + b·y + σ·ε` for `x0` drawn from this mixture.
    pub fn diffused(&self, a: f64, b: f64, std: f64, y: Option<&[f64]>) -> Result<Self> {
        let d = self.dim();
        let shift = match y {
            Some(y) => {
                check_len(d, y.len())?;
                DVector::from_column_slice(y) * b
            }
            None => DVector::zeros(d),
        };
        let means = self.means.iter().map(|m| m * a + &shift).collect();
        let covs = self.covs.iter().map(|c| c * (a * a) + DMatrix::identity(d, d) * (std * std)).collect();
        Self::new(self.weights.clone(), means, covs)
    }

    /// Posterior mixture of `x0` given `obs = A x0 + n`, `n ~ N(0, noise_std² I)`.
    pub fn condition_linear(&self, op: &DMatrix<f64>, noise_std: f64, obs: &[f64]) -> Result<Self> {
        check_len(self.dim(), op.ncols())?;
        check_len(op.nrows(), obs.len())?;
        let obs = DVector::from_column_slice(obs);
        let m = op.nrows();
        let mut log_w = Vec::with_capacity(self.weights.len());
        let mut means = Vec::with_capacity(self.weights.len());
        let mut covs = Vec::with_capacity(self.weights.len());
        for ((w, mu), cov) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let s = op * cov * op.transpose() + DMatrix::identity(m, m) * (noise_std * noise_std);
            let chol = s.cholesky().ok_or(Error::Singular)?;
            let innov = &obs - op * mu;
            let gain = chol.solve(&(op * cov)).transpose();
            means.push(mu + &gain * &innov);
            let c = cov - &gain * op * cov;
            covs.push((&c + c.transpose()) * 0.5);
            log_w.push(w.ln() + gaussian_log_pdf(&chol, &innov));
        }
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Underflow);
        }
        let unnorm: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        let mut weights: Vec<f64> = unnorm.iter().map(|u| u / total).collect();
        // renormalise exactly so the probability-vector check holds
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        Self::new(weights, means, covs)
    }

    fn component_terms(&self, x: &DVector<f64>) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
        let mut logs = Vec::with_capacity(self.weights.len());
        let mut scores = Vec::with_capacity(self.weights.len());
        for ((w, mu), l) in self.weights.iter().zip(&self.means).zip(&self.chols) {
            let diff = x - mu;
            let z = l.solve_lower_triangular(&diff).ok_or(Error::Singular)?;
            let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
            logs.push(w.ln() - 0.5 * (z.norm_squared() + log_det + self.dim() as f64 * LN_2PI));
            let score = -l.transpose().solve_upper_triangular(&z).ok_or(Error::Singular)?;
            scores.push(score);
        }
        Ok((logs, scores))
    }

    fn responsibilities(logs: &[f64]) -> Result<(Vec<f64>, f64)> {
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Underflow);
        }
        let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        Ok((unnorm.iter().map(|u| u / total).collect(), max + total.ln()))
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_len(self.dim(), x.len())?;
        let (logs, _) = self.component_terms(&DVector::from_column_slice(x))?;
        Ok(Self::responsibilities(&logs)?.1)
    }

    /// `∇ log p(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), x.len())?;
        let (logs, scores) = self.component_terms(&DVector::from_column_slice(x))?;
        let (resp, _) = Self::responsibilities(&logs)?;
        let total = resp.iter().zip(&scores).fold(DVector::zeros(self.dim()), |acc, (r, s)| acc + s * *r);
        Ok(total.as_slice().to_vec())
    }

    /// Hessian of `log p` (the score Jacobian, symmetric) applied to `v`.
    ///
    /// `∇s = Σ r_k(−Σ_k⁻¹) + Σ r_k s_k s_kᵀ − s sᵀ`.
    pub fn score_jacobian_vec(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), x.len())?;
        check_len(self.dim(), v.len())?;
        let (logs, scores) = self.component_terms(&DVector::from_column_slice(x))?;
        let (resp, _) = Self::responsibilities(&logs)?;
        let v = DVector::from_column_slice(v);
        let mut out = DVector::zeros(self.dim());
        let mut s = DVector::zeros(self.dim());
        for ((r, sk), l) in resp.iter().zip(&scores).zip(&self.chols) {
            if *r == 0.0 {
                continue;
            }
            let z = l.solve_lower_triangular(&v).ok_or(Error::Singular)?;
            let prec_v = l.transpose().solve_upper_triangular(&z).ok_or(Error::Singular)?;
            out -= prec_v * *r;
            out += sk * (*r * sk.dot(&v));
            s += sk * *r;
        }
        out -= &s * s.dot(&v);
        Ok(out.as_slice().to_vec())
    }
}

fn gaussian_log_pdf(chol: &Cholesky<f64, Dyn>, diff: &DVector<f64>) -> f64 {
    let l = chol.l();
    let z = l.solve_lower_triangular(diff).expect("cholesky factor is invertible");
    let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    -0.5 * (z.norm_squared() + log_det + diff.len() as f64 * LN_2PI)
}

/// Exact score of a diffused Gaussian mixture.
#[derive(Debug, Clone)]
pub struct GmmScore {
    mixture: GaussianMixture,
    process: DiffusionProcess,
}

impl GmmScore {
    pub fn new(mixture: GaussianMixture, process: DiffusionProcess) -> Self {
        Self { mixture, process }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn process(&self) -> &DiffusionProcess {
        &self.process
    }

    /// Marginal `p_τ` as a mixture.
    pub fn marginal(&self, tau: f64, y: Option<&[f64]>) -> Result<GaussianMixture> {
        if self.process.requires_y() && y.is_none() {
            return Err(Error::MissingObservation(self.process.kind()));
        }
        let c = self.process.coefficients(tau);
        self.mixture.diffused(c.a, c.b, c.std, y.filter(|_| self.process.requires_y()))
    }

    pub fn log_density(&self, x: &[f64], tau: f64, y: Option<&[f64]>) -> Result<f64> {
        self.marginal(tau, y)?.log_density(x)
    }
}

impl ScoreField for GmmScore {
    fn evaluate(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> Result<Vec<f64>> {
        self.marginal(tau, ctx.y)?.score(x)
    }

    fn vjp(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>, v: &[f64]) -> Result<Vec<f64>> {
        self.marginal(tau, ctx.y)?.score_jacobian_vec(x, v)
    }
}
