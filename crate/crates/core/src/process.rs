//! Forward diffusion processes with affine drift.
//!
//! Every process here has drift `f(x, τ) = rate(τ)·(anchor·y − x)` and a
//! state-independent diffusion coefficient `g(τ)`, so the transition kernel is
//! Gaussian with mean `a(τ)·x0 + b(τ)·y` and isotropic standard deviation
//! `σ(τ)`:
//!
//! | kind | drift | a(τ) | b(τ) | σ(τ)² |
//! |------|-------|------|------|-------|
//! | VE   | 0 | 1 | 0 | σₘᵢₙ²((σₘₐₓ/σₘᵢₙ)^{2τ/T} − 1) |
//! | VP   | −½β(τ)x | e^{−B(τ)/2} | 0 | 1 − e^{−B(τ)} |
//! | OUVE | γ(y − x) | e^{−γτ} | 1 − e^{−γτ} | σₘᵢₙ² L (r^{2τ/T} − e^{−2γτ}) / (L + γT) |
//! | BBED | (y − x)/(T − τ) | 1 − τ/T | τ/T | k² τ(T − τ)/T |
//!
//! with `B(τ) = ∫β`, `r = σₘₐₓ/σₘᵢₙ` and `L = ln r`. All kernels collapse to
//! a point mass at `x0` when `τ = 0`.

use std::fmt;

use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::rng::normal_vec;

pub const DEFAULT_HORIZON: f64 = 1.0;
pub const DEFAULT_TAU_EPS: f64 = 1e-3;

/// Smallest admissible mean coefficient `a(τ)` for one-step denoising.
const MIN_MEAN_COEFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProcessKind {
    Ve,
    Vp,
    Ouve,
    Bbed,
}

impl ProcessKind {
    pub fn name(self) -> &'static str {
        match self {
            ProcessKind::Ve => "ve",
            ProcessKind::Vp => "vp",
            ProcessKind::Ouve => "ouve",
            ProcessKind::Bbed => "bbed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ve" => Some(ProcessKind::Ve),
            "vp" => Some(ProcessKind::Vp),
            "ouve" => Some(ProcessKind::Ouve),
            "bbed" => Some(ProcessKind::Bbed),
            _ => None,
        }
    }

    pub const ALL: [ProcessKind; 4] = [ProcessKind::Ve, ProcessKind::Vp, ProcessKind::Ouve, ProcessKind::Bbed];
}

impl fmt::Display for ProcessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Schedule parameters for each process family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Ve { sigma_min: f64, sigma_max: f64 },
    Vp { beta_min: f64, beta_max: f64 },
    Ouve { gamma: f64, sigma_min: f64, sigma_max: f64 },
    Bbed { k: f64 },
}

impl Schedule {
    pub fn default_for(kind: ProcessKind) -> Self {
        match kind {
            ProcessKind::Ve => Schedule::Ve { sigma_min: 0.01, sigma_max: 10.0 },
            ProcessKind::Vp => Schedule::Vp { beta_min: 0.1, beta_max: 20.0 },
            ProcessKind::Ouve => Schedule::Ouve { gamma: 1.5, sigma_min: 0.05, sigma_max: 0.5 },
            ProcessKind::Bbed => Schedule::Bbed { k: 1.0 },
        }
    }

    pub fn kind(&self) -> ProcessKind {
        match self {
            Schedule::Ve { .. } => ProcessKind::Ve,
            Schedule::Vp { .. } => ProcessKind::Vp,
            Schedule::Ouve { .. } => ProcessKind::Ouve,
            Schedule::Bbed { .. } => ProcessKind::Bbed,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::Ve { sigma_min, sigma_max } => sigma_min > 0.0 && sigma_max > sigma_min,
            Schedule::Vp { beta_min, beta_max } => beta_min > 0.0 && beta_max > beta_min,
            Schedule::Ouve { gamma, sigma_min, sigma_max } => gamma > 0.0 && sigma_min > 0.0 && sigma_max > sigma_min,
            Schedule::Bbed { k } => k > 0.0,
        };
        let finite = match *self {
            Schedule::Ve { sigma_min, sigma_max } => sigma_min.is_finite() && sigma_max.is_finite(),
            Schedule::Vp { beta_min, beta_max } => beta_min.is_finite() && beta_max.is_finite(),
            Schedule::Ouve { gamma, sigma_min, sigma_max } => {
                gamma.is_finite() && sigma_min.is_finite() && sigma_max.is_finite()
            }
            Schedule::Bbed { k } => k.is_finite(),
        };
        if ok && finite {
            Ok(())
        } else {
            Err(Error::invalid(format!("inconsistent schedule {self:?}")))
        }
    }
}

/// Closed-form moments of `p(x_τ | x0 [, y])`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMoments {
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Scalar coefficients of the affine kernel: mean = `a·x0 + b·y`, std = `std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelCoefficients {
    pub a: f64,
    pub b: f64,
    pub std: f64,
}

/// Drift written as `rate·(anchor·y − x)`.
///
/// `rate` is infinite at the pinned end of a bridge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDrift {
    pub rate: f64,
    pub anchor: f64,
}

/// The coefficients of an SDE `dx = rate(τ)(anchor·y − x)dτ + g(τ)dw`.
///
/// Implemented by [`DiffusionProcess`]; simulators and reverse-step routines
/// accept any implementor so degenerate processes can be plugged in.
pub trait ForwardSde: Sync {
    fn horizon(&self) -> f64;
    fn requires_y(&self) -> bool;
    fn affine_drift(&self, tau: f64) -> AffineDrift;
    fn diffusion(&self, tau: f64) -> f64;

    fn drift_diffusion(&self, x: &[f64], tau: f64, y: Option<&[f64]>) -> Result<(Vec<f64>, f64)> {
        let AffineDrift { rate, anchor } = self.affine_drift(tau);
        let f = match y {
            Some(y) => {
                check_len(x.len(), y.len())?;
                x.iter().zip(y).map(|(&xi, &yi)| rate * (anchor * yi - xi)).collect()
            }
            None => x.iter().map(|&xi| -rate * xi).collect(),
        };
        Ok((f, self.diffusion(tau)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionProcess {
    schedule: Schedule,
    horizon: f64,
    tau_eps: f64,
}

impl DiffusionProcess {
    pub fn new(schedule: Schedule, horizon: f64, tau_eps: f64) -> Result<Self> {
        schedule.validate()?;
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if !(tau_eps > 0.0 && tau_eps < horizon) {
            return Err(Error::invalid(format!("tau_eps must lie in (0, {horizon}), got {tau_eps}")));
        }
        if matches!(schedule, Schedule::Bbed { .. }) && 2.0 * tau_eps >= horizon {
            return Err(Error::invalid("bbed needs tau_eps < horizon / 2"));
        }
        Ok(Self { schedule, horizon, tau_eps })
    }

    pub fn with_schedule(schedule: Schedule) -> Result<Self> {
        Self::new(schedule, DEFAULT_HORIZON, DEFAULT_TAU_EPS)
    }

    /// Shipped defaults: horizon 1, `tau_eps` 1e-3 and the default schedule.
    pub fn default_for(kind: ProcessKind) -> Self {
        Self::with_schedule(Schedule::default_for(kind)).expect("default schedules are valid")
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn kind(&self) -> ProcessKind {
        self.schedule.kind()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn tau_eps(&self) -> f64 {
        self.tau_eps
    }

    /// Task-adapted processes interpolate towards the degraded observation.
    pub fn requires_y(&self) -> bool {
        matches!(self.kind(), ProcessKind::Ouve | ProcessKind::Bbed)
    }

    /// Process time at which reverse integration starts.
    ///
    /// This is the horizon, except for the bridge whose drift is singular
    /// there; it starts one `tau_eps` earlier.
    pub fn sampling_start(&self) -> f64 {
        match self.kind() {
            ProcessKind::Bbed => self.horizon - self.tau_eps,
            _ => self.horizon,
        }
    }

    /// Whether `σ(τ)` is strictly increasing on the whole horizon.
    pub fn monotone_std(&self) -> bool {
        !matches!(self.kind(), ProcessKind::Bbed)
    }

    fn check_y(&self, y: Option<&[f64]>, len: usize) -> Result<()> {
        match (self.requires_y(), y) {
            (true, None) => Err(Error::MissingObservation(self.kind())),
            (false, Some(_)) => Err(Error::UnexpectedObservation(self.kind())),
            (true, Some(y)) => check_len(len, y.len()),
            (false, None) => Ok(()),
        }
    }

    fn check_range(&self, tau: f64, min: f64, max: f64, open_max: bool) -> Result<()> {
        let inside = tau >= min && if open_max { tau < max } else { tau <= max };
        if inside && tau.is_finite() {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange { tau, min, max })
        }
    }

    /// Range accepted by the drift: `[tau_eps, T]`, open at `T` for the bridge.
    fn check_drift_time(&self, tau: f64) -> Result<()> {
        let open = matches!(self.kind(), ProcessKind::Bbed);
        self.check_range(tau, self.tau_eps, self.horizon, open)
    }

    fn log_ratio(sigma_min: f64, sigma_max: f64) -> f64 {
        (sigma_max / sigma_min).ln()
    }

    fn beta(&self, tau: f64) -> f64 {
        match self.schedule {
            Schedule::Vp { beta_min, beta_max } => beta_min + tau / self.horizon * (beta_max - beta_min),
            _ => unreachable!("beta is only defined for vp"),
        }
    }

    /// `∫₀^τ β`.
    fn beta_integral(&self, tau: f64) -> f64 {
        match self.schedule {
            Schedule::Vp { beta_min, beta_max } => {
                beta_min * tau + 0.5 * (beta_max - beta_min) * tau * tau / self.horizon
            }
            _ => unreachable!("beta is only defined for vp"),
        }
    }

    /// Kernel coefficients without range validation; valid for `τ ∈ [0, T]`.
    pub fn coefficients(&self, tau: f64) -> KernelCoefficients {
        let t = self.horizon;
        match self.schedule {
            Schedule::Ve { sigma_min, sigma_max } => {
                let r2 = (2.0 * Self::log_ratio(sigma_min, sigma_max) * tau / t).exp_m1();
                KernelCoefficients { a: 1.0, b: 0.0, std: sigma_min * r2.max(0.0).sqrt() }
            }
            Schedule::Vp { .. } => {
                let big_b = self.beta_integral(tau);
                KernelCoefficients { a: (-0.5 * big_b).exp(), b: 0.0, std: (-(-big_b).exp_m1()).max(0.0).sqrt() }
            }
            Schedule::Ouve { gamma, sigma_min, sigma_max } => {
                let l = Self::log_ratio(sigma_min, sigma_max);
                let decay = (-gamma * tau).exp();
                // r^{2τ/T} − e^{−2γτ} = e^{−2γτ}(e^{(2L/T + 2γ)τ} − 1)
                let spread = (-2.0 * gamma * tau).exp() * ((2.0 * l / t + 2.0 * gamma) * tau).exp_m1();
                let var = sigma_min * sigma_min * l * spread / (l + gamma * t);
                KernelCoefficients { a: decay, b: -(-gamma * tau).exp_m1(), std: var.max(0.0).sqrt() }
            }
            Schedule::Bbed { k } => {
                let frac = tau / t;
                let var = k * k * tau * (t - tau) / t;
                KernelCoefficients { a: 1.0 - frac, b: frac, std: var.max(0.0).sqrt() }
            }
        }
    }

    pub fn kernel_std(&self, tau: f64) -> f64 {
        self.coefficients(tau).std
    }

    /// Diffusion coefficient `g(τ)`.
    pub fn diffusion(&self, tau: f64) -> f64 {
        let t = self.horizon;
        match self.schedule {
            Schedule::Ve { sigma_min, sigma_max } | Schedule::Ouve { sigma_min, sigma_max, .. } => {
                let l = Self::log_ratio(sigma_min, sigma_max);
                sigma_min * (l * tau / t).exp() * (2.0 * l / t).sqrt()
            }
            Schedule::Vp { .. } => self.beta(tau).sqrt(),
            Schedule::Bbed { k } => k,
        }
    }

    pub fn affine_drift(&self, tau: f64) -> AffineDrift {
        match self.schedule {
            Schedule::Ve { .. } => AffineDrift { rate: 0.0, anchor: 0.0 },
            Schedule::Vp { .. } => AffineDrift { rate: 0.5 * self.beta(tau), anchor: 0.0 },
            Schedule::Ouve { gamma, .. } => AffineDrift { rate: gamma, anchor: 1.0 },
            Schedule::Bbed { .. } => {
                let gap = self.horizon - tau;
                let rate = if gap > 0.0 { 1.0 / gap } else { f64::INFINITY };
                AffineDrift { rate, anchor: 1.0 }
            }
        }
    }

    /// Drift vector and diffusion coefficient at `(x, τ)`.
    pub fn drift_diffusion(&self, x: &[f64], tau: f64, y: Option<&[f64]>) -> Result<(Vec<f64>, f64)> {
        self.check_y(y, x.len())?;
        self.check_drift_time(tau)?;
        let AffineDrift { rate, anchor } = self.affine_drift(tau);
        let f = match y {
            Some(y) => x.iter().zip(y).map(|(&xi, &yi)| rate * (anchor * yi - xi)).collect(),
            None => x.iter().map(|&xi| -rate * xi).collect(),
        };
        Ok((f, self.diffusion(tau)))
    }

    /// Mean and standard deviation of the transition kernel at `τ ∈ [tau_eps, T]`.
    pub fn kernel_moments(&self, x0: &[f64], y: Option<&[f64]>, tau: f64) -> Result<KernelMoments> {
        self.check_y(y, x0.len())?;
        self.check_range(tau, self.tau_eps, self.horizon, false)?;
        Ok(self.moments_unchecked(x0, y, tau))
    }

    fn moments_unchecked(&self, x0: &[f64], y: Option<&[f64]>, tau: f64) -> KernelMoments {
        let c = self.coefficients(tau);
        let mean = match y {
            Some(y) => x0.iter().zip(y).map(|(&x, &y)| c.a * x + c.b * y).collect(),
            None => x0.iter().map(|&x| c.a * x).collect(),
        };
        KernelMoments { mean, std: c.std }
    }

    /// Draw `x_τ ~ p(x_τ | x0 [, y])`. Unlike the other kernel operations
    /// `τ = 0` is accepted and returns `x0` exactly.
    pub fn sample_kernel<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        y: Option<&[f64]>,
        tau: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.check_y(y, x0.len())?;
        self.check_range(tau, 0.0, self.horizon, false)?;
        let KernelMoments { mut mean, std } = self.moments_unchecked(x0, y, tau);
        if std > 0.0 {
            for (m, e) in mean.iter_mut().zip(normal_vec(rng, x0.len())) {
                *m += std * e;
            }
        }
        Ok(mean)
    }

    /// Initial state of the reverse process.
    ///
    /// VE and VP start from a zero-mean Gaussian; task-adapted processes are
    /// warm-started around `y`.
    pub fn prior_sample<R: Rng + ?Sized>(&self, len: usize, y: Option<&[f64]>, rng: &mut R) -> Result<Vec<f64>> {
        self.check_y(y, len)?;
        let std = match self.kind() {
            ProcessKind::Vp => 1.0,
            _ => self.kernel_std(self.sampling_start()),
        };
        let noise = normal_vec(rng, len);
        Ok(match y {
            Some(y) => y.iter().zip(noise).map(|(&c, e)| c + std * e).collect(),
            None => noise.into_iter().map(|e| std * e).collect(),
        })
    }

    /// One-step estimate of `x0` from `x_τ` and the score at `x_τ`.
    ///
    /// Inverts the affine kernel: `x̂0 = (x_τ + σ²·s − b·y) / a`.
    pub fn denoise_to_x0(&self, x_tau: &[f64], score: &[f64], tau: f64, y: Option<&[f64]>) -> Result<Vec<f64>> {
        check_len(x_tau.len(), score.len())?;
        self.check_y(y, x_tau.len())?;
        self.check_range(tau, 0.0, self.horizon, false)?;
        let KernelCoefficients { a, b, std } = self.coefficients(tau);
        if a.abs() < MIN_MEAN_COEFF {
            return Err(Error::SingularKernel(a));
        }
        let var = std * std;
        let mut out: Vec<f64> = x_tau.iter().zip(score).map(|(&x, &s)| x + var * s).collect();
        if let Some(y) = y {
            for (o, &yi) in out.iter_mut().zip(y) {
                *o -= b * yi;
            }
        }
        for o in &mut out {
            *o /= a;
        }
        Ok(out)
    }

    /// Time at which `σ(τ) = target`, found by bisection on `[0, T]`.
    pub fn time_for_std(&self, target: f64) -> Result<f64> {
        if !self.monotone_std() {
            return Err(Error::invalid(format!("{} has a non-monotone noise level", self.kind())));
        }
        let (mut lo, mut hi) = (0.0, self.horizon);
        if target <= 0.0 {
            return Ok(0.0);
        }
        if target >= self.kernel_std(hi) {
            return Ok(hi);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.kernel_std(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * self.horizon {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

impl ForwardSde for DiffusionProcess {
    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn requires_y(&self) -> bool {
        DiffusionProcess::requires_y(self)
    }

    fn affine_drift(&self, tau: f64) -> AffineDrift {
        DiffusionProcess::affine_drift(self, tau)
    }

    fn diffusion(&self, tau: f64) -> f64 {
        DiffusionProcess::diffusion(self, tau)
    }

    fn drift_diffusion(&self, x: &[f64], tau: f64, y: Option<&[f64]>) -> Result<(Vec<f64>, f64)> {
        DiffusionProcess::drift_diffusion(self, x, tau, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn all_defaults() -> Vec<DiffusionProcess> {
        ProcessKind::ALL.iter().map(|&k| DiffusionProcess::default_for(k)).collect()
    }

    fn y_for(p: &DiffusionProcess, n: usize) -> Option<Vec<f64>> {
        p.requires_y().then(|| vec![0.3; n])
    }

    #[test]
    fn ouve_drift_vanishes_at_fixed_point() {
        let p = DiffusionProcess::default_for(ProcessKind::Ouve);
        let y = [0.2, -0.7, 1.1];
        let (f, _) = p.drift_diffusion(&y, 0.4, Some(&y)).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ve_drift_is_zero() {
        let p = DiffusionProcess::default_for(ProcessKind::Ve);
        let (f, g) = p.drift_diffusion(&[3.0, -2.0], 0.5, None).unwrap();
        assert_eq!(f, vec![0.0, 0.0]);
        assert!(g > 0.0);
    }

    #[test]
    fn drift_formulas() {
        let x = [1.0, -2.0];
        let y = [0.5, 0.5];
        let vp = DiffusionProcess::default_for(ProcessKind::Vp);
        let (f, g) = vp.drift_diffusion(&x, 0.5, None).unwrap();
        let beta = 0.1 + 0.5 * 19.9;
        assert!((f[0] + 0.5 * beta).abs() < 1e-12 && (f[1] - beta).abs() < 1e-12);
        assert!((g - beta.sqrt()).abs() < 1e-12);

        let bb = DiffusionProcess::default_for(ProcessKind::Bbed);
        let (f, g) = bb.drift_diffusion(&x, 0.75, Some(&y)).unwrap();
        assert!((f[0] - (0.5 - 1.0) / 0.25).abs() < 1e-12);
        assert_eq!(g, 1.0);
    }

    #[test]
    fn drift_rejects_bad_inputs() {
        let ouve = DiffusionProcess::default_for(ProcessKind::Ouve);
        assert!(matches!(ouve.drift_diffusion(&[1.0], 0.5, None), Err(Error::MissingObservation(_))));
        assert!(matches!(ouve.drift_diffusion(&[1.0], 0.0, Some(&[0.0])), Err(Error::TimeOutOfRange { .. })));
        assert!(matches!(ouve.drift_diffusion(&[1.0], 1.5, Some(&[0.0])), Err(Error::TimeOutOfRange { .. })));
        let bb = DiffusionProcess::default_for(ProcessKind::Bbed);
        assert!(bb.drift_diffusion(&[1.0], 1.0 - 1e-9, Some(&[0.0])).is_ok());
        assert!(matches!(bb.drift_diffusion(&[1.0], 1.0, Some(&[0.0])), Err(Error::TimeOutOfRange { .. })));
        let ve = DiffusionProcess::default_for(ProcessKind::Ve);
        assert!(matches!(ve.drift_diffusion(&[1.0], 0.5, Some(&[0.0])), Err(Error::UnexpectedObservation(_))));
        assert!(ve.drift_diffusion(&[1.0], 1.0, None).is_ok());
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(DiffusionProcess::with_schedule(Schedule::Ve { sigma_min: 1.0, sigma_max: 0.5 }).is_err());
        assert!(DiffusionProcess::with_schedule(Schedule::Vp { beta_min: 0.0, beta_max: 1.0 }).is_err());
        assert!(DiffusionProcess::with_schedule(Schedule::Ouve { gamma: 0.0, sigma_min: 0.1, sigma_max: 1.0 }).is_err());
        assert!(DiffusionProcess::with_schedule(Schedule::Bbed { k: -1.0 }).is_err());
        assert!(DiffusionProcess::new(Schedule::default_for(ProcessKind::Ve), 1.0, 0.0).is_err());
    }

    /// Variance ODE of an affine SDE: dσ²/dτ = −2·rate·σ² + g².
    /// Checked against central differences of the closed-form σ².
    #[test]
    fn variance_satisfies_moment_equation() {
        for p in all_defaults() {
            for &tau in &[0.1, 0.3, 0.5, 0.8, 0.95] {
                let h = 1e-5;
                let v = |t: f64| p.kernel_std(t).powi(2);
                let dv = (v(tau + h) - v(tau - h)) / (2.0 * h);
                let rate = p.affine_drift(tau).rate;
                let rhs = -2.0 * rate * v(tau) + p.diffusion(tau).powi(2);
                assert!((dv - rhs).abs() <= 1e-4 * rhs.abs().max(1e-3), "{} tau={tau}: {dv} vs {rhs}", p.kind());
            }
        }
    }

    #[test]
    fn ve_diffusion_squared_is_variance_derivative() {
        let p = DiffusionProcess::default_for(ProcessKind::Ve);
        for &tau in &[0.05, 0.2, 0.5, 0.9] {
            let h = 1e-6;
            let dv = (p.kernel_std(tau + h).powi(2) - p.kernel_std(tau - h).powi(2)) / (2.0 * h);
            let g2 = p.diffusion(tau).powi(2);
            assert!(((g2 - dv) / dv).abs() < 1e-4);
        }
    }

    #[test]
    fn ouve_mean_at_horizon() {
        let p = DiffusionProcess::default_for(ProcessKind::Ouve);
        let m = p.kernel_moments(&[1.0], Some(&[0.0]), 1.0).unwrap();
        assert!((m.mean[0] - (-1.5f64).exp()).abs() < 1e-15);
        assert!((m.mean[0] - 0.22313).abs() < 1e-5);
    }

    #[test]
    fn kernel_collapses_near_zero() {
        for p in all_defaults() {
            let x0 = [0.8, -1.2];
            let y = y_for(&p, 2);
            let m = p.kernel_moments(&x0, y.as_deref(), p.tau_eps()).unwrap();
            for (a, b) in m.mean.iter().zip(&x0) {
                assert!((a - b).abs() < 1e-2, "{}", p.kind());
            }
            assert!(m.std < 0.05, "{}: {}", p.kind(), m.std);
            assert_eq!(p.coefficients(0.0).std, 0.0);
            assert_eq!(p.coefficients(0.0).a, 1.0);
            assert_eq!(p.coefficients(0.0).b, 0.0);
        }
    }

    #[test]
    fn std_monotone_and_small_at_start() {
        for p in all_defaults().into_iter().filter(|p| p.monotone_std()) {
            let mut prev = p.kernel_std(p.tau_eps());
            assert!(prev < 0.1 * p.kernel_std(p.horizon()));
            for i in 1..=1000 {
                let s = p.kernel_std(p.tau_eps() + (p.horizon() - p.tau_eps()) * i as f64 / 1000.0);
                assert!(s > prev, "{}", p.kind());
                prev = s;
            }
        }
    }

    #[test]
    fn task_adapted_means_interpolate() {
        let x0 = [2.0, -1.0];
        let y = [0.5, 0.25];
        let bb = DiffusionProcess::default_for(ProcessKind::Bbed);
        assert_eq!(bb.kernel_moments(&x0, Some(&y), 1.0).unwrap().mean, y.to_vec());
        let ou = DiffusionProcess::default_for(ProcessKind::Ouve);
        let m = ou.kernel_moments(&x0, Some(&y), 1.0).unwrap().mean;
        for i in 0..2 {
            assert!((m[i] - y[i]).abs() <= (-1.5f64).exp() * (x0[i] - y[i]).abs() + 1e-15);
        }
    }

    #[test]
    fn sample_kernel_degenerate_and_deterministic() {
        for p in all_defaults() {
            let x0 = [0.4, 0.1, -0.3];
            let y = y_for(&p, 3);
            let mut rng = stream_rng(1, "kernel", 0);
            assert_eq!(p.sample_kernel(&x0, y.as_deref(), 0.0, &mut rng).unwrap(), x0.to_vec());
            let a = p.sample_kernel(&x0, y.as_deref(), 0.5, &mut stream_rng(5, "kernel", 0)).unwrap();
            let b = p.sample_kernel(&x0, y.as_deref(), 0.5, &mut stream_rng(5, "kernel", 0)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sample_kernel_empirical_std() {
        let p = DiffusionProcess::default_for(ProcessKind::Vp);
        let n = 100_000;
        let draws = p.sample_kernel(&vec![0.0; n], None, 0.3, &mut stream_rng(3, "kernel", 0)).unwrap();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target = p.kernel_std(0.3);
        assert!((var.sqrt() / target - 1.0).abs() < 0.01);
    }

    #[test]
    fn prior_sample_statistics() {
        let n = 100_000;
        let ve = DiffusionProcess::default_for(ProcessKind::Ve);
        let s = ve.prior_sample(n, None, &mut stream_rng(11, "sample", 0)).unwrap();
        assert_eq!(s.len(), n);
        let std = (s.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        assert!((std / 10.0 - 1.0).abs() < 0.02, "{std}");

        let ou = DiffusionProcess::default_for(ProcessKind::Ouve);
        let y = vec![0.7; n];
        let s = ou.prior_sample(n, Some(&y), &mut stream_rng(11, "sample", 1)).unwrap();
        let mean = s.iter().sum::<f64>() / n as f64;
        let sd = ou.kernel_std(1.0);
        assert!((mean - 0.7).abs() < 3.0 * sd / (n as f64).sqrt());
        assert!(ou.prior_sample(4, None, &mut stream_rng(0, "sample", 0)).is_err());
    }

    #[test]
    fn denoise_identities() {
        let ve = DiffusionProcess::default_for(ProcessKind::Ve);
        let x = [0.3, -0.9];
        assert_eq!(ve.denoise_to_x0(&x, &[0.0, 0.0], 0.6, None).unwrap(), x.to_vec());
        for p in all_defaults() {
            let y = y_for(&p, 2);
            let s = [0.5, -0.25];
            let out = p.denoise_to_x0(&x, &s, p.tau_eps(), y.as_deref()).unwrap();
            for (o, xi) in out.iter().zip(&x) {
                assert!((o - xi).abs() < 5e-3, "{}", p.kind());
            }
        }
        let bb = DiffusionProcess::default_for(ProcessKind::Bbed);
        assert!(matches!(bb.denoise_to_x0(&[1.0], &[0.0], 1.0, Some(&[0.0])), Err(Error::SingularKernel(_))));
    }

    /// Scalar Gaussian data x0 ~ N(m, s²) under VE: E[x0 | x_τ] in closed form.
    #[test]
    fn denoise_with_exact_score_gives_conditional_mean() {
        let ve = DiffusionProcess::default_for(ProcessKind::Ve);
        let (m, s2) = (0.7, 0.4);
        for &tau in &[0.1, 0.5, 0.9] {
            let var = ve.kernel_std(tau).powi(2);
            for &x in &[-3.0, 0.2, 5.0] {
                let score = -(x - m) / (s2 + var);
                let expected = m + s2 / (s2 + var) * (x - m);
                let got = ve.denoise_to_x0(&[x], &[score], tau, None).unwrap()[0];
                assert!(((got - expected) / expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn time_for_std_inverts_schedule() {
        for p in all_defaults().into_iter().filter(|p| p.monotone_std()) {
            for &tau in &[0.01, 0.3, 0.77] {
                let back = p.time_for_std(p.kernel_std(tau)).unwrap();
                assert!((back - tau).abs() < 1e-9, "{}", p.kind());
            }
        }
        assert!(DiffusionProcess::default_for(ProcessKind::Bbed).time_for_std(0.1).is_err());
    }
}
