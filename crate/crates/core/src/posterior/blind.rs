use super::{posterior_score, reverse_step, LikelihoodConfig, LikelihoodMode, PosteriorField, ReportRow, StepInput};
use crate::error::{Error, Result};
use crate::operator::{DegradationOperator, LowpassBounds, LowpassParams};
use crate::process::DiffusionProcess;
use crate::rng::stream_rng;
use crate::score::{Conditioning, ScoreField};
use crate::solver::{discretize, guided, SamplerConfig};

/// Joint estimation of the signal and a parametric lowpass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlindConfig {
    pub sample_rate: u32,
    pub init: LowpassParams,
    pub bounds: LowpassBounds,
    /// Gradient-descent step in the unconstrained coordinates.
    pub lr: f64,
    /// Parameter updates per reverse step.
    pub phi_steps: usize,
}

impl BlindConfig {
    pub fn new(sample_rate: u32) -> Self {
        Self {
            sample_rate,
            init: LowpassParams { cutoff_hz: 0.5 * f64::from(sample_rate) * 0.5, slope_db_per_octave: 24.0 },
            bounds: LowpassBounds::for_sample_rate(sample_rate),
            lr: 1e-2,
            phi_steps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate(self.sample_rate)?;
        if !self.bounds.contains(self.init) {
            return Err(Error::invalid(format!("initial {:?} outside bounds {:?}", self.init, self.bounds)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("phi learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlindRestoration {
    pub x: Vec<f64>,
    pub phi: LowpassParams,
    /// Parameters after every reverse step.
    pub trajectory: Vec<LowpassParams>,
    /// Set when a parameter sat at a bound for more than half of the steps.
    pub bound_warning: bool,
    pub report: Vec<ReportRow>,
}

fn near_bound(u: [f64; 2]) -> bool {
    // sigmoid(u) outside [1e-3, 1 − 1e-3]
    u.iter().any(|v| v.abs() > (999f64).ln())
}

/// Posterior sampling with an unknown lowpass: each reverse step updates `x`
/// with the current operator, then takes `phi_steps` gradient steps on the
/// log residual `ln ‖c(y) − c(A_φ(x̂0))‖²` with `x̂0` fixed, so the step
/// size does not depend on the signal level.
#[allow(clippy::too_many_arguments)]
pub fn blind_restore<F: ScoreField + ?Sized>(
    y: &[f64],
    process: &DiffusionProcess,
    field: &F,
    sampler: &SamplerConfig,
    lik: &LikelihoodConfig,
    blind: &BlindConfig,
    cond: Option<&[f64]>,
) -> Result<BlindRestoration> {
    lik.validate()?;
    blind.validate()?;
    if lik.mode != LikelihoodMode::Dps {
        return Err(Error::Unsupported { op: "blind restoration", kind: "non-dps likelihood" });
    }
    if y.is_empty() {
        return Err(Error::EmptySignal);
    }
    let anchor = process.requires_y().then_some(y);
    let ctx = Conditioning { y: anchor, cond };
    let field = guided(field, sampler, ctx);
    let grid = discretize(process, sampler.steps, sampler.scheme)?;
    let taus = grid.taus();
    let mut rng = stream_rng(sampler.seed, "sample", 0);
    let mut x = process.prior_sample(y.len(), anchor, &mut rng)?;
    if lik.cost.cost_grad(&vec![0.0; y.len()], y)?.0 <= 0.0 {
        return Err(Error::invalid("blind restoration needs a non-zero observation"));
    }

    let mut u = blind.bounds.to_unconstrained(blind.init)?;
    let mut phi = blind.init;
    let mut trajectory = Vec::with_capacity(grid.steps());
    let mut report = Vec::with_capacity(grid.steps() + 1);
    let mut at_bound = 0usize;

    for step in 0..grid.steps() {
        let op = DegradationOperator::parametric_lowpass(phi, blind.sample_rate)?;
        let ps = posterior_score(&field, process, &x, taus[step], ctx, y, &op, lik)?;
        report.push(ReportRow {
            step,
            tau: taus[step],
            residual_norm: ps.residual_norm,
            zeta: ps.zeta,
            phi: Some(phi),
        });
        let input = StepInput { step, tau: taus[step], next: taus[step + 1], last: step + 1 == grid.steps(), ctx };
        let posterior = PosteriorField { prior: &field, process, y, op: &op, cfg: lik };
        x = reverse_step(process, &posterior, sampler, &x, &ps.score, &input, &mut rng)?;

        for _ in 0..blind.phi_steps {
            let op = op.with_phi(phi)?;
            let z = op.apply(&ps.x0_hat)?;
            let (cost, dz) = lik.cost.cost_grad(&z, y)?;
            if cost <= 0.0 {
                break;
            }
            let g = op.grad_phi(&ps.x0_hat, &dz)?;
            let jac = blind.bounds.jacobian(u);
            for i in 0..2 {
                u[i] -= blind.lr * g[i] * jac[i] / cost;
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { step, tau: taus[step] });
            }
            phi = blind.bounds.from_unconstrained(u);
        }
        if near_bound(u) {
            at_bound += 1;
        }
        trajectory.push(phi);
    }

    let end = process.tau_eps();
    if sampler.final_denoise {
        let s = field.evaluate(&x, end, ctx)?;
        x = process.denoise_to_x0(&x, &s, end, anchor)?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step: grid.steps(), tau: end });
    }
    let op = DegradationOperator::parametric_lowpass(phi, blind.sample_rate)?;
    let residual = op.apply(&x)?.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    report.push(ReportRow { step: grid.steps(), tau: end, residual_norm: residual, zeta: 0.0, phi: Some(phi) });
    Ok(BlindRestoration { x, phi, trajectory, bound_warning: 2 * at_bound > grid.steps(), report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::ProcessKind;
    use crate::score::{GaussianMixture, GmmScore};
    use nalgebra::DMatrix;

    #[test]
    fn rejects_projection_and_bad_init() {
        let process = DiffusionProcess::default_for(ProcessKind::Ve);
        let field = GmmScore::new(GaussianMixture::gaussian(vec![0.0; 8], DMatrix::identity(8, 8)).unwrap(), process);
        let y = [0.1; 8];
        let lik = LikelihoodConfig { mode: LikelihoodMode::Projection, ..LikelihoodConfig::default() };
        let cfg = BlindConfig::new(16_000);
        assert!(blind_restore(&y, &process, &field, &SamplerConfig::default(), &lik, &cfg, None).is_err());
        let bad = BlindConfig { init: LowpassParams { cutoff_hz: 9000.0, slope_db_per_octave: 20.0 }, ..cfg };
        assert!(blind_restore(
            &y,
            &process,
            &field,
            &SamplerConfig::default(),
            &LikelihoodConfig::default(),
            &bad,
            None
        )
        .is_err());
    }

    #[test]
    fn trajectory_covers_every_step() {
        let process = DiffusionProcess::default_for(ProcessKind::Ve);
        let field =
            GmmScore::new(GaussianMixture::gaussian(vec![0.0; 16], DMatrix::identity(16, 16)).unwrap(), process);
        let y: Vec<f64> = (0..16).map(|i| (i as f64 * 0.4).sin()).collect();
        let sampler = SamplerConfig { steps: 20, ..SamplerConfig::default() };
        let r = blind_restore(
            &y,
            &process,
            &field,
            &sampler,
            &LikelihoodConfig::default(),
            &BlindConfig::new(16_000),
            None,
        )
        .unwrap();
        assert_eq!(r.trajectory.len(), 20);
        assert_eq!(r.report.len(), 21);
        assert!(BlindConfig::new(16_000).bounds.contains(r.phi));
    }
}
