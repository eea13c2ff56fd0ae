//! Posterior sampling for inverse problems `y = A(x0) + n`.
//!
//! Two ways of enforcing the measurement are offered and never combined in
//! one run:
//!
//! - **DPS**: the prior score is augmented with the gradient of a likelihood
//!   evaluated at the one-step denoised estimate `x̂0(x_τ)`.
//! - **Projection**: after every reverse step the observed part of the state
//!   is replaced by a noised copy of the observation; the final estimate is
//!   projected onto the clean observation.

mod blind;
mod storm;

pub use blind::{blind_restore, BlindConfig, BlindRestoration};
pub use storm::{storm_restore, LinearPredictor, Predictor, SpectralGainPredictor, StormOutput};

use std::io::Write;

use crate::error::{check_len, Error, Result};
use crate::operator::{DegradationOperator, LowpassParams};
use crate::process::DiffusionProcess;
use crate::rng::{normal_vec, stream_rng, SeededRng};
use crate::score::{Conditioning, ScoreField};
use crate::signal::{compressed_cost_grad, Window, DEFAULT_HOP, DEFAULT_WINDOW};
use crate::solver::{discretize, em_update, guided, reverse_step_ode, OdeOrder, SamplerConfig, SolverKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LikelihoodMode {
    #[default]
    Dps,
    Projection,
    None,
}

impl LikelihoodMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dps" => Some(Self::Dps),
            "projection" => Some(Self::Projection),
            "none" => Some(Self::None),
            _ => None,
        }
    }
}

/// Domain in which the measurement residual is compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CostDomain {
    Waveform,
    /// Magnitude-compressed STFT, phase untouched.
    CompressedStft {
        window_len: usize,
        hop: usize,
        window: Window,
        exponent: f64,
    },
}

impl CostDomain {
    pub fn compressed_default() -> Self {
        Self::CompressedStft { window_len: DEFAULT_WINDOW, hop: DEFAULT_HOP, window: Window::Hann, exponent: 0.5 }
    }

    /// Cost `‖c(y) − c(z)‖²` and its gradient with respect to `z`.
    pub fn cost_grad(&self, z: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len(y.len(), z.len())?;
        match *self {
            Self::Waveform => {
                let diff: Vec<f64> = z.iter().zip(y).map(|(a, b)| a - b).collect();
                let cost = diff.iter().map(|d| d * d).sum();
                Ok((cost, diff.into_iter().map(|d| 2.0 * d).collect()))
            }
            Self::CompressedStft { window_len, hop, window, exponent } => {
                compressed_cost_grad(z, y, window_len, hop, window, exponent)
            }
        }
    }
}

/// Reference norm for the gradient-normalised likelihood term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZetaScale {
    /// The likelihood term has norm `zeta_prime`.
    #[default]
    Unit,
    /// The likelihood term has norm `zeta_prime·‖s‖`, tracking the prior
    /// score as it grows like `1/σ` late in sampling.
    PriorNorm,
}

impl ZetaScale {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unit" => Some(Self::Unit),
            "prior" => Some(Self::PriorNorm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodConfig {
    pub mode: LikelihoodMode,
    /// Target norm of the likelihood term when the noise level is unknown.
    pub zeta_prime: f64,
    pub zeta_scale: ZetaScale,
    /// Known measurement noise standard deviation.
    pub noise_std: Option<f64>,
    pub cost: CostDomain,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        Self {
            mode: LikelihoodMode::Dps,
            zeta_prime: 0.3,
            zeta_scale: ZetaScale::Unit,
            noise_std: None,
            cost: CostDomain::Waveform,
        }
    }
}

impl LikelihoodConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta_prime > 0.0 && self.zeta_prime.is_finite()) {
            return Err(Error::invalid(format!("zeta_prime must be positive, got {}", self.zeta_prime)));
        }
        if let Some(s) = self.noise_std {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("noise_std must be positive, got {s}")));
            }
        }
        if let CostDomain::CompressedStft { exponent, .. } = self.cost {
            if !(exponent > 0.0 && exponent <= 1.0) {
                return Err(Error::invalid(format!("compression exponent {exponent} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Posterior score at one state with its ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorScore {
    pub score: Vec<f64>,
    pub prior: Vec<f64>,
    pub likelihood: Vec<f64>,
    pub x0_hat: Vec<f64>,
    pub zeta: f64,
    /// `‖c(y) − c(A(x̂0))‖`.
    pub residual_norm: f64,
}

/// Prior score plus the DPS likelihood term `−ζ∇ₓ‖c(y) − c(A(x̂0(x)))‖²`.
///
/// With a known noise level `ζ = 1/(2σ_y²)`, the Gaussian log-likelihood
/// weight; otherwise `ζ` rescales the gradient to norm `zeta_prime` times
/// the reference chosen by `zeta_scale`.
#[allow(clippy::too_many_arguments)]
pub fn posterior_score<F: ScoreField + ?Sized>(
    field: &F,
    process: &DiffusionProcess,
    x: &[f64],
    tau: f64,
    ctx: Conditioning<'_>,
    y: &[f64],
    op: &DegradationOperator,
    cfg: &LikelihoodConfig,
) -> Result<PosteriorScore> {
    check_len(x.len(), y.len())?;
    let prior = field.evaluate(x, tau, ctx)?;
    let anchor = ctx.y.filter(|_| process.requires_y());
    let x0_hat = process.denoise_to_x0(x, &prior, tau, anchor)?;
    let ax = op.apply(&x0_hat)?;
    let (cost, d_ax) = cfg.cost.cost_grad(&ax, y)?;
    let d_x0 = op.grad_x(&x0_hat, &d_ax)?;
    // x̂0 = (x + σ²s(x) − b·y)/a, so ∂x̂0/∂x = (I + σ²∂s/∂x)/a.
    let c = process.coefficients(tau);
    let jv = field.vjp(x, tau, ctx, &d_x0)?;
    let var = c.std * c.std;
    let grad: Vec<f64> = d_x0.iter().zip(&jv).map(|(g, j)| (g + var * j) / c.a).collect();
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let zeta = match cfg.noise_std {
        Some(s) => 0.5 / (s * s),
        None => {
            let reference = match cfg.zeta_scale {
                ZetaScale::Unit => 1.0,
                ZetaScale::PriorNorm => prior.iter().map(|p| p * p).sum::<f64>().sqrt(),
            };
            cfg.zeta_prime * reference / (grad_norm + 1e-12)
        }
    };
    let likelihood: Vec<f64> = grad.iter().map(|g| -zeta * g).collect();
    if likelihood.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step: 0, tau });
    }
    let score = prior.iter().zip(&likelihood).map(|(p, l)| p + l).collect();
    Ok(PosteriorScore { score, prior, likelihood, x0_hat, zeta, residual_norm: cost.sqrt() })
}

/// A prior field turned into a posterior field by the DPS likelihood term.
#[derive(Debug, Clone)]
pub struct PosteriorField<'a, F: ?Sized> {
    pub prior: &'a F,
    pub process: &'a DiffusionProcess,
    pub y: &'a [f64],
    pub op: &'a DegradationOperator,
    pub cfg: &'a LikelihoodConfig,
}

impl<F: ScoreField + ?Sized> PosteriorField<'_, F> {
    pub fn evaluate_full(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> Result<PosteriorScore> {
        posterior_score(self.prior, self.process, x, tau, ctx, self.y, self.op, self.cfg)
    }
}

impl<F: ScoreField + ?Sized> ScoreField for PosteriorField<'_, F> {
    fn evaluate(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> Result<Vec<f64>> {
        Ok(self.evaluate_full(x, tau, ctx)?.score)
    }

    fn vjp(&self, _x: &[f64], _tau: f64, _ctx: Conditioning<'_>, _v: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Unsupported { op: "vjp", kind: "dps posterior" })
    }
}

/// Replace the observed part of `x` by the observation.
///
/// Closed forms exist for the identity, masks and the brick-wall lowpass.
pub fn project(x: &[f64], y: &[f64], op: &DegradationOperator) -> Result<Vec<f64>> {
    check_len(x.len(), y.len())?;
    match op {
        DegradationOperator::Identity => Ok(y.to_vec()),
        DegradationOperator::Mask(m) => {
            check_len(m.len(), x.len())?;
            Ok(x.iter().zip(y).zip(m).map(|((xi, yi), mi)| if *mi == 1.0 { *yi } else { *xi }).collect())
        }
        DegradationOperator::IdealLowpass { .. } => {
            let px = op.apply(x)?;
            let py = op.apply(y)?;
            Ok(x.iter().zip(px).zip(py).map(|((xi, pxi), pyi)| xi - pxi + pyi).collect())
        }
        _ => Err(Error::Unsupported { op: "project", kind: op.kind_name() }),
    }
}

/// One row of a restoration report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    pub tau: f64,
    pub residual_norm: f64,
    pub zeta: f64,
    pub phi: Option<LowpassParams>,
}

pub fn write_report_csv<W: Write>(w: &mut W, rows: &[ReportRow]) -> Result<()> {
    let blind = rows.iter().any(|r| r.phi.is_some());
    if blind {
        writeln!(w, "step,tau,residual_norm,zeta,cutoff_hz,slope_db_per_octave")?;
    } else {
        writeln!(w, "step,tau,residual_norm,zeta")?;
    }
    for r in rows {
        write!(w, "{},{:.17e},{:.17e},{:.17e}", r.step, r.tau, r.residual_norm, r.zeta)?;
        match (blind, r.phi) {
            (true, Some(p)) => writeln!(w, ",{:.17e},{:.17e}", p.cutoff_hz, p.slope_db_per_octave)?,
            (true, None) => writeln!(w, ",,")?,
            _ => writeln!(w)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Restoration {
    pub x: Vec<f64>,
    pub report: Vec<ReportRow>,
}

fn residual_norm(op: &DegradationOperator, x: &[f64], y: &[f64]) -> Result<f64> {
    let ax = op.apply(x)?;
    Ok(ax.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

/// Score returned verbatim regardless of the query point; lets the solver
/// step functions consume a score computed elsewhere.
struct Fixed<'a>(&'a [f64]);

impl ScoreField for Fixed<'_> {
    fn evaluate(&self, _x: &[f64], _tau: f64, _ctx: Conditioning<'_>) -> Result<Vec<f64>> {
        Ok(self.0.to_vec())
    }

    fn vjp(&self, _x: &[f64], _tau: f64, _ctx: Conditioning<'_>, v: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; v.len()])
    }
}

/// State shared by the plain and blind restoration loops.
pub(crate) struct StepInput<'a> {
    pub step: usize,
    pub tau: f64,
    pub next: f64,
    pub last: bool,
    pub ctx: Conditioning<'a>,
}

/// One reverse step with a precomputed score at `(x, τ)`. Heun's corrector
/// re-evaluates `field` at the predicted point.
pub(crate) fn reverse_step<F: ScoreField + ?Sized>(
    process: &DiffusionProcess,
    field: &F,
    cfg: &SamplerConfig,
    x: &[f64],
    score: &[f64],
    input: &StepInput<'_>,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let dtau = input.next - input.tau;
    let fixed = Fixed(score);
    let out = match cfg.solver {
        SolverKind::Em => {
            let eps = normal_vec(rng, x.len());
            em_update(process, &fixed, x, input.tau, dtau, input.ctx, (!input.last).then_some(eps.as_slice()))?
        }
        SolverKind::OdeEuler => reverse_step_ode(process, &fixed, x, input.tau, dtau, input.ctx, OdeOrder::Euler)?,
        SolverKind::OdeHeun => {
            let predicted = reverse_step_ode(process, &fixed, x, input.tau, dtau, input.ctx, OdeOrder::Euler)?;
            let s1 = field.evaluate(&predicted, input.next, input.ctx)?;
            let (f0, g0) = process.drift_diffusion(x, input.tau, input.ctx.y.filter(|_| process.requires_y()))?;
            let (f1, g1) =
                process.drift_diffusion(&predicted, input.next, input.ctx.y.filter(|_| process.requires_y()))?;
            (0..x.len())
                .map(|i| {
                    let v0 = f0[i] - 0.5 * g0 * g0 * score[i];
                    let v1 = f1[i] - 0.5 * g1 * g1 * s1[i];
                    x[i] + 0.5 * (v0 + v1) * dtau
                })
                .collect()
        }
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step: input.step, tau: input.next });
    }
    Ok(out)
}

/// Noised observation consistent with the forward kernel at `τ`.
fn noised_observation(
    process: &DiffusionProcess,
    y: &[f64],
    anchor: Option<&[f64]>,
    tau: f64,
    rng: &mut SeededRng,
) -> Vec<f64> {
    let c = process.coefficients(tau);
    let eps = normal_vec(rng, y.len());
    (0..y.len()).map(|i| c.a * y[i] + anchor.map_or(0.0, |a| c.b * a[i]) + c.std * eps[i]).collect()
}

/// Posterior sampling for a known operator; `chain` selects the noise stream.
#[allow(clippy::too_many_arguments)]
pub fn restore_chain<F: ScoreField + ?Sized>(
    y: &[f64],
    op: &DegradationOperator,
    process: &DiffusionProcess,
    field: &F,
    sampler: &SamplerConfig,
    lik: &LikelihoodConfig,
    cond: Option<&[f64]>,
    chain: u64,
) -> Result<Restoration> {
    lik.validate()?;
    if y.is_empty() {
        return Err(Error::EmptySignal);
    }
    if lik.mode == LikelihoodMode::Projection {
        // Fail before sampling if the operator has no closed-form projection.
        project(y, y, op)?;
    }
    let anchor = process.requires_y().then_some(y);
    let ctx = Conditioning { y: anchor, cond };
    let field = guided(field, sampler, ctx);
    let grid = discretize(process, sampler.steps, sampler.scheme)?;
    let taus = grid.taus();
    let mut rng = stream_rng(sampler.seed, "sample", chain);
    let mut x = process.prior_sample(y.len(), anchor, &mut rng)?;
    let posterior = PosteriorField { prior: &field, process, y, op, cfg: lik };
    let mut report = Vec::with_capacity(grid.steps() + 1);

    for step in 0..grid.steps() {
        let input = StepInput { step, tau: taus[step], next: taus[step + 1], last: step + 1 == grid.steps(), ctx };
        match lik.mode {
            LikelihoodMode::Dps => {
                let ps = posterior.evaluate_full(&x, input.tau, ctx)?;
                report.push(ReportRow {
                    step,
                    tau: input.tau,
                    residual_norm: ps.residual_norm,
                    zeta: ps.zeta,
                    phi: None,
                });
                x = reverse_step(process, &posterior, sampler, &x, &ps.score, &input, &mut rng)?;
            }
            LikelihoodMode::Projection | LikelihoodMode::None => {
                let s = field.evaluate(&x, input.tau, ctx)?;
                report.push(ReportRow {
                    step,
                    tau: input.tau,
                    residual_norm: residual_norm(op, &x, y)?,
                    zeta: 0.0,
                    phi: None,
                });
                x = reverse_step(process, &field, sampler, &x, &s, &input, &mut rng)?;
                if lik.mode == LikelihoodMode::Projection {
                    let target = noised_observation(process, y, anchor, input.next, &mut rng);
                    x = project(&x, &target, op)?;
                }
            }
        }
    }

    let end = process.tau_eps();
    if sampler.final_denoise {
        let s = field.evaluate(&x, end, ctx)?;
        x = process.denoise_to_x0(&x, &s, end, anchor)?;
    }
    if lik.mode == LikelihoodMode::Projection {
        x = project(&x, y, op)?;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step: grid.steps(), tau: end });
    }
    report.push(ReportRow {
        step: grid.steps(),
        tau: end,
        residual_norm: residual_norm(op, &x, y)?,
        zeta: 0.0,
        phi: None,
    });
    Ok(Restoration { x, report })
}

#[allow(clippy::too_many_arguments)]
pub fn restore<F: ScoreField + ?Sized>(
    y: &[f64],
    op: &DegradationOperator,
    process: &DiffusionProcess,
    field: &F,
    sampler: &SamplerConfig,
    lik: &LikelihoodConfig,
    cond: Option<&[f64]>,
) -> Result<Restoration> {
    restore_chain(y, op, process, field, sampler, lik, cond, 0)
}
