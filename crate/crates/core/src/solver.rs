//! Time grids and reverse-time integration.
//!
//! The reverse loop starts from [`DiffusionProcess::prior_sample`], walks the
//! grid from the sampling start down to `tau_eps` with either the reverse SDE
//! (Euler–Maruyama) or the probability-flow ODE, and finishes with one
//! Tweedie denoising step. The final step never injects noise.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::process::{DiffusionProcess, ForwardSde};
use crate::rng::{normal_vec, stream_rng, SeededRng};
use crate::score::{Conditioning, GuidedScore, ScoreField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeScheme {
    #[default]
    Uniform,
    /// Geometric spacing of the noise level `σ(τ)`.
    Log,
}

impl TimeScheme {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uniform" => Some(Self::Uniform),
            "log" => Some(Self::Log),
            _ => None,
        }
    }
}

/// Strictly decreasing times `τ_0 > τ_1 > … > τ_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    taus: Vec<f64>,
    scheme: TimeScheme,
}

impl TimeGrid {
    /// Equally spaced grid from `start` down to `end`.
    pub fn uniform(start: f64, end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("a time grid needs at least one step"));
        }
        if !(start > end && end > 0.0 && start.is_finite()) {
            return Err(Error::invalid(format!("invalid time range [{end}, {start}]")));
        }
        let h = (start - end) / steps as f64;
        let mut taus: Vec<f64> = (0..steps).map(|i| start - i as f64 * h).collect();
        taus.push(end);
        Ok(Self { taus, scheme: TimeScheme::Uniform })
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn scheme(&self) -> TimeScheme {
        self.scheme
    }

    pub fn steps(&self) -> usize {
        self.taus.len() - 1
    }
}

/// Grid for `process` from its sampling start down to `tau_eps`.
pub fn discretize(process: &DiffusionProcess, steps: usize, scheme: TimeScheme) -> Result<TimeGrid> {
    let (start, end) = (process.sampling_start(), process.tau_eps());
    match scheme {
        TimeScheme::Uniform => TimeGrid::uniform(start, end, steps),
        TimeScheme::Log => {
            if steps == 0 {
                return Err(Error::invalid("a time grid needs at least one step"));
            }
            let (hi, lo) = (process.kernel_std(start).ln(), process.kernel_std(end).ln());
            let mut taus = vec![start];
            for i in 1..steps {
                let sigma = (hi + (lo - hi) * i as f64 / steps as f64).exp();
                taus.push(process.time_for_std(sigma)?);
            }
            taus.push(end);
            if taus.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::invalid(format!("log grid with {steps} steps is not strictly decreasing")));
            }
            Ok(TimeGrid { taus, scheme })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    #[default]
    Em,
    OdeEuler,
    OdeHeun,
}

impl SolverKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "em" => Some(Self::Em),
            "ode" | "ode_euler" => Some(Self::OdeEuler),
            "heun" | "ode_heun" => Some(Self::OdeHeun),
            _ => None,
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            Self::Em => 50,
            Self::OdeEuler | Self::OdeHeun => 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeOrder {
    Euler,
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub scheme: TimeScheme,
    pub solver: SolverKind,
    /// Classifier-free guidance weight; used only when a conditioning vector
    /// is supplied.
    pub guidance: f64,
    pub seed: u64,
    /// Apply one Tweedie step at `tau_eps`.
    pub final_denoise: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::for_solver(SolverKind::Em)
    }
}

impl SamplerConfig {
    pub fn for_solver(solver: SolverKind) -> Self {
        Self {
            steps: solver.default_steps(),
            scheme: TimeScheme::Uniform,
            solver,
            guidance: 1.0,
            seed: 0,
            final_denoise: true,
        }
    }
}

fn drift_term<S: ForwardSde + ?Sized>(sde: &S, x: &[f64], tau: f64, y: Option<&[f64]>) -> Result<(Vec<f64>, f64)> {
    sde.drift_diffusion(x, tau, y.filter(|_| sde.requires_y()))
}

/// Reverse-SDE increment with explicit noise `ε` (`None` for a noise-free step).
pub fn em_update<S, F>(
    sde: &S,
    field: &F,
    x: &[f64],
    tau: f64,
    dtau: f64,
    ctx: Conditioning<'_>,
    noise: Option<&[f64]>,
) -> Result<Vec<f64>>
where
    S: ForwardSde + ?Sized,
    F: ScoreField + ?Sized,
{
    if !(dtau < 0.0) {
        return Err(Error::invalid(format!("reverse steps need dtau < 0, got {dtau}")));
    }
    let (f, g) = drift_term(sde, x, tau, ctx.y)?;
    let g2 = g * g;
    let mut out: Vec<f64> = if g2 == 0.0 {
        x.iter().zip(&f).map(|(xi, fi)| xi + fi * dtau).collect()
    } else {
        let s = field.evaluate(x, tau, ctx)?;
        check_len(x.len(), s.len())?;
        x.iter().zip(&f).zip(&s).map(|((xi, fi), si)| xi + (fi - g2 * si) * dtau).collect()
    };
    if let Some(eps) = noise {
        check_len(x.len(), eps.len())?;
        let scale = g * (-dtau).sqrt();
        for (o, e) in out.iter_mut().zip(eps) {
            *o += scale * e;
        }
    }
    Ok(out)
}

/// One Euler–Maruyama step of the reverse SDE.
pub fn reverse_step_em<S, F, R>(
    sde: &S,
    field: &F,
    x: &[f64],
    tau: f64,
    dtau: f64,
    ctx: Conditioning<'_>,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    S: ForwardSde + ?Sized,
    F: ScoreField + ?Sized,
    R: Rng + ?Sized,
{
    let eps = normal_vec(rng, x.len());
    em_update(sde, field, x, tau, dtau, ctx, Some(&eps))
}

fn ode_velocity<S, F>(sde: &S, field: &F, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> Result<Vec<f64>>
where
    S: ForwardSde + ?Sized,
    F: ScoreField + ?Sized,
{
    let (f, g) = drift_term(sde, x, tau, ctx.y)?;
    let half_g2 = 0.5 * g * g;
    if half_g2 == 0.0 {
        return Ok(f);
    }
    let s = field.evaluate(x, tau, ctx)?;
    check_len(x.len(), s.len())?;
    Ok(f.iter().zip(&s).map(|(fi, si)| fi - half_g2 * si).collect())
}

/// One step of the probability-flow ODE `dx = [f − ½g²s]dτ`.
pub fn reverse_step_ode<S, F>(
    sde: &S,
    field: &F,
    x: &[f64],
    tau: f64,
    dtau: f64,
    ctx: Conditioning<'_>,
    order: OdeOrder,
) -> Result<Vec<f64>>
where
    S: ForwardSde + ?Sized,
    F: ScoreField + ?Sized,
{
    if !(dtau < 0.0) {
        return Err(Error::invalid(format!("reverse steps need dtau < 0, got {dtau}")));
    }
    let v0 = ode_velocity(sde, field, x, tau, ctx)?;
    let euler: Vec<f64> = x.iter().zip(&v0).map(|(xi, vi)| xi + vi * dtau).collect();
    if order == OdeOrder::Euler {
        return Ok(euler);
    }
    let v1 = ode_velocity(sde, field, &euler, tau + dtau, ctx)?;
    Ok(x.iter().zip(v0.iter().zip(&v1)).map(|(xi, (a, b))| xi + 0.5 * (a + b) * dtau).collect())
}

/// One row of a sampling trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub tau: f64,
    pub sigma: f64,
    pub norm: f64,
}

pub fn write_trace_csv<W: Write>(w: &mut W, rows: &[TraceRow]) -> Result<()> {
    writeln!(w, "step,tau,sigma,state_norm")?;
    for r in rows {
        writeln!(w, "{},{:.17e},{:.17e},{:.17e}", r.step, r.tau, r.sigma, r.norm)?;
    }
    Ok(())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Run the reverse loop from a given initial state.
///
/// Noise is drawn from `rng`; the trace, when requested, records the state
/// before every step and after the last one.
#[allow(clippy::too_many_arguments)]
pub fn integrate<F: ScoreField + ?Sized>(
    process: &DiffusionProcess,
    field: &F,
    cfg: &SamplerConfig,
    x_start: Vec<f64>,
    ctx: Conditioning<'_>,
    rng: &mut SeededRng,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<Vec<f64>> {
    let grid = discretize(process, cfg.steps, cfg.scheme)?;
    let taus = grid.taus();
    let mut x = x_start;
    for step in 0..grid.steps() {
        let (tau, next) = (taus[step], taus[step + 1]);
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceRow { step, tau, sigma: process.kernel_std(tau), norm: norm(&x) });
        }
        let dtau = next - tau;
        let last = step + 1 == grid.steps();
        x = match cfg.solver {
            SolverKind::Em => {
                let eps = normal_vec(rng, x.len());
                em_update(process, field, &x, tau, dtau, ctx, (!last).then_some(eps.as_slice()))?
            }
            SolverKind::OdeEuler => reverse_step_ode(process, field, &x, tau, dtau, ctx, OdeOrder::Euler)?,
            SolverKind::OdeHeun => reverse_step_ode(process, field, &x, tau, dtau, ctx, OdeOrder::Heun)?,
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step, tau: next });
        }
    }
    let end = process.tau_eps();
    if cfg.final_denoise {
        let s = field.evaluate(&x, end, ctx)?;
        x = process.denoise_to_x0(&x, &s, end, ctx.y.filter(|_| process.requires_y()))?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: grid.steps(), tau: end });
        }
    }
    if let Some(t) = trace {
        t.push(TraceRow { step: grid.steps(), tau: end, sigma: process.kernel_std(end), norm: norm(&x) });
    }
    Ok(x)
}

pub(crate) fn guided<'f, F: ScoreField + ?Sized>(
    field: &'f F,
    cfg: &SamplerConfig,
    ctx: Conditioning<'_>,
) -> GuidedScore<&'f F> {
    // Weight 1 is the plain conditional field.
    let weight = if ctx.cond.is_some() { cfg.guidance } else { 1.0 };
    GuidedScore::new(field, weight)
}

/// Draw one sample of length `len` using chain stream `chain`.
pub fn sample_chain<F: ScoreField + ?Sized>(
    process: &DiffusionProcess,
    field: &F,
    cfg: &SamplerConfig,
    len: usize,
    ctx: Conditioning<'_>,
    chain: u64,
    trace: Option<&mut Vec<TraceRow>>,
) -> Result<Vec<f64>> {
    if cfg.steps == 0 {
        return Err(Error::invalid("sampler needs at least one step"));
    }
    let y = ctx.y.filter(|_| process.requires_y());
    let mut rng = stream_rng(cfg.seed, "sample", chain);
    let start = process.prior_sample(len, y, &mut rng)?;
    integrate(process, &guided(field, cfg, ctx), cfg, start, ctx, &mut rng, trace)
}

pub fn sample<F: ScoreField + ?Sized>(
    process: &DiffusionProcess,
    field: &F,
    cfg: &SamplerConfig,
    len: usize,
    ctx: Conditioning<'_>,
) -> Result<Vec<f64>> {
    sample_chain(process, field, cfg, len, ctx, 0, None)
}

/// Independent chains `0..chains`, run in parallel; results are ordered by
/// chain index and do not depend on the thread count.
pub fn sample_many<F: ScoreField + ?Sized>(
    process: &DiffusionProcess,
    field: &F,
    cfg: &SamplerConfig,
    len: usize,
    ctx: Conditioning<'_>,
    chains: usize,
) -> Result<Vec<Vec<f64>>> {
    (0..chains as u64).into_par_iter().map(|c| sample_chain(process, field, cfg, len, ctx, c, None)).collect()
}
