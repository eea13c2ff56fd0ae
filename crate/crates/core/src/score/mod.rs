//! Score fields.
//!
//! A [`ScoreField`] evaluates `s(x, τ, c) ≈ ∇ₓ log p_τ(x | c)` and the
//! transposed Jacobian-vector product `(∂s/∂x)ᵀ v` needed to differentiate
//! through one-step denoising. Two realizations ship with the crate: the exact
//! score of a diffused Gaussian mixture ([`GmmScore`]) and a small learned
//! network ([`MlpScoreModel`]).

mod framed;
mod gmm;
mod mlp;
mod train;

pub use framed::FramedScore;
pub use gmm::{GaussianMixture, GmmScore};
pub use mlp::{Mlp, MlpScoreModel};
pub use train::{
    draw_dsm_batch, dsm_loss, dsm_objective, train_score, Adam, DsmDraw, DsmLoss, Example, LossWeighting, NoisyPairs,
    TrainConfig, TrainReport, TrainingData,
};

use crate::error::{check_len, Result};

/// Side information passed to a score field.
///
/// `y` is the degraded observation anchoring task-adapted processes; `cond`
/// is a free conditioning vector (zeroed for the unconditional estimate).
#[derive(Debug, Clone, Copy, Default)]
pub struct Conditioning<'a> {
    pub y: Option<&'a [f64]>,
    pub cond: Option<&'a [f64]>,
}

impl<'a> Conditioning<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_y(y: &'a [f64]) -> Self {
        Self { y: Some(y), cond: None }
    }

    pub fn with_cond(cond: &'a [f64]) -> Self {
        Self { y: None, cond: Some(cond) }
    }
}

pub trait ScoreField: Sync {
    fn evaluate(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> Result<Vec<f64>>;

    /// `(∂s/∂x)ᵀ v` at `(x, τ)`.
    fn vjp(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>, v: &[f64]) -> Result<Vec<f64>>;
}

impl<F: ScoreField + ?Sized> ScoreField for &F {
    fn evaluate(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> Result<Vec<f64>> {
        (**self).evaluate(x, tau, ctx)
    }

    fn vjp(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>, v: &[f64]) -> Result<Vec<f64>> {
        (**self).vjp(x, tau, ctx, v)
    }
}

impl<F: ScoreField + ?Sized> ScoreField for Box<F> {
    fn evaluate(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> Result<Vec<f64>> {
        (**self).evaluate(x, tau, ctx)
    }

    fn vjp(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>, v: &[f64]) -> Result<Vec<f64>> {
        (**self).vjp(x, tau, ctx, v)
    }
}

pub fn score_vjp<F: ScoreField + ?Sized>(
    field: &F,
    x: &[f64],
    tau: f64,
    ctx: Conditioning<'_>,
    v: &[f64],
) -> Result<Vec<f64>> {
    check_len(x.len(), v.len())?;
    field.vjp(x, tau, ctx, v)
}

/// Classifier-free guidance mix `w·s_cond + (1 − w)·s_uncond`.
pub fn cfg_mix(s_cond: &[f64], s_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    check_len(s_cond.len(), s_uncond.len())?;
    Ok(s_cond.iter().zip(s_uncond).map(|(c, u)| w * c + (1.0 - w) * u).collect())
}

/// Guided score from a single conditional field.
///
/// The unconditional estimate is the same field with the conditioning vector
/// zeroed, matching conditioning dropout at training time.
#[derive(Debug, Clone)]
pub struct GuidedScore<F> {
    pub field: F,
    pub weight: f64,
}

impl<F: ScoreField> GuidedScore<F> {
    pub fn new(field: F, weight: f64) -> Self {
        Self { field, weight }
    }
}

impl<F: ScoreField> ScoreField for GuidedScore<F> {
    fn evaluate(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> Result<Vec<f64>> {
        let Some(cond) = ctx.cond else {
            return self.field.evaluate(x, tau, ctx);
        };
        let zeros = vec![0.0; cond.len()];
        let s_cond = self.field.evaluate(x, tau, ctx)?;
        let s_uncond = self.field.evaluate(x, tau, Conditioning { cond: Some(&zeros), ..ctx })?;
        cfg_mix(&s_cond, &s_uncond, self.weight)
    }

    fn vjp(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>, v: &[f64]) -> Result<Vec<f64>> {
        let Some(cond) = ctx.cond else {
            return self.field.vjp(x, tau, ctx, v);
        };
        let zeros = vec![0.0; cond.len()];
        let j_cond = self.field.vjp(x, tau, ctx, v)?;
        let j_uncond = self.field.vjp(x, tau, Conditioning { cond: Some(&zeros), ..ctx }, v)?;
        cfg_mix(&j_cond, &j_uncond, self.weight)
    }
}

/// Mixes two separately given fields, e.g. analytic conditional and
/// unconditional densities.
#[derive(Debug, Clone)]
pub struct MixedScore<C, U> {
    pub conditional: C,
    pub unconditional: U,
    pub weight: f64,
}

impl<C: ScoreField, U: ScoreField> ScoreField for MixedScore<C, U> {
    fn evaluate(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> Result<Vec<f64>> {
        let c = self.conditional.evaluate(x, tau, ctx)?;
        let u = self.unconditional.evaluate(x, tau, ctx)?;
        cfg_mix(&c, &u, self.weight)
    }

    fn vjp(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>, v: &[f64]) -> Result<Vec<f64>> {
        let c = self.conditional.vjp(x, tau, ctx, v)?;
        let u = self.unconditional.vjp(x, tau, ctx, v)?;
        cfg_mix(&c, &u, self.weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{DiffusionProcess, ProcessKind};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    #[test]
    fn mix_endpoints() {
        let c = [1.0, 2.0];
        let u = [-3.0, 0.5];
        assert_eq!(cfg_mix(&c, &u, 0.0).unwrap(), u.to_vec());
        assert_eq!(cfg_mix(&c, &u, 1.0).unwrap(), c.to_vec());
        assert!(cfg_mix(&c, &[1.0], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn mix_is_affine_in_weight(
            c in proptest::collection::vec(-10.0f64..10.0, 3),
            u in proptest::collection::vec(-10.0f64..10.0, 3),
            w1 in -2.0f64..3.0,
            w2 in -2.0f64..3.0,
        ) {
            let lhs: Vec<f64> = cfg_mix(&c, &u, w1).unwrap().iter().zip(cfg_mix(&c, &u, w2).unwrap()).map(|(a, b)| a + b).collect();
            let rhs = cfg_mix(&c, &u, 0.5 * (w1 + w2)).unwrap();
            for (l, r) in lhs.iter().zip(rhs) {
                prop_assert!((l - 2.0 * r).abs() < 1e-9);
            }
        }
    }

    /// Sweeping the guidance weight moves the one-step denoised estimate
    /// monotonically from the unconditional to the conditional estimate.
    #[test]
    fn guidance_sweep_moves_denoised_estimate_monotonically() {
        let process = DiffusionProcess::default_for(ProcessKind::Ve);
        let uncond = GmmScore::new(
            GaussianMixture::diagonal(vec![0.5, 0.5], vec![vec![-2.0, 0.0], vec![2.0, 0.0]], vec![vec![0.3, 0.3]; 2])
                .unwrap(),
            process,
        );
        let cond =
            GmmScore::new(GaussianMixture::gaussian(vec![2.0, 1.0], DMatrix::identity(2, 2) * 0.3).unwrap(), process);
        let x = [0.5, 0.2];
        let tau = 0.6;
        let denoise = |w: f64| {
            let mixed = MixedScore { conditional: &cond, unconditional: &uncond, weight: w };
            let s = mixed.evaluate(&x, tau, Conditioning::none()).unwrap();
            process.denoise_to_x0(&x, &s, tau, None).unwrap()
        };
        let (e0, e1) = (denoise(0.0), denoise(1.0));
        let dir = [e1[0] - e0[0], e1[1] - e0[1]];
        let proj = |e: &[f64]| (e[0] - e0[0]) * dir[0] + (e[1] - e0[1]) * dir[1];
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=20 {
            let p = proj(&denoise(i as f64 / 20.0));
            assert!(p > prev);
            prev = p;
        }
        assert!((prev - (dir[0] * dir[0] + dir[1] * dir[1])).abs() < 1e-9);
    }
}
