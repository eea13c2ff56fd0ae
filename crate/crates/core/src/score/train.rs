//! Denoising score matching.

use ndarray::Array2;
use rand::Rng;

use crate::error::{check_len, Error, Result};
use crate::process::DiffusionProcess;
use crate::rng::{normal_vec, stream_rng, SeededRng};
use crate::score::{Conditioning, GaussianMixture, MlpScoreModel, ScoreField};

/// One training example: clean signal, optional observation and conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x0: Vec<f64>,
    pub y: Option<Vec<f64>>,
    pub cond: Option<Vec<f64>>,
}

impl Example {
    pub fn clean(x0: Vec<f64>) -> Self {
        Self { x0, y: None, cond: None }
    }
}

/// Source of training examples.
pub trait TrainingData: Sync {
    fn dim(&self) -> usize;

    fn cond_dim(&self) -> usize {
        0
    }

    fn draw(&self, rng: &mut SeededRng) -> Example;
}

impl TrainingData for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn draw(&self, rng: &mut SeededRng) -> Example {
        Example::clean(self.sample(rng))
    }
}

impl<T: TrainingData + ?Sized> TrainingData for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn cond_dim(&self) -> usize {
        (**self).cond_dim()
    }

    fn draw(&self, rng: &mut SeededRng) -> Example {
        (**self).draw(rng)
    }
}

/// Paired examples for task-adapted processes: `y = x0 + σ·ε` with white
/// Gaussian `ε`.
#[derive(Debug, Clone)]
pub struct NoisyPairs<D> {
    pub clean: D,
    pub noise_std: f64,
}

impl<D: TrainingData> TrainingData for NoisyPairs<D> {
    fn dim(&self) -> usize {
        self.clean.dim()
    }

    fn cond_dim(&self) -> usize {
        self.clean.cond_dim()
    }

    fn draw(&self, rng: &mut SeededRng) -> Example {
        let mut ex = self.clean.draw(rng);
        let noise = normal_vec(rng, ex.x0.len());
        ex.y = Some(ex.x0.iter().zip(noise).map(|(x, e)| x + self.noise_std * e).collect());
        ex
    }
}

/// A finite dataset, sampled uniformly with replacement.
impl TrainingData for [Example] {
    fn dim(&self) -> usize {
        self.first().map_or(0, |e| e.x0.len())
    }

    fn cond_dim(&self) -> usize {
        self.first().and_then(|e| e.cond.as_ref()).map_or(0, Vec::len)
    }

    fn draw(&self, rng: &mut SeededRng) -> Example {
        self[rng.gen_range(0..self.len())].clone()
    }
}

impl TrainingData for Vec<Example> {
    fn dim(&self) -> usize {
        self.as_slice().dim()
    }

    fn cond_dim(&self) -> usize {
        self.as_slice().cond_dim()
    }

    fn draw(&self, rng: &mut SeededRng) -> Example {
        self.as_slice().draw(rng)
    }
}

/// Rule for `λ(τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossWeighting {
    /// `λ = σ(τ)²`
    #[default]
    Variance,
    Unit,
}

impl LossWeighting {
    fn weight(self, std: f64) -> f64 {
        match self {
            Self::Variance => std * std,
            Self::Unit => 1.0,
        }
    }
}

/// A noised example with its regression target `−(x_τ − μ)/σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct DsmDraw {
    pub x_tau: Vec<f64>,
    pub tau: f64,
    pub std: f64,
    pub target: Vec<f64>,
    pub y: Option<Vec<f64>>,
    pub cond: Option<Vec<f64>>,
}

impl DsmDraw {
    fn ctx(&self) -> Conditioning<'_> {
        Conditioning { y: self.y.as_deref(), cond: self.cond.as_deref() }
    }
}

/// Noise every example at an independent `τ ~ U(tau_eps, τ_max)`, where
/// `τ_max` is the sampling start of the process.
pub fn draw_dsm_batch(process: &DiffusionProcess, examples: &[Example], rng: &mut SeededRng) -> Result<Vec<DsmDraw>> {
    if examples.is_empty() {
        return Err(Error::EmptySignal);
    }
    examples
        .iter()
        .map(|ex| {
            let tau = rng.gen_range(process.tau_eps()..=process.sampling_start());
            let m = process.kernel_moments(&ex.x0, ex.y.as_deref(), tau)?;
            let x_tau = process.sample_kernel(&ex.x0, ex.y.as_deref(), tau, rng)?;
            let var = m.std * m.std;
            let target = x_tau.iter().zip(&m.mean).map(|(x, mu)| -(x - mu) / var).collect();
            Ok(DsmDraw { x_tau, tau, std: m.std, target, y: ex.y.clone(), cond: ex.cond.clone() })
        })
        .collect()
}

/// `mean_i λ(τ_i)·‖s(x_τ,i, τ_i) − target_i‖²` for any score field.
pub fn dsm_objective<F: ScoreField + ?Sized>(field: &F, draws: &[DsmDraw], weighting: LossWeighting) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::EmptySignal);
    }
    let mut total = 0.0;
    for d in draws {
        let s = field.evaluate(&d.x_tau, d.tau, d.ctx())?;
        check_len(d.target.len(), s.len())?;
        let sq: f64 = s.iter().zip(&d.target).map(|(a, b)| (a - b).powi(2)).sum();
        total += weighting.weight(d.std) * sq;
    }
    Ok(total / draws.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsmLoss {
    pub loss: f64,
    /// Gradient in [`crate::score::Mlp::params`] layout.
    pub grad: Vec<f64>,
}

/// Loss and exact parameter gradient of a network on a fixed set of draws.
pub fn dsm_loss(model: &MlpScoreModel, draws: &[DsmDraw], weighting: LossWeighting) -> Result<DsmLoss> {
    if draws.is_empty() {
        return Err(Error::EmptySignal);
    }
    let net = model.net();
    let d = model.x_dim();
    let n = draws.len();
    let mut input = Array2::zeros((n, net.input_dim()));
    for (mut row, draw) in input.rows_mut().into_iter().zip(draws) {
        model.fill_input(row.as_slice_mut().expect("contiguous"), &draw.x_tau, draw.tau, draw.std, draw.ctx())?;
    }
    let cache = net.forward(input.view());
    let out = cache.output();
    let mut d_out = Array2::zeros((n, d));
    let mut loss = 0.0;
    for (i, draw) in draws.iter().enumerate() {
        let lambda = weighting.weight(draw.std);
        let skip = model.skip(&draw.x_tau, draw.tau, draw.ctx());
        for j in 0..d {
            let r = out[[i, j]] / draw.std + skip[j] - draw.target[j];
            loss += lambda * r * r;
            d_out[[i, j]] = 2.0 * lambda * r / (draw.std * n as f64);
        }
    }
    let (grad, _) = net.backward(&cache, &d_out);
    Ok(DsmLoss { loss: loss / n as f64, grad })
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub weighting: LossWeighting,
    pub hidden: Vec<usize>,
    /// Probability of zeroing the conditioning vector of an example.
    pub cond_dropout: f64,
    /// Moving-average window for the loss curve.
    pub smoothing_window: usize,
    /// Abort once the smoothed loss exceeds this multiple of its first value.
    pub divergence_factor: f64,
    /// Data scale of the model; estimated as the RMS of 1024 draws when unset.
    pub data_std: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            steps: 20_000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            weighting: LossWeighting::Variance,
            hidden: vec![128, 128],
            cond_dropout: 0.1,
            smoothing_window: 200,
            divergence_factor: 10.0,
            data_std: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0
            && self.steps > 0
            && self.learning_rate > 0.0
            && self.smoothing_window > 0
            && self.divergence_factor > 1.0
            && !self.hidden.is_empty()
            && !self.hidden.contains(&0);
        let decays = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        let scale = self.data_std.is_none_or(|s| s > 0.0 && s.is_finite());
        if !positive || !decays || !scale || !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub window: usize,
}

impl TrainReport {
    /// Moving average of the loss over the last `window` steps (fewer at the
    /// start of training).
    pub fn smoothed(&self) -> Vec<f64> {
        moving_average(&self.losses, self.window)
    }

    pub fn smoothed_start(&self) -> f64 {
        self.smoothed().first().copied().unwrap_or(f64::NAN)
    }

    pub fn smoothed_end(&self) -> f64 {
        self.smoothed().last().copied().unwrap_or(f64::NAN)
    }
}

fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let mut sum = 0.0;
    (0..values.len())
        .map(|i| {
            sum += values[i];
            if i >= window {
                sum -= values[i - window];
            }
            sum / (i + 1).min(window) as f64
        })
        .collect()
}

/// Train a fresh network by denoising score matching.
///
/// Deterministic per `cfg.seed`. Fails with [`Error::Diverged`] when the
/// smoothed loss grows past `divergence_factor` times its value at the first
/// step, or when the loss stops being finite.
/// RMS of the clean examples over 1024 draws.
fn estimate_data_std<D: TrainingData + ?Sized>(data: &D, rng: &mut SeededRng) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for _ in 0..1024 {
        let ex = data.draw(rng);
        sum += ex.x0.iter().map(|v| v * v).sum::<f64>();
        count += ex.x0.len();
    }
    let rms = (sum / count.max(1) as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        Ok(rms)
    } else {
        Err(Error::invalid("training data has zero or non-finite energy"))
    }
}

pub fn train_score<D: TrainingData + ?Sized>(
    data: &D,
    process: &DiffusionProcess,
    cfg: &TrainConfig,
) -> Result<(MlpScoreModel, TrainReport)> {
    cfg.validate()?;
    let mut model =
        MlpScoreModel::new(*process, data.dim(), data.cond_dim(), &cfg.hidden, &mut stream_rng(cfg.seed, "train", 0))?
            .with_data_std(match cfg.data_std {
                Some(s) => s,
                None => estimate_data_std(data, &mut stream_rng(cfg.seed, "train", 3))?,
            })?;
    let mut params = model.net().params();
    let mut adam = Adam::new(params.len(), cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut data_rng = stream_rng(cfg.seed, "train", 1);
    let mut noise_rng = stream_rng(cfg.seed, "train", 2);
    let window = cfg.smoothing_window.min(cfg.steps);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut initial: Option<f64> = None;
    let mut running = 0.0;

    for step in 0..cfg.steps {
        let examples: Vec<Example> = (0..cfg.batch_size)
            .map(|_| {
                let mut ex = data.draw(&mut data_rng);
                let drop = data_rng.gen::<f64>() < cfg.cond_dropout;
                if let (true, Some(c)) = (drop, ex.cond.as_mut()) {
                    c.fill(0.0);
                }
                ex
            })
            .collect();
        let draws = draw_dsm_batch(process, &examples, &mut noise_rng)?;
        let DsmLoss { loss, grad } = dsm_loss(&model, &draws, cfg.weighting)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss, initial: initial.unwrap_or(f64::NAN) });
        }
        losses.push(loss);
        running += loss;
        if losses.len() > window {
            running -= losses[losses.len() - 1 - window];
        }
        let smoothed = running / losses.len().min(window) as f64;
        match initial {
            None => initial = Some(smoothed),
            Some(first) if smoothed > cfg.divergence_factor * first => {
                return Err(Error::Diverged { step, loss: smoothed, initial: first });
            }
            Some(_) => {}
        }
        adam.step(&mut params, &grad);
        model.net_mut().set_params(&params)?;
    }
    Ok((model, TrainReport { losses, window }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::ProcessKind;
    use nalgebra::DMatrix;

    struct Cheat<'a>(&'a DsmDraw);

    impl ScoreField for Cheat<'_> {
        fn evaluate(&self, _x: &[f64], _tau: f64, _ctx: Conditioning<'_>) -> Result<Vec<f64>> {
            Ok(self.0.target.clone())
        }

        fn vjp(&self, _x: &[f64], _tau: f64, _ctx: Conditioning<'_>, v: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0; v.len()])
        }
    }

    fn toy_examples(process: &DiffusionProcess, n: usize) -> Vec<Example> {
        let mut rng = stream_rng(5, "examples", 0);
        (0..n)
            .map(|_| {
                let x0: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let y = process.requires_y().then(|| x0.iter().map(|v| 0.5 * v + 0.1).collect());
                Example { x0, y, cond: Some(vec![rng.gen_range(-1.0..1.0)]) }
            })
            .collect()
    }

    #[test]
    fn cheating_field_has_zero_loss() {
        let process = DiffusionProcess::default_for(ProcessKind::Vp);
        let draws = draw_dsm_batch(&process, &toy_examples(&process, 1), &mut stream_rng(0, "n", 0)).unwrap();
        assert_eq!(dsm_objective(&Cheat(&draws[0]), &draws, LossWeighting::Variance).unwrap(), 0.0);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for kind in [ProcessKind::Ve, ProcessKind::Ouve] {
            let process = DiffusionProcess::default_for(kind);
            let model = MlpScoreModel::new(process, 3, 1, &[6, 5], &mut stream_rng(9, "init", 0)).unwrap();
            let draws = draw_dsm_batch(&process, &toy_examples(&process, 4), &mut stream_rng(1, "n", 0)).unwrap();
            for weighting in [LossWeighting::Variance, LossWeighting::Unit] {
                let DsmLoss { loss, grad } = dsm_loss(&model, &draws, weighting).unwrap();
                assert!(loss >= 0.0);
                let reference = dsm_objective(&model, &draws, weighting).unwrap();
                assert!((loss - reference).abs() <= 1e-10 * reference.max(1.0));
                let params = model.net().params();
                for (i, &g) in grad.iter().enumerate() {
                    let h = 1e-6 * params[i].abs().max(1.0);
                    let eval = |p: f64| {
                        let mut m = model.clone();
                        let mut q = params.clone();
                        q[i] = p;
                        m.net_mut().set_params(&q).unwrap();
                        dsm_loss(&m, &draws, weighting).unwrap().loss
                    };
                    let fd = (eval(params[i] + h) - eval(params[i] - h)) / (2.0 * h);
                    let scale = g.abs().max(fd.abs()).max(1e-3 * loss.max(1e-12));
                    assert!((g - fd).abs() <= 1e-4 * scale, "{kind} param {i}: {g} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_loss_decreases() {
        let process = DiffusionProcess::default_for(ProcessKind::Ve);
        let data =
            GaussianMixture::gaussian(vec![1.0, -0.5], DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.3])).unwrap();
        let cfg = TrainConfig { steps: 600, batch_size: 32, hidden: vec![16, 16], seed: 11, ..TrainConfig::default() };
        let (a, report) = train_score(&data, &process, &cfg).unwrap();
        let (b, _) = train_score(&data, &process, &cfg).unwrap();
        assert_eq!(a.net().params(), b.net().params());
        assert!(report.smoothed_end() < report.smoothed_start());
    }

    #[test]
    fn exploding_learning_rate_is_detected() {
        let process = DiffusionProcess::default_for(ProcessKind::Ve);
        let data = GaussianMixture::gaussian(vec![0.0, 0.0], DMatrix::identity(2, 2)).unwrap();
        let cfg = TrainConfig {
            steps: 2000,
            batch_size: 16,
            hidden: vec![8],
            learning_rate: 10.0,
            smoothing_window: 20,
            ..TrainConfig::default()
        };
        assert!(matches!(train_score(&data, &process, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.0, 1.5, 2.5, 3.5]);
        assert_eq!(moving_average(&[1.0, 3.0], 5), vec![1.0, 2.0]);
    }
}
