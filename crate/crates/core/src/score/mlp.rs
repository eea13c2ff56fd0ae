//! Fully connected score network with hand-written backpropagation.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};
use crate::process::DiffusionProcess;
use crate::score::{Conditioning, ScoreField};

const CHECKPOINT_MAGIC: &[u8; 5] = b"DFRS2";
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    /// `out × in`
    weight: Array2<f64>,
    bias: Array1<f64>,
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer (`inputs[0]` is the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every layer; the last one is the output.
    pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("network has at least one layer")
    }
}

/// Multilayer perceptron with Gaussian-error-linear hidden activations and a
/// linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// `widths = [input, hidden..., output]`, weights drawn from `N(0, 1/fan_in)`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::invalid(format!("invalid layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let scale = 1.0 / (w[0] as f64).sqrt();
                let weight =
                    Array2::from_shape_simple_fn((w[1], w[0]), || scale * rng.sample::<f64, _>(StandardNormal));
                Dense { weight, bias: Array1::zeros(w[1]) }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.nrows()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in layer order, each layer as row-major weights then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len(self.num_params(), params.len())?;
        let mut offset = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
            for b in l.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Batched forward pass; rows of `input` are samples.
    pub fn forward(&self, input: ArrayView2<'_, f64>) -> ForwardCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = input.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weight.t()) + &layer.bias;
            inputs.push(a);
            a = if i + 1 < self.layers.len() { z.mapv(gelu) } else { z.clone() };
            pre.push(z);
        }
        ForwardCache { inputs, pre }
    }

    /// Reverse pass from the output cotangent `d_out`.
    ///
    /// Returns the flattened parameter gradient (same layout as [`Mlp::params`])
    /// and the cotangent of the input.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
        let n = self.layers.len();
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n);
        let mut dz = d_out.clone();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let d_weight = dz.t().dot(&cache.inputs[i]);
            let d_bias = dz.sum_axis(Axis(0));
            grads.push((d_weight, d_bias));
            let mut da = dz.dot(&layer.weight);
            if i > 0 {
                da.zip_mut_with(&cache.pre[i - 1], |d, &z| *d *= gelu_grad(z));
            }
            dz = da;
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.num_params());
        for (w, b) in &grads {
            flat.extend(w.iter());
            flat.extend(b.iter());
        }
        (flat, dz)
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.weight.ncols() as u32).to_le_bytes())?;
            w.write_all(&(l.weight.nrows() as u32).to_le_bytes())?;
        }
        for p in self.params() {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let n_layers = read_u32(r)? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let input = read_u32(r)? as usize;
            let output = read_u32(r)? as usize;
            shapes.push((input, output));
        }
        if shapes.windows(2).any(|s| s[0].1 != s[1].0) || shapes.iter().any(|&(i, o)| i == 0 || o == 0) {
            return Err(Error::Checkpoint("inconsistent layer shapes".into()));
        }
        let layers: Vec<Dense> =
            shapes.iter().map(|&(i, o)| Dense { weight: Array2::zeros((o, i)), bias: Array1::zeros(o) }).collect();
        let mut net = Mlp { layers };
        let mut params = vec![0.0; net.num_params()];
        let mut buf = [0u8; 8];
        for p in &mut params {
            r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated parameters: {e}")))?;
            *p = f64::from_le_bytes(buf);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        net.set_params(&params)?;
        Ok(net)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(buf))
}

/// Learned score `s_θ(x, τ, c) = net([k·x, y, c, log σ(τ)]) / σ(τ) − k²(x − b·y)`
/// with `k = 1/sqrt(a²σ_d² + σ²)` and `σ_d` the data scale.
///
/// The second term is the exact score of Gaussian data with standard
/// deviation `σ_d`. `y` is part of the input only for task-adapted
/// processes; `c` only when the model was built with a conditioning
/// dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScoreModel {
    net: Mlp,
    x_dim: usize,
    y_dim: usize,
    cond_dim: usize,
    data_std: f64,
    process: DiffusionProcess,
}

impl MlpScoreModel {
    pub fn new<R: Rng + ?Sized>(
        process: DiffusionProcess,
        x_dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let y_dim = if process.requires_y() { x_dim } else { 0 };
        let mut widths = vec![x_dim + y_dim + cond_dim + 1];
        widths.extend_from_slice(hidden);
        widths.push(x_dim);
        Ok(Self { net: Mlp::new(&widths, rng)?, x_dim, y_dim, cond_dim, data_std: 1.0, process })
    }

    /// Set the data scale `σ_d` (1 by default).
    pub fn with_data_std(mut self, data_std: f64) -> Result<Self> {
        if !(data_std > 0.0 && data_std.is_finite()) {
            return Err(Error::invalid(format!("data_std must be positive, got {data_std}")));
        }
        self.data_std = data_std;
        Ok(self)
    }

    pub fn data_std(&self) -> f64 {
        self.data_std
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn process(&self) -> &DiffusionProcess {
        &self.process
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn noise_level(&self, tau: f64) -> Result<f64> {
        let std = self.process.kernel_std(tau);
        if !(tau > 0.0 && tau <= self.process.horizon()) || !(std > 0.0) {
            return Err(Error::TimeOutOfRange { tau, min: self.process.tau_eps(), max: self.process.sampling_start() });
        }
        Ok(std)
    }

    /// `k` above: keeps network inputs O(1) at every noise level.
    pub(crate) fn input_scale(&self, tau: f64) -> f64 {
        let c = self.process.coefficients(tau);
        1.0 / (c.a * c.a * self.data_std * self.data_std + c.std * c.std).sqrt()
    }

    /// Gaussian part of the score, `−k²(x − b·y)`.
    pub(crate) fn skip(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> Vec<f64> {
        let c = self.process.coefficients(tau);
        let k = self.input_scale(tau).powi(2);
        match ctx.y.filter(|_| self.y_dim > 0) {
            Some(y) => x.iter().zip(y).map(|(v, o)| -k * (v - c.b * o)).collect(),
            None => x.iter().map(|v| -k * v).collect(),
        }
    }

    /// Write one network input row into `row`.
    pub(crate) fn fill_input(
        &self,
        row: &mut [f64],
        x: &[f64],
        tau: f64,
        std: f64,
        ctx: Conditioning<'_>,
    ) -> Result<()> {
        check_len(self.x_dim, x.len())?;
        let scale = self.input_scale(tau);
        let (xs, rest) = row.split_at_mut(self.x_dim);
        for (o, v) in xs.iter_mut().zip(x) {
            *o = v * scale;
        }
        let (ys, rest) = rest.split_at_mut(self.y_dim);
        if self.y_dim > 0 {
            let y = ctx.y.ok_or(Error::MissingObservation(self.process.kind()))?;
            check_len(self.y_dim, y.len())?;
            ys.copy_from_slice(y);
        }
        let (cs, last) = rest.split_at_mut(self.cond_dim);
        match ctx.cond {
            Some(c) if self.cond_dim > 0 => {
                check_len(self.cond_dim, c.len())?;
                cs.copy_from_slice(c);
            }
            _ => cs.fill(0.0),
        }
        last[0] = std.ln();
        Ok(())
    }

    fn single_input(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> Result<(Array2<f64>, f64)> {
        let std = self.noise_level(tau)?;
        let mut input = Array2::zeros((1, self.net.input_dim()));
        self.fill_input(input.row_mut(0).as_slice_mut().expect("contiguous"), x, tau, std, ctx)?;
        Ok((input, std))
    }

    /// Scores for many states at once (rows of the result follow `xs`).
    pub fn evaluate_batch(&self, xs: &[Vec<f64>], tau: f64, ctx: Conditioning<'_>) -> Result<Vec<Vec<f64>>> {
        let std = self.noise_level(tau)?;
        let mut input = Array2::zeros((xs.len(), self.net.input_dim()));
        for (mut row, x) in input.rows_mut().into_iter().zip(xs) {
            self.fill_input(row.as_slice_mut().expect("contiguous"), x, tau, std, ctx)?;
        }
        let cache = self.net.forward(input.view());
        Ok(cache
            .output()
            .rows()
            .into_iter()
            .zip(xs)
            .map(|(r, x)| r.iter().zip(self.skip(x, tau, ctx)).map(|(v, k)| v / std + k).collect())
            .collect())
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for dim in [self.x_dim, self.y_dim, self.cond_dim] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&self.data_std.to_le_bytes())?;
        self.net.write_to(w)?;
        Ok(())
    }

    /// Read a checkpoint. The process is not stored in the file and must be
    /// the one the model was trained with.
    pub fn load<R: Read>(r: &mut R, process: DiffusionProcess) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|e| Error::Checkpoint(format!("missing magic: {e}")))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let x_dim = read_u32(r)? as usize;
        let y_dim = read_u32(r)? as usize;
        let cond_dim = read_u32(r)? as usize;
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
        let data_std = f64::from_le_bytes(buf);
        if !(data_std > 0.0 && data_std.is_finite()) {
            return Err(Error::Checkpoint(format!("invalid data scale {data_std}")));
        }
        let net = Mlp::read_from(r)?;
        let expected_y = if process.requires_y() { x_dim } else { 0 };
        if y_dim != expected_y {
            return Err(Error::Checkpoint(format!(
                "checkpoint observation width {y_dim} does not match a {} process",
                process.kind()
            )));
        }
        if net.input_dim() != x_dim + y_dim + cond_dim + 1 || net.output_dim() != x_dim {
            return Err(Error::Checkpoint("layer shapes do not match the declared dimensions".into()));
        }
        Ok(Self { net, x_dim, y_dim, cond_dim, data_std, process })
    }
}

impl ScoreField for MlpScoreModel {
    fn evaluate(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> Result<Vec<f64>> {
        let (input, std) = self.single_input(x, tau, ctx)?;
        let cache = self.net.forward(input.view());
        Ok(cache.output().iter().zip(self.skip(x, tau, ctx)).map(|(v, k)| v / std + k).collect())
    }

    fn vjp(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.x_dim, v.len())?;
        let (input, std) = self.single_input(x, tau, ctx)?;
        let cache = self.net.forward(input.view());
        let d_out = Array2::from_shape_fn((1, self.x_dim), |(_, j)| v[j] / std);
        let (_, d_in) = self.net.backward(&cache, &d_out);
        let scale = self.input_scale(tau);
        Ok(d_in.row(0).iter().take(self.x_dim).zip(v).map(|(d, w)| d * scale - scale * scale * w).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::ProcessKind;
    use crate::rng::stream_rng;
    use crate::verify::finite_diff_grad;

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let process = DiffusionProcess::default_for(ProcessKind::Ouve);
        let model = MlpScoreModel::new(process, 3, 2, &[16, 16], &mut stream_rng(0, "init", 0)).unwrap();
        let x = [0.3, -0.5, 0.9];
        let y = [0.1, 0.2, -0.3];
        let c = [1.0, 0.0];
        let ctx = Conditioning { y: Some(&y), cond: Some(&c) };
        let v = [0.4, -1.2, 0.7];
        let tau = 0.35;
        let jv = model.vjp(&x, tau, ctx, &v).unwrap();
        let fd = finite_diff_grad(
            |p| {
                let s = model.evaluate(p, tau, ctx).unwrap();
                s.iter().zip(&v).map(|(a, b)| a * b).sum()
            },
            &x,
            1e-6,
        );
        for (a, b) in jv.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(1e-2), "{a} vs {b}");
        }
        assert!(model.vjp(&x, tau, ctx, &[0.0; 3]).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batch_and_single_evaluation_agree() {
        let process = DiffusionProcess::default_for(ProcessKind::Ve);
        let model = MlpScoreModel::new(process, 2, 0, &[8], &mut stream_rng(1, "init", 0)).unwrap();
        let xs = vec![vec![0.1, 0.2], vec![-1.0, 3.0]];
        let batch = model.evaluate_batch(&xs, 0.5, Conditioning::none()).unwrap();
        for (x, b) in xs.iter().zip(&batch) {
            let s = model.evaluate(x, 0.5, Conditioning::none()).unwrap();
            for (p, q) in s.iter().zip(b) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let process = DiffusionProcess::default_for(ProcessKind::Bbed);
        let model = MlpScoreModel::new(process, 4, 1, &[8, 8], &mut stream_rng(2, "init", 0)).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"DFRS2");
        assert_eq!(buf.len(), 5 + 12 + 8 + 4 + 3 * 8 + 8 * model.net().num_params());
        let back = MlpScoreModel::load(&mut buf.as_slice(), process).unwrap();
        assert_eq!(back, model);

        let ve = DiffusionProcess::default_for(ProcessKind::Ve);
        assert!(MlpScoreModel::load(&mut buf.as_slice(), ve).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(MlpScoreModel::load(&mut bad.as_slice(), process).is_err());
        assert!(MlpScoreModel::load(&mut &buf[..buf.len() - 3], process).is_err());
    }

    #[test]
    fn missing_observation_rejected() {
        let process = DiffusionProcess::default_for(ProcessKind::Ouve);
        let model = MlpScoreModel::new(process, 2, 0, &[4], &mut stream_rng(3, "init", 0)).unwrap();
        assert!(matches!(model.evaluate(&[0.0, 0.0], 0.5, Conditioning::none()), Err(Error::MissingObservation(_))));
    }
}
