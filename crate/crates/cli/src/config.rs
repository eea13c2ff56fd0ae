//! Run configuration: a TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use diffrestore::operator::{DegradationOperator, LowpassBounds, LowpassParams};
use diffrestore::posterior::{BlindConfig, CostDomain, LikelihoodConfig, LikelihoodMode, ZetaScale};
use diffrestore::process::{DiffusionProcess, ProcessKind, Schedule};
use diffrestore::score::{GaussianMixture, LossWeighting, TrainConfig};
use diffrestore::signal::Window;
use diffrestore::solver::{SamplerConfig, SolverKind, TimeScheme};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub process: ProcessSection,
    pub sampler: SamplerSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub generate: GenerateSection,
    pub likelihood: LikelihoodSection,
    pub operator: OperatorSection,
    pub blind: BlindSection,
    pub storm: StormSection,
    pub diagnose: DiagnoseSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessSection {
    pub kind: String,
    pub horizon: f64,
    pub tau_eps: f64,
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
    pub beta_min: Option<f64>,
    pub beta_max: Option<f64>,
    pub gamma: Option<f64>,
    pub k: Option<f64>,
}

impl Default for ProcessSection {
    fn default() -> Self {
        Self {
            kind: "ve".into(),
            horizon: 1.0,
            tau_eps: 1e-3,
            sigma_min: None,
            sigma_max: None,
            beta_min: None,
            beta_max: None,
            gamma: None,
            k: None,
        }
    }
}

impl ProcessSection {
    pub fn build(&self) -> Result<DiffusionProcess, CliError> {
        let kind = ProcessKind::parse(&self.kind)
            .ok_or_else(|| CliError::config(format!("process.kind: unknown process `{}`", self.kind)))?;
        let schedule = match Schedule::default_for(kind) {
            Schedule::Ve { sigma_min, sigma_max } => Schedule::Ve {
                sigma_min: self.sigma_min.unwrap_or(sigma_min),
                sigma_max: self.sigma_max.unwrap_or(sigma_max),
            },
            Schedule::Vp { beta_min, beta_max } => Schedule::Vp {
                beta_min: self.beta_min.unwrap_or(beta_min),
                beta_max: self.beta_max.unwrap_or(beta_max),
            },
            Schedule::Ouve { gamma, sigma_min, sigma_max } => Schedule::Ouve {
                gamma: self.gamma.unwrap_or(gamma),
                sigma_min: self.sigma_min.unwrap_or(sigma_min),
                sigma_max: self.sigma_max.unwrap_or(sigma_max),
            },
            Schedule::Bbed { k } => Schedule::Bbed { k: self.k.unwrap_or(k) },
        };
        DiffusionProcess::new(schedule, self.horizon, self.tau_eps)
            .map_err(|e| CliError::config(format!("process: {e}")))
    }

    /// Fill in the schedule parameters actually used.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        let p = self.build()?;
        match p.schedule() {
            Schedule::Ve { sigma_min, sigma_max } => {
                self.sigma_min = Some(sigma_min);
                self.sigma_max = Some(sigma_max);
            }
            Schedule::Vp { beta_min, beta_max } => {
                self.beta_min = Some(beta_min);
                self.beta_max = Some(beta_max);
            }
            Schedule::Ouve { gamma, sigma_min, sigma_max } => {
                self.gamma = Some(gamma);
                self.sigma_min = Some(sigma_min);
                self.sigma_max = Some(sigma_max);
            }
            Schedule::Bbed { k } => self.k = Some(k),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub solver: String,
    pub steps: Option<usize>,
    pub scheme: String,
    pub guidance: f64,
    pub final_denoise: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { solver: "em".into(), steps: None, scheme: "uniform".into(), guidance: 1.0, final_denoise: true }
    }
}

impl SamplerSection {
    pub fn build(&self, seed: u64) -> Result<SamplerConfig, CliError> {
        let solver = SolverKind::parse(&self.solver)
            .ok_or_else(|| CliError::config(format!("sampler.solver: unknown solver `{}`", self.solver)))?;
        let scheme = TimeScheme::parse(&self.scheme)
            .ok_or_else(|| CliError::config(format!("sampler.scheme: unknown scheme `{}`", self.scheme)))?;
        let steps = self.steps.unwrap_or(solver.default_steps());
        if steps == 0 {
            return Err(CliError::config("sampler.steps must be positive"));
        }
        if !self.guidance.is_finite() {
            return Err(CliError::config("sampler.guidance must be finite"));
        }
        Ok(SamplerConfig { steps, scheme, solver, guidance: self.guidance, seed, final_denoise: self.final_denoise })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `gmm`, `harmonic` or `wav`.
    pub kind: String,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// Directory of mono 16-bit WAV files.
    pub path: Option<PathBuf>,
    pub frame_len: usize,
    pub sample_rate: u32,
    pub level: f64,
    /// When set, examples are paired with `y = x0 + noise` (needed by the
    /// task-adapted processes).
    pub pair_noise_std: Option<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: "gmm".into(),
            weights: vec![0.5, 0.5],
            means: vec![vec![-2.0, -1.0], vec![2.0, 1.0]],
            variances: vec![vec![0.3, 0.2], vec![0.3, 0.2]],
            path: None,
            frame_len: 128,
            sample_rate: 16_000,
            level: 0.1,
            pair_noise_std: None,
        }
    }
}

impl DataSection {
    pub fn mixture(&self) -> Result<GaussianMixture, CliError> {
        GaussianMixture::diagonal(self.weights.clone(), self.means.clone(), self.variances.clone())
            .map_err(|e| CliError::config(format!("data.means/data.variances/data.weights: {e}")))
    }

    pub fn wav_dir(&self) -> Result<&Path, CliError> {
        self.path.as_deref().ok_or_else(|| CliError::config("missing key data.path (directory of WAV files)"))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Trained network; without it the analytic mixture score of `[data]` is used.
    pub checkpoint: Option<PathBuf>,
    /// Frame length the network is applied on (defaults to its input size).
    pub frame_len: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub hidden: Vec<usize>,
    /// `variance` or `unit`.
    pub weighting: String,
    pub cond_dropout: f64,
    pub smoothing_window: usize,
    pub divergence_factor: f64,
    /// Data scale of the model; estimated from the data when absent.
    pub data_std: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            hidden: d.hidden,
            weighting: "variance".into(),
            cond_dropout: d.cond_dropout,
            smoothing_window: d.smoothing_window,
            divergence_factor: d.divergence_factor,
            data_std: d.data_std,
        }
    }
}

impl TrainSection {
    pub fn build(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let weighting = match self.weighting.as_str() {
            "variance" => LossWeighting::Variance,
            "unit" => LossWeighting::Unit,
            other => return Err(CliError::config(format!("train.weighting: unknown weighting `{other}`"))),
        };
        let cfg = TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            seed,
            weighting,
            hidden: self.hidden.clone(),
            cond_dropout: self.cond_dropout,
            smoothing_window: self.smoothing_window,
            divergence_factor: self.divergence_factor,
            data_std: self.data_std,
        };
        cfg.validate().map_err(|e| CliError::config(format!("train: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub count: usize,
    /// Sample length; defaults to the model dimension.
    pub length: Option<usize>,
    /// When set, every sample is also written as a WAV file at this rate.
    pub sample_rate: Option<u32>,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { count: 16, length: None, sample_rate: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LikelihoodSection {
    /// `dps`, `projection` or `none`.
    pub mode: String,
    pub zeta_prime: f64,
    /// `unit` or `prior`.
    pub zeta_scale: String,
    pub noise_std: Option<f64>,
    /// `waveform` or `compressed_stft`.
    pub cost: String,
    pub exponent: f64,
    pub window_len: usize,
    pub hop: usize,
    pub window: String,
}

impl Default for LikelihoodSection {
    fn default() -> Self {
        Self {
            mode: "dps".into(),
            zeta_prime: 0.3,
            zeta_scale: "unit".into(),
            noise_std: None,
            cost: "waveform".into(),
            exponent: 0.5,
            window_len: diffrestore::signal::DEFAULT_WINDOW,
            hop: diffrestore::signal::DEFAULT_HOP,
            window: "hann".into(),
        }
    }
}

impl LikelihoodSection {
    pub fn build(&self) -> Result<LikelihoodConfig, CliError> {
        let mode = LikelihoodMode::parse(&self.mode)
            .ok_or_else(|| CliError::config(format!("likelihood.mode: unknown mode `{}`", self.mode)))?;
        let window = Window::parse(&self.window)
            .ok_or_else(|| CliError::config(format!("likelihood.window: unknown window `{}`", self.window)))?;
        let cost = match self.cost.as_str() {
            "waveform" => CostDomain::Waveform,
            "compressed_stft" => CostDomain::CompressedStft {
                window_len: self.window_len,
                hop: self.hop,
                window,
                exponent: self.exponent,
            },
            other => return Err(CliError::config(format!("likelihood.cost: unknown cost domain `{other}`"))),
        };
        let zeta_scale = ZetaScale::parse(&self.zeta_scale).ok_or_else(|| {
            CliError::config(format!("likelihood.zeta_scale: expected unit or prior, got `{}`", self.zeta_scale))
        })?;
        let cfg = LikelihoodConfig { mode, zeta_prime: self.zeta_prime, zeta_scale, noise_std: self.noise_std, cost };
        cfg.validate().map_err(|e| CliError::config(format!("likelihood: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorSection {
    /// `identity`, `mask`, `fir_lowpass`, `ideal_lowpass`, `rir` or
    /// `parametric_lowpass`.
    pub kind: String,
    /// Missing sample ranges `[start, end)` for `mask`.
    pub gaps: Vec<[usize; 2]>,
    pub cutoff_hz: Option<f64>,
    pub slope_db_per_octave: Option<f64>,
    /// Tap count of the designed FIR lowpass.
    pub taps: usize,
    /// Single-column CSV of FIR or RIR taps.
    pub taps_csv: Option<PathBuf>,
}

impl Default for OperatorSection {
    fn default() -> Self {
        Self {
            kind: "identity".into(),
            gaps: Vec::new(),
            cutoff_hz: None,
            slope_db_per_octave: None,
            taps: 101,
            taps_csv: None,
        }
    }
}

impl OperatorSection {
    fn cutoff(&self) -> Result<f64, CliError> {
        self.cutoff_hz.ok_or_else(|| CliError::config(format!("missing key operator.cutoff_hz for `{}`", self.kind)))
    }

    fn csv_taps(&self) -> Result<Vec<f64>, CliError> {
        let path = self
            .taps_csv
            .as_ref()
            .ok_or_else(|| CliError::config(format!("missing key operator.taps_csv for `{}`", self.kind)))?;
        let file = std::fs::File::open(path)
            .map_err(|e| CliError::config(format!("operator.taps_csv: cannot open {}: {e}", path.display())))?;
        diffrestore::operator::load_taps_csv(std::io::BufReader::new(file))
            .map_err(|e| CliError::config(format!("operator.taps_csv: {e}")))
    }

    pub fn build(&self, len: usize, sample_rate: u32) -> Result<DegradationOperator, CliError> {
        let op = match self.kind.as_str() {
            "identity" => Ok(DegradationOperator::Identity),
            "mask" => {
                let mut mask = vec![1.0; len];
                for &[start, end] in &self.gaps {
                    if start >= end || end > len {
                        return Err(CliError::config(format!(
                            "operator.gaps: range [{start}, {end}) invalid for length {len}"
                        )));
                    }
                    mask[start..end].iter_mut().for_each(|m| *m = 0.0);
                }
                DegradationOperator::mask(mask)
            }
            "fir_lowpass" => {
                let taps = if self.taps_csv.is_some() {
                    self.csv_taps()?
                } else {
                    diffrestore::operator::fir_lowpass_taps(self.cutoff()?, sample_rate, self.taps)
                        .map_err(|e| CliError::config(format!("operator: {e}")))?
                };
                DegradationOperator::fir(taps)
            }
            "ideal_lowpass" => DegradationOperator::ideal_lowpass(self.cutoff()?, sample_rate),
            "rir" => DegradationOperator::rir(self.csv_taps()?),
            "parametric_lowpass" => {
                let slope = self
                    .slope_db_per_octave
                    .ok_or_else(|| CliError::config("missing key operator.slope_db_per_octave"))?;
                DegradationOperator::parametric_lowpass(
                    LowpassParams { cutoff_hz: self.cutoff()?, slope_db_per_octave: slope },
                    sample_rate,
                )
            }
            other => return Err(CliError::config(format!("operator.kind: unknown operator `{other}`"))),
        };
        op.map_err(|e| CliError::config(format!("operator: {e}")))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlindSection {
    pub init_cutoff_hz: Option<f64>,
    pub init_slope_db_per_octave: Option<f64>,
    pub lr: Option<f64>,
    pub phi_steps: Option<usize>,
    pub cutoff_bounds_hz: Option<[f64; 2]>,
    pub slope_bounds_db_per_octave: Option<[f64; 2]>,
}

impl BlindSection {
    pub fn build(&self, sample_rate: u32) -> Result<BlindConfig, CliError> {
        let d = BlindConfig::new(sample_rate);
        let default_bounds = LowpassBounds::for_sample_rate(sample_rate);
        let bounds = LowpassBounds {
            cutoff_hz: self.cutoff_bounds_hz.map_or(default_bounds.cutoff_hz, |[a, b]| (a, b)),
            slope_db_per_octave: self
                .slope_bounds_db_per_octave
                .map_or(default_bounds.slope_db_per_octave, |[a, b]| (a, b)),
        };
        let cfg = BlindConfig {
            sample_rate,
            init: LowpassParams {
                cutoff_hz: self.init_cutoff_hz.unwrap_or(d.init.cutoff_hz),
                slope_db_per_octave: self.init_slope_db_per_octave.unwrap_or(d.init.slope_db_per_octave),
            },
            bounds,
            lr: self.lr.unwrap_or(d.lr),
            phi_steps: self.phi_steps.unwrap_or(d.phi_steps),
        };
        cfg.validate().map_err(|e| CliError::config(format!("blind: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StormSection {
    /// Noise level assumed by the spectral-gain predictor.
    pub noise_std: Option<f64>,
    pub floor: f64,
    pub window_len: usize,
    pub hop: usize,
}

impl Default for StormSection {
    fn default() -> Self {
        Self {
            noise_std: None,
            floor: 0.1,
            window_len: diffrestore::signal::DEFAULT_WINDOW,
            hop: diffrestore::signal::DEFAULT_HOP,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    pub paths: usize,
    pub substeps: usize,
    /// Check times as fractions of the horizon.
    pub tau_fractions: Vec<f64>,
    pub z_threshold: f64,
    pub convergence_steps: Vec<usize>,
    /// Test hook: multiplies the closed-form kernel standard deviation before
    /// the comparison. Leave at 1.
    pub corrupt_sigma_factor: f64,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            paths: 10_000,
            substeps: 500,
            tau_fractions: vec![0.1, 0.3, 0.5, 0.8, 1.0],
            z_threshold: 3.0,
            convergence_steps: vec![10, 30, 100, 300],
            corrupt_sigma_factor: 1.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is serializable")
    }
}
