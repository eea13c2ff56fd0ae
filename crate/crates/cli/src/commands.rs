use std::io::Write;
use std::path::Path;

use diffrestore::posterior::{
    blind_restore, restore as restore_signal, storm_restore, write_report_csv, SpectralGainPredictor,
};
use diffrestore::process::{DiffusionProcess, ProcessKind};
use diffrestore::score::{
    train_score, Conditioning, Example, FramedScore, GmmScore, MlpScoreModel, NoisyPairs, ScoreField, TrainingData,
};
use diffrestore::signal::synth::HarmonicSource;
use diffrestore::signal::{
    stft, wav_read, wav_write, write_axes_csv, write_pgm, Waveform, Window, DEFAULT_HOP, DEFAULT_WINDOW,
};
use diffrestore::solver::{sample_chain, sample_many, write_trace_csv, SolverKind};
use diffrestore::verify::{flow_convergence_error, mc_forward};

use crate::config::RunConfig;
use crate::output::{display, OutDir};
use crate::CliError;

/// Score field selected by the `[model]` section.
pub enum Prior {
    Mixture(GmmScore),
    Network(FramedScore<MlpScoreModel>),
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::Mixture(g) => g.mixture().dim(),
            Prior::Network(n) => n.frame_len,
        }
    }
}

impl ScoreField for Prior {
    fn evaluate(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>) -> diffrestore::Result<Vec<f64>> {
        match self {
            Prior::Mixture(g) => g.evaluate(x, tau, ctx),
            Prior::Network(n) => n.evaluate(x, tau, ctx),
        }
    }

    fn vjp(&self, x: &[f64], tau: f64, ctx: Conditioning<'_>, v: &[f64]) -> diffrestore::Result<Vec<f64>> {
        match self {
            Prior::Mixture(g) => g.vjp(x, tau, ctx, v),
            Prior::Network(n) => n.vjp(x, tau, ctx, v),
        }
    }
}

fn load_prior(cfg: &RunConfig, process: &DiffusionProcess) -> Result<Prior, CliError> {
    match &cfg.model.checkpoint {
        Some(path) => {
            let file = std::fs::File::open(path)
                .map_err(|e| CliError::config(format!("model.checkpoint: cannot open {}: {e}", display(path))))?;
            let model = MlpScoreModel::load(&mut std::io::BufReader::new(file), *process)
                .map_err(|e| CliError::config(format!("model.checkpoint: {e}")))?;
            let frame = cfg.model.frame_len.unwrap_or(model.x_dim());
            if frame != model.x_dim() {
                return Err(CliError::config(format!(
                    "model.frame_len {frame} differs from the checkpoint width {}",
                    model.x_dim()
                )));
            }
            Ok(Prior::Network(FramedScore::new(model, frame)?))
        }
        None if cfg.data.kind == "gmm" => Ok(Prior::Mixture(GmmScore::new(cfg.data.mixture()?, *process))),
        None => Err(CliError::config("missing key model.checkpoint (required unless data.kind = \"gmm\")")),
    }
}

fn read_input(cfg: &RunConfig) -> Result<Waveform, CliError> {
    let path = cfg.input.as_ref().ok_or_else(|| CliError::config("missing key input (or --input)"))?;
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::config(format!("input: cannot open {}: {e}", display(path))))?;
    let wave = wav_read(std::io::BufReader::new(file))
        .map_err(|e| CliError::config(format!("input {}: {e}", display(path))))?;
    if wave.is_empty() {
        return Err(CliError::config(format!("input {} is empty", display(path))));
    }
    Ok(wave)
}

fn write_wav(out: &OutDir, name: &str, wave: &Waveform) -> Result<(), CliError> {
    out.write(name, |w| {
        let report = wav_write(w, wave)?;
        if report.clipped > 0 {
            eprintln!("warning: {name}: {} samples clipped to full scale", report.clipped);
        }
        Ok(())
    })
}

fn write_spectrogram(out: &OutDir, stem: &str, wave: &Waveform) -> Result<(), CliError> {
    let tile = stft(&wave.samples, DEFAULT_WINDOW, DEFAULT_HOP, Window::Hann)?;
    out.write(&format!("{stem}.pgm"), |w| Ok(write_pgm(w, &tile)?))?;
    out.write(&format!("{stem}_axes.csv"), |w| Ok(write_axes_csv(w, &tile, wave.sample_rate)?))
}

fn check_finite(x: &[f64], what: &str) -> Result<(), CliError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError { code: CliError::NON_FINITE, message: format!("{what} contains non-finite values") })
    }
}

fn wav_frames(dir: &Path, frame_len: usize) -> Result<Vec<Example>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::config(format!("data.path: cannot read {}: {e}", display(dir))))?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    let mut frames = Vec::new();
    for path in files {
        let file = std::fs::File::open(&path)?;
        let wave = wav_read(std::io::BufReader::new(file))
            .map_err(|e| CliError::config(format!("{}: {e}", display(&path))))?;
        frames.extend(wave.samples.chunks_exact(frame_len).map(|c| Example::clean(c.to_vec())));
    }
    if frames.is_empty() {
        return Err(CliError::config(format!("data.path: no WAV frames of {frame_len} samples in {}", display(dir))));
    }
    Ok(frames)
}

pub fn train(cfg: &RunConfig, out: &OutDir) -> Result<(), CliError> {
    let process = cfg.process.build()?;
    let tcfg = cfg.train.build(cfg.seed)?;
    let d = &cfg.data;
    let clean: Box<dyn TrainingData> = match d.kind.as_str() {
        "gmm" => Box::new(d.mixture()?),
        "harmonic" => Box::new(HarmonicSource { level: d.level, ..HarmonicSource::new(d.frame_len, d.sample_rate) }),
        "wav" => Box::new(wav_frames(d.wav_dir()?, d.frame_len)?),
        other => return Err(CliError::config(format!("data.kind: unknown dataset `{other}`"))),
    };
    let data: Box<dyn TrainingData> = match (process.requires_y(), d.pair_noise_std) {
        (true, Some(s)) if s > 0.0 => Box::new(NoisyPairs { clean, noise_std: s }),
        (true, _) => {
            return Err(CliError::config(format!(
                "missing key data.pair_noise_std (positive) to train a {} model",
                process.kind()
            )))
        }
        (false, Some(_)) => return Err(CliError::config("data.pair_noise_std only applies to ouve and bbed")),
        (false, None) => clean,
    };
    let (model, report) = train_score(data.as_ref(), &process, &tcfg)?;
    out.write("checkpoint.bin", |w| Ok(model.save(w)?))?;
    out.write("loss.csv", |w| {
        writeln!(w, "step,loss,smoothed")?;
        for (i, (l, s)) in report.losses.iter().zip(report.smoothed()).enumerate() {
            writeln!(w, "{i},{l},{s}")?;
        }
        Ok(())
    })?;
    eprintln!(
        "trained {} steps: smoothed loss {:.4} -> {:.4}; checkpoint {}",
        report.losses.len(),
        report.smoothed_start(),
        report.smoothed_end(),
        display(&out.path("checkpoint.bin"))
    );
    Ok(())
}

pub fn generate(cfg: &RunConfig, out: &OutDir) -> Result<(), CliError> {
    let process = cfg.process.build()?;
    if process.requires_y() {
        return Err(CliError::config(format!("process.kind: generate needs ve or vp, got {}", process.kind())));
    }
    let sampler = cfg.sampler.build(cfg.seed)?;
    let prior = load_prior(cfg, &process)?;
    let len = cfg.generate.length.unwrap_or(prior.dim());
    if cfg.generate.count == 0 || len == 0 {
        return Err(CliError::config("generate.count and generate.length must be positive"));
    }
    let samples = sample_many(&process, &prior, &sampler, len, Conditioning::none(), cfg.generate.count)?;
    for s in &samples {
        check_finite(s, "sample")?;
    }
    let mut trace = Vec::new();
    sample_chain(&process, &prior, &sampler, len, Conditioning::none(), 0, Some(&mut trace))?;
    out.write("samples.csv", |w| {
        let header: Vec<String> = (0..len).map(|i| format!("x{i}")).collect();
        writeln!(w, "sample,{}", header.join(","))?;
        for (i, s) in samples.iter().enumerate() {
            let row: Vec<String> = s.iter().map(f64::to_string).collect();
            writeln!(w, "{i},{}", row.join(","))?;
        }
        Ok(())
    })?;
    out.write("trace.csv", |w| Ok(write_trace_csv(w, &trace)?))?;
    if let Some(sr) = cfg.generate.sample_rate {
        for (i, s) in samples.iter().enumerate() {
            write_wav(out, &format!("sample_{i:03}.wav"), &Waveform::new(s.clone(), sr)?)?;
        }
    }
    eprintln!("wrote {} samples of length {len}", samples.len());
    Ok(())
}

pub fn restore(cfg: &RunConfig, out: &OutDir) -> Result<(), CliError> {
    let process = cfg.process.build()?;
    let sampler = cfg.sampler.build(cfg.seed)?;
    let lik = cfg.likelihood.build()?;
    let input = read_input(cfg)?;
    let op = cfg.operator.build(input.len(), input.sample_rate)?;
    let prior = load_prior(cfg, &process)?;
    let r = restore_signal(&input.samples, &op, &process, &prior, &sampler, &lik, None)?;
    check_finite(&r.x, "restoration")?;
    let restored = Waveform::new(r.x, input.sample_rate)?;
    write_wav(out, "restored.wav", &restored)?;
    out.write("report.csv", |w| Ok(write_report_csv(w, &r.report)?))?;
    write_spectrogram(out, "spectrogram_input", &input)?;
    write_spectrogram(out, "spectrogram_restored", &restored)?;
    if let Some(last) = r.report.last() {
        eprintln!("restored {} samples; final residual norm {:.6e}", restored.len(), last.residual_norm);
    }
    Ok(())
}

pub fn blind(cfg: &RunConfig, out: &OutDir) -> Result<(), CliError> {
    let process = cfg.process.build()?;
    let sampler = cfg.sampler.build(cfg.seed)?;
    let lik = cfg.likelihood.build()?;
    let input = read_input(cfg)?;
    let bcfg = cfg.blind.build(input.sample_rate)?;
    let prior = load_prior(cfg, &process)?;
    let r = blind_restore(&input.samples, &process, &prior, &sampler, &lik, &bcfg, None)?;
    check_finite(&r.x, "restoration")?;
    if r.bound_warning {
        eprintln!("warning: filter parameters sat at a bound for more than half of the steps");
    }
    let restored = Waveform::new(r.x, input.sample_rate)?;
    write_wav(out, "restored.wav", &restored)?;
    out.write("phi.csv", |w| {
        writeln!(w, "step,cutoff_hz,slope_db_per_octave")?;
        for (i, p) in r.trajectory.iter().enumerate() {
            writeln!(w, "{i},{},{}", p.cutoff_hz, p.slope_db_per_octave)?;
        }
        Ok(())
    })?;
    out.write("report.csv", |w| Ok(write_report_csv(w, &r.report)?))?;
    write_spectrogram(out, "spectrogram_input", &input)?;
    write_spectrogram(out, "spectrogram_restored", &restored)?;
    eprintln!("estimated cutoff {:.1} Hz, slope {:.1} dB/octave", r.phi.cutoff_hz, r.phi.slope_db_per_octave);
    Ok(())
}

pub fn storm(cfg: &RunConfig, out: &OutDir) -> Result<(), CliError> {
    let process = cfg.process.build()?;
    if !process.requires_y() {
        return Err(CliError::config(format!("process.kind: storm needs ouve or bbed, got {}", process.kind())));
    }
    let sampler = cfg.sampler.build(cfg.seed)?;
    let input = read_input(cfg)?;
    let s = &cfg.storm;
    let noise_std = s.noise_std.ok_or_else(|| CliError::config("missing key storm.noise_std"))?;
    let predictor =
        SpectralGainPredictor { noise_std, floor: s.floor, window_len: s.window_len, hop: s.hop, window: Window::Hann };
    let prior = load_prior(cfg, &process)?;
    let r = storm_restore(&input.samples, &predictor, &process, &prior, &sampler, None, 0)?;
    check_finite(&r.x, "restoration")?;
    write_wav(out, "predicted.wav", &Waveform::new(r.predicted, input.sample_rate)?)?;
    let restored = Waveform::new(r.x, input.sample_rate)?;
    write_wav(out, "restored.wav", &restored)?;
    write_spectrogram(out, "spectrogram_input", &input)?;
    write_spectrogram(out, "spectrogram_restored", &restored)?;
    Ok(())
}

struct KernelRow {
    process: ProcessKind,
    tau: f64,
    mean_z: f64,
    std_z: f64,
    pass: bool,
}

/// Largest standardized deviation; a zero standard error demands exact agreement.
fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff.abs() / se
    } else if diff.abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn diagnose(cfg: &RunConfig, out: &OutDir) -> Result<(), CliError> {
    let d = &cfg.diagnose;
    if d.paths < 2 || d.substeps == 0 || d.tau_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(CliError::config("diagnose: need paths >= 2, substeps >= 1 and tau_fractions in (0, 1]"));
    }
    if !(d.corrupt_sigma_factor > 0.0) {
        return Err(CliError::config("diagnose.corrupt_sigma_factor must be positive"));
    }
    let configured = cfg.process.build()?;
    let processes: Vec<DiffusionProcess> = [ProcessKind::Ve, ProcessKind::Vp, ProcessKind::Ouve, ProcessKind::Bbed]
        .into_iter()
        .map(|k| if k == configured.kind() { configured } else { DiffusionProcess::default_for(k) })
        .collect();
    let x0 = [1.0, -0.5];
    let y = [0.2, 0.4];

    let mut kernel_rows = Vec::new();
    for p in &processes {
        let obs = p.requires_y().then_some(&y[..]);
        for &f in &d.tau_fractions {
            let tau = f * p.horizon();
            let m = p.kernel_moments(&x0, obs, tau)?;
            let mc = mc_forward(p, &x0, obs, tau, d.paths, d.substeps, cfg.seed)?;
            let std = m.std * d.corrupt_sigma_factor;
            let se_std = mc.std_of_std();
            let mean_z = (0..x0.len()).map(|i| z_score(mc.mean[i] - m.mean[i], mc.std_error[i])).fold(0.0, f64::max);
            let std_z = (0..x0.len()).map(|i| z_score(mc.std[i] - std, se_std[i])).fold(0.0, f64::max);
            let pass = mean_z <= d.z_threshold && std_z <= d.z_threshold;
            kernel_rows.push(KernelRow { process: p.kind(), tau, mean_z, std_z, pass });
        }
    }

    let mut conv_rows = Vec::new();
    let mut summary = Vec::new();
    for p in &processes {
        for solver in [SolverKind::OdeEuler, SolverKind::OdeHeun] {
            let errs = d
                .convergence_steps
                .iter()
                .map(|&n| flow_convergence_error(p, solver, n))
                .collect::<Result<Vec<f64>, _>>()?;
            let monotone = errs.windows(2).all(|w| w[1] < w[0]);
            summary.push((format!("convergence_{}", solver_name(solver)), p.kind(), monotone));
            conv_rows.extend(d.convergence_steps.iter().zip(errs).map(|(&n, e)| (p.kind(), solver, n, e)));
        }
        for n in [20, 50] {
            let euler = flow_convergence_error(p, SolverKind::OdeEuler, n)?;
            let heun = flow_convergence_error(p, SolverKind::OdeHeun, n)?;
            summary.push((format!("heun_not_worse_n{n}"), p.kind(), heun <= euler));
        }
    }
    for (i, p) in processes.iter().enumerate() {
        let ok = kernel_rows.iter().filter(|r| r.process == p.kind()).all(|r| r.pass);
        summary.insert(i, ("kernel_moments".to_string(), p.kind(), ok));
    }

    out.write("kernel_moments.csv", |w| {
        writeln!(w, "process,tau,mean_z,std_z,pass")?;
        for r in &kernel_rows {
            writeln!(w, "{},{},{},{},{}", r.process, r.tau, r.mean_z, r.std_z, r.pass)?;
        }
        Ok(())
    })?;
    out.write("convergence.csv", |w| {
        writeln!(w, "process,solver,steps,error")?;
        for (p, s, n, e) in &conv_rows {
            writeln!(w, "{p},{},{n},{e}", solver_name(*s))?;
        }
        Ok(())
    })?;
    out.write("summary.csv", |w| {
        writeln!(w, "check,process,result")?;
        for (name, p, ok) in &summary {
            writeln!(w, "{name},{p},{}", if *ok { "pass" } else { "fail" })?;
        }
        Ok(())
    })?;
    let failed: Vec<String> = summary.iter().filter(|s| !s.2).map(|(n, p, _)| format!("{n}/{p}")).collect();
    for (name, p, ok) in &summary {
        eprintln!("{:<24} {:<5} {}", name, p.to_string(), if *ok { "pass" } else { "FAIL" });
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError { code: CliError::DIAGNOSE_FAILED, message: format!("failed checks: {}", failed.join(", ")) })
    }
}

fn solver_name(s: SolverKind) -> &'static str {
    match s {
        SolverKind::Em => "em",
        SolverKind::OdeEuler => "euler",
        SolverKind::OdeHeun => "heun",
    }
}
