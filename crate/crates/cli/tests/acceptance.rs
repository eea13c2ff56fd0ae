//! End-to-end acceptance checks. Prints one PASS/FAIL line per check. With
//! `ACCEPTANCE_STRICT=1` any failing check makes the target exit non-zero.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use diffrestore::operator::{DegradationOperator, LowpassParams};
use diffrestore::posterior::{
    blind_restore, posterior_score, restore, restore_chain, storm_restore, BlindConfig, CostDomain, LikelihoodConfig,
    LikelihoodMode, LinearPredictor, ZetaScale,
};
use diffrestore::process::{DiffusionProcess, ProcessKind};
use diffrestore::rng::{normal_vec, stream_rng};
use diffrestore::score::{
    draw_dsm_batch, dsm_loss, train_score, Conditioning, Example, FramedScore, GaussianMixture, GmmScore,
    LossWeighting, ScoreField, TrainConfig,
};
use diffrestore::signal::synth::HarmonicSource;
use diffrestore::signal::{
    compress, decompress, istft, snr_db, stft, stft_adjoint, wav_read, wav_write, StftTile, Waveform, Window,
    DEFAULT_HOP, DEFAULT_WINDOW,
};
use diffrestore::solver::{sample_many, SamplerConfig, SolverKind};
use diffrestore::verify::{
    exact_conditional_score, exact_linear_gaussian_posterior, flow_convergence_error, mass_region_grid, mc_forward,
    mean_cosine, probe_matrix, rel_err,
};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

type Outcome = Result<(bool, String), String>;
type Check = (&'static str, fn() -> Outcome);

fn main() {
    let checks: [Check; 10] = [
        ("kernel moments agree with forward simulation", kernel_moments),
        ("exact-score sampling of a 1D mixture", mixture_sampling),
        ("solver convergence on a Gaussian target", solver_convergence),
        ("learned score on a 2D mixture", learned_score),
        ("DPS on a masked 2D Gaussian", dps_gaussian),
        ("projection consistency", projection_consistency),
        ("blind lowpass estimation", blind_lowpass),
        ("two-stage denoising", two_stage),
        ("signal round trips and adjoints", round_trips),
        ("CLI reproducibility", cli_reproducible),
    ];
    let mut failures = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "{} {:>2} {name}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} passed", checks.len() - failures, checks.len());
    if failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(start: Instant, limit: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.1} s of {} s", t.as_secs_f64(), limit.as_secs()))
}

fn kernel_moments() -> Outcome {
    let start = Instant::now();
    let x0 = [1.0, -0.5];
    let y = [0.2, 0.4];
    let mut worst: f64 = 0.0;
    for kind in ProcessKind::ALL {
        let p = DiffusionProcess::default_for(kind);
        let obs = p.requires_y().then_some(&y[..]);
        for f in [0.1, 0.3, 0.5, 0.8, 1.0] {
            let tau = f * p.horizon();
            let m = p.kernel_moments(&x0, obs, tau).map_err(err)?;
            let mc = mc_forward(&p, &x0, obs, tau, 10_000, 500, 7).map_err(err)?;
            let se_std = mc.std_of_std();
            for (i, se) in se_std.iter().enumerate() {
                worst = worst.max(z(mc.mean[i] - m.mean[i], mc.std_error[i]));
                worst = worst.max(z(mc.std[i] - m.std, *se));
            }
        }
    }
    let (fast, time) = within(start, Duration::from_secs(60));
    Ok((worst <= 3.0 && fast, format!("max |z| {worst:.2} (limit 3); {time}")))
}

fn z(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff.abs() / se
    } else if diff.abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn mixture_sampling() -> Outcome {
    let process = DiffusionProcess::default_for(ProcessKind::Ve);
    let mixture = GaussianMixture::diagonal(vec![0.5, 0.5], vec![vec![-2.0], vec![2.0]], vec![vec![1.0], vec![1.0]])
        .map_err(err)?;
    let field = GmmScore::new(mixture, process);
    let cfg = SamplerConfig { steps: 200, seed: 11, ..SamplerConfig::for_solver(SolverKind::Em) };
    let xs = sample_many(&process, &field, &cfg, 1, Conditioning::none(), 10_000).map_err(err)?;
    let n = xs.len() as f64;
    let upper = xs.iter().filter(|x| x[0] > 0.0).count() as f64 / n;
    let mean = xs.iter().map(|x| x[0]).sum::<f64>() / n;
    let pass = (upper - 0.5).abs() <= 0.03 && (1.0 - upper - 0.5).abs() <= 0.03 && mean.abs() < 0.05;
    Ok((pass, format!("upper-mode share {:.2}% (50 ± 3), mean {mean:.4} (|·| < 0.05)", 100.0 * upper)))
}

fn solver_convergence() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in ProcessKind::ALL {
        let p = DiffusionProcess::default_for(kind);
        for solver in [SolverKind::OdeEuler, SolverKind::OdeHeun] {
            let errs = [10, 30, 100, 300]
                .iter()
                .map(|&n| flow_convergence_error(&p, solver, n))
                .collect::<Result<Vec<_>, _>>()
                .map_err(err)?;
            pass &= errs.windows(2).all(|w| w[1] < w[0]);
        }
        for n in [20, 50] {
            let euler = flow_convergence_error(&p, SolverKind::OdeEuler, n).map_err(err)?;
            let heun = flow_convergence_error(&p, SolverKind::OdeHeun, n).map_err(err)?;
            pass &= heun <= euler;
            if n == 20 {
                lines.push(format!("{kind} N=20 euler {euler:.1e} heun {heun:.1e}"));
            }
        }
    }
    Ok((pass, format!("monotone over N in {{10,30,100,300}}, heun <= euler at N in {{20,50}}; {}", lines.join(", "))))
}

fn learned_score() -> Outcome {
    let start = Instant::now();
    let process = DiffusionProcess::default_for(ProcessKind::Ve);
    let mixture =
        GaussianMixture::diagonal(vec![0.5, 0.5], vec![vec![-2.0, -1.0], vec![2.0, 1.0]], vec![vec![0.3, 0.2]; 2])
            .map_err(err)?;
    let cfg = TrainConfig { steps: 20_000, ..TrainConfig::default() };
    let (model, _) = train_score(&mixture, &process, &cfg).map_err(err)?;
    let oracle = GmmScore::new(mixture.clone(), process);
    let mut worst = f64::INFINITY;
    for f in [0.2, 0.35, 0.5, 0.65, 0.8] {
        let tau = f * process.horizon();
        let marginal = oracle.marginal(tau, None).map_err(err)?;
        let grid = mass_region_grid(&marginal, 0.99, 41, 20_000, 1).map_err(err)?;
        let learned = model.evaluate_batch(&grid, tau, Conditioning::none()).map_err(err)?;
        let exact = grid
            .iter()
            .map(|x| oracle.evaluate(x, tau, Conditioning::none()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        worst = worst.min(mean_cosine(&learned, &exact).map_err(err)?);
    }

    // Backpropagated gradients against central differences on a subset of
    // the trained parameters.
    let examples: Vec<Example> = (0..32).map(|i| Example::clean(mixture.sample(&mut stream_rng(5, "fd", i)))).collect();
    let draws = draw_dsm_batch(&process, &examples, &mut stream_rng(5, "fd", 99)).map_err(err)?;
    let analytic = dsm_loss(&model, &draws, LossWeighting::Variance).map_err(err)?.grad;
    let params = model.net().params();
    let picked: Vec<usize> = (0..200).map(|i| (i * 7919) % params.len()).collect();
    let mut numeric = Vec::with_capacity(picked.len());
    for &i in &picked {
        let h = 1e-6 * params[i].abs().max(1.0);
        let eval = |p: f64| {
            let mut m = model.clone();
            let mut q = params.clone();
            q[i] = p;
            m.net_mut().set_params(&q).map_err(err)?;
            Ok::<f64, String>(dsm_loss(&m, &draws, LossWeighting::Variance).map_err(err)?.loss)
        };
        numeric.push((eval(params[i] + h)? - eval(params[i] - h)?) / (2.0 * h));
    }
    let subset: Vec<f64> = picked.iter().map(|&i| analytic[i]).collect();
    let grad_err = rel_err(&subset, &numeric, 1e-12);
    let (fast, time) = within(start, Duration::from_secs(600));
    Ok((
        worst > 0.90 && grad_err < 1e-4 && fast,
        format!("min mean cosine {worst:.4} (> 0.90); gradient rel err {grad_err:.2e} (< 1e-4); {time}"),
    ))
}

fn dps_gaussian() -> Outcome {
    let process = DiffusionProcess::default_for(ProcessKind::Ve);
    let rho = 0.8;
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
    let mean = DVector::zeros(2);
    let field = GmmScore::new(GaussianMixture::gaussian(vec![0.0, 0.0], cov.clone()).map_err(err)?, process);
    let op = DegradationOperator::mask(vec![1.0, 0.0]).map_err(err)?;
    let y = [1.5, 0.0];
    let sigma_y = 0.1;
    let a = probe_matrix(2, |v| op.apply(v)).map_err(err)?;
    let (pm, pc) =
        exact_linear_gaussian_posterior(&mean, &cov, &a, sigma_y, &DVector::from_row_slice(&y)).map_err(err)?;
    let lik = LikelihoodConfig { noise_std: Some(sigma_y), ..LikelihoodConfig::default() };
    let sampler = SamplerConfig { steps: 1000, seed: 3, ..SamplerConfig::default() };
    let xs = (0..1000u64)
        .into_par_iter()
        .map(|c| restore_chain(&y, &op, &process, &field, &sampler, &lik, None, c).map(|r| r.x))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let avg = [xs.iter().map(|x| x[0]).sum::<f64>() / 1000.0, xs.iter().map(|x| x[1]).sum::<f64>() / 1000.0];
    let mean_err = rel_err(&avg, pm.as_slice(), 1e-12);

    let tau = 0.05 * process.horizon();
    let c = process.coefficients(tau);
    let x = [pm[0] * c.a + 0.5 * c.std, pm[1] * c.a - 0.5 * c.std];
    let exact = exact_conditional_score(&pm, &pc, c.a, c.b, c.std, None, &DVector::from_row_slice(&x)).map_err(err)?;
    let ps = posterior_score(&field, &process, &x, tau, Conditioning::none(), &y, &op, &lik).map_err(err)?;
    let score_err = rel_err(&ps.score, exact.as_slice(), 1e-12);
    Ok((
        mean_err < 0.10 && score_err < 0.05,
        format!(
            "restoration mean [{:.3}, {:.3}] vs exact [{:.3}, {:.3}], rel err {:.2}% (< 10%); score rel err {:.2}% at 0.05 T (< 5%)",
            avg[0],
            avg[1],
            pm[0],
            pm[1],
            100.0 * mean_err,
            100.0 * score_err
        ),
    ))
}

fn projection_consistency() -> Outcome {
    let process = DiffusionProcess::default_for(ProcessKind::Ve);
    let len = 256;
    let sr = 16_000;
    let field = GmmScore::new(
        GaussianMixture::diagonal(vec![1.0], vec![vec![0.0; len]], vec![vec![0.01; len]]).map_err(err)?,
        process,
    );
    let x = HarmonicSource { level: 0.1, ..HarmonicSource::new(len, sr) }.generate(&mut stream_rng(2, "signal", 0));
    let gaps: Vec<f64> = (0..len).map(|i| if (100..140).contains(&i) { 0.0 } else { 1.0 }).collect();
    let lik = LikelihoodConfig { mode: LikelihoodMode::Projection, ..LikelihoodConfig::default() };
    let sampler = SamplerConfig { steps: 100, seed: 4, ..SamplerConfig::default() };
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, op) in [
        ("mask", DegradationOperator::mask(gaps).map_err(err)?),
        ("ideal lowpass", DegradationOperator::ideal_lowpass(2000.0, sr).map_err(err)?),
    ] {
        let y = op.apply(&x).map_err(err)?;
        let r = restore(&y, &op, &process, &field, &sampler, &lik, None).map_err(err)?;
        let ax = op.apply(&r.x).map_err(err)?;
        let rel = rel_err(&ax, &y, 1e-300);
        worst = worst.max(rel);
        parts.push(format!("{name} {rel:.1e}"));
    }
    Ok((worst < 1e-8, format!("|A x - y| / |y|: {} (< 1e-8)", parts.join(", "))))
}

fn blind_lowpass() -> Outcome {
    let start = Instant::now();
    let process = DiffusionProcess::default_for(ProcessKind::Ve);
    let sr = 16_000;
    let frame = 128;
    let level = 0.1;
    let source = HarmonicSource { level, ..HarmonicSource::new(frame, sr) };
    let cfg = TrainConfig { steps: 10_000, hidden: vec![256, 256], ..TrainConfig::default() };
    let (model, _) = train_score(&source, &process, &cfg).map_err(err)?;
    let field = FramedScore::new(model, frame).map_err(err)?;

    let len = 1024;
    let x = HarmonicSource { level, ..HarmonicSource::new(len, sr) }.generate(&mut stream_rng(5, "signal", 0));
    let truth = LowpassParams { cutoff_hz: 2000.0, slope_db_per_octave: 48.0 };
    let y = DegradationOperator::parametric_lowpass(truth, sr).map_err(err)?.apply(&x).map_err(err)?;
    let lik = LikelihoodConfig {
        zeta_prime: 2.0,
        zeta_scale: ZetaScale::PriorNorm,
        cost: CostDomain::compressed_default(),
        ..LikelihoodConfig::default()
    };
    let sampler = SamplerConfig { steps: 400, ..SamplerConfig::default() };
    let from_default = blind_restore(&y, &process, &field, &sampler, &lik, &BlindConfig::new(sr), None).map_err(err)?;
    let at_truth = BlindConfig { init: truth, ..BlindConfig::new(sr) };
    let from_truth = blind_restore(&y, &process, &field, &sampler, &lik, &at_truth, None).map_err(err)?;

    let cutoff_err = (from_default.phi.cutoff_hz - truth.cutoff_hz).abs() / truth.cutoff_hz;
    let drift = ((from_truth.phi.cutoff_hz - truth.cutoff_hz).abs() / truth.cutoff_hz)
        .max((from_truth.phi.slope_db_per_octave - truth.slope_db_per_octave).abs() / truth.slope_db_per_octave);
    let (fast, time) = within(start, Duration::from_secs(900));
    Ok((
        cutoff_err <= 0.10 && drift < 0.02 && fast,
        format!(
            "cutoff {:.0} Hz from {:.0} Hz init, error {:.1}% (<= 10%); drift from truth {:.1}% to {:.0} Hz / {:.1} dB/oct (< 2%); {time}",
            from_default.phi.cutoff_hz,
            BlindConfig::new(sr).init.cutoff_hz,
            100.0 * cutoff_err,
            100.0 * drift,
            from_truth.phi.cutoff_hz,
            from_truth.phi.slope_db_per_octave
        ),
    ))
}

fn two_stage() -> Outcome {
    let d = 8;
    let mut rng = stream_rng(0, "prior", 0);
    let means: Vec<Vec<f64>> = (0..4).map(|_| normal_vec(&mut rng, d)).collect();
    let prior = GaussianMixture::diagonal(vec![0.25; 4], means, vec![vec![0.05; d]; 4]).map_err(err)?;
    // 0 dB: noise power equals the average signal power.
    let power = (prior.covariance().trace() + prior.mean().norm_squared()) / d as f64;
    let noise = power.sqrt();
    let process = DiffusionProcess::default_for(ProcessKind::Ouve);
    let identity = DMatrix::identity(d, d);
    let predictor = LinearPredictor::lmmse(&prior.mean(), &prior.covariance(), &identity, noise).map_err(err)?;
    let sampler = SamplerConfig { steps: 50, ..SamplerConfig::default() };
    let trials = (0..100u64)
        .into_par_iter()
        .map(|t| {
            let mut r = stream_rng(1, "trial", t);
            let x = prior.sample(&mut r);
            let y: Vec<f64> = x.iter().zip(normal_vec(&mut r, d)).map(|(a, e)| a + noise * e).collect();
            let field = GmmScore::new(prior.condition_linear(&identity, noise, &y)?, process);
            let out = storm_restore(&y, &predictor, &process, &field, &sampler, None, t)?;
            Ok((snr_db(&x, &out.predicted), snr_db(&x, &out.x)))
        })
        .collect::<diffrestore::Result<Vec<_>>>()
        .map_err(err)?;
    let predicted = trials.iter().map(|t| t.0).sum::<f64>() / trials.len() as f64;
    let refined = trials.iter().map(|t| t.1).sum::<f64>() / trials.len() as f64;
    Ok((refined >= predicted, format!("two-stage {refined:.2} dB vs predictor {predicted:.2} dB over 100 trials")))
}

fn round_trips() -> Outcome {
    let mut rng = stream_rng(8, "signal", 0);
    let x = normal_vec(&mut rng, 4096);

    let tile = stft(&x, DEFAULT_WINDOW, DEFAULT_HOP, Window::Hann).map_err(err)?;
    let back = istft(&tile).map_err(err)?;
    let stft_err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let polar = compress(&tile, 0.5).map_err(err)?;
    let restored = decompress(&polar);
    let compress_err = tile
        .data
        .iter()
        .zip(restored.data.iter())
        .map(|(a, b)| (a - b).norm() / a.norm().max(1e-300))
        .fold(0.0, f64::max);

    let samples: Vec<f64> = x.iter().map(|v| (0.2 * v).clamp(-0.99, 0.99)).collect();
    let mut bytes = std::io::Cursor::new(Vec::new());
    wav_write(&mut bytes, &Waveform::new(samples.clone(), 16_000).map_err(err)?).map_err(err)?;
    bytes.set_position(0);
    let read = wav_read(bytes).map_err(err)?;
    let lsb = 1.0 / 32768.0;
    let wav_err = samples.iter().zip(&read.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / lsb;

    let n = 512;
    let sr = 16_000;
    let u = normal_vec(&mut rng, n);
    let v = normal_vec(&mut rng, n);
    let operators = [
        DegradationOperator::Identity,
        DegradationOperator::mask((0..n).map(|i| f64::from(u8::from(i % 5 != 0))).collect()).map_err(err)?,
        DegradationOperator::fir(normal_vec(&mut rng, 31)).map_err(err)?,
        DegradationOperator::rir(normal_vec(&mut rng, 64)).map_err(err)?,
        DegradationOperator::ideal_lowpass(3000.0, sr).map_err(err)?,
        DegradationOperator::parametric_lowpass(LowpassParams { cutoff_hz: 2500.0, slope_db_per_octave: 30.0 }, sr)
            .map_err(err)?,
    ];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let mut adjoint_err: f64 = 0.0;
    for op in &operators {
        let lhs = dot(&op.apply(&u).map_err(err)?, &v);
        let rhs = dot(&u, &op.adjoint(&v).map_err(err)?);
        adjoint_err = adjoint_err.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
    }
    let w = normal_vec(&mut rng, 2 * tile.frames() * tile.bins());
    let w_tile = StftTile::from_real_vec(&w, tile.layout).map_err(err)?;
    let lhs = dot(&tile.to_real_vec(), &w);
    let rhs = dot(&x, &stft_adjoint(&w_tile));
    adjoint_err = adjoint_err.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));

    let pass = stft_err < 1e-6 && compress_err < 1e-12 && wav_err <= 1.0 && adjoint_err < 1e-10;
    Ok((
        pass,
        format!(
            "stft {stft_err:.1e} (< 1e-6); compression {compress_err:.1e}; wav {wav_err:.2} LSB (<= 1); adjoint {adjoint_err:.1e} (< 1e-10)"
        ),
    ))
}

fn cli_reproducible() -> Outcome {
    let exe = PathBuf::from(env!("CARGO_BIN_EXE_diffrestore"));
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();

    let x = HarmonicSource { level: 0.1, ..HarmonicSource::new(512, 16_000) }.generate(&mut stream_rng(3, "signal", 0));
    let lowpassed =
        DegradationOperator::parametric_lowpass(LowpassParams { cutoff_hz: 3000.0, slope_db_per_octave: 36.0 }, 16_000)
            .map_err(err)?
            .apply(&x)
            .map_err(err)?;
    let noisy: Vec<f64> =
        x.iter().zip(normal_vec(&mut stream_rng(3, "noise", 0), 512)).map(|(a, e)| a + 0.05 * e).collect();
    write_input(&root.join("lowpassed.wav"), &lowpassed)?;
    write_input(&root.join("noisy.wav"), &noisy)?;

    let ve_model = r#"
[data]
kind = "harmonic"
frame_len = 64
[train]
steps = 100
hidden = [32]
"#;
    let ouve_model = r#"
[process]
kind = "ouve"
[data]
kind = "harmonic"
frame_len = 64
pair_noise_std = 0.05
[train]
steps = 100
hidden = [32]
"#;
    let runs: Vec<(&str, String)> = vec![
        ("train", ve_model.into()),
        ("train", ouve_model.into()),
        ("generate", "[data]\nkind = \"gmm\"\n[sampler]\nsteps = 50\n[generate]\ncount = 4\n".into()),
        (
            "restore",
            format!(
                "input = {:?}\n[model]\ncheckpoint = {:?}\n[sampler]\nsteps = 30\n[operator]\nkind = \"ideal_lowpass\"\ncutoff_hz = 3000.0\n",
                root.join("lowpassed.wav"),
                root.join("ve_model/checkpoint.bin")
            ),
        ),
        (
            "blind",
            format!(
                "input = {:?}\n[model]\ncheckpoint = {:?}\n[sampler]\nsteps = 30\n",
                root.join("lowpassed.wav"),
                root.join("ve_model/checkpoint.bin")
            ),
        ),
        (
            "storm",
            format!(
                "input = {:?}\n[process]\nkind = \"ouve\"\n[model]\ncheckpoint = {:?}\n[sampler]\nsteps = 30\n[storm]\nnoise_std = 0.05\n",
                root.join("noisy.wav"),
                root.join("ouve_model/checkpoint.bin")
            ),
        ),
        ("diagnose", "[diagnose]\npaths = 500\nsubsteps = 50\nconvergence_steps = [10, 30]\n".into()),
    ];

    let mut compared = 0;
    let mut mismatched = Vec::new();
    for (i, (command, config)) in runs.iter().enumerate() {
        let label = match i {
            0 => "ve_model".to_string(),
            1 => "ouve_model".to_string(),
            _ => command.to_string(),
        };
        let config_path = root.join(format!("{label}.toml"));
        std::fs::write(&config_path, config).map_err(err)?;
        // Same command line twice; the first result is moved aside in between.
        let out = root.join(&label);
        let first = root.join(format!("{label}_first"));
        for threads in ["1", "3"] {
            let run = Command::new(&exe)
                .arg(command)
                .arg("--config")
                .arg(&config_path)
                .arg("--seed")
                .arg("17")
                .arg("--out")
                .arg(&out)
                .env("DIFFRESTORE_THREADS", threads)
                .output()
                .map_err(err)?;
            if !run.status.success() && !(*command == "diagnose" && run.status.code() == Some(5)) {
                return Err(format!("{command} failed: {}", String::from_utf8_lossy(&run.stderr)));
            }
            if threads == "1" {
                std::fs::rename(&out, &first).map_err(err)?;
            }
        }
        let outputs = [first, out];
        let files = list_files(&outputs[0])?;
        if files != list_files(&outputs[1])? {
            mismatched.push(format!("{label}: file sets differ"));
            continue;
        }
        for f in files {
            compared += 1;
            let a = std::fs::read(outputs[0].join(&f)).map_err(err)?;
            let b = std::fs::read(outputs[1].join(&f)).map_err(err)?;
            if a != b {
                mismatched.push(format!("{label}/{f}"));
            }
        }
    }
    let detail = if mismatched.is_empty() {
        format!("{compared} artifacts from {} runs byte-identical across repeats", runs.len())
    } else {
        format!("differing: {}", mismatched.join(", "))
    };
    Ok((mismatched.is_empty(), detail))
}

fn write_input(path: &Path, samples: &[f64]) -> Result<(), String> {
    let file = std::fs::File::create(path).map_err(err)?;
    wav_write(std::io::BufWriter::new(file), &Waveform::new(samples.to_vec(), 16_000).map_err(err)?).map_err(err)?;
    Ok(())
}

fn list_files(dir: &Path) -> Result<Vec<String>, String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(err)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    names.sort();
    Ok(names)
}
