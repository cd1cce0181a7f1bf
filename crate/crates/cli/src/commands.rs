use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ddpnkit::datagen::{default_sizes, generate_splits, Dataset, Process};
use ddpnkit::distributions::{MomentMode, PredictiveDistribution};
use ddpnkit::ensemble::{train_ensemble, Ensemble, MANIFEST_MAGIC};
use ddpnkit::losses::{Family, LossSpec};
use ddpnkit::metrics::{evaluate, ood_curve_metrics, MetricsReport, OodScores};
use ddpnkit::moments::{self, logspace, DEFAULT_N_TERMS};
use ddpnkit::network::{train_observed, MlpConfig, MlpModel, TrainConfig, REFERENCE_WIDTHS};
use ddpnkit::ood::{run_ood_eval, OodProtocolConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Settings;
use crate::output::Outputs;
use crate::{
    AttenuationArgs, CliError, EnsembleEvalArgs, EvalArgs, MomentsGridArgs, OodArgs,
    SimulateArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::io(format!("cannot open {}: {e}", path.display())))?;
    Dataset::read_csv(BufReader::new(file)).map_err(|e| CliError {
        message: format!("{}: {e}", path.display()),
        ..e.into()
    })
}

fn parse_widths(raw: &str) -> Result<Vec<usize>> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("none") {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|w| {
            w.trim()
                .parse::<usize>()
                .map_err(|e| CliError::usage(format!("bad hidden width '{w}': {e}")))
        })
        .collect()
}

fn reference_widths() -> String {
    REFERENCE_WIDTHS.map(|w| w.to_string()).join(",")
}

fn json_bytes<T: serde::Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::io(format!("cannot serialize report: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn moment_mode(exact: bool) -> MomentMode {
    if exact {
        MomentMode::ExactSeries
    } else {
        MomentMode::EfronApprox
    }
}

pub fn simulate(a: SimulateArgs, s: &Settings) -> Result<Outputs> {
    let process: Process = s.required(a.process, "process")?;
    let seed = s.or(a.seed, "seed", 0)?;
    let out = s.or(a.out, "out", PathBuf::from("."))?;
    let d = default_sizes(process);
    let sizes = [
        s.or(a.n_train, "n-train", d[0])?,
        s.or(a.n_val, "n-val", d[1])?,
        s.or(a.n_test, "n-test", d[2])?,
    ];
    let repeats = s.or(a.isolated_repeats, "isolated-repeats", 1)?;
    let splits = generate_splits(process, sizes, seed, repeats)?;
    let mut outputs = Outputs::new();
    for (name, ds) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        let mut buf = Vec::new();
        ds.data.write_csv(&mut buf)?;
        outputs.add(
            out.join("data").join(format!("{process}_s{seed}_{name}.csv")),
            buf,
        );
    }
    Ok(outputs)
}

fn run_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    #[cfg(feature = "parallel")]
    if let Some(k) = jobs {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build()
            .map_err(|e| CliError::usage(format!("cannot start {k} worker threads: {e}")))?;
        return Ok(pool.install(f));
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
    Ok(f())
}

pub fn train(a: TrainArgs, s: &Settings) -> Result<Outputs> {
    let train_path: PathBuf = s.required(a.train, "train")?;
    let val_path: PathBuf = s.required(a.val, "val")?;
    let train_set = read_dataset(&train_path)?;
    let val_set = read_dataset(&val_path)?;
    let family: Family = s.or(a.family, "family", Family::DoublePoisson)?;
    let beta = s.or(a.beta, "beta", 0.0)?;
    let hidden = parse_widths(&s.or(a.hidden, "hidden", reference_widths())?)?;
    let seed = s.or(a.seed, "seed", 0)?;
    let members = s.or(a.members, "members", 1)?;
    let jobs = s.pick(a.jobs, "jobs")?;
    if jobs == Some(0) {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let out = s.or(a.out, "out", PathBuf::from("."))?;

    let mlp = MlpConfig {
        gamma_bias_init: s.or(a.gamma_bias_init, "gamma-bias-init", 0.0)?,
        ..MlpConfig::new(train_set.dim(), hidden, family, seed)
    };
    let mut cfg = TrainConfig::new(LossSpec::new(family, beta)?, s.or(a.epochs, "epochs", 200)?, seed);
    cfg.batch_size = s.or(a.batch_size, "batch-size", cfg.batch_size)?;
    cfg.lr0 = s.or(a.lr, "lr", cfg.lr0)?;
    cfg.weight_decay = s.or(a.weight_decay, "weight-decay", cfg.weight_decay)?;
    cfg.select_on_unscaled = s.or(a.select_unscaled, "select-unscaled", false)?;
    cfg.standardize = s.or(a.standardize, "standardize", true)?;

    let (ensemble, reports) = run_pool(jobs, || {
        train_ensemble(&train_set, &val_set, &mlp, &cfg, members)
    })??;

    let stem = if beta != 0.0 {
        format!("{family}_b{beta}_s{seed}")
    } else {
        format!("{family}_s{seed}")
    };
    let ckpt_dir = out.join("ckpt");
    let mut outputs = Outputs::new();
    let mut ckpts = Vec::new();
    for (i, (model, report)) in ensemble.members().iter().zip(&reports).enumerate() {
        let path = ckpt_dir.join(format!("{stem}_m{i}.ckpt"));
        let mut buf = Vec::new();
        model.write_checkpoint(&mut buf)?;
        outputs.add(path.clone(), buf);
        ckpts.push(path);
        outputs.add(
            out.join("reports").join(format!("train_{stem}_m{i}.json")),
            json_bytes(report)?,
        );
    }
    let manifest = ckpt_dir.join(format!("{stem}.ensemble"));
    let text = Ensemble::manifest_text(&manifest, family, &ckpts);
    outputs.add(manifest, text.into_bytes());
    Ok(outputs)
}

/// A single checkpoint or an ensemble manifest.
enum Predictor {
    Single(MlpModel),
    Ensemble(Ensemble),
}

impl Predictor {
    fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)
            .map_err(|e| CliError::io(format!("cannot open {}: {e}", path.display())))?;
        let mut first = String::new();
        BufReader::new(file)
            .read_line(&mut first)
            .map_err(|e| CliError::io(format!("cannot read {}: {e}", path.display())))?;
        let with_path = |e: ddpnkit::Error| CliError {
            message: format!("{}: {e}", path.display()),
            ..e.into()
        };
        if first.trim() == MANIFEST_MAGIC {
            Ensemble::load_manifest(path).map(Predictor::Ensemble).map_err(with_path)
        } else {
            let file = fs::File::open(path)
                .map_err(|e| CliError::io(format!("cannot open {}: {e}", path.display())))?;
            MlpModel::read_checkpoint(BufReader::new(file))
                .map(Predictor::Single)
                .map_err(with_path)
        }
    }

    fn distributions(&self, data: &Dataset) -> Result<Vec<PredictiveDistribution>> {
        Ok(match self {
            Predictor::Single(m) => m.predict_distributions(data.x.view())?,
            Predictor::Ensemble(e) => e.mixture_predict_batch(data.x.view())?,
        })
    }
}

fn variances(dists: &[PredictiveDistribution], mode: MomentMode) -> Result<Vec<f64>> {
    Ok(dists
        .iter()
        .map(|d| d.moments(mode).map(|m| m.variance))
        .collect::<ddpnkit::Result<Vec<_>>>()?)
}

fn metrics_report(
    predictor: &Predictor,
    data: &Dataset,
    ood_path: Option<&Path>,
    mode: MomentMode,
) -> Result<MetricsReport> {
    let dists = predictor.distributions(data)?;
    let record = evaluate(&dists, &data.y, mode)?;
    let mut report = MetricsReport::from(&record);
    if let Some(path) = ood_path {
        let ood = read_dataset(path)?;
        let ood_var = variances(&predictor.distributions(&ood)?, mode)?;
        let scores = OodScores::new(record.variances.clone(), ood_var)?;
        report = report.with_ood(ood_curve_metrics(&scores));
    }
    Ok(report)
}

pub fn eval(a: EvalArgs, s: &Settings) -> Result<Outputs> {
    let model_path: PathBuf = s.required(a.model, "model")?;
    let data_path: PathBuf = s.required(a.data, "data")?;
    let ood_path: Option<PathBuf> = s.pick(a.ood_data, "ood-data")?;
    let mode = moment_mode(s.or(a.exact_moments, "exact-moments", false)?);
    let out = s.or(a.out, "out", PathBuf::from("."))?;
    let predictor = Predictor::load(&model_path)?;
    let data = read_dataset(&data_path)?;
    let report = metrics_report(&predictor, &data, ood_path.as_deref(), mode)?;
    let mut outputs = Outputs::new();
    outputs.add(
        out.join("reports").join(format!("eval_{}.json", file_stem(&model_path))),
        json_bytes(&report)?,
    );
    Ok(outputs)
}

pub fn ensemble_eval(a: EnsembleEvalArgs, s: &Settings) -> Result<Outputs> {
    let manifest: PathBuf = s.required(a.manifest, "manifest")?;
    let data_path: PathBuf = s.required(a.data, "data")?;
    let ood_path: Option<PathBuf> = s.pick(a.ood_data, "ood-data")?;
    let mode = moment_mode(s.or(a.exact_moments, "exact-moments", false)?);
    let out = s.or(a.out, "out", PathBuf::from("."))?;
    let mut ensemble = Ensemble::load_manifest(&manifest)?;
    ensemble.moment_mode = mode;
    if ensemble.input_dim() != 1 {
        return Err(CliError::usage(
            "ensemble-eval decomposes over a 1-D input grid; this ensemble has several inputs",
        ));
    }
    let data = read_dataset(&data_path)?;
    let predictor = Predictor::Ensemble(ensemble);
    let report = metrics_report(&predictor, &data, ood_path.as_deref(), mode)?;
    let Predictor::Ensemble(ensemble) = predictor else {
        unreachable!()
    };

    let xs = data.xs();
    let lo = s.or(a.grid_lo, "grid-lo", xs.iter().copied().fold(f64::INFINITY, f64::min))?;
    let hi = s.or(a.grid_hi, "grid-hi", xs.iter().copied().fold(f64::NEG_INFINITY, f64::max))?;
    let n = s.or(a.grid_n, "grid-n", 200)?;
    if n < 2 || !(hi > lo) {
        return Err(CliError::usage("the decomposition grid needs grid-n >= 2 and grid-hi > grid-lo"));
    }
    let grid: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();
    let x = Array2::from_shape_vec((n, 1), grid.clone()).expect("n rows");
    let summary = ensemble.summarize(x.view())?;
    let mut csv = String::from("x,mean,aleatoric,epistemic,q025,q975,total\n");
    for (x, p) in grid.iter().zip(&summary) {
        csv.push_str(&format!(
            "{x:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            p.mean, p.aleatoric, p.epistemic, p.q025, p.q975, p.total_var
        ));
    }

    let stem = file_stem(&manifest);
    let mut outputs = Outputs::new();
    let reports = out.join("reports");
    outputs.add(reports.join(format!("ensemble_eval_{stem}.json")), json_bytes(&report)?);
    outputs.add(reports.join(format!("decomposition_{stem}.csv")), csv.into_bytes());
    Ok(outputs)
}

fn parse_range(raw: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = raw.split(',').collect();
    let bad = || CliError::usage(format!("expected 'lo,hi', got '{raw}'"));
    if parts.len() != 2 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    if !(hi > lo) {
        return Err(bad());
    }
    Ok((lo, hi))
}

pub fn ood(a: OodArgs, s: &Settings) -> Result<Outputs> {
    let manifest: PathBuf = s.required(a.manifest, "manifest")?;
    let id_path: PathBuf = s.required(a.id_data, "id-data")?;
    let seed = s.or(a.seed, "seed", 0)?;
    let out = s.or(a.out, "out", PathBuf::from("."))?;
    let ensemble = Ensemble::load_manifest(&manifest)?;
    let id_set = read_dataset(&id_path)?;
    let ood_set = match (s.pick(a.ood_data, "ood-data")?, s.pick::<String>(a.ood_range, "ood-range")?) {
        (Some(path), None) => read_dataset(&path)?,
        (None, Some(range)) => {
            let (lo, hi) = parse_range(&range)?;
            if ensemble.input_dim() != 1 {
                return Err(CliError::usage("--ood-range needs a 1-D model"));
            }
            let n = s.or(a.n_ood, "n-ood", 500)?;
            // a stream independent of the holdout resampling
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00d_5eed);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
            Dataset::from_1d(xs, vec![0.0; n])?
        }
        _ => {
            return Err(CliError::usage(
                "give exactly one of --ood-data and --ood-range",
            ))
        }
    };
    let steps = s.or(a.alpha_steps, "alpha-steps", 1001)?;
    if steps < 2 {
        return Err(CliError::usage("--alpha-steps must be at least 2"));
    }
    let cfg = OodProtocolConfig {
        holdout_fraction: s.or(a.holdout, "holdout", 0.2)?,
        n_repeats: s.or(a.repeats, "repeats", 10)?,
        alpha_grid: (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect(),
        seed,
    };
    let report = run_ood_eval(&ensemble, &id_set, &ood_set, &cfg)?;
    let mut outputs = Outputs::new();
    outputs.add(
        out.join("reports").join(format!("ood_{}.json", file_stem(&manifest))),
        json_bytes(&report)?,
    );
    Ok(outputs)
}

pub fn moments_grid(a: MomentsGridArgs, s: &Settings) -> Result<Outputs> {
    let mus = logspace(
        s.or(a.mu_min, "mu-min", 0.01)?,
        s.or(a.mu_max, "mu-max", 40.0)?,
        s.or(a.n, "n", 21)?,
    );
    let vars = logspace(
        s.or(a.var_min, "var-min", 0.01)?,
        s.or(a.var_max, "var-max", 40.0)?,
        s.or(a.n, "n", 21)?,
    );
    if mus.iter().chain(&vars).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(CliError::usage("grid bounds must be positive and finite"));
    }
    let terms = s.or(a.terms, "terms", DEFAULT_N_TERMS)?;
    let grid = moments::moments_grid(&mus, &vars, terms)?;
    let mut buf = Vec::new();
    grid.write_csv(&mut buf)?;
    let out = s.or(a.out, "out", PathBuf::from("."))?;
    let mut outputs = Outputs::new();
    outputs.add(out.join("reports").join("moments_grid.csv"), buf);
    Ok(outputs)
}


/// Inputs at which the attenuation trace records the fitted curve.
fn trace_grid() -> Vec<f64> {
    (0..=110).map(|i| i as f64 / 10.0).collect()
}

pub fn attenuation_demo(a: AttenuationArgs, s: &Settings) -> Result<Outputs> {
    let beta = s.or(a.beta, "beta", 0.0)?;
    let gbi = s.or(a.gamma_bias_init, "gamma-bias-init", 0.0)?;
    let seed = s.or(a.seed, "seed", 0)?;
    let n = s.or(a.n, "n", default_sizes(Process::BetaStudy)[0])?;
    let every = s.or(a.trace_every, "trace-every", 50)?.max(1);
    let splits = generate_splits(Process::BetaStudy, [n, 100, 100], seed, 1)?;
    let mlp = MlpConfig {
        gamma_bias_init: gbi,
        ..MlpConfig::new(
            1,
            parse_widths(&s.or(a.hidden, "hidden", reference_widths())?)?,
            Family::DoublePoisson,
            seed,
        )
    };
    let mut cfg = TrainConfig::new(
        LossSpec::new(Family::DoublePoisson, beta)?,
        s.or(a.epochs, "epochs", 1000)?,
        seed,
    );
    cfg.lr0 = s.or(a.lr, "lr", cfg.lr0)?;
    cfg.batch_size = s.or(a.batch_size, "batch-size", cfg.batch_size)?;
    cfg.standardize = s.or(a.standardize, "standardize", false)?;

    let grid = trace_grid();
    let x = Array2::from_shape_vec((grid.len(), 1), grid.clone()).expect("grid rows");
    let mut csv = String::from("epoch,x,mean,gamma\n");
    let mut failure = None;
    let epochs = cfg.epochs;
    train_observed(&splits.train.data, &splits.val.data, &mlp, &cfg, |view| {
        if failure.is_some() || !(view.epoch % every == 0 || view.epoch == epochs) {
            return;
        }
        match view.model.predict_heads(x.view()) {
            Ok(heads) => {
                for (x, h) in grid.iter().zip(heads) {
                    let gamma = h.disp_head.unwrap_or(0.0).exp();
                    csv.push_str(&format!(
                        "{},{x:?},{:?},{gamma:?}\n",
                        view.epoch,
                        h.mean_head.exp()
                    ));
                }
            }
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let out = s.or(a.out, "out", PathBuf::from("."))?;
    let mut outputs = Outputs::new();
    outputs.add(
        out.join("reports")
            .join(format!("attenuation_b{beta}_g{gbi}_s{seed}.csv")),
        csv.into_bytes(),
    );
    Ok(outputs)
}
