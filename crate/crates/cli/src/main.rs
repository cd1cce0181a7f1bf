//! `ddpnkit` — reproducible count-regression experiments from the command line.
//!
//! Exit codes: 0 success, 2 usage, 3 numeric divergence, 4 I/O, 1 anything else.

mod commands;
mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use ddpnkit::{Family, Process};

use config::ConfigFile;

#[derive(Debug, Parser)]
#[command(
    name = "ddpnkit",
    version,
    about = "Heteroscedastic count regression with the Double Poisson distribution",
    long_about = "Heteroscedastic count regression with the Double Poisson distribution.\n\n\
        Outputs go to <out>/data, <out>/ckpt and <out>/reports. A command that fails \
        leaves no output files behind.\n\n\
        Exit codes: 0 success, 2 usage, 3 numeric divergence, 4 I/O, 1 other errors."
)]
struct Cli {
    /// Config file: flat `key = value` lines, optionally under `[subcommand]`
    /// headers. Explicit flags override config values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test CSVs for a synthetic process.
    Simulate(SimulateArgs),
    /// Train one model or an ensemble of independently seeded members.
    Train(TrainArgs),
    /// Evaluate a checkpoint or ensemble manifest on a dataset (metrics JSON).
    Eval(EvalArgs),
    /// Ensemble metrics plus a per-x aleatoric/epistemic decomposition CSV.
    EnsembleEval(EnsembleEvalArgs),
    /// Threshold-based OOD detection with the ensemble's total variance.
    Ood(OodArgs),
    /// Moment-deviation values of the Double Poisson over a target grid.
    MomentsGrid(MomentsGridArgs),
    /// Trace the mean and dispersion fit on the β-study data during training.
    AttenuationDemo(AttenuationArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// sine-conflation, misspec-poisson, misspec-nb or beta-study.
    #[arg(long)]
    process: Option<Process>,
    /// Generator seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output root [default: .].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training rows [default: 800 sine, 1400 misspec, 500 beta-study].
    #[arg(long)]
    n_train: Option<usize>,
    /// Validation rows [default: 100 sine, 200 misspec, 100 beta-study].
    #[arg(long)]
    n_val: Option<usize>,
    /// Test rows [default: 100 sine, 400 misspec, 100 beta-study].
    #[arg(long)]
    n_test: Option<usize>,
    /// Copies of each β-study isolated point in the training split [default: 1].
    #[arg(long)]
    isolated_repeats: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training CSV (`x,y`).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation CSV used for checkpoint selection.
    #[arg(long)]
    val: Option<PathBuf>,
    /// double_poisson, poisson, neg_binomial or gaussian [default: double_poisson].
    #[arg(long)]
    family: Option<Family>,
    /// β of the β-scaled NLL (Double Poisson and Gaussian only) [default: 0].
    #[arg(long)]
    beta: Option<f64>,
    /// Hidden widths, comma separated; `none` for a GLM [default: 128,128,128,64].
    #[arg(long)]
    hidden: Option<String>,
    /// Training epochs [default: 200].
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch size [default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate, cosine-annealed to zero [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Decoupled weight decay [default: 0.00001].
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Initial bias of the dispersion head [default: 0].
    #[arg(long)]
    gamma_bias_init: Option<f64>,
    /// Base seed; member i uses seed + i [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Ensemble size [default: 1].
    #[arg(long)]
    members: Option<usize>,
    /// Members trained concurrently [default: all cores].
    #[arg(long)]
    jobs: Option<usize>,
    /// Select checkpoints on the plain NLL instead of the β-scaled objective.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    select_unscaled: Option<bool>,
    /// Standardize features with training statistics [default: true].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    standardize: Option<bool>,
    /// Output root [default: .].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint (`.ckpt`) or ensemble manifest.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Evaluation CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Optional OOD CSV; adds auroc/aupr/fpr80 using predictive variance.
    #[arg(long)]
    ood_data: Option<PathBuf>,
    /// Use exact series moments instead of Efron's approximation.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    exact_moments: Option<bool>,
    /// Output root [default: .].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EnsembleEvalArgs {
    /// Ensemble manifest written by `train`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Evaluation CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Optional OOD CSV; adds auroc/aupr/fpr80 using total variance.
    #[arg(long)]
    ood_data: Option<PathBuf>,
    /// Lower end of the decomposition grid [default: smallest x in the data].
    #[arg(long)]
    grid_lo: Option<f64>,
    /// Upper end of the decomposition grid [default: largest x in the data].
    #[arg(long)]
    grid_hi: Option<f64>,
    /// Number of grid points [default: 200].
    #[arg(long)]
    grid_n: Option<usize>,
    /// Use exact series moments instead of Efron's approximation.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    exact_moments: Option<bool>,
    /// Output root [default: .].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OodArgs {
    /// Ensemble manifest written by `train`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// In-distribution test CSV.
    #[arg(long)]
    id_data: Option<PathBuf>,
    /// OOD CSV; alternatively use --ood-range.
    #[arg(long)]
    ood_data: Option<PathBuf>,
    /// Draw OOD inputs uniformly from `lo,hi` (1-D models only).
    #[arg(long)]
    ood_range: Option<String>,
    /// Number of OOD inputs drawn with --ood-range [default: 500].
    #[arg(long)]
    n_ood: Option<usize>,
    /// Fraction of ID scores held out to fit thresholds [default: 0.2].
    #[arg(long)]
    holdout: Option<f64>,
    /// Holdout resampling repeats [default: 10].
    #[arg(long)]
    repeats: Option<usize>,
    /// Number of evenly spaced α levels in [0, 1] [default: 1001].
    #[arg(long)]
    alpha_steps: Option<usize>,
    /// Seed for holdout resampling and OOD draws [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Output root [default: .].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MomentsGridArgs {
    /// Smallest target mean [default: 0.01].
    #[arg(long)]
    mu_min: Option<f64>,
    /// Largest target mean [default: 40].
    #[arg(long)]
    mu_max: Option<f64>,
    /// Smallest target variance [default: 0.01].
    #[arg(long)]
    var_min: Option<f64>,
    /// Largest target variance [default: 40].
    #[arg(long)]
    var_max: Option<f64>,
    /// Log-spaced points per axis [default: 21].
    #[arg(long)]
    n: Option<usize>,
    /// Partial-sum length [default: 100].
    #[arg(long)]
    terms: Option<usize>,
    /// Output root [default: .].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AttenuationArgs {
    /// β of the β-scaled NLL [default: 0].
    #[arg(long)]
    beta: Option<f64>,
    /// Initial bias of the log γ head [default: 0].
    #[arg(long)]
    gamma_bias_init: Option<f64>,
    /// Data and initialization seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs [default: 1000].
    #[arg(long)]
    epochs: Option<usize>,
    /// Hidden widths, comma separated [default: 128,128,128,64].
    #[arg(long)]
    hidden: Option<String>,
    /// β-study training rows before the isolated points [default: 500].
    #[arg(long)]
    n: Option<usize>,
    /// Initial learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size [default: 32].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Record the fitted curve every this many epochs [default: 50].
    #[arg(long)]
    trace_every: Option<usize>,
    /// Standardize features [default: false, matching the β-study runs].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    standardize: Option<bool>,
    /// Output root [default: .].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Other = 1,
    Usage = 2,
    Divergence = 3,
    Io = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Usage,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: ExitKind::Io,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ddpnkit::Error> for CliError {
    fn from(err: ddpnkit::Error) -> Self {
        use ddpnkit::Error as E;
        let kind = match &err {
            E::Usage(_) | E::Domain(_) => ExitKind::Usage,
            E::NumericDivergence { .. } | E::NumericOverflow(_) => ExitKind::Divergence,
            E::Io(_) | E::Parse(_) => ExitKind::Io,
            E::Shape { .. } => ExitKind::Other,
        };
        let mut message = err.to_string();
        if let E::NumericDivergence {
            partial: Some(report),
            ..
        } = &err
        {
            if let Ok(json) = serde_json::to_string(report) {
                message.push_str(&format!("\npartial training report: {json}"));
            }
        }
        Self { kind, message }
    }
}

/// Long option names accepted by `command`, as config keys.
fn known_keys(command: &str) -> Vec<String> {
    let cmd = Cli::command();
    cmd.find_subcommand(command)
        .map(|sub| {
            sub.get_arguments()
                .filter_map(|a| a.get_long())
                .filter(|l| *l != "config" && *l != "help")
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default()
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let name = match &cli.command {
        Command::Simulate(_) => "simulate",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::EnsembleEval(_) => "ensemble-eval",
        Command::Ood(_) => "ood",
        Command::MomentsGrid(_) => "moments-grid",
        Command::AttenuationDemo(_) => "attenuation-demo",
    };
    let settings = config.settings_for(name, &known_keys(name))?;
    let outputs = match cli.command {
        Command::Simulate(a) => commands::simulate(a, &settings)?,
        Command::Train(a) => commands::train(a, &settings)?,
        Command::Eval(a) => commands::eval(a, &settings)?,
        Command::EnsembleEval(a) => commands::ensemble_eval(a, &settings)?,
        Command::Ood(a) => commands::ood(a, &settings)?,
        Command::MomentsGrid(a) => commands::moments_grid(a, &settings)?,
        Command::AttenuationDemo(a) => commands::attenuation_demo(a, &settings)?,
    };
    outputs.commit()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind as u8)
        }
    }
}
