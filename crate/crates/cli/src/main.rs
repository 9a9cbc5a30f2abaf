mod analysis;
mod experiment;
mod net;
mod settings;
mod util;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Anytime classifier pipeline: data, training, evaluation, curve analysis
/// and the human experiment service.
#[derive(Parser, Debug)]
#[command(name = "anytime", version)]
struct Cli {
    /// TOML config with one table per subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Verify the CIFAR-10 binaries and record class counts and grayscale stats.
    Prepare(PrepareArgs),
    /// Train a network from a named preset (paper | desk).
    Train(TrainArgs),
    /// Accuracy of every exit at every noise level.
    Evaluate(EvalArgs),
    /// Accuracy-vs-MFLOP curves per noise level, budgets and threshold calibration.
    Anytime(AnytimeArgs),
    /// Fit speed-accuracy curves and/or equivalent input noise to CSV data.
    Fit(FitArgs),
    /// Human-vs-network report: time/FLOP map, equivalent noise, efficiency.
    Compare(CompareArgs),
    /// Run the experiment service.
    Serve(ServeArgs),
    /// Convert session logs into trial CSVs and an aggregate curve file.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory holding the CIFAR-10 binary batches.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Use this many synthetic training images instead of CIFAR-10.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_images: Option<usize>,
    #[arg(long)]
    validation_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated noise SDs.
    #[arg(long, value_delimiter = ',')]
    noise: Option<Vec<f32>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct AnytimeArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Comma-separated compute budgets in MFLOP.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<f64>>,
    /// Calibrate a confidence threshold to this mean cost (MFLOP).
    #[arg(long)]
    target_mflop: Option<f64>,
    #[arg(long)]
    calibration_images: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Speed-accuracy CSV (cost column + accuracy, optional noise_sd and n).
    #[arg(long)]
    sat: Option<PathBuf>,
    /// Accuracy-vs-noise CSV (noise_sd, a condition column, accuracy).
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Chance floor.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    human: Option<PathBuf>,
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    align_human_sd: Option<f64>,
    #[arg(long)]
    align_network_sd: Option<f64>,
    #[arg(long)]
    test_sd: Option<f64>,
    #[arg(long)]
    sigma_test: Option<f64>,
    #[arg(long)]
    sigma_ref: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// CIFAR-10 directory for stimuli; synthetic stand-ins otherwise.
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    sessions: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

macro_rules! set {
    ($target:expr, $value:expr) => {
        if let Some(v) = $value {
            $target = v;
        }
    };
}

macro_rules! set_some {
    ($target:expr, $value:expr) => {
        if $value.is_some() {
            $target = $value;
        }
    };
}

macro_rules! apply_data {
    ($section:expr, $args:expr) => {
        set!($section.data_dir, $args.data_dir);
        set_some!($section.synthetic, $args.synthetic);
        set!($section.data_seed, $args.data_seed);
    };
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut file = settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Prepare(a) => {
            let s = &mut file.prepare;
            set!(s.data_dir, a.data_dir);
            set!(s.out_dir, a.out);
            net::prepare(s)
        }
        Command::Train(a) => {
            let s = &mut file.train;
            set!(s.preset, a.preset);
            apply_data!(s, a.data);
            set!(s.out_dir, a.out);
            set_some!(s.epochs, a.epochs);
            set_some!(s.seed, a.seed);
            set_some!(s.train_images, a.train_images);
            set_some!(s.validation_size, a.validation_size);
            set_some!(s.batch_size, a.batch_size);
            set_some!(s.learning_rate, a.lr);
            net::train_cmd(s)
        }
        Command::Evaluate(a) => {
            let s = &mut file.evaluate;
            set!(s.checkpoint, a.checkpoint);
            apply_data!(s, a.data);
            set!(s.out_dir, a.out);
            set!(s.noise, a.noise);
            set!(s.seed, a.seed);
            set!(s.batch_size, a.batch_size);
            set_some!(s.limit, a.limit);
            net::evaluate_cmd(s)
        }
        Command::Anytime(a) => {
            let s = &mut file.anytime;
            let e = a.eval;
            set!(s.checkpoint, e.checkpoint);
            apply_data!(s, e.data);
            set!(s.out_dir, e.out);
            set!(s.noise, e.noise);
            set!(s.seed, e.seed);
            set!(s.batch_size, e.batch_size);
            set_some!(s.limit, e.limit);
            set!(s.budgets_mflop, a.budgets);
            set_some!(s.target_mflop, a.target_mflop);
            set!(s.calibration_images, a.calibration_images);
            net::anytime_cmd(s)
        }
        Command::Fit(a) => {
            let s = &mut file.fit;
            set_some!(s.sat, a.sat);
            set_some!(s.noise, a.noise);
            set!(s.gamma, a.gamma);
            set!(s.out_dir, a.out);
            analysis::fit_cmd(s)
        }
        Command::Compare(a) => {
            let s = &mut file.compare;
            set_some!(s.human, a.human);
            set_some!(s.network, a.network);
            set!(s.gamma, a.gamma);
            set_some!(s.align_human_sd, a.align_human_sd);
            set_some!(s.align_network_sd, a.align_network_sd);
            set_some!(s.test_sd, a.test_sd);
            set_some!(s.sigma_test, a.sigma_test);
            set_some!(s.sigma_ref, a.sigma_ref);
            set!(s.out_dir, a.out);
            analysis::compare_cmd(s)
        }
        Command::Serve(a) => {
            let s = &mut file.serve;
            set!(s.bind, a.bind);
            set!(s.port, a.port);
            set!(s.data_dir, a.data_dir);
            set_some!(s.dataset_dir, a.dataset_dir);
            set_some!(s.ui_dir, a.ui_dir);
            experiment::serve_cmd(s)
        }
        Command::Export(a) => {
            let s = &mut file.export;
            set!(s.sessions_dir, a.sessions);
            set!(s.out_dir, a.out);
            experiment::export_cmd(s)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
