//! `flowreg` command-line front end.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "flowreg", version, about = "Point cloud registration with flow embedding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic pair dataset.
    GenData(GenDataArgs),
    /// Train a model from a manifest.
    Train(TrainArgs),
    /// Register one source cloud against one template cloud.
    Register(RegisterArgs),
    /// Chain pairwise registrations over an ordered scan list.
    Odometry(OdometryArgs),
    /// Score methods on a dataset, or compare two trajectories.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Per-stage inference timing.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PerturbationPreset {
    Modelnet,
    Kitti,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Family {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Plane,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Dataset recipe (TOML); replaces every shape and perturbation flag.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "modelnet")]
    preset: PerturbationPreset,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "box")]
    shapes: Vec<Family>,
    /// Multiplies the default shape dimensions.
    #[arg(long, default_value_t = 1.0)]
    scale_units: f64,
    #[arg(long, default_value_t = 512)]
    points: usize,
    #[arg(long)]
    normals: bool,
    #[arg(long, default_value_t = 10)]
    pairs_per_shape: usize,
    #[arg(long)]
    translation_max_units: Option<f64>,
    #[arg(long)]
    rotation_max_deg: Option<f64>,
    #[arg(long)]
    noise_std_units: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add one duplicated-template pair per generated pair.
    #[arg(long)]
    augment: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints and the loss history.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Worker threads; overrides FLOWREG_THREADS and the manifest.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodKind {
    Network,
    IcpPoint2point,
    IcpPoint2plane,
    Identity,
    Oracle,
}

#[derive(Debug, Args, Clone)]
struct MethodArgs {
    /// Checkpoint for the network method.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// ICP correspondence gate.
    #[arg(long)]
    icp_max_dist_units: Option<f64>,
    #[arg(long, default_value_t = 50)]
    icp_max_iterations: usize,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long, value_enum, default_value = "network")]
    method: MethodKind,
    #[command(flatten)]
    method_args: MethodArgs,
    /// Also write the pose row to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["scans", "scan_list"])))]
struct OdometryArgs {
    /// Scans in temporal order.
    #[arg(long, num_args = 1..)]
    scans: Vec<PathBuf>,
    /// Text file with one scan path per line, relative to the file.
    #[arg(long)]
    scan_list: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trajectory output (pose rows).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["dataset", "gt_trajectory"])))]
struct EvaluateArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "network")]
    methods: Vec<MethodKind>,
    #[command(flatten)]
    method_args: MethodArgs,
    /// Regenerate the dataset at each noise level and tabulate aggregates.
    #[arg(long, value_delimiter = ',')]
    noise_sweep_units: Vec<f64>,
    /// Ground-truth trajectory for segment errors.
    #[arg(long, requires = "pred_trajectory")]
    gt_trajectory: Option<PathBuf>,
    #[arg(long, requires = "gt_trajectory")]
    pred_trajectory: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write the cases as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConfigPreset {
    Toy,
    Compact,
    Modelnet,
    Kitti,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Benchmark a trained model instead of a fresh preset.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "compact")]
    preset: ConfigPreset,
    #[arg(long, default_value_t = 512)]
    points: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the timings as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Register(a) => commands::register(a),
        Command::Odometry(a) => commands::odometry(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Bench(a) => commands::bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let detail = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {detail}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.tag(), e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
