//! `pcmamba`: generate phantoms, train and evaluate segmentation networks,
//! run the verification probes and time the core kernels.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a runtime failure,
//! 3 when `verify` finishes but a check fails.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "pcmamba",
    version,
    about = "Predictive-corrective state-space segmentation toolkit"
)]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "PCMAMBA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic phantom dataset.
    GenData(GenDataArgs),
    /// Trains one network variant.
    Train(TrainArgs),
    /// Scores a checkpoint on a dataset, one CSV row per sample and foreground class.
    Eval(EvalArgs),
    /// Runs verification probes and writes one JSON report per probe.
    Verify(VerifyArgs),
    /// Times a kernel over a list of sizes.
    Bench(BenchArgs),
    /// Prints the summary table of a report directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 240)]
    pub n: usize,
    /// Image size as HxW; both multiples of 32.
    #[arg(long, default_value = "64x64")]
    pub size: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of the additive noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// `MIN-MAX/RMIN-RMAX` lesion counts and radii, or `none`.
    #[arg(long)]
    pub lesions: Option<String>,
    /// Train, validation and test fractions, e.g. `0.8,0.2,0`.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Full,
    CrnOnly,
    RandomMask,
    PpmOnly,
    CnnCrn,
    E2e,
}

impl From<VariantArg> for pcmamba::network::VariantKind {
    fn from(v: VariantArg) -> Self {
        use pcmamba::network::VariantKind as V;
        match v {
            VariantArg::Full => V::FullPc,
            VariantArg::CrnOnly => V::CrnOnly,
            VariantArg::RandomMask => V::RandomMaskPpm,
            VariantArg::PpmOnly => V::PpmOnly,
            VariantArg::CnnCrn => V::CnnCrn,
            VariantArg::E2e => V::PlainE2e,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// `key = value` file of network and training settings; flags win over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed of batch order and random masks.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the parameter initialisation.
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// Runs the loop without updating parameters.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Which samples of the dataset to score.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    /// Seed of the random-mask variant's coin flips.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pixel spacing applied to the boundary distances.
    #[arg(long, default_value_t = 1.0)]
    pub spacing: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Grad,
    Scan,
    Convergence,
    Smoothness,
    Biasvar,
    DataEfficiency,
    All,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds of the training-based probes.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    /// Random instances per sequence length in the scan suite.
    #[arg(long, default_value_t = 20)]
    pub scan_seeds: u64,
    /// Network and training settings of the training-based probes.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Phantom size of the training-based probes.
    #[arg(long, default_value = "64x64")]
    pub size: String,
    /// Samples of the generated dataset (train and validation together).
    #[arg(long, default_value_t = 240)]
    pub n: usize,
    /// Epoch budget of the convergence probe.
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.9)]
    pub dice_threshold: f64,
    /// Epochs within which the threshold must be reached.
    #[arg(long, default_value_t = 5)]
    pub target_epochs: usize,
    #[arg(long, default_value_t = 6)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub radius: f64,
    #[arg(long, default_value_t = 8)]
    pub resamples: usize,
    #[arg(long, default_value_t = 32)]
    pub pool: usize,
    #[arg(long, default_value_t = 3)]
    pub resample_epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub probe_points: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchOp {
    Scan,
    Ppm,
    Crn,
    Forward,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub op: BenchOp,
    /// Sequence lengths for `scan`, grid sides otherwise.
    #[arg(long, default_value = "64,256,1024")]
    pub sizes: String,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Channels of the token grid.
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub dir: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    if let Some(k) = cli.threads {
        if k == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Report(a) => commands::report(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pcmamba: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
