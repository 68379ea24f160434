use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vvt_core::AttentionMode;

mod commands;
mod error;

use error::CliResult;

#[derive(Parser, Debug)]
#[command(name = "vvt", version, about = "Vicinity attention vision transformer toolkit")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the oracle-equivalence, invariant and gradient suites.
    Verify(VerifyArgs),
    /// Print parameter count and GFLOPs of a variant.
    Report(ReportArgs),
    /// Sweep input resolutions and write a CSV of cost and timings.
    Bench(BenchArgs),
    /// Train from a JSON config; writes log.jsonl and a checkpoint.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on a config's dataset.
    Eval(EvalArgs),
    /// Train the same config under several attention modes and compare.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    /// Oracle tolerance 1e-10.
    Double,
    /// Relaxes the oracle tolerance to 1e-3.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Fault {
    Oracle,
    Gradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn enabled(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Convention {
    /// One multiply-add counts as one FLOP.
    Mac,
    /// One multiply-add counts as two FLOPs.
    Mac2,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Oracle-equivalence tolerance set.
    #[arg(long, value_enum, default_value = "double")]
    precision: Precision,
    /// Plant a defect to confirm the suites fail.
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
    /// Emit the suite results as JSON.
    #[arg(long)]
    json: bool,
}

/// Model options shared by `report` and `bench`.
#[derive(Args, Debug)]
struct ModelArgs {
    /// tiny, small, medium or large.
    #[arg(long, default_value = "tiny")]
    variant: String,
    /// vicinity2d, 1dlocality, nolocality or softmax.
    #[arg(long, default_value = "vicinity2d")]
    mode: AttentionMode,
    /// Feature preserving connection.
    #[arg(long, value_enum, default_value = "on")]
    fpc: Toggle,
    /// Feature reduction ratio for every stage.
    #[arg(long)]
    fr: Option<usize>,
    /// Classifier width.
    #[arg(long, default_value_t = 1000)]
    classes: usize,
    /// Divide every stage's channels (desk-scale models).
    #[arg(long, default_value_t = 1)]
    channel_div: usize,
    /// Comma-separated per-stage depths replacing the variant's.
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Input side in pixels; must be a multiple of 32.
    #[arg(long, default_value_t = 224)]
    res: usize,
    /// FLOP counting convention.
    #[arg(long, value_enum, default_value = "mac")]
    convention: Convention,
    /// Emit machine-readable JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated attention modes to sweep.
    #[arg(long, value_delimiter = ',', default_value = "vicinity2d,softmax")]
    modes: Vec<AttentionMode>,
    /// Comma-separated input sides; each a multiple of 32.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    res: Vec<usize>,
    /// Timed forwards per point (after one discarded warmup).
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// FLOP counting convention.
    #[arg(long, value_enum, default_value = "mac")]
    convention: Convention,
    /// Skip timing; wall_ms is written as NA.
    #[arg(long)]
    analytic_only: bool,
    /// CSV output path.
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

/// Overrides applied on top of a training config file.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON training config.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's attention mode.
    #[arg(long)]
    mode: Option<AttentionMode>,
    /// Override the feature preserving connection.
    #[arg(long, value_enum)]
    fpc: Option<Toggle>,
    /// Override every stage's feature reduction ratio.
    #[arg(long)]
    fr: Option<usize>,
    /// Override total_epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Root for relative dataset paths [default: $VVT_DATA_DIR].
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for log.jsonl and checkpoint/.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which split to score.
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated modes; each run goes to <out>/<mode>.
    #[arg(long, value_delimiter = ',', default_value = "nolocality,vicinity2d")]
    modes: Vec<AttentionMode>,
    #[arg(long, default_value = "runs/ablation")]
    out: PathBuf,
}

fn run(cli: Cli) -> CliResult {
    let seed = cli.seed;
    match cli.command {
        Command::Verify(a) => commands::verify(&a, seed),
        Command::Report(a) => commands::report(&a),
        Command::Bench(a) => commands::bench(&a, seed),
        Command::Train(a) => commands::train(&a, seed),
        Command::Eval(a) => commands::eval(&a, seed),
        Command::Ablate(a) => commands::ablate(&a, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
