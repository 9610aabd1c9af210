//! `segforge` command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for I/O or data errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "segforge", version, about = "Deterministic tooling for defect-segmentation datasets")]
struct Cli {
    /// Master seed for every stochastic step.
    #[arg(long, global = true, env = "SEGFORGE_SEED", default_value_t = segforge::DEFAULT_SEED)]
    seed: u64,

    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Number of defect classes; mask labels range over 0..=classes.
    #[arg(long, global = true, default_value_t = segforge::DEFAULT_NUM_CLASSES)]
    classes: u8,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Drop train samples that are near-duplicates of test samples.
    Dedup(DedupArgs),
    /// Run an augmentation pipeline over a dataset directory.
    Augment(AugmentArgs),
    /// Cut defect-free crops out of a dataset.
    Harvest(HarvestArgs),
    /// Shuffle a dataset into a batch manifest.
    Batches(BatchesArgs),
    /// Inject minority-class defects into the defect-free samples of each batch.
    Inject(InjectArgs),
    /// Sample few-shot episodes into a manifest.
    Episode(EpisodeArgs),
    /// Run the prototype head over an episode manifest and feature files.
    Protohead(ProtoheadArgs),
    /// Score predicted masks against ground truth.
    Metrics(MetricsArgs),
    /// Parameter-count table for a layer-spec file.
    Cost(CostArgs),
}

#[derive(Args, Debug)]
struct DedupArgs {
    train_dir: PathBuf,
    test_dir: PathBuf,
    /// Maximum Hamming distance treated as a duplicate.
    #[arg(long, default_value_t = 7)]
    threshold: u32,
    /// Also drop near-duplicates within the train set.
    #[arg(long)]
    intra_train: bool,
    /// Removal report (CSV).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Kept train ids; printed to stdout when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Copy the kept train samples here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    in_dir: PathBuf,
    out_dir: PathBuf,
    /// `standard` or a JSON pipeline config.
    #[arg(long, default_value = "standard")]
    pipeline: String,
    /// Restrict the input to these ids.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HarvestArgs {
    in_dir: PathBuf,
    out_dir: PathBuf,
    /// Square crop sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [100, 90, 80])]
    sizes: Vec<usize>,
    /// Crop positions tried per sample and size.
    #[arg(long, default_value_t = 20)]
    attempts: usize,
}

#[derive(Args, Debug)]
struct BatchesArgs {
    data_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InjectArgs {
    batches: PathBuf,
    source_dir: PathBuf,
    /// Directory holding the batch samples.
    #[arg(long)]
    data: PathBuf,
    /// Adjusted batches are written to `<out>/batch_<idx>/`.
    #[arg(long)]
    out: PathBuf,
    /// Probability of Poisson cloning instead of cut-paste; overrides the config.
    #[arg(long)]
    p_poisson: Option<f64>,
    /// JSON injection config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Injection report (CSV); printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EpisodeArgs {
    data_dir: PathBuf,
    /// Classes per episode.
    #[arg(long)]
    n: usize,
    /// Support shots per class.
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    queries: usize,
    #[arg(long, default_value_t = 1)]
    episodes: u64,
    /// Never draw background as an episode class.
    #[arg(long)]
    no_background: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ProtoheadArgs {
    manifest: PathBuf,
    /// Holds `<id>.feat` feature maps.
    features_dir: PathBuf,
    /// Holds the ground-truth masks.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = segforge::protohead::DEFAULT_ALPHA)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    pred_dir: PathBuf,
    gt_dir: PathBuf,
    /// JSON class-weight table (default: the culvert table).
    #[arg(long)]
    ciw: Option<PathBuf>,
    /// Per-class CSV output.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Score only these ids (default: every mask in the ground-truth directory).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Predictions are `<id>.feat` logit maps; also report losses.
    #[arg(long)]
    loss: bool,
}

#[derive(Args, Debug)]
struct CostArgs {
    layers: PathBuf,
    /// Count bias terms on every layer.
    #[arg(long)]
    bias: bool,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
