//! `opseval`: batch frontend for open-set panoptic evaluation, dataset
//! splitting, proposal handling, decision rules and loss verification.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or data error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "opseval", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate predictions against ground truth and print PQ/SQ/RQ tables.
    Eval(EvalArgs),
    /// Build a known/unknown (or zero-shot) split of a dataset.
    Split(SplitArgs),
    /// Assign known, void or background roles to proposals.
    LabelProposals(LabelArgs),
    /// Emit one void proposal per connected void region.
    VoidComponents(VoidArgs),
    /// Keep proposals whose objectiveness clears a threshold.
    PseudoFilter(PseudoArgs),
    /// Apply an open-set decision rule to scored proposals.
    Decide(DecideArgs),
    /// Verify loss gradients by finite differences.
    LossCheck(LossCheckArgs),
    /// Check reported PQ/SQ/RQ/R/P rows for internal consistency.
    ConsistencyCheck(ConsistencyArgs),
    /// Write a synthetic dataset (and optionally a noisy prediction).
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GroupArg {
    Known,
    Unknown,
    Unseen,
    All,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Ground-truth dataset directory.
    gt_dir: PathBuf,
    /// Prediction dataset directory.
    pred_dir: PathBuf,
    /// Metadata file whose categories replace the ground-truth registry.
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Rows to print; repeat for several groups. Defaults to all groups.
    #[arg(long, value_enum)]
    group: Vec<GroupArg>,
    /// Worker threads.
    #[arg(long, env = "OPSEVAL_JOBS")]
    jobs: Option<usize>,
    /// Disable the void, crowd and open-set conventions.
    #[arg(long)]
    strict: bool,
    /// Keep unknown and unseen categories apart instead of pooling them.
    #[arg(long)]
    closed_set: bool,
    /// Also print per-category rows.
    #[arg(long)]
    per_category: bool,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Write the JSON report to this file as well.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["ratio", "zero_shot", "classes"])))]
struct SplitArgs {
    in_dir: PathBuf,
    out_dir: PathBuf,
    /// Unknown ratio in percent: 5, 10 or 20.
    #[arg(long)]
    ratio: Option<u32>,
    /// Zero-shot split built on the 5% split.
    #[arg(long)]
    zero_shot: bool,
    /// Comma-separated thing class names to mark unknown (not a standard split).
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    /// Keep every segment and image and only rewrite category statuses, as
    /// needed for evaluation ground truth.
    #[arg(long)]
    eval_set: bool,
}

#[derive(Debug, Args)]
struct LabelArgs {
    gt_dir: PathBuf,
    proposals: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    known_iou: f64,
    #[arg(long, default_value_t = 0.5)]
    void_fraction: f64,
}

#[derive(Debug, Args)]
struct VoidArgs {
    gt_dir: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Use 8-connectivity instead of 4-connectivity.
    #[arg(long)]
    eight: bool,
}

#[derive(Debug, Args)]
struct PseudoArgs {
    proposals: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    delta: f64,
    /// Only consider proposals labeled void.
    #[arg(long)]
    void_only: bool,
    #[arg(short, long)]
    out: PathBuf,
    /// Where to write the proposals that did not pass.
    #[arg(long)]
    dropped: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DecideArgs {
    proposals: PathBuf,
    #[arg(long, default_value = "dual")]
    strategy: opseg_core::decision::Strategy,
    #[arg(long, default_value_t = 0.5)]
    tau_known: f64,
    #[arg(long, default_value_t = 0.5)]
    tau_obj: f64,
    /// Logit index of the auxiliary class (void-train, aux-gate).
    #[arg(long)]
    aux_index: Option<usize>,
    /// Category id for each thing logit, comma separated. Defaults to the
    /// known thing classes of `--gt` in id order.
    #[arg(long, value_delimiter = ',')]
    class_map: Option<Vec<u32>>,
    /// Verdict output file.
    #[arg(short, long)]
    out: PathBuf,
    /// Ground-truth dataset supplying image sizes and categories.
    #[arg(long, requires = "panoptic_out")]
    gt: Option<PathBuf>,
    /// Write box-mask panoptic predictions to this directory.
    #[arg(long, requires = "gt")]
    panoptic_out: Option<PathBuf>,
    /// Skip unknown masks overlapping an earlier unknown mask (IoU > 0.5).
    #[arg(long)]
    suppress_unknown_overlap: bool,
}

#[derive(Debug, Args)]
struct LossCheckArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Evaluate at all-zero weights.
    #[arg(long)]
    zero_weights: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ConsistencyArgs {
    /// CSV with columns label,pq,sq,rq,recall,precision.
    table: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    pq_tol: f64,
    #[arg(long, default_value_t = 0.20)]
    rq_tol: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    images: u64,
    #[arg(long, default_value_t = 64)]
    width: u32,
    #[arg(long, default_value_t = 64)]
    height: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a perturbed copy here.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Maximum shift of predicted things, in pixels.
    #[arg(long, default_value_t = 2)]
    jitter: u32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(a) => commands::eval(a),
        Command::Split(a) => commands::split(a),
        Command::LabelProposals(a) => commands::label(a),
        Command::VoidComponents(a) => commands::void_components(a),
        Command::PseudoFilter(a) => commands::pseudo_filter(a),
        Command::Decide(a) => commands::decide(a),
        Command::LossCheck(a) => commands::loss_check(a),
        Command::ConsistencyCheck(a) => commands::consistency(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
