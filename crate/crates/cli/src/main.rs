// SPDX-License-Identifier: MIT OR Apache-2.0

//! `eots`: command-line front end for the suppression engine.
//!
//! Exit codes: 0 success, 1 numerical failure (including a gradient check
//! over tolerance), 2 usage, validation or file-format error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "eots", version, about = "Suppress token semantics in text-embedding matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Regularize the negative-target and EOT columns of an EMB1 file.
    Suppress(SuppressArgs),
    /// EOT distance matrix, spectra and rank curve of an EMB1 file.
    Analyze(AnalyzeArgs),
    /// Full regularize-then-optimize sampling run on the toy denoiser.
    Optimize(OptimizeArgs),
    /// Finite-difference check of the analytic embedding gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Soft,
    Topk,
    Bottomk,
    Strengthen,
    Wnnm,
}

#[derive(Debug, Args)]
pub struct SuppressArgs {
    /// Input EMB1 file; its manifest is read from `<PATH>.json`.
    #[arg(long)]
    pub emb: PathBuf,
    /// Negative-target token positions (1-based within the prompt). Defaults
    /// to the manifest's `ne_positions`.
    #[arg(long, value_delimiter = ',')]
    pub ne: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = Mode::Soft)]
    pub mode: Mode,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    /// Number of singular values zeroed by `topk` / `bottomk`.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = eots_core::swr::DEFAULT_STRENGTHEN_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = eots_core::swr::DEFAULT_STRENGTHEN_BETA)]
    pub beta: f64,
    /// Strength of the adaptive `wnnm` weights `lambda / (sigma + 1e-6)`.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Output EMB1 file (manifest written alongside).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Euclidean,
    Cosine,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub emb: PathBuf,
    /// Negative targets for the spectrum of the [NE | EOT] matrix. Defaults
    /// to the manifest's `ne_positions`; without either only the EOT block is
    /// analyzed.
    #[arg(long, value_delimiter = ',')]
    pub ne: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = Metric::Euclidean)]
    pub metric: Metric,
    /// JSON report path.
    #[arg(long)]
    pub report: PathBuf,
    /// Also write `distance.csv` and `rank_curve.csv` into this directory.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Attention,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UpdateColsArg {
    All,
    NeEot,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Seed for the model weights, the initial latent and the fixture.
    /// `EOTS_SEED` takes precedence when set.
    #[arg(long, default_value_t = eots_core::fixtures::SUPPRESSION_FIXTURE_SEED)]
    pub seed: u64,
    #[arg(long = "T", default_value_t = 50)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 20)]
    pub cutoff: usize,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.1)]
    pub eta: f64,
    #[arg(long, value_enum, default_value_t = LossArg::Attention)]
    pub loss: LossArg,
    #[arg(long, value_enum, default_value_t = UpdateColsArg::All)]
    pub update_cols: UpdateColsArg,
    /// Soft-weighting strength applied before the sampling loop.
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_pl: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_nl: f64,
    /// Disable halving `eta` when the loss increases.
    #[arg(long)]
    pub no_eta_guard: bool,
    /// Embeddings to optimize instead of the seeded fixture.
    #[arg(long, requires = "ne")]
    pub emb: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub ne: Option<Vec<usize>>,
    /// Directory for `trace.csv`, `steps.csv`, `report.json` and `maps/`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of seeded instances, seeds `0..N`.
    #[arg(long, default_value_t = 20)]
    pub instances: u64,
    #[arg(long, default_value_t = eots_core::gradcheck::DEFAULT_STEP)]
    pub h: f64,
    #[arg(long, default_value_t = eots_core::gradcheck::DEFAULT_TOLERANCE)]
    pub tol: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Suppress(a) => commands::suppress(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Optimize(a) => commands::optimize(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eots: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
