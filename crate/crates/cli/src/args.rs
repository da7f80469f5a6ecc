use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::grid::GridSpec;

#[derive(Debug, Parser)]
#[command(
    name = "pruneprint",
    version,
    about = "Revive pruned weights from their pruning footprint, and test Gaussian obfuscation against it"
)]
pub struct Cli {
    /// TOML settings file (or a previous JSON report); flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for layer or cell parallelism.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,

    /// Write a JSON report here.
    #[arg(long, global = true, value_name = "FILE")]
    pub report: Option<PathBuf>,

    /// More log output; repeat for debug detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Revive the pruned entries of every layer in a directory.
    Attack(AttackArgs),
    /// Replace exact zeros with Gaussian noise to hide the pruning mask.
    Defend(DefendArgs),
    /// Detectability analytics and the empirical detector.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Synthetic benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Idealized revivals with either true signs or true magnitudes.
    Ideal(IdealArgs),
}

#[derive(Debug, Args)]
pub struct LayerInput {
    /// Directory of NPY layers.
    #[arg(long = "in", value_name = "DIR")]
    pub input: Option<PathBuf>,

    /// File-name pattern selecting layers inside the directory.
    #[arg(long, value_name = "PATTERN")]
    pub glob: Option<String>,
}

#[derive(Debug, Args)]
pub struct CompletionArgs {
    /// ist-svd or softimpute.
    #[arg(long)]
    pub algorithm: Option<String>,
    #[arg(long, value_name = "R")]
    pub rank_cap: Option<usize>,
    #[arg(long, value_name = "N")]
    pub max_iters: Option<usize>,
    #[arg(long, value_name = "TOL")]
    pub rel_tol: Option<f64>,
    /// Number of automatic λ values.
    #[arg(long, value_name = "N")]
    pub lambda_steps: Option<usize>,
    /// Smallest automatic λ as a fraction of the largest.
    #[arg(long, value_name = "RATIO")]
    pub lambda_ratio: Option<f64>,
    /// Explicit comma-separated λ values, strictly decreasing.
    #[arg(long, value_delimiter = ',', value_name = "L1,L2,...")]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, value_name = "N")]
    pub oversample: Option<usize>,
    #[arg(long, value_name = "N")]
    pub power_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Fraction of pruned entries whose recovered sign is kept.
    #[arg(long, value_name = "K")]
    pub topk: Option<f64>,
    /// neuron-max, neuron-average, neuron-sample or layer-sample.
    #[arg(long)]
    pub magnitude: Option<String>,
    /// row or column.
    #[arg(long)]
    pub pool_axis: Option<String>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub layers: LayerInput,
    /// Directory for the revived layers.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// f4 or f8.
    #[arg(long)]
    pub dtype: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub completion: CompletionArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Debug, Args)]
pub struct DefendArgs {
    #[command(flatten)]
    pub layers: LayerInput,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Standard deviation of the replacement noise.
    #[arg(long, value_name = "SIGMA")]
    pub sigma_m: Option<f64>,
    /// Detector half-width; a tenth of the surviving-entry scale by default.
    #[arg(long, value_name = "W")]
    pub w: Option<f64>,
    #[arg(long)]
    pub dtype: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Excess-mass detector score of each layer.
    Detect(DetectArgs),
    /// Detection probability over an α × σ_M grid, as CSV.
    Surface(SurfaceArgs),
    /// Detection probability for one parameter set.
    P(PArgs),
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// An NPY file, or a directory filtered by --glob.
    #[arg(long = "in", value_name = "PATH")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "PATTERN")]
    pub glob: Option<String>,
    #[arg(long, value_name = "W")]
    pub w: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SurfaceArgs {
    /// Linear grid start:stop:count.
    #[arg(long, value_name = "START:STOP:COUNT")]
    pub alpha: Option<GridSpec>,
    /// Geometric grid start:stop:count.
    #[arg(long, value_name = "START:STOP:COUNT")]
    pub sigma_m: Option<GridSpec>,
    #[arg(long, value_name = "SIGMA")]
    pub sigma_u: Option<f64>,
    #[arg(long, value_name = "W")]
    pub w: Option<f64>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_name = "SIGMA")]
    pub sigma_m: Option<f64>,
    #[arg(long, value_name = "SIGMA")]
    pub sigma_u: Option<f64>,
    #[arg(long, value_name = "W")]
    pub w: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Generate, prune, optionally defend, attack and score synthetic matrices.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SynthCellArgs {
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, value_name = "STD")]
    pub noise_std: Option<f64>,
    #[arg(long, value_name = "SIGMA")]
    pub target_sigma: Option<f64>,
    /// Uniform pruning probability.
    #[arg(long, value_name = "FRAC")]
    pub mask_frac: Option<f64>,
}

impl SynthCellArgs {
    pub fn any(&self) -> bool {
        self.rows.is_some()
            || self.cols.is_some()
            || self.rank.is_some()
            || self.noise_std.is_some()
            || self.target_sigma.is_some()
            || self.mask_frac.is_some()
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory for the CSV metric tables.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub cell: SynthCellArgs,
    /// Also sweep the default obfuscation ladder on the cell.
    #[arg(long)]
    pub defense_sweep: bool,
    #[command(flatten)]
    pub completion: CompletionArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
}

#[derive(Debug, Args)]
pub struct IdealArgs {
    /// Ground-truth NPY matrix; a synthetic one is generated when absent.
    #[arg(long, value_name = "FILE")]
    pub truth: Option<PathBuf>,
    /// Pruned NPY matrix whose exact zeros define the mask.
    #[arg(long, value_name = "FILE")]
    pub pruned: Option<PathBuf>,
    /// a (true magnitudes, random signs), b (true signs, sampled magnitudes),
    /// c (true signs, neuron-max) or all.
    #[arg(long)]
    pub variant: Option<String>,
    /// Directory for the revived matrices.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub cell: SynthCellArgs,
    #[arg(long)]
    pub pool_axis: Option<String>,
}
