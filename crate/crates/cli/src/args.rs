use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gensens::estimators::VarianceRoute;
use gensens::sensitivity::{GridSpec, SigmaMode};
use gensens::weights::{DeconfoundingMethod, GeneralizationMethod, WeightConfig};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "gensens", version, about = "Generalize treatment effects from several trials and probe omitted effect modifiers")]
pub struct Cli {
    /// Worker threads (default: all cores). Never changes results.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Weights, point estimate and bootstrap interval.
    Estimate(EstimateArgs),
    /// Full sensitivity workflow: bounds, robustness values, contour and benchmarks.
    Sensitivity(SensitivityArgs),
    /// Leave-one-modifier-out benchmarking (MREMS).
    Benchmark(BenchmarkArgs),
    /// Bias contour grid and SVG, from data or from given summary numbers.
    Contour(ContourArgs),
    /// Wald test that all studies generalize to the same effect.
    Wald(WaldArgs),
    /// Draw one dataset from the three-trial simulation design.
    Simulate(SimulateArgs),
    /// Rejection rates of the Wald test over the simulation design.
    Power(PowerArgs),
    /// Exact theorem checks on discrete populations.
    Oracle(OracleArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CommonArgs {
    /// Master seed; a random one is drawn and printed when absent.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Schema JSON; otherwise roles come from --modifiers / --adjusters.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub modifiers: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub adjusters: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenMethod {
    EntropyBalancing,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeconfMethod {
    Logistic,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    Hajek,
    PooledTrial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaArg {
    Sharp,
    Conservative,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct WeightArgs {
    #[arg(long, value_enum, default_value = "entropy-balancing")]
    pub generalization: GenMethod,
    #[arg(long, value_enum, default_value = "logistic")]
    pub deconfounding: DeconfMethod,
    /// Propensities closer than this to 0 or 1 raise a warning.
    #[arg(long, default_value_t = 0.01)]
    pub propensity_epsilon: f64,
    /// Use weights even when their fit did not converge (flagged in the report).
    #[arg(long)]
    pub allow_unconverged: bool,
}

impl WeightArgs {
    pub fn config(&self) -> WeightConfig {
        WeightConfig {
            generalization: match self.generalization {
                GenMethod::EntropyBalancing => GeneralizationMethod::EntropyBalancing,
                GenMethod::Logistic => GeneralizationMethod::Logistic,
            },
            deconfounding: match self.deconfounding {
                DeconfMethod::Logistic => DeconfoundingMethod::LogisticPerStudy,
                DeconfMethod::Constant => DeconfoundingMethod::Constant,
            },
            propensity_epsilon: self.propensity_epsilon,
            allow_unconverged: self.allow_unconverged,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VarianceArgs {
    #[arg(long, value_enum, default_value = "hajek")]
    pub variance_route: Route,
    /// All studies are randomized trials: shorthand for --variance-route pooled-trial.
    #[arg(long)]
    pub randomized: bool,
}

impl VarianceArgs {
    pub fn route(&self) -> VarianceRoute {
        if self.randomized || self.variance_route == Route::PooledTrial {
            VarianceRoute::PooledTrial
        } else {
            VarianceRoute::Hajek
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GridArgs {
    #[arg(long, default_value_t = 0.99)]
    pub r2_max: f64,
    #[arg(long, default_value_t = 0.01)]
    pub r2_step: f64,
    #[arg(long, default_value_t = 0.99)]
    pub rho_max: f64,
    #[arg(long, default_value_t = 0.01)]
    pub rho_step: f64,
}

impl GridArgs {
    pub fn spec(&self) -> GridSpec {
        GridSpec {
            r2_min: 0.0,
            r2_max: self.r2_max,
            r2_step: self.r2_step,
            rho_min: -self.rho_max,
            rho_max: self.rho_max,
            rho_step: self.rho_step,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub weights: WeightArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub variance: VarianceArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    /// Bootstrap replicates (0 skips the interval).
    #[arg(long, default_value_t = 1000)]
    pub boot: usize,
    /// Generalize from this study alone.
    #[arg(long)]
    pub single_study: Option<u32>,
    /// Write unit_index,w,lambda,gamma here.
    #[arg(long)]
    #[serde(skip)]
    pub dump_weights: Option<PathBuf>,
    /// Write the bootstrap replicates here.
    #[arg(long)]
    #[serde(skip)]
    pub dump_replicates: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SensitivityArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub weights: WeightArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub variance: VarianceArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridArgs,
    #[arg(long, default_value_t = 1000)]
    pub boot: usize,
    #[arg(long, value_enum, default_value = "conservative")]
    pub sigma_mode: SigmaArg,
    /// Shares q of the estimate for RV_q.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub q: Vec<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub dump_replicates: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub weights: WeightArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub variance: VarianceArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value = "conservative")]
    pub sigma_mode: SigmaArg,
    /// Bias threshold for MREMS_α (same sign as the estimate), e.g. from `sensitivity`.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ContourArgs {
    #[arg(long, required_unless_present = "tau")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub modifiers: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub adjusters: Option<Vec<String>>,
    /// Point estimate, for a grid from summary numbers instead of data.
    #[arg(long, requires_all = ["sigma2", "var_w"], conflicts_with = "data", allow_hyphen_values = true)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub var_w: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub weights: WeightArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub variance: VarianceArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridArgs,
    /// Bootstrap replicates for per-cell coverage (0 skips it; data mode only).
    #[arg(long, default_value_t = 0)]
    pub boot: usize,
    #[arg(long, value_enum, default_value = "conservative")]
    pub sigma_mode: SigmaArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct WaldArgs {
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub estimates: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub sds: Vec<f64>,
    /// JSON file with `estimates` and `sds`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Estimate each study from data instead (bootstrap sds).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub modifiers: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub adjusters: Option<Vec<String>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub weights: WeightArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 1000)]
    pub boot: usize,
    /// Skip studies with fewer units (data mode).
    #[arg(long, default_value_t = 0)]
    pub min_n: usize,
    /// Skip studies whose largest |SMD| against the target reaches this (data mode).
    #[arg(long)]
    pub max_smd: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimArgs {
    /// Log odds ratio of trial selection per unit of Z.
    #[arg(long, default_value_t = 1.25f64.ln())]
    pub selection_log_or: f64,
    #[arg(long, default_value_t = 0.5)]
    pub correlation: f64,
    /// Give weight estimation the omitted modifier X³ as well.
    #[arg(long)]
    pub include_withheld: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 1.5)]
    pub k: f64,
    /// Replicate index within the seed's stream.
    #[arg(long, default_value_t = 0)]
    pub rep: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub sim: SimArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PowerArgs {
    #[arg(long, value_delimiter = ',', default_value = "500,1000,2000")]
    pub n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,1.5")]
    pub k: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.15")]
    pub alpha: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = 1000)]
    pub boot: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub sim: SimArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OracleArgs {
    /// Bundled population set.
    #[arg(long, default_value = "default")]
    pub suite: String,
    /// Extra population JSON files, checked after the suite.
    #[arg(long)]
    pub population: Vec<PathBuf>,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out: PathBuf,
}

impl From<SigmaArg> for SigmaMode {
    fn from(s: SigmaArg) -> Self {
        match s {
            SigmaArg::Sharp => SigmaMode::Sharp,
            SigmaArg::Conservative => SigmaMode::Conservative,
        }
    }
}
