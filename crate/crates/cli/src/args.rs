use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use opflab::labeler::SolverConfig;
use opflab::surrogate::{Activation, LabelLayout};
use opflab::training::{LossKind, Optimizer, TrainConfig};
use serde::{Deserialize, Serialize};

/// Seed used whenever neither a flag nor the config file gives one.
pub const DEFAULT_SEED: u64 = 0;

/// Environment variable that overrides the default output root.
pub const OUT_DIR_ENV: &str = "OPFLAB_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "opflab", version, about = "Learned AC-OPF surrogates: data, training, evaluation and studies")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Name of the run directory under the output root (default: derived
    /// from the subcommand and seed).
    #[arg(long, global = true)]
    pub run_name: Option<String>,
    /// Worker threads for labelling and gradient evaluation.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// JSON file with optional "train" and "solver" sections; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample loads around nominal and label them with the local solver.
    GenData(GenDataArgs),
    /// Train a surrogate on a labelled dataset.
    Train(TrainArgs),
    /// Evaluate a trained surrogate on a labelled dataset.
    Eval(EvalArgs),
    /// Solve one AC-OPF instance and print the outcome as JSON.
    Solve(SolveArgs),
    /// Reproduce one of the studies.
    Study {
        #[command(subcommand)]
        study: StudyCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum StudyCommand {
    /// MSE and cost of the three-generator counterexample.
    Fig1,
    /// Load sweep on the 3-bus discontinuity system with both losses.
    Sweep(SweepArgs),
    /// Train both losses on one dataset over several seeds and compare.
    Compare(CompareArgs),
}

/// A built-in case name (fig1, two-bus, discontinuity, case39) or a path to
/// a MATPOWER `.m` file or a native case file.
#[derive(Debug, Args)]
pub struct CaseArg {
    #[arg(long)]
    pub case: String,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub case: CaseArg,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Half-width of the uniform band around nominal loads, as a fraction.
    #[arg(long, default_value_t = opflab::pipeline::DEFAULT_RANGE_FRAC)]
    pub range_frac: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub case: CaseArg,
    /// Dataset file written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Split the dataset first and train on this fraction; the splits are
    /// written next to the model.
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub case: CaseArg,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub case: CaseArg,
    /// Active loads per bus in p.u. (default: nominal).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub pd: Option<Vec<f64>>,
    /// Reactive loads per bus in p.u. (default: nominal).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub qd: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    /// Seed for both the labelling solves and the training runs.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Case to compare on (default: the 3-bus discontinuity system).
    #[arg(long, default_value = "discontinuity")]
    pub case: String,
    /// Existing dataset; generated from --count and --range-frac when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = opflab::pipeline::studies::COMPARE_SAMPLES)]
    pub count: usize,
    #[arg(long, default_value_t = opflab::pipeline::DEFAULT_RANGE_FRAC)]
    pub range_frac: f64,
    /// Seed for generating the dataset when --data is absent.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// One split and one pair of trained models per seed.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    /// Allow cases with more than a handful of buses (runs take hours).
    #[arg(long)]
    pub long: bool,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub solver: SolverFlags,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long, value_parser = parse::<LossKind>)]
    pub loss: Option<LossKind>,
    /// Part of the label the MSE loss compares: full or generation.
    #[arg(long, value_parser = parse::<LabelLayout>)]
    pub mse_layout: Option<LabelLayout>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// 0 trains full batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub multiplier_init: Option<f64>,
    /// Hidden layer widths, e.g. 60,60,60.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, value_parser = parse::<Activation>)]
    pub activation: Option<Activation>,
    /// Angle box in radians as lo,hi.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, num_args = 1)]
    pub angle_box: Option<Vec<f64>>,
    #[arg(long, value_parser = parse::<Optimizer>)]
    pub optimizer: Option<Optimizer>,
    /// Feed raw loads to the network instead of standardised ones.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Args, Default)]
pub struct SolverFlags {
    #[arg(long)]
    pub feas_tol: Option<f64>,
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub max_inner: Option<usize>,
    #[arg(long)]
    pub ignore_flow_limits: bool,
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

/// Contents of the optional `--config` file. A section that is present
/// replaces the subcommand's defaults; flags then override single keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub train: Option<TrainConfig>,
    pub solver: Option<SolverConfig>,
    pub seed: Option<u64>,
}

impl TrainFlags {
    pub fn apply(&self, config: &mut TrainConfig) -> anyhow::Result<()> {
        if let Some(v) = self.loss {
            config.loss_kind = v;
        }
        if let Some(v) = self.mse_layout {
            config.mse_layout = v;
        }
        if let Some(v) = self.alpha {
            config.alpha = v;
        }
        if let Some(v) = self.rho {
            config.rho = v;
        }
        if let Some(v) = self.epochs {
            config.epochs = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.multiplier_init {
            config.multiplier_init = v;
        }
        if let Some(v) = &self.hidden {
            config.hidden = v.clone();
        }
        if let Some(v) = self.activation {
            config.activation = v;
        }
        if let Some(v) = &self.angle_box {
            match v.as_slice() {
                &[lo, hi] => config.angle_box = (lo, hi),
                _ => anyhow::bail!("--angle-box takes two values, lo,hi"),
            }
        }
        if let Some(v) = self.optimizer {
            config.optimizer = v;
        }
        if self.no_normalize {
            config.normalize_inputs = false;
        }
        Ok(())
    }
}

impl SolverFlags {
    pub fn apply(&self, config: &mut SolverConfig) {
        if let Some(v) = self.feas_tol {
            config.feas_tol = v;
        }
        if let Some(v) = self.starts {
            config.starts = v;
        }
        if let Some(v) = self.max_outer {
            config.max_outer = v;
        }
        if let Some(v) = self.max_inner {
            config.max_inner = v;
        }
        if self.ignore_flow_limits {
            config.ignore_flow_limits = true;
        }
    }
}
