// Copyright 2026 The gateprune Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//     http://www.apache.org/licenses/LICENSE-2.0
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! `gateprune`: train and prune networks, evaluate checkpoints, and run the numerical
//! experiments (gradient-flow lab, prior curves, estimator benchmark).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gateprune_core::Error;

#[derive(Parser, Debug)]
#[command(name = "gateprune", version, about = "Bayesian gate pruning of neural networks during training")]
struct Cli {
    /// Log verbosity: error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "info", env = "GATEPRUNE_LOG")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train with simultaneous pruning, finalize gates, fine-tune and evaluate.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test set.
    Eval(EvalArgs),
    /// Integrate the single-unit gradient-flow system from random starts.
    OdeLab(OdeLabArgs),
    /// Export π*(θ) and the gate regularization term over a θ grid.
    PriorCurve(PriorCurveArgs),
    /// Compare gate-gradient estimators with exact enumeration on a small network.
    EstimatorBench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DataKindArg {
    Mnist,
    Blobs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ArchArg {
    Mlp,
    Lenet5,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FamilyArg {
    Flattening,
    Beta,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScheduleArg {
    Adam,
    Constant,
    RobbinsMonro,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EstimatorArg {
    Taylor,
    Concrete,
    Sampling,
    Hybrid,
    BruteForce,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ConditionArg {
    Tolerance,
    Relative,
}

/// Data source flags shared by `train` and `eval`; they override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<DataKindArg>,
    /// MNIST directory (default: $PRUNE_DATA_DIR).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Use only the first N training samples.
    #[arg(long)]
    pub train_subset: Option<usize>,
    #[arg(long)]
    pub blob_classes: Option<usize>,
    #[arg(long)]
    pub blob_dim: Option<usize>,
    #[arg(long)]
    pub blob_train_per_class: Option<usize>,
    #[arg(long)]
    pub blob_test_per_class: Option<usize>,
    #[arg(long)]
    pub blob_center_scale: Option<f64>,
    #[arg(long)]
    pub blob_seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// TOML run configuration; flags given here take precedence.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long, short)]
    pub output_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also checkpoint every K epochs.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub arch: Option<ArchArg>,
    /// Hidden widths of the MLP, e.g. 300,100.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight-prior precision λ.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub prior: Option<FamilyArg>,
    /// ln γ of the flattening hyper-prior (negative).
    #[arg(long, allow_hyphen_values = true)]
    pub log_gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub eps1: Option<f64>,
    #[arg(long)]
    pub theta1: Option<f64>,
    #[arg(long)]
    pub eps2: Option<f64>,
    #[arg(long)]
    pub theta_init: Option<f64>,
    #[arg(long)]
    pub theta_low: Option<f64>,
    #[arg(long)]
    pub theta_high: Option<f64>,
    #[arg(long)]
    pub phi_max: Option<f64>,
    #[arg(long)]
    pub schedule: Option<ScheduleArg>,
    /// Step size (Adam / constant) or a₀ (Robbins-Monro).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decay horizon τ of the Robbins-Monro schedule.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub estimator: Option<EstimatorArg>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub hybrid_k: Option<usize>,
    #[arg(long)]
    pub prune_condition: Option<ConditionArg>,
    #[arg(long)]
    pub theta_tol: Option<f64>,
    #[arg(long)]
    pub theta_per: Option<f64>,
    #[arg(long)]
    pub n0: Option<u64>,
    #[arg(long)]
    pub fine_tune_epochs: Option<u64>,
    #[arg(long)]
    pub fine_tune_lr: Option<f64>,
    #[arg(long)]
    pub input_threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train the unpruned baseline (gates fixed on).
    #[arg(long)]
    pub no_pruning: bool,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run configuration describing the data source.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DiffArg {
    Zero,
    Oscillating,
    Adversarial,
}

#[derive(Args, Debug, Clone)]
pub struct OdeLabArgs {
    #[arg(long, short, default_value = "runs/ode-lab")]
    pub output_dir: PathBuf,
    /// Fan-in dimension p.
    #[arg(long, default_value_t = 3)]
    pub p: usize,
    /// Fan-out dimension q.
    #[arg(long, default_value_t = 2)]
    pub q: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.05)]
    pub eps1: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub eps2: f64,
    #[arg(long, default_value_t = -std::f64::consts::LN_10, allow_hyphen_values = true)]
    pub log_gamma: f64,
    #[arg(long, default_value_t = 5e-3)]
    pub theta_low: f64,
    #[arg(long, value_enum, default_value_t = DiffArg::Oscillating)]
    pub diff: DiffArg,
    #[arg(long, default_value_t = 100)]
    pub starts: usize,
    /// Start radius as a multiple of the guaranteed region's radius.
    #[arg(long, default_value_t = 1.0)]
    pub radius_factor: f64,
    /// Integration horizon in units of 1/λ.
    #[arg(long, default_value_t = 200.0)]
    pub horizon: f64,
    /// Step size (default: stiffness-safe value).
    #[arg(long)]
    pub dt: Option<f64>,
    /// Seed for the matrices and the start points.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write every k-th state to the trajectory files.
    #[arg(long, default_value_t = 100)]
    pub stride: usize,
}

#[derive(Args, Debug, Clone)]
pub struct PriorCurveArgs {
    #[arg(long, value_enum, default_value_t = FamilyArg::Flattening)]
    pub family: FamilyArg,
    #[arg(long, default_value_t = -4.605170185988091, allow_hyphen_values = true)]
    pub log_gamma: f64,
    #[arg(long, default_value_t = 0.9)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    #[arg(long)]
    pub eps1: Option<f64>,
    #[arg(long)]
    pub theta1: Option<f64>,
    #[arg(long, default_value_t = 1e-4)]
    pub eps2: f64,
    /// Number of grid points strictly inside (0, 1).
    #[arg(long, default_value_t = 1000)]
    pub points: usize,
    /// Also solve the scalar minimization numerically and report it.
    #[arg(long)]
    pub numeric: bool,
    /// Output CSV (default: stdout).
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 3)]
    pub inputs: usize,
    #[arg(long, value_delimiter = ',', default_value = "4,3")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 20000)]
    pub draws: usize,
    /// Gate parameters are drawn uniformly from [0.2, 0.8] unless fixed here.
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,
    #[arg(long, default_value_t = 2)]
    pub hybrid_k: usize,
    /// Scales the output layer's weights, i.e. the fan-out of the last gated layer.
    #[arg(long, default_value_t = 1.0)]
    pub fan_out_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

/// Exit code for a library error: 2 configuration, 3 data, 4 numeric failure.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) | Error::Unsupported(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) => 3,
        Error::Numeric(_) | Error::NonFinite(_) | Error::Shape(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::OdeLab(a) => commands::ode_lab(&a),
        Command::PriorCurve(a) => commands::prior_curve(&a),
        Command::EstimatorBench(a) => commands::estimator_bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
