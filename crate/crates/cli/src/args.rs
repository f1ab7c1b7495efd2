use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "rla", version, about = "Layer-aggregation networks: build, count, verify, train, analyse")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a model and print its stage layout; optionally save the
    /// initialised weights as a checkpoint.
    Build {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the initialised model to this checkpoint file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count parameters and multiply-accumulates.
    Count {
        #[command(flatten)]
        model: ModelArgs,
        /// Input side length for MAC accounting (defaults to the family's).
        #[arg(long)]
        resolution: Option<usize>,
        /// Write per-layer statistics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Compare against the published count; exit 1 on a miss.
        #[arg(long)]
        golden: bool,
    },
    /// Run the property suites; exit 1 on any failed check.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        /// Split one share-group before checking, to confirm the checks bite.
        #[arg(long)]
        inject: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on CIFAR-10 and keep the best-validation checkpoint.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Directory for `log.csv`, `best.rlac` and `config.toml`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CIFAR-10 binary directory (else `RLA_CIFAR10_DIR`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
        #[arg(long, default_value_t = 256)]
        batch: usize,
    },
    /// L1 norms of the shared convs as CSV (stage,kind,index,l1).
    Norms {
        /// Read weights from a checkpoint instead of a fresh build.
        #[arg(long, conflicts_with_all = ["config", "model"])]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit y = a exp(-b l) to norm series; prints stage,kind,points,a,b,r_squared.
    FitDecay {
        /// CSV written by `norms`.
        #[arg(long, required_unless_present = "values", conflicts_with = "values")]
        csv: Option<PathBuf>,
        /// Comma-separated series instead of a CSV.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Option<Vec<f64>>,
        /// Only this stage of the CSV.
        #[arg(long)]
        stage: Option<usize>,
        /// Only rows of this kind (lag, ordinal, rla_g1, rla_g2).
        #[arg(long)]
        kind: Option<String>,
    },
    /// Expand the ARMA(1,1) / recurrence coefficients as CSV.
    TsExpand {
        #[arg(long, value_enum, default_value_t = TsKind::Ar)]
        kind: TsKind,
        #[arg(long, allow_hyphen_values = true)]
        beta: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        gamma: f64,
        #[arg(long, allow_hyphen_values = true)]
        alpha: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        beta1: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        beta2: Option<f64>,
        #[arg(long)]
        lags: usize,
    },
}

#[derive(Args, Debug, Default, Clone)]
pub struct ModelArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// e.g. resnet164, rla-resnet164, shared-lag-densenet_bc100.
    #[arg(long)]
    pub model: Option<String>,
    /// RLA hidden channels.
    #[arg(long)]
    pub k: Option<usize>,
    /// RLA variant v1..v6.
    #[arg(long)]
    pub variant: Option<String>,
    /// One RLA conv pair per block instead of per stage.
    #[arg(long)]
    pub unshared: bool,
    /// Conv-BN-tanh recurrent unit.
    #[arg(long)]
    pub post_act: bool,
    /// Keep h out of the block inputs.
    #[arg(long)]
    pub no_exchange: bool,
    /// Drop BN and tanh from the recurrent unit.
    #[arg(long)]
    pub linear: bool,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Blocks (dense layers) per stage.
    #[arg(long)]
    pub blocks: Option<usize>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainArgs {
    /// Start from the desk-scale recipe (5 epochs, 5k/1k split, constant lr).
    #[arg(long)]
    pub desk: bool,
    /// CIFAR-10 binary directory (else the config's `data`, else `RLA_CIFAR10_DIR`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated epochs at which the rate is divided.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub milestones: Option<Vec<usize>>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteArg {
    All,
    Partition,
    Aggregation,
    Gradcheck,
    Arma,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    /// `test_batch.bin`.
    Test,
    /// The validation split recorded in the checkpoint's config.
    Val,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsKind {
    /// AR(inf) coefficients of ARMA(1,1): (beta - gamma) gamma^(l-1).
    Ar,
    /// Impulse response of ARMA(1,1), starting at lag 0.
    Impulse,
    /// Coefficients of x^T on x^(T-1), ..., x^0 for the two-parameter recurrence.
    Recurrence,
}
