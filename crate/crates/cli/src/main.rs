use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use safn_cli::commands;
use safn_cli::config::{Overrides, RunConfig};
use safn_core::interpretability::AttributionTarget;

#[derive(Parser)]
#[command(
    name = "safn",
    version,
    about = "Sparse attention-gated fusion network: data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, env = "SAFN_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    /// Master seed for generation, fold assignment and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON manifest describing the dataset columns.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Worker threads for fold-level parallelism (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// Number of cross-validation folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Maximum training epochs; patience is capped to match unless given.
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs without improvement before early stopping.
    #[arg(long)]
    patience: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Token embedding width.
    #[arg(long)]
    d_model: Option<usize>,
    /// Transformer blocks per tokenized stream.
    #[arg(long)]
    n_layers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort CSV and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of positive (case) subjects.
        #[arg(long)]
        n_pd: Option<usize>,
        /// Number of negative (control) subjects.
        #[arg(long)]
        n_hc: Option<usize>,
    },
    /// Stratified k-fold cross-validation of the full model.
    Cv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train on a single fold and save its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Zero-based fold held out for validation.
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Cross-validate every ablation variant and the baselines.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Gradient x input attribution and gate shares from saved checkpoints.
    Attribute {
        #[command(flatten)]
        common: Common,
        /// Directory of fold checkpoints (default: <output-dir>/checkpoints).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Rows written to top_k.csv.
        #[arg(long)]
        top_k: Option<usize>,
        /// Differentiate the logit instead of the probability.
        #[arg(long)]
        logit: bool,
    },
    /// Case/control comparison of every column with FDR control.
    Stats {
        #[command(flatten)]
        common: Common,
        /// FDR level for the `significant` column.
        #[arg(long)]
        q: Option<f64>,
    },
    /// Assemble the result tables in the output directory into report.md.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn overrides(common: &Common, train: &TrainFlags) -> Overrides {
    Overrides {
        seed: common.seed,
        output_dir: common.output_dir.clone(),
        data: common.data.clone(),
        manifest: common.manifest.clone(),
        jobs: common.jobs,
        folds: train.folds,
        epochs: train.epochs,
        patience: train.patience,
        batch_size: train.batch_size,
        lr: train.lr,
        d_model: train.d_model,
        n_layers: train.n_layers,
        ..Default::default()
    }
}

fn resolve(common: &Common, o: Overrides) -> anyhow::Result<RunConfig> {
    let base = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    base.resolve(&o)
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let none = TrainFlags::default();
    match cli.command {
        Command::GenData { common, n_pd, n_hc } => {
            let o = Overrides {
                n_pd,
                n_hc,
                ..overrides(&common, &none)
            };
            commands::gen_data(&resolve(&common, o)?)
        }
        Command::Cv { common, train } => {
            commands::cv(&resolve(&common, overrides(&common, &train))?)
        }
        Command::Train {
            common,
            train,
            fold,
        } => commands::train(&resolve(&common, overrides(&common, &train))?, fold),
        Command::Ablate { common, train } => {
            commands::ablate(&resolve(&common, overrides(&common, &train))?)
        }
        Command::Attribute {
            common,
            checkpoints,
            top_k,
            logit,
        } => {
            let o = Overrides {
                top_k,
                target: logit.then_some(AttributionTarget::Logit),
                ..overrides(&common, &none)
            };
            commands::attribute(&resolve(&common, o)?, checkpoints.as_deref())
        }
        Command::Stats { common, q } => {
            let o = Overrides {
                q,
                ..overrides(&common, &none)
            };
            commands::stats(&resolve(&common, o)?)
        }
        Command::Report { common } => {
            commands::report(&resolve(&common, overrides(&common, &none))?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                safn_cli::EXIT_USAGE
            } else {
                0
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(safn_cli::exit_code(&e) as u8)
        }
    }
}
