use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "pet", version, about = "Retrieval-augmented tabular prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. A flag overrides the matching key of the
/// `--config` file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Input CSV.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Schema TOML (defaults to the data path with `.schema.toml`).
    #[arg(long, value_name = "PATH")]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long = "embed-dim")]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// none, no_edge_labels or no_node_labels
    #[arg(long)]
    pub ablation: Option<String>,
    /// relevance or random
    #[arg(long)]
    pub retrieval: Option<String>,
    /// ctr or topn
    #[arg(long)]
    pub task: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest, split and index a CSV, writing the caches to --out.
    Prepare(#[command(flatten)] Common),
    /// Train a model and write checkpoint, log and resolved config.
    Train(#[command(flatten)] Common),
    /// Score the test pool with a checkpoint and write a metrics report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load (defaults to <out>/checkpoint.bin).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every label ablation under both retrieval schemes.
    Ablate(#[command(flatten)] Common),
    /// Train and evaluate across a list of K values.
    SweepK {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
        ks: Vec<usize>,
    },
    /// Write final-layer target and feature embeddings as TSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Pool to export: retrieval, train or test.
        #[arg(long, default_value = "test")]
        pool: String,
    },
    /// Generate a synthetic CSV and its schema into --out.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2000)]
        rows: usize,
        #[arg(long, default_value_t = 6)]
        fields: usize,
        #[arg(long, default_value_t = 20)]
        vocab: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Run the gradient check and the retrieval oracle comparison.
    SelfTest(#[command(flatten)] Common),
}

fn init_logging() -> Result<(), String> {
    let level = std::env::var("PET_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    if !["error", "info", "debug"].contains(&level.as_str()) {
        return Err(format!("PET_LOG_LEVEL must be error, info or debug, got {level:?}"));
    }
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Prepare(c) => commands::prepare(&c),
        Command::Train(c) => commands::train(&c),
        Command::Evaluate { common, checkpoint } => commands::evaluate(&common, checkpoint),
        Command::Ablate(c) => commands::ablate(&c),
        Command::SweepK { common, ks } => commands::sweep_k(&common, &ks),
        Command::ExportEmbeddings { common, checkpoint, pool } => {
            commands::export_embeddings(&common, checkpoint, &pool)
        }
        Command::GenSynth {
            common,
            rows,
            fields,
            vocab,
            noise,
        } => commands::gen_synth(&common, rows, fields, vocab, noise),
        Command::SelfTest(c) => commands::self_test(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
