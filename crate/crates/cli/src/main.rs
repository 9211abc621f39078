use clap::{Parser, Subcommand};
use flowrag_cli::config::AppConfig;
use flowrag_cli::error::CliError;
use flowrag_cli::service::{run_retrieve, run_serve, RetrieveRequest};
use flowrag_cli::stages;
use serde_json::json;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "flowrag",
    version,
    about = "Multi-task retriever pipeline and service for workflow data"
)]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the artifact root directory from the config.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Log filter (overrides the config's log_level).
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic workflow corpus.
    Synth,
    /// Build the instruction-pair dataset from the corpus.
    BuildDataset,
    /// Train the encoder on the dataset.
    Train,
    /// Build dense indexes for every split catalog.
    Index,
    /// Evaluate an engine on the dev and out-of-domain pools.
    Eval {
        #[arg(long, default_value = "dense")]
        engine: String,
    },
    /// Train and compare the single-task, multi-task, and downsampled
    /// variants from a shared initialization.
    Compare,
    /// Run one retrieval query and print the response.
    Retrieve {
        #[arg(long)]
        task: String,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value = "dense")]
        engine: String,
        /// Restrict results to one element kind (defaults to the task's
        /// target kind).
        #[arg(long)]
        kind: Option<String>,
        /// Query a different split's catalog and index.
        #[arg(long)]
        split: Option<String>,
    },
    /// Serve retrieval over HTTP.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

fn init_logging(level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(level)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn stage_line(stage: &str, outcome: flowrag_cli::manifest::StageOutcome, path: &std::path::Path) {
    println!(
        "{}",
        json!({ "stage": stage, "status": outcome.as_str(), "path": path })
    );
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = AppConfig::load(cli.config.as_deref(), cli.data_dir)?;
    init_logging(cli.log_level.as_deref().unwrap_or(&cfg.log_level));
    match cli.command {
        Command::Synth => {
            let outcome = stages::run_synth(&cfg)?;
            stage_line("synth", outcome, &cfg.corpus_dir());
        }
        Command::BuildDataset => {
            let outcome = stages::run_build_dataset(&cfg)?;
            stage_line("build-dataset", outcome, &cfg.dataset_dir());
        }
        Command::Train => {
            let outcome = stages::run_train(&cfg)?;
            stage_line("train", outcome, &cfg.model_dir());
        }
        Command::Index => {
            let outcome = stages::run_index(&cfg)?;
            stage_line("index", outcome, &cfg.index_dir());
        }
        Command::Eval { engine } => {
            let outcome = stages::run_eval(&cfg, &engine)?;
            stage_line("eval", outcome, &cfg.eval_dir());
        }
        Command::Compare => {
            let outcome = stages::run_compare(&cfg)?;
            stage_line("compare", outcome, &cfg.ablations_dir());
        }
        Command::Retrieve {
            task,
            text,
            k,
            engine,
            kind,
            split,
        } => {
            let request = RetrieveRequest {
                task,
                text,
                k,
                engine,
                kind_filter: kind,
            };
            let response = run_retrieve(&cfg, &request, split.as_deref())?;
            println!(
                "{}",
                serde_json::to_string(&response)
                    .map_err(|e| CliError::new("internal", e.to_string()))?
            );
        }
        Command::Serve { bind } => run_serve(&cfg, bind)?,
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{}", e.to_json());
        std::process::exit(1);
    }
}
