use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use faireval::gateway::ProviderSpec;
use faireval::pipeline::{self, GenerateRequest, ReportRequest, RunManifest, RunRequest, ScoreRequest, StageError, Workdir};
use tracing_subscriber::EnvFilter;

/// Audit LLM recommenders for consumer-side fairness.
#[derive(Debug, Parser)]
#[command(name = "faireval", version)]
struct Cli {
    /// Base for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, default_value = "config.json")]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct ProviderArgs {
    #[arg(long, default_value = "providers.json")]
    providers: PathBuf,
    /// Provider id from the providers file.
    #[arg(long)]
    provider: String,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the prompt matrix.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "catalog.json")]
        catalog: PathBuf,
        #[arg(long, default_value = "templates.json")]
        templates: PathBuf,
        #[arg(long, default_value = "anchors.csv")]
        anchors: PathBuf,
        #[arg(long, default_value = "matrix.jsonl")]
        out: PathBuf,
    },
    /// Collect responses for the matrix, extending the replay store.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long, default_value = "matrix.jsonl")]
        matrix: PathBuf,
        #[arg(long, default_value = "store.jsonl")]
        store: PathBuf,
        /// Answer from the store only; never touch the network.
        #[arg(long)]
        offline: bool,
    },
    /// Parse stored responses and compute per-prompt similarities.
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long, default_value = "catalog.json")]
        catalog: PathBuf,
        #[arg(long, default_value = "matrix.jsonl")]
        matrix: PathBuf,
        #[arg(long, default_value = "store.jsonl")]
        store: PathBuf,
        #[arg(long, default_value = "similarities.csv")]
        out: PathBuf,
    },
    /// Aggregate similarities into fairness tables.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "similarities.csv")]
        similarities: PathBuf,
        /// Other similarity tables to include in plotdata.csv.
        #[arg(long, num_args = 1..)]
        compare: Vec<PathBuf>,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Check recorded stage outputs against their digests.
    Verify,
}

fn provider(workdir: &Workdir, args: &ProviderArgs) -> Result<ProviderSpec, StageError> {
    Ok(ProviderSpec::find(&workdir.resolve(&args.providers), &args.provider)?)
}

async fn execute(cli: Cli) -> Result<(), StageError> {
    let wd = Workdir::new(cli.workdir);
    match cli.command {
        Command::Generate {
            common,
            catalog,
            templates,
            anchors,
            out,
        } => {
            let req = GenerateRequest {
                config: common.config,
                catalog,
                templates,
                anchors,
                out,
            };
            let n = pipeline::generate(&wd, &req)?;
            println!("{n} prompt units written to {}", wd.resolve(&req.out).display());
        }
        Command::Run {
            common,
            provider: p,
            matrix,
            store,
            offline,
        } => {
            let req = RunRequest {
                config: common.config,
                matrix,
                provider: provider(&wd, &p)?,
                store,
                offline,
            };
            let s = pipeline::run(&wd, req).await?;
            println!(
                "ok {} / malformed {} / refused {} / transport errors {} ({} dispatched)",
                s.ok, s.malformed, s.refused, s.transport_error, s.dispatched
            );
        }
        Command::Score {
            common,
            provider: p,
            catalog,
            matrix,
            store,
            out,
        } => {
            let req = ScoreRequest {
                config: common.config,
                catalog,
                matrix,
                store,
                provider: provider(&wd, &p)?,
                out,
            };
            let table = pipeline::score(&wd, &req)?;
            let e = &table.meta.exclusions;
            println!(
                "{} similarity rows written to {} ({} responses excluded)",
                table.rows.len(),
                wd.resolve(&req.out).display(),
                e.total()
            );
        }
        Command::Report {
            common,
            similarities,
            compare,
            out,
        } => {
            let req = ReportRequest {
                config: common.config,
                similarities,
                compare,
                out_dir: out,
                timestamp: chrono::Utc::now(),
            };
            let dir = pipeline::report(&wd, &req)?;
            println!("report written to {}", dir.display());
        }
        Command::Verify => {
            let path = wd.manifest_path();
            let text = std::fs::read_to_string(&path).map_err(|_| StageError::MissingInput(path.clone()))?;
            let manifest: RunManifest =
                serde_json::from_str(&text).map_err(|e| StageError::Config(format!("{}: {e}", path.display())))?;
            let problems = manifest.verify();
            if !problems.is_empty() {
                return Err(StageError::Coverage(problems.join("; ")));
            }
            println!("{} outputs verified", manifest.outputs.len());
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match execute(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
