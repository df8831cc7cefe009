use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use synergies_api::ApiState;
use synergies_core::recommender::EdgeKind;
use synergies_pipeline::{Config, LoadedArtifacts, Pipeline, PipelineError, Stage};

/// Recommend local direct and alternative suppliers for manufacturing facilities.
#[derive(Debug, Parser)]
#[command(name = "synergies", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory holding `inputs/` and `artifacts/`.
    #[arg(long, global = true, default_value = ".")]
    data_dir: PathBuf,

    /// Seed for the embedding initialization; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one stage (with missing upstream stages reported) or `all`.
    Build {
        stage: String,
        /// Recompute even when the cached outputs are up to date.
        #[arg(long)]
        force: bool,
    },
    /// Print the recommendations for a facility as JSON.
    Recommend {
        facility_id: String,
        #[arg(long, allow_negative_numbers = true)]
        radius_km: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        max_score: Option<f64>,
    },
    /// Write the synergy graph.
    ExportGraph {
        #[arg(long)]
        territory: Option<String>,
        #[arg(long, value_enum, default_value_t = KindArg::All)]
        kind: KindArg,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Output file; standard output when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Serve the HTTP API over the built artifacts.
    Serve {
        /// Address to listen on; overrides the config file.
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Direct,
    Alternative,
    All,
}

impl KindArg {
    fn edge_kind(self) -> Option<EdgeKind> {
        match self {
            KindArg::Direct => Some(EdgeKind::Direct),
            KindArg::Alternative => Some(EdgeKind::Alternative),
            KindArg::All => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn load_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Build { stage, force } => {
            let mut pipeline = Pipeline::open(&cli.data_dir, config)?;
            let reports = if stage == "all" {
                pipeline.run_all(force)?
            } else {
                vec![pipeline.run(stage.parse::<Stage>()?, force)?]
            };
            for r in reports {
                eprintln!(
                    "{:<18} {}",
                    r.stage.name(),
                    if r.cache_hit { "cached" } else { "built" }
                );
            }
        }
        Command::Recommend {
            facility_id,
            radius_km,
            max_score,
        } => {
            let artifacts = LoadedArtifacts::load(&cli.data_dir)?;
            let rc = synergies_api::recommend_config(&config, radius_km, max_score);
            print!("{}", artifacts.recommendation_json(&facility_id, &rc)?);
        }
        Command::ExportGraph {
            territory,
            kind,
            format,
            output,
        } => {
            let artifacts = LoadedArtifacts::load(&cli.data_dir)?;
            let graph = artifacts.graph_view(territory.as_deref(), kind.edge_kind())?;
            let bytes = match format {
                Format::Json => graph.to_json().into_bytes(),
                Format::Csv => {
                    let mut buf = Vec::new();
                    graph.write_edges_csv(&mut buf).map_err(PipelineError::from)?;
                    buf
                }
            };
            match output {
                Some(path) => fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?,
                None => std::io::stdout().write_all(&bytes)?,
            }
        }
        Command::Serve { listen } => {
            let listen = listen.unwrap_or_else(|| config.api_listen.clone());
            let state = ApiState::load(&cli.data_dir, config)?;
            tokio::runtime::Runtime::new()?.block_on(synergies_api::serve(state, &listen))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let user = err
                .downcast_ref::<PipelineError>()
                .is_some_and(PipelineError::is_user_error);
            ExitCode::from(if user { 2 } else { 1 })
        }
    }
}
