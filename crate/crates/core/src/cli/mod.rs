//! Command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 data error, 4 backend error.

mod commands;
mod config;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use commands::{
    cmd_embed, cmd_ingest, cmd_project, cmd_report, cmd_run, cmd_sweep, cmd_validate, load_runs,
    plan_selections, project_runs, summarize_runs, RunArtifacts, Session, SweepOutcome,
    RUN_CONFIG_FILE, SELECTION_LOG,
};
pub use config::{run_id_for, PinnedDefaults, ProjectConfig, ProjectionSettings, RunConfig, SweepEntry};

use crate::analysis::{AnalysisError, ProjectionMethod, ReportFormat};
use crate::embedding::EmbeddingError;
use crate::metrics::MetricsError;
use crate::prompt::PromptError;
use crate::review_service::{ReviewError, ReviewStore};
use crate::sample_store::StoreError;
use crate::sampler::{SamplerError, SelectionOrder, StrategyKind};
use crate::transport::{HttpTransport, ReqwestTransport};
use crate::vlm_gateway::{CassetteMode, GatewayError};

#[derive(Debug, Clone, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Backend(_) => 4,
        }
    }

    /// Prefixes the message with where the error happened.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            CliError::Config(m) => CliError::Config(format!("{ctx}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{ctx}: {m}")),
            CliError::Backend(m) => CliError::Backend(format!("{ctx}: {m}")),
            CliError::Other(m) => CliError::Other(format!("{ctx}: {m}")),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::InvalidK { .. } | SamplerError::InvalidPinnedId { .. } => {
                CliError::Config(e.to_string())
            }
            SamplerError::Embedding(inner) => inner.into(),
            SamplerError::MissingEmbedding(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::ProviderUnreachable(_) | EmbeddingError::InvalidResponse(_) => {
                CliError::Backend(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::AuthMissing(_) => CliError::Config(e.to_string()),
            GatewayError::CassetteMiss(_)
            | GatewayError::CassetteFormat(_)
            | GatewayError::CassetteIo(_)
            | GatewayError::UnreadableImage { .. } => CliError::Data(e.to_string()),
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Io { .. } => CliError::Other(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ReviewError> for CliError {
    fn from(e: ReviewError) -> Self {
        match e {
            ReviewError::Io(_) => CliError::Other(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "iclqa", version, about = "In-context-learning quality assessment with vision-language models")]
pub struct Cli {
    /// Project file.
    #[arg(long, global = true, default_value = "iclqa.toml")]
    pub config: PathBuf,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a manifest strictly, print a summary, optionally write a normalized copy.
    Ingest {
        /// Manifest path; defaults to the project's database.
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List every validation problem in a manifest.
    Validate { manifest: Option<PathBuf> },
    /// Precompute image embeddings into the embedding cache.
    Embed {
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
    },
    /// Run one strategy on one backend.
    Run(RunArgs),
    /// Run every configured strategy and backend, then write reports.
    Sweep(SweepArgs),
    /// Expert review service.
    Review {
        #[command(subcommand)]
        action: ReviewCommand,
    },
    /// Write reports from existing runs.
    Report(ReportArgs),
    /// Project response embeddings to 2-D.
    Project(ProjectArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// baseline | zero | one | knn | scattered | expert | many
    #[arg(long)]
    pub strategy: Option<StrategyKind>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Comma-separated sample ids for one-shot and expert strategies.
    #[arg(long, value_delimiter = ',')]
    pub pinned: Option<Vec<String>>,
    /// descending | ascending
    #[arg(long)]
    pub order: Option<SelectionOrder>,
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub cassette: Option<PathBuf>,
    /// record | replay | passthrough
    #[arg(long)]
    pub mode: Option<CassetteMode>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Re-execute a saved run_config.toml instead of building one.
    #[arg(long, conflicts_with_all = ["strategy", "k", "pinned", "order", "backend"])]
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub cassette: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<CassetteMode>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub reviews: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ReviewCommand {
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory holding runs and the review log; defaults to the output dir.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub reviews: Option<PathBuf>,
    /// table | structured | plot | all
    #[arg(long, default_value = "all")]
    pub format: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub database: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// pca | tsne
    #[arg(long)]
    pub method: Option<ProjectionMethod>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn formats(spec: &str) -> Result<Vec<ReportFormat>, CliError> {
    if spec.eq_ignore_ascii_case("all") {
        return Ok(vec![ReportFormat::Table, ReportFormat::Structured, ReportFormat::Plot]);
    }
    spec.split(',')
        .map(|f| f.parse().map_err(CliError::Config))
        .collect()
}

/// Runs a parsed command line with the real HTTP transport.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    execute_with(cli, Arc::new(ReqwestTransport::new()))
}

/// Runs a parsed command line; every network request goes through `transport`.
pub fn execute_with(cli: Cli, transport: Arc<dyn HttpTransport>) -> Result<(), CliError> {
    let project = || ProjectConfig::load(&cli.config);
    let mut session = Session::new(transport);
    match cli.command {
        Command::Ingest { manifest, out } => {
            let manifest = match manifest {
                Some(m) => m,
                None => project()?.database,
            };
            println!("{}", cmd_ingest(&manifest, out.as_deref())?);
        }
        Command::Validate { manifest } => {
            let manifest = match manifest {
                Some(m) => m,
                None => project()?.database,
            };
            let report = cmd_validate(&manifest)?;
            for v in &report.violations {
                println!("{}\t{}\t{}", v.subject, v.rule.name(), v.detail);
            }
            if !report.is_valid() {
                return Err(CliError::Data(format!("{} violation(s)", report.len())));
            }
            println!("ok");
        }
        Command::Embed { parallelism } => {
            let p = project()?;
            let provider = p.provider(&p.retrieval_provider)?;
            if p.embedding_cache.is_none() {
                log::warn!("no embedding_cache configured; vectors are not persisted");
            }
            let (n, calls) =
                cmd_embed(&mut session, &p.database, provider, p.embedding_cache.as_deref(), parallelism)?;
            println!("{n} images embedded, {calls} provider call(s)");
        }
        Command::Run(args) => {
            let mut cfg = match &args.snapshot {
                Some(path) => RunConfig::load(path)?,
                None => {
                    let p = project()?;
                    let kind = args
                        .strategy
                        .ok_or_else(|| CliError::Config("--strategy is required".into()))?;
                    let strategy = p.strategy(kind, args.k, args.pinned.clone(), args.order);
                    let backend = match &args.backend {
                        Some(b) => b.clone(),
                        None => p.default_backend_id()?,
                    };
                    p.run_config(strategy, &backend)?
                }
            };
            if let Some(c) = args.cassette {
                cfg.cassette_path = c;
            }
            if let Some(m) = args.mode {
                cfg.cassette_mode = m;
            }
            if let Some(o) = args.out {
                cfg.output_dir = o;
            }
            if let Some(n) = args.parallelism {
                cfg.backend.parallelism = n;
            }
            let artifacts = cmd_run(&mut session, &cfg)?;
            println!("{}", artifacts.dir.join(crate::review_service::RUN_FILE).display());
        }
        Command::Sweep(args) => {
            let p = project()?;
            let mut configs = p.sweep_configs()?;
            for cfg in &mut configs {
                if let Some(c) = &args.cassette {
                    cfg.cassette_path = c.clone();
                }
                if let Some(m) = args.mode {
                    cfg.cassette_mode = m;
                }
                if let Some(o) = &args.out {
                    cfg.output_dir = o.clone();
                }
                if let Some(n) = args.parallelism {
                    cfg.backend.parallelism = n;
                }
            }
            let out = args.out.clone().unwrap_or_else(|| p.output_dir.clone());
            let reviews = args.reviews.or(p.reviews.clone());
            let outcome = cmd_sweep(
                &mut session,
                &configs,
                reviews.as_deref(),
                Some(&p.projection()),
                &out.join("report"),
            )?;
            for f in &outcome.report_files {
                println!("{}", f.display());
            }
            if let Some((run_id, e)) = outcome.failures.into_iter().next() {
                return Err(e.context(format!("sweep finished with failures (first: {run_id})")));
            }
        }
        Command::Review { action } => match action {
            ReviewCommand::Serve { port, host, data } => {
                let p = project()?;
                let data = data.unwrap_or_else(|| p.output_dir.clone());
                let db = session.database(&p.database)?;
                let store = Arc::new(ReviewStore::open(&data, (*db).clone())?);
                let ui = Some(data.join("ui")).filter(|d| d.is_dir());
                let addr: SocketAddr = format!("{host}:{port}")
                    .parse()
                    .map_err(|e| CliError::Config(format!("bad address {host}:{port}: {e}")))?;
                let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Other(e.to_string()))?;
                runtime
                    .block_on(crate::review_service::serve(store, addr, ui))
                    .map_err(|e| CliError::Other(e.to_string()))?;
            }
        },
        Command::Report(args) => {
            let (database, runs, reviews, out) = match args.database {
                Some(db) => (
                    db,
                    required(args.runs, "--runs")?,
                    args.reviews,
                    required(args.out, "--out")?,
                ),
                None => {
                    let p = project()?;
                    let out = args.out.unwrap_or_else(|| p.output_dir.join("report"));
                    (
                        p.database,
                        args.runs.unwrap_or(p.output_dir),
                        args.reviews.or(p.reviews),
                        out,
                    )
                }
            };
            for f in cmd_report(&database, &runs, reviews.as_deref(), &formats(&args.format)?, &out)? {
                println!("{}", f.display());
            }
        }
        Command::Project(args) => {
            let p = project()?;
            let provider_id = p
                .response_provider
                .clone()
                .ok_or_else(|| CliError::Config("no response_provider configured".into()))?;
            let provider = p.provider(&provider_id)?.clone();
            let mut cfg = p.projection();
            if let Some(m) = args.method {
                cfg.method = m;
            }
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            let runs = args.runs.unwrap_or_else(|| p.output_dir.clone());
            let out = args.out.unwrap_or_else(|| p.output_dir.join("projection"));
            for f in cmd_project(&mut session, &provider, p.embedding_cache.as_deref(), &runs, &cfg, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn required(v: Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    v.ok_or_else(|| CliError::Config(format!("{flag} is required with --database")))
}

/// Convenience for tests and scripts: parse `args` and run with `transport`.
pub fn run_args<I, T>(args: I, transport: Arc<dyn HttpTransport>) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Config(e.to_string()))?;
    execute_with(cli, transport)
}
