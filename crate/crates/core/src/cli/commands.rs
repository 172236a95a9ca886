use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::config::RunConfig;
use super::CliError;
use crate::analysis::{
    emit_report, project_responses, write_projection, ProjectedPoint, ProjectionConfig,
    ProjectionSet, ReportFormat,
};
use crate::embedding::{Embedder, EmbeddingCache, EmbeddingProviderConfig, EmbeddingVector};
use crate::metrics::{summarize_run, MetricsSummary, RelevanceConfig, ReviewRecord};
use crate::review_service::{read_review_log, RUN_FILE};
use crate::sample_store::{
    label_counts, load_database, read_manifest, save_database, validate_database, SampleDatabase,
    TestItem, ValidationReport,
};
use crate::sampler::{describe_selection, select_samples, IclSelection, SamplingStrategy};
use crate::transport::HttpTransport;
use crate::vlm_gateway::{Cassette, CassetteMode, Gateway, QaRun};

pub const SELECTION_LOG: &str = "selections.log";
pub const RUN_CONFIG_FILE: &str = "run_config.toml";

/// Shared state for the commands of one process: the transport, one
/// gateway, and databases, cassettes and embedders loaded once each.
pub struct Session {
    transport: Arc<dyn HttpTransport>,
    gateway: Gateway,
    databases: HashMap<PathBuf, Arc<SampleDatabase>>,
    cassettes: HashMap<(PathBuf, CassetteMode), Arc<Cassette>>,
    caches: HashMap<Option<PathBuf>, Arc<EmbeddingCache>>,
    embedders: HashMap<(String, Option<PathBuf>), Arc<Embedder>>,
}

impl Session {
    pub fn new(transport: Arc<dyn HttpTransport>) -> Self {
        Self {
            gateway: Gateway::new(transport.clone()),
            transport,
            databases: HashMap::new(),
            cassettes: HashMap::new(),
            caches: HashMap::new(),
            embedders: HashMap::new(),
        }
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn database(&mut self, path: &Path) -> Result<Arc<SampleDatabase>, CliError> {
        if let Some(db) = self.databases.get(path) {
            return Ok(db.clone());
        }
        let db = Arc::new(load_database(path)?);
        self.databases.insert(path.to_path_buf(), db.clone());
        Ok(db)
    }

    pub fn cassette(&mut self, path: &Path, mode: CassetteMode) -> Result<Arc<Cassette>, CliError> {
        let key = (path.to_path_buf(), mode);
        if let Some(c) = self.cassettes.get(&key) {
            return Ok(c.clone());
        }
        let c = Arc::new(Cassette::open(path, mode)?);
        self.cassettes.insert(key, c.clone());
        Ok(c)
    }

    pub fn embedder(
        &mut self,
        config: &EmbeddingProviderConfig,
        cache_path: Option<&Path>,
    ) -> Result<Arc<Embedder>, CliError> {
        let cache_key = cache_path.map(Path::to_path_buf);
        let key = (config.provider_id.clone(), cache_key.clone());
        if let Some(e) = self.embedders.get(&key) {
            return Ok(e.clone());
        }
        let cache = match self.caches.get(&cache_key) {
            Some(c) => c.clone(),
            None => {
                let c = Arc::new(match cache_path {
                    Some(p) => EmbeddingCache::open(p)?,
                    None => EmbeddingCache::in_memory(),
                });
                self.caches.insert(cache_key, c.clone());
                c
            }
        };
        let embedder = Arc::new(Embedder::new(
            config.clone(),
            Path::new(""),
            self.transport.clone(),
            cache,
        )?);
        self.embedders.insert(key, embedder.clone());
        Ok(embedder)
    }
}

/// Selects demonstrations for every test item. Image embeddings are only
/// computed when the strategy uses demonstrations.
pub fn plan_selections(
    db: &SampleDatabase,
    strategy: &SamplingStrategy,
    embedder: &Embedder,
    parallelism: usize,
) -> Result<Vec<(TestItem, IclSelection)>, CliError> {
    strategy.validate(db)?;
    let mut sample_vectors = HashMap::new();
    let mut query_vectors: Vec<Option<EmbeddingVector>> = vec![None; db.test_items.len()];
    if strategy.kind.has_demonstrations() {
        let paths: Vec<PathBuf> = db.samples.iter().map(|s| db.resolve(&s.image_ref)).collect();
        for (sample, v) in db.samples.iter().zip(embedder.embed_images(&paths, parallelism)) {
            let v = v.map_err(|e| CliError::from(e).context(format!("sample {}", sample.id)))?;
            sample_vectors.insert(sample.id.clone(), v);
        }
        let paths: Vec<PathBuf> = db.test_items.iter().map(|t| db.resolve(&t.image_ref)).collect();
        for ((item, v), slot) in db
            .test_items
            .iter()
            .zip(embedder.embed_images(&paths, parallelism))
            .zip(query_vectors.iter_mut())
        {
            *slot = Some(v.map_err(|e| CliError::from(e).context(format!("test item {}", item.id)))?);
        }
    }
    db.test_items
        .iter()
        .zip(&query_vectors)
        .map(|(item, q)| {
            let selection = select_samples(strategy, q.as_ref(), db, &sample_vectors)
                .map_err(|e| CliError::from(e).context(format!("test item {}", item.id)))?;
            Ok((item.clone(), selection))
        })
        .collect()
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub run: QaRun,
    pub dir: PathBuf,
}

/// Embed, select, assemble, submit and parse for every test item, then
/// write `qa_run.json`, the config snapshot and the selection log.
pub fn cmd_run(session: &mut Session, cfg: &RunConfig) -> Result<RunArtifacts, CliError> {
    let db = session.database(&cfg.database_path)?;
    let embedder = session.embedder(&cfg.retrieval_provider, cfg.embedding_cache.as_deref())?;
    let plan = plan_selections(&db, &cfg.strategy, &embedder, cfg.backend.parallelism)?;
    let cassette = session.cassette(&cfg.cassette_path, cfg.cassette_mode)?;
    let run = session
        .gateway
        .run_batch(&cfg.run_id, &cfg.strategy, &plan, &cfg.backend, &cassette, &db)
        .map_err(|e| CliError::from(e).context(format!("run {}", cfg.run_id)))?;

    let failed = run.items.iter().filter(|i| i.error.is_some()).count();
    if failed > 0 {
        log::warn!("run {}: {failed} item(s) failed and count as unparseable", cfg.run_id);
    }

    let dir = cfg.output_dir.join(&cfg.run_id);
    std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let mut log_text = String::new();
    for (item, selection) in &plan {
        log_text.push_str(&format!("{}\t{}\n", item.id, describe_selection(selection)));
    }
    write_file(&dir.join(RUN_FILE), &run.to_canonical_json())?;
    write_file(&dir.join(RUN_CONFIG_FILE), &cfg.to_toml())?;
    write_file(&dir.join(SELECTION_LOG), &log_text)?;
    log::info!("run {} finished: {} items in {}", cfg.run_id, run.items.len(), dir.display());
    if failed > 0 && failed == run.items.len() {
        let first = run.items[0].error.clone().unwrap_or_default();
        return Err(CliError::Backend(format!(
            "run {}: all {failed} item(s) failed, first: {first}",
            cfg.run_id
        )));
    }
    Ok(RunArtifacts { run, dir })
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub runs: Vec<QaRun>,
    pub summaries: Vec<MetricsSummary>,
    pub failures: Vec<(String, CliError)>,
    pub report_files: Vec<PathBuf>,
}

/// Runs every config (duplicates once), then writes all report formats
/// into `report_dir`. A failed run is reported and skipped.
pub fn cmd_sweep(
    session: &mut Session,
    configs: &[RunConfig],
    reviews_path: Option<&Path>,
    projection: Option<&ProjectionConfig>,
    report_dir: &Path,
) -> Result<SweepOutcome, CliError> {
    let mut seen = HashSet::new();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut database_path = None;
    let mut response_provider = None;
    for cfg in configs {
        if !seen.insert(cfg.identity()) {
            log::warn!("duplicate sweep entry {} skipped", cfg.run_id);
            continue;
        }
        database_path.get_or_insert_with(|| cfg.database_path.clone());
        if response_provider.is_none() {
            response_provider = cfg
                .response_provider
                .clone()
                .map(|p| (p, cfg.embedding_cache.clone()));
        }
        match cmd_run(session, cfg) {
            Ok(artifacts) => runs.push(artifacts.run),
            Err(e) => {
                log::error!("run {} failed: {e}", cfg.run_id);
                failures.push((cfg.run_id.clone(), e));
            }
        }
    }
    if runs.is_empty() {
        return Err(match failures.into_iter().next() {
            Some((_, e)) => e,
            None => CliError::Config("sweep has no runs".into()),
        });
    }
    let db = session.database(database_path.as_deref().expect("at least one run"))?;
    let reviews = match reviews_path {
        Some(p) if p.exists() => read_review_log(p)?,
        _ => Vec::new(),
    };
    let summaries = summarize_runs(&runs, &reviews, &db)?;

    let projections = match (projection, response_provider) {
        (Some(pcfg), Some((provider, cache))) => {
            let embedder = session.embedder(&provider, cache.as_deref())?;
            match project_runs(&runs, &embedder, pcfg) {
                Ok(p) => Some(p),
                Err(e) => {
                    log::warn!("response projection skipped: {e}");
                    None
                }
            }
        }
        _ => None,
    };

    let mut report_files = Vec::new();
    for format in [ReportFormat::Table, ReportFormat::Structured, ReportFormat::Plot] {
        report_files.extend(emit_report(&summaries, &runs, projections.as_ref(), format, report_dir)?);
    }
    Ok(SweepOutcome {
        runs,
        summaries,
        failures,
        report_files,
    })
}

pub fn summarize_runs(
    runs: &[QaRun],
    reviews: &[ReviewRecord],
    db: &SampleDatabase,
) -> Result<Vec<MetricsSummary>, CliError> {
    let cfg = RelevanceConfig::default();
    runs.iter()
        .map(|run| {
            summarize_run(run, reviews, &db.knowledge_base, &cfg)
                .map_err(|e| CliError::from(e).context(format!("run {}", run.run_id)))
        })
        .collect()
}

/// Every `qa_run.json` under `dir`, in path order.
pub fn load_runs(dir: &Path) -> Result<Vec<QaRun>, CliError> {
    let mut runs = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Data(e.to_string()))?;
        if entry.file_type().is_file() && entry.file_name() == RUN_FILE {
            runs.push(QaRun::load(entry.path()).map_err(|e| io_error(entry.path(), e))?);
        }
    }
    if runs.is_empty() {
        return Err(CliError::Data(format!("no {RUN_FILE} found under {}", dir.display())));
    }
    Ok(runs)
}

/// Embeds each non-empty response and projects all of them to 2-D.
pub fn project_runs(
    runs: &[QaRun],
    embedder: &Embedder,
    cfg: &ProjectionConfig,
) -> Result<ProjectionSet, CliError> {
    let mut vectors = Vec::new();
    let mut points = Vec::new();
    for run in runs {
        for item in &run.items {
            if item.response.raw.trim().is_empty() {
                continue;
            }
            let v = embedder
                .embed_text(&item.response.raw)
                .map_err(|e| CliError::from(e).context(format!("response {}/{}", run.run_id, item.item_id)))?;
            vectors.push(v);
            points.push(ProjectedPoint {
                run_id: run.run_id.clone(),
                item_id: item.item_id.clone(),
                strategy: run.strategy.kind,
                backend_id: run.backend_id.clone(),
                x: 0.0,
                y: 0.0,
            });
        }
    }
    let coords = project_responses(&vectors, cfg)?;
    for (p, [x, y]) in points.iter_mut().zip(coords) {
        p.x = x;
        p.y = y;
    }
    Ok(ProjectionSet {
        method: cfg.method,
        seed: cfg.seed,
        provider_id: embedder.config().provider_id.clone(),
        points,
    })
}

pub fn cmd_report(
    database: &Path,
    runs_dir: &Path,
    reviews_path: Option<&Path>,
    formats: &[ReportFormat],
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let db = load_database(database)?;
    let runs = load_runs(runs_dir)?;
    let reviews = match reviews_path {
        Some(p) => read_review_log(p)?,
        None => Vec::new(),
    };
    let summaries = summarize_runs(&runs, &reviews, &db)?;
    let mut files = Vec::new();
    for &format in formats {
        files.extend(emit_report(&summaries, &runs, None, format, out)?);
    }
    Ok(files)
}

pub fn cmd_project(
    session: &mut Session,
    provider: &EmbeddingProviderConfig,
    cache: Option<&Path>,
    runs_dir: &Path,
    cfg: &ProjectionConfig,
    out: &Path,
) -> Result<Vec<PathBuf>, CliError> {
    let runs = load_runs(runs_dir)?;
    let embedder = session.embedder(provider, cache)?;
    let set = project_runs(&runs, &embedder, cfg)?;
    Ok(write_projection(&set, out)?)
}

/// Parses and checks a manifest, returning every violation found.
pub fn cmd_validate(manifest: &Path) -> Result<ValidationReport, CliError> {
    let db = read_manifest(manifest)?;
    Ok(validate_database(&db))
}

/// Strictly loads a manifest, prints a summary and optionally writes a
/// normalized copy.
pub fn cmd_ingest(manifest: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let db = load_database(manifest)?;
    let counts = label_counts(&db);
    let mut summary = format!(
        "{} samples ({}), {} test items, {} knowledge points",
        db.samples.len(),
        counts
            .iter()
            .map(|(label, n)| format!("{n} {label}"))
            .collect::<Vec<_>>()
            .join(", "),
        db.test_items.len(),
        db.knowledge_base.points.len(),
    );
    if let Some(out) = out {
        save_database(&db, out)?;
        summary.push_str(&format!("\nwrote {}", out.display()));
    }
    Ok(summary)
}

/// Embeds every sample and test image through the retrieval provider.
/// Returns (images embedded, provider calls).
pub fn cmd_embed(
    session: &mut Session,
    database: &Path,
    provider: &EmbeddingProviderConfig,
    cache: Option<&Path>,
    parallelism: usize,
) -> Result<(usize, usize), CliError> {
    let db = session.database(database)?;
    let embedder = session.embedder(provider, cache)?;
    let ids: Vec<&str> = db
        .samples
        .iter()
        .map(|s| s.id.as_str())
        .chain(db.test_items.iter().map(|t| t.id.as_str()))
        .collect();
    let paths: Vec<PathBuf> = db
        .samples
        .iter()
        .map(|s| db.resolve(&s.image_ref))
        .chain(db.test_items.iter().map(|t| db.resolve(&t.image_ref)))
        .collect();
    for (id, result) in ids.iter().zip(embedder.embed_images(&paths, parallelism)) {
        result.map_err(|e| CliError::from(e).context(format!("image {id}")))?;
    }
    Ok((paths.len(), embedder.provider_calls()))
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}
