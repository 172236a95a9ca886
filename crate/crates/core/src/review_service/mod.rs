//! Expert review of run items: pending-task listing, review submission with
//! an append-only log, and live metrics.
//!
//! Data directory layout:
//!
//! * any number of `qa_run.json` files (searched recursively), one per run
//! * `reviews.jsonl`, the review log; the last record per
//!   (run, item, reviewer) wins

mod http;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{summarize_run, MetricsError, MetricsSummary, RelevanceConfig, ReviewRecord};
use crate::prompt::Conclusion;
use crate::sample_store::{KnowledgePoint, QualityLabel, SampleDatabase};
use crate::vlm_gateway::QaRun;

pub use http::{router, serve};

pub const REVIEW_LOG: &str = "reviews.jsonl";
pub const RUN_FILE: &str = "qa_run.json";

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{run_id}` has no item `{item_id}`")]
    UnknownItem { run_id: String, item_id: String },
    #[error("unknown knowledge point `{0}`")]
    InvalidKnowledgePoint(String),
    #[error("invalid review: {0}")]
    InvalidRecord(String),
    #[error("two runs share the id `{0}`")]
    DuplicateRun(String),
    #[error("review storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt review log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl ReviewError {
    /// Stable error name reported to clients.
    pub fn name(&self) -> &'static str {
        match self {
            ReviewError::UnknownRun(_) => "UnknownRun",
            ReviewError::UnknownItem { .. } => "UnknownItem",
            ReviewError::InvalidKnowledgePoint(_) => "InvalidKnowledgePoint",
            ReviewError::InvalidRecord(_) => "InvalidRecord",
            ReviewError::DuplicateRun(_) => "DuplicateRun",
            ReviewError::Io(_) => "StorageError",
            ReviewError::CorruptLog { .. } => "CorruptLog",
            ReviewError::Metrics(_) => "MetricsError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub run_id: String,
    pub item_id: String,
    pub query_image_ref: String,
    pub image_url: String,
    /// Verbatim model output.
    pub rationale: String,
    pub conclusion: Conclusion,
    pub claimed_knowledge_points: Vec<String>,
    pub rubric: Vec<KnowledgePoint>,
    pub ground_truth: QualityLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acknowledgment {
    pub run_id: String,
    pub item_id: String,
    pub reviewer_id: String,
    pub superseded: bool,
    pub pending_remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunListing {
    pub run_id: String,
    pub strategy: String,
    pub backend_id: String,
    pub n_items: usize,
}

type ReviewKey = (String, String, String);

pub struct ReviewStore {
    db: SampleDatabase,
    runs: BTreeMap<String, QaRun>,
    latest: RwLock<BTreeMap<ReviewKey, ReviewRecord>>,
    log: Mutex<File>,
    relevance: RelevanceConfig,
}

impl ReviewStore {
    /// Loads every run found under `data_dir` and replays the review log.
    pub fn open(data_dir: &Path, db: SampleDatabase) -> Result<Self, ReviewError> {
        let mut runs = Vec::new();
        for entry in walkdir::WalkDir::new(data_dir).sort_by_file_name() {
            let entry = entry.map_err(|e| std::io::Error::other(e.to_string()))?;
            if entry.file_type().is_file() && entry.file_name() == RUN_FILE {
                runs.push(QaRun::load(entry.path())?);
            }
        }
        Self::with_runs(data_dir, db, runs)
    }

    pub fn with_runs(data_dir: &Path, db: SampleDatabase, runs: Vec<QaRun>) -> Result<Self, ReviewError> {
        let mut by_id = BTreeMap::new();
        for run in runs {
            if by_id.contains_key(&run.run_id) {
                return Err(ReviewError::DuplicateRun(run.run_id));
            }
            by_id.insert(run.run_id.clone(), run);
        }
        std::fs::create_dir_all(data_dir)?;
        let log_path = data_dir.join(REVIEW_LOG);
        let mut latest = BTreeMap::new();
        if log_path.exists() {
            for record in read_review_log(&log_path)? {
                latest.insert(key_of(&record), record);
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(Self {
            db,
            runs: by_id,
            latest: RwLock::new(latest),
            log: Mutex::new(log),
            relevance: RelevanceConfig::default(),
        })
    }

    pub fn with_relevance(mut self, cfg: RelevanceConfig) -> Self {
        self.relevance = cfg;
        self
    }

    pub fn runs(&self) -> Vec<RunListing> {
        self.runs
            .values()
            .map(|r| RunListing {
                run_id: r.run_id.clone(),
                strategy: r.strategy.kind.to_string(),
                backend_id: r.backend_id.clone(),
                n_items: r.items.len(),
            })
            .collect()
    }

    fn run(&self, run_id: &str) -> Result<&QaRun, ReviewError> {
        self.runs
            .get(run_id)
            .ok_or_else(|| ReviewError::UnknownRun(run_id.to_string()))
    }

    /// Items of the run this reviewer has not reviewed, ordered by item id.
    pub fn list_pending(&self, run_id: &str, reviewer_id: &str) -> Result<Vec<ReviewTask>, ReviewError> {
        let run = self.run(run_id)?;
        let latest = self.latest.read().unwrap();
        let mut items: Vec<_> = run
            .items
            .iter()
            .filter(|i| {
                !latest.contains_key(&(
                    run_id.to_string(),
                    i.item_id.clone(),
                    reviewer_id.to_string(),
                ))
            })
            .collect();
        items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        Ok(items
            .into_iter()
            .map(|item| ReviewTask {
                run_id: run_id.to_string(),
                item_id: item.item_id.clone(),
                query_image_ref: self
                    .db
                    .test_item(&item.item_id)
                    .map(|t| t.image_ref.display().to_string())
                    .unwrap_or_default(),
                image_url: format!("/images/{}", item.item_id),
                rationale: item.response.raw.clone(),
                conclusion: item.response.conclusion,
                claimed_knowledge_points: item.response.claimed_knowledge_points.clone(),
                rubric: self.db.knowledge_base.points.clone(),
                ground_truth: item.ground_truth,
            })
            .collect())
    }

    /// Validates and durably appends a review before acknowledging it.
    /// A resubmission by the same reviewer replaces the earlier record.
    pub fn submit_review(&self, mut record: ReviewRecord) -> Result<Acknowledgment, ReviewError> {
        let run = self.run(&record.run_id)?;
        if run.item(&record.item_id).is_none() {
            return Err(ReviewError::UnknownItem {
                run_id: record.run_id.clone(),
                item_id: record.item_id.clone(),
            });
        }
        if record.reviewer_id.trim().is_empty() {
            return Err(ReviewError::InvalidRecord("reviewer_id is empty".into()));
        }
        let kb = &self.db.knowledge_base;
        if let Some(bad) = record.covered_points.iter().find(|p| !kb.contains(p)) {
            return Err(ReviewError::InvalidKnowledgePoint(bad.clone()));
        }
        if let Some(bad) = record
            .inappropriate_points
            .iter()
            .filter_map(|p| p.point_id.as_ref())
            .find(|p| !kb.contains(p))
        {
            return Err(ReviewError::InvalidKnowledgePoint(bad.clone()));
        }
        record.reviewed_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Nanos, true);

        let mut log = self.log.lock().unwrap();
        let mut line = serde_json::to_string(&record)
            .map_err(|e| ReviewError::InvalidRecord(e.to_string()))?;
        line.push('\n');
        log.write_all(line.as_bytes())?;
        log.sync_data()?;

        let key = key_of(&record);
        let mut latest = self.latest.write().unwrap();
        let superseded = latest.insert(key, record.clone()).is_some();
        drop(log);
        if superseded {
            log::info!(
                "review for {}/{} by {} superseded",
                record.run_id,
                record.item_id,
                record.reviewer_id
            );
        }
        let reviewed: BTreeSet<&str> = latest
            .keys()
            .filter(|(r, _, who)| *r == record.run_id && *who == record.reviewer_id)
            .map(|(_, item, _)| item.as_str())
            .collect();
        let pending_remaining = run
            .items
            .iter()
            .filter(|i| !reviewed.contains(i.item_id.as_str()))
            .count();
        Ok(Acknowledgment {
            run_id: record.run_id,
            item_id: record.item_id,
            reviewer_id: record.reviewer_id,
            superseded,
            pending_remaining,
        })
    }

    /// Current review records of a run (latest per item and reviewer).
    pub fn reviews_for(&self, run_id: &str) -> Vec<ReviewRecord> {
        self.latest
            .read()
            .unwrap()
            .values()
            .filter(|r| r.run_id == run_id)
            .cloned()
            .collect()
    }

    pub fn get_live_metrics(&self, run_id: &str) -> Result<MetricsSummary, ReviewError> {
        let run = self.run(run_id)?;
        let reviews = self.reviews_for(run_id);
        Ok(summarize_run(run, &reviews, &self.db.knowledge_base, &self.relevance)?)
    }

    /// Image file for a test item.
    pub fn image_path(&self, item_id: &str) -> Option<PathBuf> {
        self.db
            .test_item(item_id)
            .map(|t| self.db.resolve(&t.image_ref))
    }
}

/// Every record of a review log, in log order.
pub fn read_review_log(path: &Path) -> Result<Vec<ReviewRecord>, ReviewError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| ReviewError::CorruptLog {
                line: n + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(records)
}

fn key_of(r: &ReviewRecord) -> ReviewKey {
    (r.run_id.clone(), r.item_id.clone(), r.reviewer_id.clone())
}
