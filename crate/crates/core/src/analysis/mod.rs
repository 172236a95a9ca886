//! Comparison reports and 2-D projections of response embeddings.

mod pca;
mod report;
mod svg;
mod tsne;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;

pub use pca::pca_2d;
pub use report::{emit_report, write_projection, ProjectedPoint, ProjectionSet, ReportFormat, RADAR_AXES};
pub use tsne::{tsne_2d, TsneParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Pca,
    Tsne,
}

impl std::str::FromStr for ProjectionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pca" => Ok(ProjectionMethod::Pca),
            "tsne" | "t-sne" => Ok(ProjectionMethod::Tsne),
            other => Err(format!("unknown projection method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub method: ProjectionMethod,
    pub seed: u64,
    #[serde(default)]
    pub tsne: TsneParams,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            method: ProjectionMethod::Pca,
            seed: 0,
            tsne: TsneParams::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least 3 points to project, got {0}")]
    TooFewPoints(usize),
    #[error("perplexity {perplexity} too large for {n} points (need n > 3 x perplexity)")]
    PerplexityTooLarge { n: usize, perplexity: f64 },
    #[error("vectors have different dimensions ({expected} vs {actual})")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("no summaries to report")]
    EmptySummaries,
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(String),
}

/// Projects embeddings to 2-D, one point per input in input order.
pub fn project_responses(
    vectors: &[EmbeddingVector],
    cfg: &ProjectionConfig,
) -> Result<Vec<[f64; 2]>, AnalysisError> {
    let rows: Vec<&[f64]> = vectors.iter().map(|v| v.values()).collect();
    project_rows(&rows, cfg)
}

pub fn project_rows(rows: &[&[f64]], cfg: &ProjectionConfig) -> Result<Vec<[f64; 2]>, AnalysisError> {
    if rows.len() < 3 {
        return Err(AnalysisError::TooFewPoints(rows.len()));
    }
    let dim = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(AnalysisError::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    match cfg.method {
        ProjectionMethod::Pca => Ok(pca_2d(rows)),
        ProjectionMethod::Tsne => {
            let perplexity = cfg.tsne.perplexity;
            if (rows.len() as f64) <= 3.0 * perplexity {
                return Err(AnalysisError::PerplexityTooLarge {
                    n: rows.len(),
                    perplexity,
                });
            }
            Ok(tsne_2d(rows, &cfg.tsne, cfg.seed))
        }
    }
}
