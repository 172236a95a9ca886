//! Demonstration selection strategies.
//!
//! Every strategy produces an [`IclSelection`]: the ordered demonstration ids
//! plus whether the textual knowledge block goes into the prompt.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{rank_by_similarity, EmbeddingError, EmbeddingVector, Ranked};
use crate::sample_store::{QualityLabel, SampleDatabase};

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Baseline,
    #[serde(alias = "zero")]
    ZeroShot,
    #[serde(alias = "one")]
    OneShot,
    #[serde(alias = "knn")]
    KnnFewShot,
    #[serde(alias = "scattered")]
    ScatteredFewShot,
    #[serde(alias = "expert")]
    ExpertFewShot,
    #[serde(alias = "many")]
    ManyShot,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Baseline,
        StrategyKind::ZeroShot,
        StrategyKind::OneShot,
        StrategyKind::KnnFewShot,
        StrategyKind::ScatteredFewShot,
        StrategyKind::ExpertFewShot,
        StrategyKind::ManyShot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Baseline => "baseline",
            StrategyKind::ZeroShot => "zero_shot",
            StrategyKind::OneShot => "one_shot",
            StrategyKind::KnnFewShot => "knn_few_shot",
            StrategyKind::ScatteredFewShot => "scattered_few_shot",
            StrategyKind::ExpertFewShot => "expert_few_shot",
            StrategyKind::ManyShot => "many_shot",
        }
    }

    /// Short name used on the command line.
    pub fn short_name(self) -> &'static str {
        match self {
            StrategyKind::Baseline => "baseline",
            StrategyKind::ZeroShot => "zero",
            StrategyKind::OneShot => "one",
            StrategyKind::KnnFewShot => "knn",
            StrategyKind::ScatteredFewShot => "scattered",
            StrategyKind::ExpertFewShot => "expert",
            StrategyKind::ManyShot => "many",
        }
    }

    /// Human-readable label for tables and plots.
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::Baseline => "VLM Baseline",
            StrategyKind::ZeroShot => "Zero-shot",
            StrategyKind::OneShot => "One-shot",
            StrategyKind::KnnFewShot => "KNN few-shot",
            StrategyKind::ScatteredFewShot => "Scattered few-shot",
            StrategyKind::ExpertFewShot => "Expert selected few-shot",
            StrategyKind::ManyShot => "Many-shot",
        }
    }

    pub fn uses_k(self) -> bool {
        matches!(self, StrategyKind::KnnFewShot | StrategyKind::ScatteredFewShot)
    }

    /// Whether the strategy puts any demonstration in the prompt.
    pub fn has_demonstrations(self) -> bool {
        !matches!(self, StrategyKind::Baseline | StrategyKind::ZeroShot)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s || k.short_name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}`"))
    }
}

/// Direction demonstrations are listed in the prompt, by similarity to the query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionOrder {
    #[default]
    Descending,
    Ascending,
}

impl FromStr for SelectionOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "descending" | "desc" => Ok(SelectionOrder::Descending),
            "ascending" | "asc" => Ok(SelectionOrder::Ascending),
            other => Err(format!("unknown selection order `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub kind: StrategyKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub pinned_ids: Vec<String>,
    #[serde(default)]
    pub order: SelectionOrder,
}

fn default_k() -> usize {
    DEFAULT_K
}

impl SamplingStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            k: DEFAULT_K,
            pinned_ids: Vec::new(),
            order: SelectionOrder::Descending,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_pinned<I, S>(mut self, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.pinned_ids = ids.into_iter().map(Into::into).collect();
        self
    }

    /// Checks the strategy against a database without selecting anything.
    pub fn validate(&self, db: &SampleDatabase) -> Result<(), SamplerError> {
        let n = db.samples.len();
        match self.kind {
            StrategyKind::KnnFewShot | StrategyKind::ScatteredFewShot => {
                if self.k == 0 || self.k > n {
                    return Err(SamplerError::InvalidK { k: self.k, n });
                }
            }
            StrategyKind::OneShot => {
                if self.pinned_ids.len() != 1 {
                    return Err(SamplerError::InvalidPinnedId {
                        id: self.pinned_ids.join(","),
                        reason: "one-shot needs exactly one pinned sample".into(),
                    });
                }
                let id = &self.pinned_ids[0];
                let sample = db.sample(id).ok_or_else(|| SamplerError::InvalidPinnedId {
                    id: id.clone(),
                    reason: "no such sample".into(),
                })?;
                if sample.annotation.quality_label != QualityLabel::High {
                    return Err(SamplerError::InvalidPinnedId {
                        id: id.clone(),
                        reason: "one-shot sample must be high quality".into(),
                    });
                }
            }
            StrategyKind::ExpertFewShot => {
                if self.pinned_ids.is_empty() {
                    return Err(SamplerError::InvalidPinnedId {
                        id: String::new(),
                        reason: "expert selection is empty".into(),
                    });
                }
                let mut seen = HashSet::new();
                for id in &self.pinned_ids {
                    if db.sample(id).is_none() {
                        return Err(SamplerError::InvalidPinnedId {
                            id: id.clone(),
                            reason: "no such sample".into(),
                        });
                    }
                    if !seen.insert(id) {
                        return Err(SamplerError::InvalidPinnedId {
                            id: id.clone(),
                            reason: "listed twice".into(),
                        });
                    }
                }
            }
            StrategyKind::Baseline | StrategyKind::ZeroShot | StrategyKind::ManyShot => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclSelection {
    pub strategy: SamplingStrategy,
    pub sample_ids: Vec<String>,
    pub include_knowledge_text: bool,
    #[serde(default)]
    pub similarity_scores: BTreeMap<String, f64>,
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("missing embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("invalid k = {k} for a database of {n} samples")]
    InvalidK { k: usize, n: usize },
    #[error("invalid pinned id `{id}`: {reason}")]
    InvalidPinnedId { id: String, reason: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Rank positions picked by scattered sampling: `round(i·(n−1)/(k−1))` for
/// `i = 0..k`, with collisions moved to the next unused rank.
pub fn scattered_ranks(n: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= n, "scattered_ranks needs 1 <= k <= n");
    if k == 1 {
        return vec![0];
    }
    let mut used = vec![false; n];
    let mut picks = Vec::with_capacity(k);
    for i in 0..k {
        // integer round-half-up of i*(n-1)/(k-1)
        let num = 2 * i * (n - 1) + (k - 1);
        let mut pos = num / (2 * (k - 1));
        while used[pos] {
            pos = (pos + 1) % n;
        }
        used[pos] = true;
        picks.push(pos);
    }
    picks
}

/// Selects demonstrations for one query image.
pub fn select_samples(
    strategy: &SamplingStrategy,
    query: Option<&EmbeddingVector>,
    db: &SampleDatabase,
    db_embeddings: &HashMap<String, EmbeddingVector>,
) -> Result<IclSelection, SamplerError> {
    strategy.validate(db)?;
    let kind = strategy.kind;

    let empty = |include_knowledge_text| IclSelection {
        strategy: strategy.clone(),
        sample_ids: Vec::new(),
        include_knowledge_text,
        similarity_scores: BTreeMap::new(),
    };
    match kind {
        StrategyKind::Baseline => return Ok(empty(false)),
        StrategyKind::ZeroShot => return Ok(empty(true)),
        _ => {}
    }

    let needs_query = matches!(kind, StrategyKind::KnnFewShot | StrategyKind::ScatteredFewShot);
    if needs_query && query.is_none() {
        return Err(SamplerError::MissingEmbedding("query".into()));
    }

    let candidate_ids: Vec<String> = match kind {
        StrategyKind::OneShot | StrategyKind::ExpertFewShot => strategy.pinned_ids.clone(),
        _ => db.sample_ids(),
    };

    let ranked = match query {
        Some(q) => Some(rank_candidates(q, &candidate_ids, db_embeddings)?),
        None => None,
    };

    let (mut chosen, keep_scores): (Vec<Ranked>, bool) = match (kind, ranked) {
        (StrategyKind::KnnFewShot, Some(r)) => (r.into_iter().take(strategy.k).collect(), true),
        (StrategyKind::ScatteredFewShot, Some(r)) => {
            let mut ranks = scattered_ranks(r.len(), strategy.k);
            ranks.sort_unstable();
            (ranks.into_iter().map(|i| r[i].clone()).collect(), true)
        }
        (StrategyKind::ManyShot, Some(r)) => (r, true),
        (_, Some(r)) => (r, false),
        (_, None) => {
            let ids = candidate_ids
                .into_iter()
                .map(|id| Ranked { id, similarity: f64::NAN })
                .collect();
            return Ok(IclSelection {
                strategy: strategy.clone(),
                sample_ids: ids_of(ids),
                include_knowledge_text: true,
                similarity_scores: BTreeMap::new(),
            });
        }
    };

    if strategy.order == SelectionOrder::Ascending {
        chosen.reverse();
    }
    let similarity_scores = if keep_scores {
        chosen.iter().map(|r| (r.id.clone(), r.similarity)).collect()
    } else {
        BTreeMap::new()
    };
    Ok(IclSelection {
        strategy: strategy.clone(),
        sample_ids: ids_of(chosen),
        include_knowledge_text: true,
        similarity_scores,
    })
}

fn ids_of(ranked: Vec<Ranked>) -> Vec<String> {
    ranked.into_iter().map(|r| r.id).collect()
}

fn rank_candidates(
    query: &EmbeddingVector,
    ids: &[String],
    embeddings: &HashMap<String, EmbeddingVector>,
) -> Result<Vec<Ranked>, SamplerError> {
    let candidates = ids
        .iter()
        .map(|id| {
            embeddings
                .get(id)
                .map(|v| (id.as_str(), v))
                .ok_or_else(|| SamplerError::MissingEmbedding(id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(rank_by_similarity(query, &candidates)?)
}

/// One-line summary of a selection for run logs.
pub fn describe_selection(selection: &IclSelection) -> String {
    let kind = selection.strategy.kind;
    match kind {
        StrategyKind::Baseline => return "baseline: no samples, no knowledge text".into(),
        StrategyKind::ZeroShot => return "zero_shot: no samples, knowledge text included".into(),
        _ => {}
    }
    let head = if kind.uses_k() {
        format!("{kind} (k={})", selection.strategy.k)
    } else {
        kind.to_string()
    };
    let items: Vec<String> = selection
        .sample_ids
        .iter()
        .map(|id| match selection.similarity_scores.get(id) {
            Some(s) => format!("{id}={s:.4}"),
            None => id.clone(),
        })
        .collect();
    format!("{head}: {}", items.join(", "))
}
