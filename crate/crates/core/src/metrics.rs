//! Conclusion correctness, rationale validity, knowledge relevance and
//! confusion matrices over run items and expert reviews.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{Conclusion, QaResponse};
use crate::sample_store::{KnowledgeBase, QualityLabel};
use crate::sampler::{IclSelection, SamplingStrategy};
use crate::vlm_gateway::QaRun;

/// One query image's trace through a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaRunItem {
    pub item_id: String,
    pub strategy: SamplingStrategy,
    pub backend_id: String,
    pub selection: IclSelection,
    pub fingerprint: String,
    pub response: QaResponse,
    pub ground_truth: QualityLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QaRunItem {
    pub fn is_correct(&self) -> bool {
        self.response.conclusion.as_label() == Some(self.ground_truth)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InappropriatePoint {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub run_id: String,
    pub item_id: String,
    pub reviewer_id: String,
    pub validity: bool,
    #[serde(default)]
    pub covered_points: BTreeSet<String>,
    #[serde(default)]
    pub inappropriate_points: Vec<InappropriatePoint>,
    #[serde(default)]
    pub notes: String,
    /// RFC 3339; filled in by the review service when left empty.
    #[serde(default)]
    pub reviewed_at: String,
}

/// Counts indexed by predicted (rows) × actual (columns), high = positive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub pred_high_actual_high: usize,
    pub pred_high_actual_low: usize,
    pub pred_low_actual_high: usize,
    pub pred_low_actual_low: usize,
}

impl ConfusionMatrix {
    /// `[[P+A+, P+A−], [P−A+, P−A−]]`
    pub fn as_array(&self) -> [[usize; 2]; 2] {
        [
            [self.pred_high_actual_high, self.pred_high_actual_low],
            [self.pred_low_actual_high, self.pred_low_actual_low],
        ]
    }

    pub fn total(&self) -> usize {
        self.pred_high_actual_high
            + self.pred_high_actual_low
            + self.pred_low_actual_high
            + self.pred_low_actual_low
    }

    pub fn trace(&self) -> usize {
        self.pred_high_actual_high + self.pred_low_actual_low
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub run_id: String,
    pub strategy: SamplingStrategy,
    pub backend_id: String,
    pub conclusion_correctness: f64,
    /// Absent when nothing has been reviewed.
    pub rationale_validity: Option<f64>,
    pub knowledge_relevance: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub n_items: usize,
    pub n_reviewed: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("run has no items")]
    EmptyRun,
    #[error("relevant knowledge point set is empty")]
    EmptyRelevantSet,
    #[error("review for `{item_id}` by `{reviewer_id}` references no run item")]
    DanglingReviewRef { item_id: String, reviewer_id: String },
}

/// Scoring knobs for knowledge relevance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceConfig {
    /// Points subtracted per inappropriate knowledge mention.
    pub deduction_weight: f64,
    /// Per-item relevant sets; items not listed use every rubric point.
    #[serde(default)]
    pub relevant_overrides: BTreeMap<String, BTreeSet<String>>,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        Self {
            deduction_weight: 1.0,
            relevant_overrides: BTreeMap::new(),
        }
    }
}

/// Fraction of items whose conclusion matches the ground truth.
/// Unparseable conclusions count as wrong.
pub fn conclusion_correctness(items: &[QaRunItem]) -> Result<f64, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let correct = items.iter().filter(|i| i.is_correct()).count();
    Ok(correct as f64 / items.len() as f64)
}

/// Unparseable predictions land in the off-diagonal cell of their actual label.
pub fn confusion_matrix(items: &[QaRunItem]) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::default();
    for item in items {
        let predicted = match item.response.conclusion {
            Conclusion::High => QualityLabel::High,
            Conclusion::Low => QualityLabel::Low,
            Conclusion::Unparseable => match item.ground_truth {
                QualityLabel::High => QualityLabel::Low,
                QualityLabel::Low => QualityLabel::High,
            },
        };
        match (predicted, item.ground_truth) {
            (QualityLabel::High, QualityLabel::High) => m.pred_high_actual_high += 1,
            (QualityLabel::High, QualityLabel::Low) => m.pred_high_actual_low += 1,
            (QualityLabel::Low, QualityLabel::High) => m.pred_low_actual_high += 1,
            (QualityLabel::Low, QualityLabel::Low) => m.pred_low_actual_low += 1,
        }
    }
    m
}

/// `clamp((|covered ∩ relevant| − w·|inappropriate|) / |relevant|, 0, 1)`
pub fn knowledge_relevance(
    review: &ReviewRecord,
    relevant: &BTreeSet<String>,
    deduction_weight: f64,
) -> Result<f64, MetricsError> {
    if relevant.is_empty() {
        return Err(MetricsError::EmptyRelevantSet);
    }
    let covered = review.covered_points.intersection(relevant).count() as f64;
    let penalty = deduction_weight * review.inappropriate_points.len() as f64;
    Ok(((covered - penalty) / relevant.len() as f64).clamp(0.0, 1.0))
}

/// Keeps the latest review per (item, reviewer): greatest `reviewed_at`,
/// then later position in the input.
pub fn latest_reviews(reviews: &[ReviewRecord]) -> Vec<&ReviewRecord> {
    let mut latest: BTreeMap<(&str, &str, &str), (usize, &ReviewRecord)> = BTreeMap::new();
    for (pos, r) in reviews.iter().enumerate() {
        let key = (r.run_id.as_str(), r.item_id.as_str(), r.reviewer_id.as_str());
        match latest.get(&key) {
            Some((_, prev)) if prev.reviewed_at > r.reviewed_at => {}
            _ => {
                latest.insert(key, (pos, r));
            }
        }
    }
    latest.into_values().map(|(_, r)| r).collect()
}

/// Aggregates one run's items and reviews. Validity and relevance are
/// averaged per item first (over reviewers), then across reviewed items.
pub fn summarize(
    items: &[QaRunItem],
    reviews: &[ReviewRecord],
    rubric: &KnowledgeBase,
    cfg: &RelevanceConfig,
) -> Result<MetricsSummary, MetricsError> {
    let correctness = conclusion_correctness(items)?;
    let first = &items[0];

    let item_ids: BTreeSet<&str> = items.iter().map(|i| i.item_id.as_str()).collect();
    for r in reviews {
        if !item_ids.contains(r.item_id.as_str()) {
            return Err(MetricsError::DanglingReviewRef {
                item_id: r.item_id.clone(),
                reviewer_id: r.reviewer_id.clone(),
            });
        }
    }

    let all_points = rubric.point_ids();
    // item -> reviewer -> record, both ordered for a stable summation order
    let mut by_item: BTreeMap<&str, BTreeMap<&str, &ReviewRecord>> = BTreeMap::new();
    for r in latest_reviews(reviews) {
        by_item
            .entry(r.item_id.as_str())
            .or_default()
            .insert(r.reviewer_id.as_str(), r);
    }

    let mut validity_sum = 0.0;
    let mut relevance_sum = 0.0;
    for (item_id, per_reviewer) in &by_item {
        let relevant = cfg.relevant_overrides.get(*item_id).unwrap_or(&all_points);
        let n = per_reviewer.len() as f64;
        let mut v = 0.0;
        let mut k = 0.0;
        for r in per_reviewer.values() {
            v += if r.validity { 1.0 } else { 0.0 };
            k += knowledge_relevance(r, relevant, cfg.deduction_weight)?;
        }
        validity_sum += v / n;
        relevance_sum += k / n;
    }
    let n_reviewed = by_item.len();
    let mean = |sum: f64| (n_reviewed > 0).then(|| sum / n_reviewed as f64);

    Ok(MetricsSummary {
        run_id: String::new(),
        strategy: first.strategy.clone(),
        backend_id: first.backend_id.clone(),
        conclusion_correctness: correctness,
        rationale_validity: mean(validity_sum),
        knowledge_relevance: mean(relevance_sum),
        confusion: confusion_matrix(items),
        n_items: items.len(),
        n_reviewed,
    })
}

/// [`summarize`] for a whole run; reviews for other runs are ignored.
pub fn summarize_run(
    run: &QaRun,
    reviews: &[ReviewRecord],
    rubric: &KnowledgeBase,
    cfg: &RelevanceConfig,
) -> Result<MetricsSummary, MetricsError> {
    let own: Vec<ReviewRecord> = reviews
        .iter()
        .filter(|r| r.run_id == run.run_id)
        .cloned()
        .collect();
    let mut summary = summarize(&run.items, &own, rubric, cfg)?;
    summary.run_id = run.run_id.clone();
    summary.strategy = run.strategy.clone();
    summary.backend_id = run.backend_id.clone();
    Ok(summary)
}
