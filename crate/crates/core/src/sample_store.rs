//! Annotated sample database: demonstration samples, the knowledge base,
//! and labelled test items, persisted as a single TOML manifest.
//!
//! Manifest layout (keys are stable):
//!
//! ```toml
//! [knowledge_base]
//! instruction_text = "..."
//! knowledge_text = "..."
//!
//! [[knowledge_base.points]]
//! id = "bead_height"
//! name = "bead height"
//! description = "..."
//! derived_from = []
//!
//! [[samples]]
//! id = "s1"
//! image_ref = "images/s1.png"
//! defect_category = "none"          # none | excessive_height | insufficient_height
//! tags = []
//! [samples.annotation]
//! quality_label = "high"            # high | low
//! unsatisfactory_comments = []
//! satisfactory_comments = ["smooth dome shape"]
//! knowledge_point_ids = ["bead_height"]
//!
//! [[test_items]]
//! id = "t01"
//! image_ref = "images/t01.png"
//! ground_truth = "low"
//! ```
//!
//! Image references are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sniff_image_mime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityLabel {
    High,
    Low,
}

impl QualityLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            QualityLabel::High => "high",
            QualityLabel::Low => "low",
        }
    }
}

impl fmt::Display for QualityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for QualityLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(QualityLabel::High),
            "low" => Ok(QualityLabel::Low),
            other => Err(format!("unknown quality label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectCategory {
    None,
    ExcessiveHeight,
    InsufficientHeight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub quality_label: QualityLabel,
    #[serde(default)]
    pub unsatisfactory_comments: Vec<String>,
    #[serde(default)]
    pub satisfactory_comments: Vec<String>,
    #[serde(default)]
    pub knowledge_point_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image_ref: PathBuf,
    pub defect_category: DefectCategory,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
    pub annotation: Annotation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgePoint {
    pub id: String,
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub derived_from: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub instruction_text: String,
    pub knowledge_text: String,
    pub points: Vec<KnowledgePoint>,
}

impl KnowledgeBase {
    pub fn point_ids(&self) -> BTreeSet<String> {
        self.points.iter().map(|p| p.id.clone()).collect()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.points.iter().any(|p| p.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestItem {
    pub id: String,
    pub image_ref: PathBuf,
    pub ground_truth: QualityLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDatabase {
    pub knowledge_base: KnowledgeBase,
    #[serde(default)]
    pub samples: Vec<Sample>,
    #[serde(default)]
    pub test_items: Vec<TestItem>,
    /// Directory that relative image references resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

/// The part of the database that prompt assembly may see. Test items and
/// their labels are not reachable from here.
#[derive(Debug, Clone, Copy)]
pub struct IclContext<'a> {
    pub knowledge_base: &'a KnowledgeBase,
    samples: &'a [Sample],
    root: &'a Path,
}

impl<'a> IclContext<'a> {
    pub fn sample(&self, id: &str) -> Option<&'a Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn resolve(&self, image_ref: &Path) -> PathBuf {
        self.root.join(image_ref)
    }
}

impl SampleDatabase {
    pub fn context(&self) -> IclContext<'_> {
        IclContext {
            knowledge_base: &self.knowledge_base,
            samples: &self.samples,
            root: &self.root,
        }
    }

    pub fn resolve(&self, image_ref: &Path) -> PathBuf {
        self.root.join(image_ref)
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn test_item(&self, id: &str) -> Option<&TestItem> {
        self.test_items.iter().find(|t| t.id == id)
    }

    pub fn sample_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("failed to read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse manifest {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("failed to serialize manifest: {0}")]
    Serialize(String),
    #[error("database has no samples")]
    EmptyDatabase,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("image for `{id}` not found at {path}")]
    MissingImage { id: String, path: PathBuf },
    #[error("`{id}` cites unknown knowledge point `{point}`")]
    DanglingKnowledgeRef { id: String, point: String },
    #[error("invalid database: {0}")]
    Invalid(Violation),
}

/// Invariant a database can break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    EmptySamples,
    EmptyKnowledgeBase,
    EmptyInstruction,
    DuplicateKnowledgePointId,
    EmptyKnowledgeDescription,
    DuplicateSampleId,
    DuplicateTestItemId,
    SampleTestOverlap,
    MissingImage,
    UnsupportedImageFormat,
    DanglingKnowledgeRef,
    DefectLabelMismatch,
    LowQualityWithoutComments,
    HighQualityWithUnsatisfactoryComments,
    NoHighQualitySample,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::EmptySamples => "empty_samples",
            Rule::EmptyKnowledgeBase => "empty_knowledge_base",
            Rule::EmptyInstruction => "empty_instruction",
            Rule::DuplicateKnowledgePointId => "duplicate_knowledge_point_id",
            Rule::EmptyKnowledgeDescription => "empty_knowledge_description",
            Rule::DuplicateSampleId => "duplicate_sample_id",
            Rule::DuplicateTestItemId => "duplicate_test_item_id",
            Rule::SampleTestOverlap => "sample_test_overlap",
            Rule::MissingImage => "missing_image",
            Rule::UnsupportedImageFormat => "unsupported_image_format",
            Rule::DanglingKnowledgeRef => "dangling_knowledge_ref",
            Rule::DefectLabelMismatch => "defect_label_mismatch",
            Rule::LowQualityWithoutComments => "low_quality_without_comments",
            Rule::HighQualityWithUnsatisfactoryComments => {
                "high_quality_with_unsatisfactory_comments"
            }
            Rule::NoHighQualitySample => "no_high_quality_sample_one_shot_ineligible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Sample, test item, or knowledge point id the violation is about.
    /// Database-wide rules use `*`.
    pub subject: String,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.rule.name(), self.subject, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    fn push(&mut self, subject: impl Into<String>, rule: Rule, detail: impl Into<String>) {
        self.violations.push(Violation {
            subject: subject.into(),
            rule,
            detail: detail.into(),
        });
    }
}

/// Checks every database invariant and reports all violations. Never fails.
pub fn validate_database(db: &SampleDatabase) -> ValidationReport {
    let mut report = ValidationReport::default();
    let kb = &db.knowledge_base;

    if db.samples.is_empty() {
        report.push("*", Rule::EmptySamples, "database has no samples");
    }
    if kb.points.is_empty() {
        report.push("*", Rule::EmptyKnowledgeBase, "knowledge base has no points");
    }
    if kb.instruction_text.trim().is_empty() {
        report.push("*", Rule::EmptyInstruction, "instruction text is empty");
    }

    let mut point_ids = HashSet::new();
    for point in &kb.points {
        if !point_ids.insert(point.id.as_str()) {
            report.push(&point.id, Rule::DuplicateKnowledgePointId, "repeated knowledge point id");
        }
        if point.description.trim().is_empty() {
            report.push(&point.id, Rule::EmptyKnowledgeDescription, "description is empty");
        }
    }

    let mut sample_ids = HashSet::new();
    for sample in &db.samples {
        if !sample_ids.insert(sample.id.as_str()) {
            report.push(&sample.id, Rule::DuplicateSampleId, "repeated sample id");
        }
    }
    let mut test_ids = HashSet::new();
    for item in &db.test_items {
        if !test_ids.insert(item.id.as_str()) {
            report.push(&item.id, Rule::DuplicateTestItemId, "repeated test item id");
        }
    }
    let overlap: BTreeSet<&str> = sample_ids.intersection(&test_ids).copied().collect();
    for id in overlap {
        report.push(id, Rule::SampleTestOverlap, "id used by both a sample and a test item");
    }

    for sample in &db.samples {
        check_image(db, &sample.id, &sample.image_ref, &mut report);
        let ann = &sample.annotation;
        for point in &ann.knowledge_point_ids {
            if !point_ids.contains(point.as_str()) {
                report.push(
                    &sample.id,
                    Rule::DanglingKnowledgeRef,
                    format!("unknown knowledge point `{point}`"),
                );
            }
        }
        let is_none = sample.defect_category == DefectCategory::None;
        let is_high = ann.quality_label == QualityLabel::High;
        if is_none != is_high {
            report.push(
                &sample.id,
                Rule::DefectLabelMismatch,
                format!(
                    "defect category {:?} inconsistent with quality label {}",
                    sample.defect_category, ann.quality_label
                ),
            );
        }
        match ann.quality_label {
            QualityLabel::Low if ann.unsatisfactory_comments.is_empty() => report.push(
                &sample.id,
                Rule::LowQualityWithoutComments,
                "low-quality sample needs unsatisfactory-feature comments",
            ),
            QualityLabel::High if !ann.unsatisfactory_comments.is_empty() => report.push(
                &sample.id,
                Rule::HighQualityWithUnsatisfactoryComments,
                "high-quality sample carries unsatisfactory-feature comments",
            ),
            _ => {}
        }
    }

    for item in &db.test_items {
        check_image(db, &item.id, &item.image_ref, &mut report);
    }

    if !db.samples.is_empty()
        && !db
            .samples
            .iter()
            .any(|s| s.annotation.quality_label == QualityLabel::High)
    {
        report.push(
            "*",
            Rule::NoHighQualitySample,
            "no high-quality sample; one-shot strategy cannot be used",
        );
    }

    report
}

fn check_image(db: &SampleDatabase, id: &str, image_ref: &Path, report: &mut ValidationReport) {
    let path = db.resolve(image_ref);
    match std::fs::read(&path) {
        Ok(bytes) => {
            if sniff_image_mime(&bytes).is_none() {
                report.push(
                    id,
                    Rule::UnsupportedImageFormat,
                    format!("{} is neither PNG nor JPEG", path.display()),
                );
            }
        }
        Err(_) => report.push(id, Rule::MissingImage, format!("{} not readable", path.display())),
    }
}

/// Parses a manifest without validating it.
pub fn read_manifest(manifest_path: &Path) -> Result<SampleDatabase, StoreError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|source| StoreError::Io {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let mut db: SampleDatabase = toml::from_str(&text).map_err(|e| StoreError::Parse {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    db.root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    Ok(db)
}

/// Loads and fully validates a manifest. The first violation found becomes
/// the error.
pub fn load_database(manifest_path: &Path) -> Result<SampleDatabase, StoreError> {
    let db = read_manifest(manifest_path)?;
    let report = validate_database(&db);
    match report.violations.into_iter().next() {
        None => Ok(db),
        Some(v) => Err(violation_to_error(&db, v)),
    }
}

fn violation_to_error(db: &SampleDatabase, v: Violation) -> StoreError {
    match v.rule {
        Rule::EmptySamples => StoreError::EmptyDatabase,
        Rule::DuplicateSampleId
        | Rule::DuplicateTestItemId
        | Rule::DuplicateKnowledgePointId
        | Rule::SampleTestOverlap => StoreError::DuplicateId(v.subject),
        Rule::MissingImage => {
            let image_ref = db
                .sample(&v.subject)
                .map(|s| s.image_ref.clone())
                .or_else(|| db.test_item(&v.subject).map(|t| t.image_ref.clone()))
                .unwrap_or_default();
            StoreError::MissingImage {
                path: db.resolve(&image_ref),
                id: v.subject,
            }
        }
        Rule::DanglingKnowledgeRef => {
            let point = v
                .detail
                .split('`')
                .nth(1)
                .unwrap_or_default()
                .to_string();
            StoreError::DanglingKnowledgeRef {
                id: v.subject,
                point,
            }
        }
        _ => StoreError::Invalid(v),
    }
}

/// Writes the database back as a manifest. The whole file is replaced.
pub fn save_database(db: &SampleDatabase, manifest_path: &Path) -> Result<(), StoreError> {
    let text = toml::to_string_pretty(db).map_err(|e| StoreError::Serialize(e.to_string()))?;
    let tmp = manifest_path.with_extension("toml.tmp");
    std::fs::write(&tmp, text)
        .and_then(|_| std::fs::rename(&tmp, manifest_path))
        .map_err(|source| StoreError::Io {
            path: manifest_path.to_path_buf(),
            source,
        })
}

/// Renders an expert annotation as the three-part text used in prompts.
pub fn render_annotation(sample: &Sample) -> String {
    let ann = &sample.annotation;
    let join = |items: &[String]| {
        if items.is_empty() {
            "none".to_string()
        } else {
            items.join("; ")
        }
    };
    format!(
        "1) Overall quality: {}\n2) Unsatisfactory features: {}\n3) Satisfactory features: {}",
        ann.quality_label,
        join(&ann.unsatisfactory_comments),
        join(&ann.satisfactory_comments),
    )
}

/// Count of samples per quality label, for summaries.
pub fn label_counts(db: &SampleDatabase) -> BTreeMap<QualityLabel, usize> {
    let mut counts = BTreeMap::new();
    for s in &db.samples {
        *counts.entry(s.annotation.quality_label).or_insert(0) += 1;
    }
    counts
}
