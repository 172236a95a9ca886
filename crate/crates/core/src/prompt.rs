//! QA query assembly and response parsing.
//!
//! The response schema text and the verdict block delimiters below are part
//! of every query fingerprint. Changing them invalidates recorded cassettes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{file_sha256, sha256_hex};
use crate::sample_store::{render_annotation, IclContext, KnowledgePoint, QualityLabel};
use crate::sampler::IclSelection;

pub const VERDICT_BEGIN: &str = "<<<QA_VERDICT>>>";
pub const VERDICT_END: &str = "<<<END_QA_VERDICT>>>";

pub const RESPONSE_SCHEMA_TEXT: &str = "Explain your assessment in plain text first. \
Then end your answer with a machine-readable block in exactly this form:\n\
<<<QA_VERDICT>>>\n\
{\"conclusion\": \"high\" | \"low\", \"rationale\": \"<short justification>\", \"knowledge_points\": [\"<knowledge point name>\", ...]}\n\
<<<END_QA_VERDICT>>>";

const KNOWLEDGE_HEADER: &str = "Quality assessment knowledge:";
const DEMONSTRATIONS_HEADER: &str = "Annotated reference samples:";
const QUERY_HEADER: &str = "Image to evaluate:";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl ImageRef {
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let sha256 = file_sha256(path).map_err(|source| PromptError::UnreadableImage {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub sample_id: String,
    pub image: ImageRef,
    pub annotation_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaQuery {
    pub instruction: String,
    pub knowledge_text: Option<String>,
    pub demonstrations: Vec<Demonstration>,
    pub query_image: ImageRef,
    pub response_schema_text: String,
    pub fingerprint: String,
}

/// Content that the fingerprint covers. Images enter by hash only.
#[derive(Serialize)]
struct FingerprintView<'a> {
    version: u32,
    instruction: &'a str,
    knowledge_text: Option<&'a str>,
    demonstrations: Vec<(&'a str, &'a str)>,
    query_image: &'a str,
    response_schema_text: &'a str,
}

impl QaQuery {
    pub fn compute_fingerprint(&self) -> String {
        let view = FingerprintView {
            version: 1,
            instruction: &self.instruction,
            knowledge_text: self.knowledge_text.as_deref(),
            demonstrations: self
                .demonstrations
                .iter()
                .map(|d| (d.image.sha256.as_str(), d.annotation_text.as_str()))
                .collect(),
            query_image: &self.query_image.sha256,
            response_schema_text: &self.response_schema_text,
        };
        let bytes = serde_json::to_vec(&view).expect("fingerprint view serializes");
        sha256_hex(&bytes)
    }

    /// The query as an ordered sequence of text and image parts, the
    /// instruction first.
    pub fn parts(&self) -> Vec<PromptPart<'_>> {
        let mut parts = vec![PromptPart::Text(self.instruction.clone())];
        if let Some(k) = &self.knowledge_text {
            parts.push(PromptPart::Text(format!("{KNOWLEDGE_HEADER}\n{k}")));
        }
        if !self.demonstrations.is_empty() {
            parts.push(PromptPart::Text(DEMONSTRATIONS_HEADER.to_string()));
            for (i, demo) in self.demonstrations.iter().enumerate() {
                parts.push(PromptPart::Text(format!("Reference sample {}:", i + 1)));
                parts.push(PromptPart::Image(&demo.image));
                parts.push(PromptPart::Text(format!(
                    "Expert annotation:\n{}",
                    demo.annotation_text
                )));
            }
        }
        parts.push(PromptPart::Text(QUERY_HEADER.to_string()));
        parts.push(PromptPart::Image(&self.query_image));
        parts.push(PromptPart::Text(self.response_schema_text.clone()));
        parts
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptPart<'a> {
    Text(String),
    Image(&'a ImageRef),
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("selection references unknown sample `{0}`")]
    UnknownSampleId(String),
    #[error("cannot read image {path}: {source}")]
    UnreadableImage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Builds the full query for one image from a selection.
pub fn assemble_query(
    ctx: &IclContext<'_>,
    selection: &IclSelection,
    query_image: &Path,
) -> Result<QaQuery, PromptError> {
    let kb = ctx.knowledge_base;
    let demonstrations = selection
        .sample_ids
        .iter()
        .map(|id| {
            let sample = ctx
                .sample(id)
                .ok_or_else(|| PromptError::UnknownSampleId(id.clone()))?;
            Ok(Demonstration {
                sample_id: id.clone(),
                image: ImageRef::load(&ctx.resolve(&sample.image_ref))?,
                annotation_text: render_annotation(sample),
            })
        })
        .collect::<Result<Vec<_>, PromptError>>()?;
    let mut query = QaQuery {
        instruction: kb.instruction_text.clone(),
        knowledge_text: selection
            .include_knowledge_text
            .then(|| kb.knowledge_text.clone()),
        demonstrations,
        query_image: ImageRef::load(query_image)?,
        response_schema_text: RESPONSE_SCHEMA_TEXT.to_string(),
        fingerprint: String::new(),
    };
    query.fingerprint = query.compute_fingerprint();
    Ok(query)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conclusion {
    High,
    Low,
    Unparseable,
}

impl Conclusion {
    pub fn as_label(self) -> Option<QualityLabel> {
        match self {
            Conclusion::High => Some(QualityLabel::High),
            Conclusion::Low => Some(QualityLabel::Low),
            Conclusion::Unparseable => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Conclusion::High => "high",
            Conclusion::Low => "low",
            Conclusion::Unparseable => "unparseable",
        }
    }
}

impl From<QualityLabel> for Conclusion {
    fn from(l: QualityLabel) -> Self {
        match l {
            QualityLabel::High => Conclusion::High,
            QualityLabel::Low => Conclusion::Low,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsePath {
    Structured,
    Keyword,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaResponse {
    pub conclusion: Conclusion,
    pub rationale: String,
    pub claimed_knowledge_points: Vec<String>,
    pub raw: String,
    pub parsed_via: ParsePath,
}

impl QaResponse {
    /// Response for an item that never produced model output.
    pub fn failed(raw: String) -> Self {
        Self {
            conclusion: Conclusion::Unparseable,
            rationale: raw.clone(),
            claimed_knowledge_points: Vec::new(),
            raw,
            parsed_via: ParsePath::Failed,
        }
    }
}

#[derive(Debug, Deserialize)]
struct VerdictBlock {
    conclusion: String,
    #[serde(default)]
    rationale: String,
    #[serde(default)]
    knowledge_points: Vec<String>,
}

/// Parses a raw model answer: verdict block first, then a keyword scan,
/// otherwise `unparseable`. Knowledge points are reported as rubric ids.
pub fn parse_response(raw: &str, rubric: &[KnowledgePoint]) -> QaResponse {
    if let Some(block) = extract_block(raw) {
        if let Some(conclusion) = conclusion_word(&block.conclusion) {
            let claimed = match_claimed_points(&block.knowledge_points, rubric);
            return QaResponse {
                conclusion,
                rationale: block.rationale,
                claimed_knowledge_points: claimed,
                raw: raw.to_string(),
                parsed_via: ParsePath::Structured,
            };
        }
    }
    match keyword_conclusion(raw) {
        Some(label) => QaResponse {
            conclusion: label.into(),
            rationale: raw.to_string(),
            claimed_knowledge_points: points_mentioned_in(raw, rubric),
            raw: raw.to_string(),
            parsed_via: ParsePath::Keyword,
        },
        None => QaResponse {
            conclusion: Conclusion::Unparseable,
            rationale: raw.to_string(),
            claimed_knowledge_points: points_mentioned_in(raw, rubric),
            raw: raw.to_string(),
            parsed_via: ParsePath::Failed,
        },
    }
}

/// Renders a parsed response back into a verdict block.
pub fn render_verdict_block(resp: &QaResponse, rubric: &[KnowledgePoint]) -> String {
    let names: Vec<&str> = resp
        .claimed_knowledge_points
        .iter()
        .filter_map(|id| rubric.iter().find(|p| &p.id == id).map(|p| p.name.as_str()))
        .collect();
    let body = serde_json::json!({
        "conclusion": resp.conclusion.as_str(),
        "rationale": resp.rationale,
        "knowledge_points": names,
    });
    format!("{VERDICT_BEGIN}\n{body}\n{VERDICT_END}")
}

fn extract_block(raw: &str) -> Option<VerdictBlock> {
    let start = raw.rfind(VERDICT_BEGIN)? + VERDICT_BEGIN.len();
    let rest = &raw[start..];
    let inner = match rest.find(VERDICT_END) {
        Some(end) => &rest[..end],
        None => rest,
    };
    let open = inner.find('{')?;
    let close = inner.rfind('}')?;
    if close < open {
        return None;
    }
    serde_json::from_str(&inner[open..=close]).ok()
}

fn conclusion_word(s: &str) -> Option<Conclusion> {
    let norm = normalize(s);
    match norm.as_str() {
        "high" | "high quality" => Some(Conclusion::High),
        "low" | "low quality" => Some(Conclusion::Low),
        _ => None,
    }
}

/// Lowercases, maps every non-alphanumeric run to one space, trims.
fn normalize(s: &str) -> String {
    tokens(s).join(" ")
}

fn tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

const NEGATORS: &[&str] = &[
    "not", "no", "never", "isn", "wasn", "aren", "weren", "doesn", "don", "didn", "cannot",
    "nor", "neither", "hardly",
];
const NEGATION_WINDOW: usize = 3;

/// First "high quality" / "low quality" phrase in the text; a negator in
/// the three preceding tokens flips it.
pub fn keyword_conclusion(text: &str) -> Option<QualityLabel> {
    let toks = tokens(text);
    for i in 0..toks.len().saturating_sub(1) {
        if toks[i + 1] != "quality" {
            continue;
        }
        let polarity = match toks[i].as_str() {
            "high" => QualityLabel::High,
            "low" => QualityLabel::Low,
            _ => continue,
        };
        let from = i.saturating_sub(NEGATION_WINDOW);
        let negated = toks[from..i].iter().any(|t| NEGATORS.contains(&t.as_str()));
        return Some(match (polarity, negated) {
            (p, false) => p,
            (QualityLabel::High, true) => QualityLabel::Low,
            (QualityLabel::Low, true) => QualityLabel::High,
        });
    }
    None
}

fn match_claimed_points(claimed: &[String], rubric: &[KnowledgePoint]) -> Vec<String> {
    let claimed: Vec<String> = claimed.iter().map(|c| normalize(c)).filter(|c| !c.is_empty()).collect();
    rubric
        .iter()
        .filter(|p| {
            let name = normalize(&p.name);
            let id = normalize(&p.id);
            claimed.iter().any(|c| {
                c.contains(&name) || name.contains(c.as_str()) || c.contains(&id) || id == *c
            })
        })
        .map(|p| p.id.clone())
        .collect()
}

fn points_mentioned_in(text: &str, rubric: &[KnowledgePoint]) -> Vec<String> {
    let text = format!(" {} ", normalize(text));
    rubric
        .iter()
        .filter(|p| {
            let name = normalize(&p.name);
            !name.is_empty() && text.contains(&format!(" {name} "))
        })
        .map(|p| p.id.clone())
        .collect()
}
