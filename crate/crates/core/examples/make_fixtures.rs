//! Regenerates the test fixtures under `tests/fixtures`: a 9-sample
//! database with 56 test items, precomputed image and response vectors,
//! a frozen cassette for 7 strategies on two backends, and a review log.
//!
//! ```text
//! cargo run -p iclqa --example make_fixtures [-- OUT_DIR]
//! ```
//!
//! Responses are scripted, not recorded from a model: each run gets a fixed
//! number of correct conclusions so that the resulting metrics are known.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use iclqa::cli::{plan_selections, ProjectConfig, Session};
use iclqa::embedding::PrecomputedFile;
use iclqa::hashing::{file_sha256, sha256_hex};
use iclqa::metrics::ReviewRecord;
use iclqa::prompt::{assemble_query, VERDICT_BEGIN, VERDICT_END};
use iclqa::sample_store::{
    save_database, Annotation, DefectCategory, KnowledgeBase, KnowledgePoint, QualityLabel, Sample,
    SampleDatabase, TestItem,
};
use iclqa::sampler::StrategyKind;
use iclqa::transport::OfflineTransport;
use iclqa::vlm_gateway::{submission_fingerprint, Cassette, CassetteEntry, CassetteMode};

const DIM: usize = 32;
const N_TEST: usize = 56;
const RECORDED_AT: &str = "2025-06-01T00:00:00+00:00";

/// Correct conclusions out of 56 per strategy, in `StrategyKind::ALL` order.
const CORRECT_GEMINI: [usize; 7] = [21, 32, 31, 34, 39, 36, 42];
const CORRECT_GEMMA: [usize; 7] = [36, 40, 21, 27, 39, 36, 25];

const POINTS: [(&str, &str, &str); 6] = [
    ("bead_height", "bead height", "Height of the deposited bead above the substrate; too tall or too flat beads are defective."),
    ("bead_width", "bead width", "Width of the bead at the substrate line; should be uniform along the track."),
    ("fusion_zone_depth", "fusion zone depth", "Depth of the melted substrate region; shallow fusion indicates poor bonding."),
    ("fusion_zone_area", "fusion zone area", "Area of the melted substrate region in the cross-section."),
    ("dilution", "dilution", "Share of melted substrate in the total melted cross-section."),
    ("aspect_ratio", "aspect ratio", "Bead width divided by bead height; extreme values signal defects."),
];

const PROJECT_TOML: &str = r#"# Fixture project: replays the frozen cassette, never touches the network.
database = "database.toml"
output_dir = "out"
seed = 42
cassette = "cassette.jsonl"
cassette_mode = "replay"
reviews = "reviews.jsonl"
retrieval_provider = "fixture-image"
response_provider = "fixture-text"
default_backend = "gemini"

[pinned]
one_shot = ["s1"]
expert_few_shot = ["s2", "s5", "s8"]

[projection]
method = "pca"

[[backends]]
backend_id = "gemini"
api_style = "chat_completions_vision"
base_url = "https://generativelanguage.googleapis.com/v1beta/openai"
model_name = "gemini-2.5-flash"
auth_env_var = "GEMINI_API_KEY"
parallelism = 4
requests_per_minute = 60

[[backends]]
backend_id = "gemma"
api_style = "generic_generate"
base_url = "http://localhost:11434"
model_name = "gemma3:27b"
parallelism = 1

[[embedding_providers]]
provider_id = "fixture-image"
kind = "precomputed_file"
endpoint_or_path = "image_embeddings.json"
expected_dimension = 32

[[embedding_providers]]
provider_id = "fixture-text"
kind = "precomputed_file"
endpoint_or_path = "response_embeddings.json"
expected_dimension = 32
"#;

fn category_height(c: DefectCategory) -> u32 {
    match c {
        DefectCategory::None => 7,
        DefectCategory::ExcessiveHeight => 12,
        DefectCategory::InsufficientHeight => 3,
    }
}

/// A small cross-section sketch: substrate band plus a half-ellipse bead.
fn draw(path: &Path, category: DefectCategory, rng: &mut ChaCha8Rng) -> Result<()> {
    let (w, h) = (32u32, 20u32);
    let substrate = 14u32;
    let bead_h = category_height(category) + rng.random_range(0..2);
    let half_w = 8.0 + rng.random_range(0.0..3.0);
    let cx = 16.0 + rng.random_range(-1.5..1.5);
    let mut img = RgbImage::from_pixel(w, h, Rgb([20, 20, 28]));
    for y in substrate..h {
        for x in 0..w {
            img.put_pixel(x, y, Rgb([110, 110, 120]));
        }
    }
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 - cx) / half_w;
            let top = substrate as f64 - bead_h as f64 * (1.0 - dx * dx).max(0.0).sqrt();
            let fusion = substrate as f64 + 0.4 * bead_h as f64 * (1.0 - dx * dx).max(0.0).sqrt();
            let yf = y as f64;
            if dx.abs() <= 1.0 && yf >= top && yf < fusion {
                let shade = 180 + rng.random_range(0..40) as u8;
                img.put_pixel(x, y, Rgb([shade, shade - 30, 60]));
            }
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn annotation(category: DefectCategory, variant: usize) -> Annotation {
    let (label, unsat, sat, points): (_, Vec<&str>, Vec<&str>, Vec<&str>) = match category {
        DefectCategory::None => (
            QualityLabel::High,
            vec![],
            vec![
                ["bead height within range", "smooth dome profile", "uniform bead width"][variant % 3],
                "adequate fusion zone depth",
            ],
            vec!["bead_height", "bead_width", "fusion_zone_depth"],
        ),
        DefectCategory::ExcessiveHeight => (
            QualityLabel::Low,
            vec![
                "excessive bead height",
                ["aspect ratio too small", "shallow fusion zone", "low dilution"][variant % 3],
            ],
            vec!["continuous track"],
            vec!["bead_height", "aspect_ratio", "dilution"],
        ),
        DefectCategory::InsufficientHeight => (
            QualityLabel::Low,
            vec![
                "insufficient bead height",
                ["bead too flat and wide", "excessive dilution", "large fusion zone area"][variant % 3],
            ],
            vec!["good fusion with substrate"],
            vec!["bead_height", "fusion_zone_area", "dilution"],
        ),
    };
    Annotation {
        quality_label: label,
        unsatisfactory_comments: unsat.into_iter().map(String::from).collect(),
        satisfactory_comments: sat.into_iter().map(String::from).collect(),
        knowledge_point_ids: points.into_iter().map(String::from).collect(),
    }
}

fn sample_category(i: usize) -> DefectCategory {
    match i / 3 {
        0 => DefectCategory::None,
        1 => DefectCategory::ExcessiveHeight,
        _ => DefectCategory::InsufficientHeight,
    }
}

fn test_category(i: usize) -> DefectCategory {
    match i % 7 {
        0..=2 => DefectCategory::None,
        3 | 4 => DefectCategory::ExcessiveHeight,
        _ => DefectCategory::InsufficientHeight,
    }
}

fn label_of(c: DefectCategory) -> QualityLabel {
    if c == DefectCategory::None {
        QualityLabel::High
    } else {
        QualityLabel::Low
    }
}

fn flip(l: QualityLabel) -> QualityLabel {
    match l {
        QualityLabel::High => QualityLabel::Low,
        QualityLabel::Low => QualityLabel::High,
    }
}

/// Scripted model answer.
fn response_text(
    kind: StrategyKind,
    predicted: Option<QualityLabel>,
    variant: usize,
    points: &[&str],
) -> String {
    let Some(label) = predicted else {
        return [
            "The cross-section is not clearly visible in this image, so I am unable to give a verdict.",
            "I cannot assess this sample: the bead boundary is ambiguous.",
        ][variant % 2]
            .to_string();
    };
    if kind == StrategyKind::Baseline {
        return match variant % 3 {
            0 => format!("The deposit surface looks continuous. Overall this appears to be a {label} quality print."),
            1 => format!("Judging by the overall shape, I would call this {label} quality."),
            _ => format!("The track seems {}. Verdict: {label} quality.", if label == QualityLabel::High { "regular" } else { "irregular" }),
        };
    }
    let names: Vec<&str> = points.to_vec();
    let mentions = names.join(", ");
    let body = match label {
        QualityLabel::High => format!(
            "The {} fall within the expected range and the fusion with the substrate is sound.",
            mentions
        ),
        QualityLabel::Low => format!(
            "Compared with the reference samples, the {} deviate from the acceptable range.",
            mentions
        ),
    };
    let observation = [
        "The bead profile is clearly visible.",
        "The cross-section edges are sharp.",
        "Contrast between bead and substrate is good.",
        "The bead is centred on the substrate.",
        "Some surface texture is visible on the bead.",
    ][variant % 5];
    let body = format!("{observation} {body}");
    if variant % 9 == 4 {
        return format!("{body} Therefore the bead is of {label} quality.");
    }
    let block = serde_json::json!({
        "conclusion": label.as_str(),
        "rationale": body,
        "knowledge_points": names,
    });
    format!("{body}\n\n{VERDICT_BEGIN}\n{block}\n{VERDICT_END}")
}

fn main() -> Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures"));
    let images = out.join("images");
    std::fs::create_dir_all(&images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2025);

    // database
    let mut samples = Vec::new();
    for i in 0..9 {
        let id = format!("s{}", i + 1);
        let category = sample_category(i);
        let rel = PathBuf::from(format!("images/{id}.png"));
        draw(&out.join(&rel), category, &mut rng)?;
        samples.push(Sample {
            id,
            image_ref: rel,
            defect_category: category,
            tags: vec![],
            annotation: annotation(category, i),
        });
    }
    let mut test_items = Vec::new();
    let mut test_categories = Vec::new();
    for i in 0..N_TEST {
        let id = format!("t{:02}", i + 1);
        let category = test_category(i);
        let rel = PathBuf::from(format!("images/{id}.png"));
        draw(&out.join(&rel), category, &mut rng)?;
        test_items.push(TestItem {
            id,
            image_ref: rel,
            ground_truth: label_of(category),
        });
        test_categories.push(category);
    }
    let db = SampleDatabase {
        knowledge_base: KnowledgeBase {
            instruction_text: "You are a quality inspector for wire-laser directed energy deposition. \
                Classify the bead cross-section in the final image as high or low quality and justify the decision."
                .into(),
            knowledge_text: "A high-quality bead has a moderate height, a uniform width, a fusion zone deep enough \
                to bond with the substrate, and a dilution and aspect ratio within the process window. \
                Excessive or insufficient bead height indicates low quality."
                .into(),
            points: POINTS
                .iter()
                .map(|(id, name, description)| KnowledgePoint {
                    id: id.to_string(),
                    name: name.to_string(),
                    description: description.to_string(),
                    derived_from: match *id {
                        "dilution" => vec!["fusion_zone_area".into()],
                        "aspect_ratio" => vec!["bead_height".into(), "bead_width".into()],
                        _ => vec![],
                    },
                })
                .collect(),
        },
        samples,
        test_items,
        root: out.clone(),
    };
    save_database(&db, &out.join("database.toml"))?;

    // image vectors: one cluster per defect category
    let unit = Normal::new(0.0, 1.0)?;
    let centers: BTreeMap<DefectCategory, Vec<f64>> = [
        DefectCategory::None,
        DefectCategory::ExcessiveHeight,
        DefectCategory::InsufficientHeight,
    ]
    .into_iter()
    .map(|c| (c, (0..DIM).map(|_| unit.sample(&mut rng)).collect()))
    .collect();
    let mut vectors = BTreeMap::new();
    let image_list = db
        .samples
        .iter()
        .map(|s| (s.image_ref.clone(), s.defect_category))
        .chain(db.test_items.iter().map(|t| t.image_ref.clone()).zip(test_categories.iter().copied()));
    for (rel, category) in image_list {
        let digest = file_sha256(&out.join(&rel))?;
        let v: Vec<f64> = centers[&category]
            .iter()
            .map(|c| c + 0.8 * unit.sample(&mut rng))
            .collect();
        vectors.insert(digest, v);
    }
    PrecomputedFile {
        provider_id: "fixture-image".into(),
        dimension: DIM,
        vectors,
    }
    .save(&out.join("image_embeddings.json"))?;

    // the response file must exist for the project to load; it is rewritten below
    let response_path = out.join("response_embeddings.json");
    PrecomputedFile {
        provider_id: "fixture-text".into(),
        dimension: DIM,
        vectors: BTreeMap::new(),
    }
    .save(&response_path)?;
    std::fs::write(out.join("project.toml"), PROJECT_TOML)?;
    let project = ProjectConfig::load(&out.join("project.toml"))?;

    // cassette
    let cassette_path = out.join("cassette.jsonl");
    if cassette_path.exists() {
        std::fs::remove_file(&cassette_path)?;
    }
    let cassette = Cassette::open(&cassette_path, CassetteMode::Record)?;
    let mut session = Session::new(Arc::new(OfflineTransport::new()));
    let mut texts: BTreeMap<String, (String, Option<QualityLabel>)> = BTreeMap::new();
    let mut correctness: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    let ctx = db.context();
    for cfg in project.sweep_configs()? {
        let backend = cfg.backend.backend_id.clone();
        let slot = StrategyKind::ALL
            .iter()
            .position(|k| *k == cfg.strategy.kind)
            .expect("known strategy");
        let n_correct = if backend == "gemini" {
            CORRECT_GEMINI[slot]
        } else {
            CORRECT_GEMMA[slot]
        };
        let mut order: Vec<usize> = (0..N_TEST).collect();
        let run_seed = u64::from_str_radix(&sha256_hex(cfg.run_id.as_bytes())[..16], 16)?;
        let mut run_rng = ChaCha8Rng::seed_from_u64(run_seed);
        order.shuffle(&mut run_rng);
        let mut is_correct = vec![false; N_TEST];
        for &i in &order[..n_correct] {
            is_correct[i] = true;
        }

        let embedder = session.embedder(&cfg.retrieval_provider, None)?;
        let plan = plan_selections(&db, &cfg.strategy, &embedder, 1)?;
        let mut wrong_seen = 0;
        for (i, (item, selection)) in plan.iter().enumerate() {
            let predicted = if is_correct[i] {
                Some(item.ground_truth)
            } else {
                wrong_seen += 1;
                // every fourth wrong answer carries no usable verdict
                (wrong_seen % 4 != 0).then(|| flip(item.ground_truth))
            };
            let points: Vec<&str> = match cfg.strategy.kind {
                StrategyKind::Baseline => vec![],
                _ => {
                    let n = 3 + (i + slot) % 4;
                    POINTS.iter().take(n).map(|p| p.1).collect()
                }
            };
            let raw = response_text(cfg.strategy.kind, predicted, i * 7 + slot, &points);
            let query = assemble_query(&ctx, selection, &db.resolve(&item.image_ref))?;
            cassette.append(CassetteEntry {
                fingerprint: submission_fingerprint(&query, &cfg.backend),
                backend_id: backend.clone(),
                raw_response: raw.clone(),
                recorded_at: RECORDED_AT.into(),
            })?;
            texts.insert(sha256_hex(raw.as_bytes()), (backend.clone(), predicted));
        }
        correctness.insert(cfg.run_id.clone(), is_correct);
    }

    // response vectors clustered by backend and verdict
    let mut clusters: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut vectors = BTreeMap::new();
    for (digest, (backend, predicted)) in &texts {
        let key = format!("{backend}/{predicted:?}");
        let center = clusters
            .entry(key)
            .or_insert_with(|| (0..DIM).map(|_| 2.0 * unit.sample(&mut rng)).collect())
            .clone();
        vectors.insert(
            digest.clone(),
            center.iter().map(|c| c + 0.5 * unit.sample(&mut rng)).collect::<Vec<f64>>(),
        );
    }
    PrecomputedFile {
        provider_id: "fixture-text".into(),
        dimension: DIM,
        vectors,
    }
    .save(&response_path)?;

    // reviews: the gemma baseline is judged invalid with no knowledge
    // covered; gemini many-shot rationales are valid exactly when correct
    let mut log = String::new();
    let all_points: BTreeSet<String> = POINTS.iter().map(|p| p.0.to_string()).collect();
    for (i, item) in db.test_items.iter().enumerate() {
        let record = ReviewRecord {
            run_id: "baseline-gemma".into(),
            item_id: item.id.clone(),
            reviewer_id: "expert-a".into(),
            validity: false,
            covered_points: BTreeSet::new(),
            inappropriate_points: vec![],
            notes: String::new(),
            reviewed_at: format!("2025-06-02T09:{:02}:00+00:00", i),
        };
        log.push_str(&serde_json::to_string(&record)?);
        log.push('\n');
    }
    let many = &correctness["many_shot-gemini"];
    for (i, item) in db.test_items.iter().enumerate() {
        let mut covered = all_points.clone();
        if i % 19 == 0 {
            covered.remove("fusion_zone_area");
        }
        let record = ReviewRecord {
            run_id: "many_shot-gemini".into(),
            item_id: item.id.clone(),
            reviewer_id: "expert-a".into(),
            validity: many[i],
            covered_points: covered,
            inappropriate_points: vec![],
            notes: String::new(),
            reviewed_at: format!("2025-06-03T10:{:02}:00+00:00", i),
        };
        log.push_str(&serde_json::to_string(&record)?);
        log.push('\n');
    }
    std::fs::write(out.join("reviews.jsonl"), log)?;

    println!(
        "fixtures written to {} ({} cassette entries, {} response vectors)",
        out.display(),
        cassette.len(),
        texts.len()
    );
    Ok(())
}
