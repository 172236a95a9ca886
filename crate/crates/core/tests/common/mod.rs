#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use iclqa::sample_store::{
    save_database, Annotation, DefectCategory, KnowledgeBase, KnowledgePoint, QualityLabel, Sample,
    SampleDatabase, TestItem,
};
use iclqa::transport::{HttpReply, HttpTransport, TransportError};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Writes a small PNG whose pixels depend on `seed`.
pub fn write_png(path: &Path, seed: u8) {
    let img = image::RgbImage::from_fn(8, 6, |x, y| {
        image::Rgb([seed, (x as u8).wrapping_mul(31) ^ seed, (y as u8).wrapping_mul(17)])
    });
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).unwrap();
    }
    img.save(path).unwrap();
}

pub fn rubric() -> KnowledgeBase {
    KnowledgeBase {
        instruction_text: "Decide whether the weld bead is high or low quality.".into(),
        knowledge_text: "Height and width should stay within tolerance.".into(),
        points: vec![
            KnowledgePoint {
                id: "height".into(),
                name: "bead height".into(),
                description: "Height of the bead above the plate.".into(),
                derived_from: vec![],
            },
            KnowledgePoint {
                id: "width".into(),
                name: "bead width".into(),
                description: "Width of the bead.".into(),
                derived_from: vec![],
            },
            KnowledgePoint {
                id: "depth".into(),
                name: "fusion depth".into(),
                description: "Penetration into the base metal.".into(),
                derived_from: vec![],
            },
        ],
    }
}

pub fn sample(id: &str, high: bool) -> Sample {
    Sample {
        id: id.into(),
        image_ref: PathBuf::from(format!("images/{id}.png")),
        defect_category: if high {
            DefectCategory::None
        } else {
            DefectCategory::ExcessiveHeight
        },
        tags: vec![],
        annotation: Annotation {
            quality_label: if high { QualityLabel::High } else { QualityLabel::Low },
            unsatisfactory_comments: if high { vec![] } else { vec!["bead too tall".into()] },
            satisfactory_comments: vec!["even ripples".into()],
            knowledge_point_ids: vec!["height".into()],
        },
    }
}

/// Six samples (two high) and four test items, with images, saved as
/// `database.toml` in `dir`.
pub fn tiny_db(dir: &Path) -> (SampleDatabase, PathBuf) {
    let samples: Vec<Sample> = (1..=6).map(|i| sample(&format!("s{i}"), i <= 2)).collect();
    let test_items: Vec<TestItem> = (1..=4)
        .map(|i| TestItem {
            id: format!("t{i}"),
            image_ref: PathBuf::from(format!("images/t{i}.png")),
            ground_truth: if i % 2 == 0 { QualityLabel::High } else { QualityLabel::Low },
        })
        .collect();
    for (i, s) in samples.iter().enumerate() {
        write_png(&dir.join(&s.image_ref), i as u8 * 20 + 1);
    }
    for (i, t) in test_items.iter().enumerate() {
        write_png(&dir.join(&t.image_ref), i as u8 * 20 + 150);
    }
    let db = SampleDatabase {
        knowledge_base: rubric(),
        samples,
        test_items,
        root: dir.to_path_buf(),
    };
    let manifest = dir.join("database.toml");
    save_database(&db, &manifest).unwrap();
    (db, manifest)
}

type Handler = dyn Fn(&str, &serde_json::Value) -> Result<HttpReply, TransportError> + Send + Sync;

/// In-process stand-in for a remote endpoint that records every request.
pub struct ScriptedTransport {
    handler: Box<Handler>,
    pub requests: Mutex<Vec<(String, Vec<(String, String)>, serde_json::Value)>>,
}

impl ScriptedTransport {
    pub fn new(
        handler: impl Fn(&str, &serde_json::Value) -> Result<HttpReply, TransportError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            handler: Box::new(handler),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

impl HttpTransport for ScriptedTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &serde_json::Value,
        _timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        self.requests
            .lock()
            .unwrap()
            .push((url.to_string(), headers.to_vec(), body.clone()));
        (self.handler)(url, body)
    }
}

pub fn ok(body: serde_json::Value) -> Result<HttpReply, TransportError> {
    Ok(HttpReply {
        status: 200,
        body: body.to_string(),
    })
}
