mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use iclqa::metrics::QaRunItem;
use iclqa::prompt::parse_response;
use iclqa::review_service::{read_review_log, router, ReviewError, ReviewStore, REVIEW_LOG};
use iclqa::sample_store::SampleDatabase;
use iclqa::sampler::{IclSelection, SamplingStrategy, StrategyKind};
use iclqa::vlm_gateway::QaRun;
use serde_json::{json, Value};
use tower::ServiceExt;

use common::tiny_db;

fn run_for(db: &SampleDatabase, run_id: &str) -> QaRun {
    let strategy = SamplingStrategy::new(StrategyKind::ZeroShot);
    let items = db
        .test_items
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let raw = if i % 2 == 0 {
                "Clearly high quality, the bead width is even."
            } else {
                "low quality: bead height exceeds tolerance"
            };
            QaRunItem {
                item_id: t.id.clone(),
                strategy: strategy.clone(),
                backend_id: "fake".into(),
                selection: IclSelection {
                    strategy: strategy.clone(),
                    sample_ids: vec![],
                    include_knowledge_text: true,
                    similarity_scores: BTreeMap::new(),
                },
                fingerprint: format!("fp{i}"),
                response: parse_response(raw, &db.knowledge_base.points),
                ground_truth: t.ground_truth,
                error: None,
            }
        })
        .collect();
    QaRun {
        run_id: run_id.into(),
        strategy,
        backend_id: "fake".into(),
        model_name: "m".into(),
        items,
    }
}

struct Harness {
    _dir: tempfile::TempDir,
    data: std::path::PathBuf,
    db: SampleDatabase,
}

impl Harness {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (db, _) = tiny_db(dir.path());
        let data = dir.path().join("runs");
        for id in ["alpha", "beta"] {
            let run_dir = data.join(id);
            std::fs::create_dir_all(&run_dir).unwrap();
            std::fs::write(run_dir.join("qa_run.json"), run_for(&db, id).to_canonical_json()).unwrap();
        }
        Self { _dir: dir, data, db }
    }

    fn store(&self) -> Arc<ReviewStore> {
        Arc::new(ReviewStore::open(&self.data, self.db.clone()).unwrap())
    }

    fn app(&self) -> Router {
        router(self.store(), None)
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    let json = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, json, bytes)
}

fn review(run: &str, item: &str, who: &str, valid: bool, covered: &[&str]) -> Value {
    json!({
        "run_id": run,
        "item_id": item,
        "reviewer_id": who,
        "validity": valid,
        "covered_points": covered,
        "inappropriate_points": [],
        "notes": "",
    })
}

#[tokio::test]
async fn lists_runs_and_pending_items() {
    let h = Harness::new();
    let app = h.app();
    let (status, runs, _) = call(&app, "GET", "/runs", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(runs.as_array().unwrap().len(), 2);
    assert_eq!(runs[0]["run_id"], "alpha");
    assert_eq!(runs[0]["strategy"], "zero_shot");
    assert_eq!(runs[0]["n_items"], 4);

    let (status, tasks, _) = call(&app, "GET", "/runs/alpha/pending?reviewer=ann", None).await;
    assert_eq!(status, StatusCode::OK);
    let tasks = tasks.as_array().unwrap();
    assert_eq!(tasks.len(), 4);
    assert_eq!(tasks[0]["item_id"], "t1");
    assert_eq!(tasks[0]["image_url"], "/images/t1");
    assert_eq!(tasks[0]["conclusion"], "high");
    assert_eq!(tasks[0]["rubric"].as_array().unwrap().len(), 3);
    assert!(tasks[1]["rationale"].as_str().unwrap().contains("exceeds tolerance"));
}

#[tokio::test]
async fn submitting_updates_pending_and_metrics() {
    let h = Harness::new();
    let app = h.app();
    let (status, ack, _) = call(&app, "POST", "/reviews", Some(review("alpha", "t2", "ann", true, &["height"]))).await;
    assert_eq!(status, StatusCode::OK, "{ack}");
    assert_eq!(ack["superseded"], false);
    assert_eq!(ack["pending_remaining"], 3);

    let (_, tasks, _) = call(&app, "GET", "/runs/alpha/pending?reviewer=ann", None).await;
    let ids: Vec<&str> = tasks.as_array().unwrap().iter().map(|t| t["item_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["t1", "t3", "t4"]);
    // other reviewers and runs are unaffected
    let (_, tasks, _) = call(&app, "GET", "/runs/alpha/pending?reviewer=bo", None).await;
    assert_eq!(tasks.as_array().unwrap().len(), 4);
    let (_, tasks, _) = call(&app, "GET", "/runs/beta/pending?reviewer=ann", None).await;
    assert_eq!(tasks.as_array().unwrap().len(), 4);

    let (status, m, _) = call(&app, "GET", "/runs/alpha/metrics", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(m["n_reviewed"], 1);
    assert_eq!(m["rationale_validity"], 1.0);
    assert!((m["knowledge_relevance"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(m["n_items"], 4);

    let (_, ack, _) = call(&app, "POST", "/reviews", Some(review("alpha", "t2", "ann", false, &[]))).await;
    assert_eq!(ack["superseded"], true);
    assert_eq!(ack["pending_remaining"], 3);
    let (_, m, _) = call(&app, "GET", "/runs/alpha/metrics", None).await;
    assert_eq!(m["rationale_validity"], 0.0);
    assert_eq!(m["knowledge_relevance"], 0.0);

    let (_, m, _) = call(&app, "GET", "/runs/beta/metrics", None).await;
    assert_eq!(m["n_reviewed"], 0);
    assert_eq!(m["rationale_validity"], Value::Null);
}

#[tokio::test]
async fn error_statuses() {
    let h = Harness::new();
    let app = h.app();
    let cases = [
        (review("gamma", "t1", "ann", true, &[]), StatusCode::NOT_FOUND, "UnknownRun"),
        (review("alpha", "t9", "ann", true, &[]), StatusCode::NOT_FOUND, "UnknownItem"),
        (review("alpha", "s1", "ann", true, &[]), StatusCode::NOT_FOUND, "UnknownItem"),
        (review("alpha", "t1", "ann", true, &["ghost"]), StatusCode::UNPROCESSABLE_ENTITY, "InvalidKnowledgePoint"),
        (review("alpha", "t1", " ", true, &[]), StatusCode::BAD_REQUEST, "InvalidRecord"),
        (json!({"run_id": "alpha"}), StatusCode::BAD_REQUEST, "BadRequest"),
    ];
    for (body, status, name) in cases {
        let (got, err, _) = call(&app, "POST", "/reviews", Some(body)).await;
        assert_eq!((got, err["error"].as_str().unwrap()), (status, name));
        assert!(err["message"].is_string());
    }
    let mut bad_inappropriate = review("alpha", "t1", "ann", true, &[]);
    bad_inappropriate["inappropriate_points"] = json!([{"text": "x", "point_id": "ghost"}]);
    let (got, _, _) = call(&app, "POST", "/reviews", Some(bad_inappropriate)).await;
    assert_eq!(got, StatusCode::UNPROCESSABLE_ENTITY);

    let req = Request::post("/reviews").body(Body::from("{not json")).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);

    assert_eq!(call(&app, "GET", "/runs/gamma/pending?reviewer=a", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/runs/alpha/pending", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "GET", "/runs/gamma/metrics", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/images/t99", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/nowhere", None).await.0, StatusCode::NOT_FOUND);

    // nothing invalid reached the log
    assert!(read_review_log(&h.data.join(REVIEW_LOG)).unwrap().is_empty());
}

#[tokio::test]
async fn serves_images_and_static_files() {
    let h = Harness::new();
    let (status, _, bytes) = call(&h.app(), "GET", "/images/t3", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(bytes, std::fs::read(h.db.resolve(Path::new("images/t3.png"))).unwrap());

    let (status, _, page) = call(&h.app(), "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(page).unwrap().contains("<html"));

    let ui = h.data.join("ui");
    std::fs::create_dir_all(ui.join("assets")).unwrap();
    std::fs::write(ui.join("index.html"), "<p>bundle</p>").unwrap();
    std::fs::write(ui.join("assets/app.js"), "console.log(1)").unwrap();
    let app = router(h.store(), Some(ui));
    let resp = app.clone().oneshot(Request::get("/assets/app.js").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.headers()["content-type"], "text/javascript");
    let (_, _, page) = call(&app, "GET", "/", None).await;
    assert_eq!(page, b"<p>bundle</p>");
    assert_eq!(call(&app, "GET", "/../qa_run.json", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn reviews_survive_a_restart() {
    let h = Harness::new();
    let app = h.app();
    for (item, valid) in [("t1", true), ("t2", false), ("t1", false)] {
        let (status, _, _) = call(&app, "POST", "/reviews", Some(review("beta", item, "ann", valid, &["width"]))).await;
        assert_eq!(status, StatusCode::OK);
    }
    drop(app);

    let restarted = h.app();
    let (_, tasks, _) = call(&restarted, "GET", "/runs/beta/pending?reviewer=ann", None).await;
    assert_eq!(tasks.as_array().unwrap().len(), 2);
    let (_, m, _) = call(&restarted, "GET", "/runs/beta/metrics", None).await;
    assert_eq!(m["n_reviewed"], 2);
    assert_eq!(m["rationale_validity"], 0.0);

    let log = read_review_log(&h.data.join(REVIEW_LOG)).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.windows(2).all(|w| w[0].reviewed_at <= w[1].reviewed_at));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_submissions_are_all_recorded() {
    let h = Harness::new();
    let app = h.app();
    let mut tasks = Vec::new();
    for reviewer in 0..8 {
        for item in ["t1", "t2", "t3", "t4"] {
            let app = app.clone();
            tasks.push(tokio::spawn(async move {
                call(&app, "POST", "/reviews", Some(review("alpha", item, &format!("r{reviewer}"), true, &["depth"]))).await.0
            }));
        }
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    let log = read_review_log(&h.data.join(REVIEW_LOG)).unwrap();
    assert_eq!(log.len(), 32);

    let store = h.store();
    assert_eq!(store.reviews_for("alpha").len(), 32);
    for r in 0..8 {
        assert!(store.list_pending("alpha", &format!("r{r}")).unwrap().is_empty());
    }
}

#[test]
fn duplicate_runs_and_corrupt_logs_are_rejected() {
    let h = Harness::new();
    let run = run_for(&h.db, "alpha");
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        ReviewStore::with_runs(dir.path(), h.db.clone(), vec![run.clone(), run.clone()]),
        Err(ReviewError::DuplicateRun(id)) if id == "alpha"
    ));
    std::fs::write(dir.path().join(REVIEW_LOG), "{\"run_id\": \"alpha\"}\n").unwrap();
    let err = ReviewStore::with_runs(dir.path(), h.db.clone(), vec![run]).err().unwrap();
    assert_eq!(err.name(), "CorruptLog");
}
