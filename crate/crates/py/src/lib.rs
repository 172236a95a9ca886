//! Python bindings for the `iclqa` harness.
//!
//! Structured results cross the boundary as plain dicts and lists (via
//! JSON), so Python callers never see Rust-specific types.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use ::iclqa::analysis::{project_rows, ProjectionConfig, ProjectionMethod, TsneParams};
use ::iclqa::embedding::{cosine_similarity as cosine, rank_by_similarity, EmbeddingVector, SourceKind};
use ::iclqa::metrics::{summarize_run, InappropriatePoint, RelevanceConfig, ReviewRecord};
use ::iclqa::prompt::parse_response as parse;
use ::iclqa::sample_store::{load_database, read_manifest, validate_database, SampleDatabase};
use ::iclqa::sampler::{scattered_ranks as ranks, select_samples as select, SamplingStrategy, SelectionOrder, StrategyKind};
use ::iclqa::transport::ReqwestTransport;
use ::iclqa::vlm_gateway::QaRun;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn vector(values: Vec<f64>) -> PyResult<EmbeddingVector> {
    EmbeddingVector::new(values, SourceKind::Image, "python").map_err(value_error)
}

/// A loaded and validated sample database.
#[pyclass(frozen, module = "iclqa")]
struct Database {
    inner: SampleDatabase,
}

#[pymethods]
impl Database {
    /// Loads a manifest and rejects it on the first validation problem.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_database(&path)
            .map(|inner| Self { inner })
            .map_err(value_error)
    }

    #[getter]
    fn sample_ids(&self) -> Vec<String> {
        self.inner.sample_ids()
    }

    #[getter]
    fn test_item_ids(&self) -> Vec<String> {
        self.inner.test_items.iter().map(|t| t.id.clone()).collect()
    }

    #[getter]
    fn knowledge_point_ids(&self) -> Vec<String> {
        self.inner.knowledge_base.points.iter().map(|p| p.id.clone()).collect()
    }

    /// Absolute path of a sample or test item image.
    fn image_path(&self, id: &str) -> PyResult<PathBuf> {
        let image_ref = self
            .inner
            .sample(id)
            .map(|s| &s.image_ref)
            .or_else(|| self.inner.test_item(id).map(|t| &t.image_ref))
            .ok_or_else(|| PyValueError::new_err(format!("unknown id `{id}`")))?;
        Ok(self.inner.resolve(image_ref))
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Database(samples={}, test_items={}, knowledge_points={})",
            self.inner.samples.len(),
            self.inner.test_items.len(),
            self.inner.knowledge_base.points.len()
        )
    }
}

/// Every validation problem in a manifest as `(subject, rule, detail)`.
#[pyfunction]
fn validate_manifest(path: PathBuf) -> PyResult<Vec<(String, String, String)>> {
    let db = read_manifest(&path).map_err(value_error)?;
    Ok(validate_database(&db)
        .violations
        .into_iter()
        .map(|v| (v.subject, v.rule.name().to_string(), v.detail))
        .collect())
}

#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    cosine(&vector(a)?, &vector(b)?).map_err(value_error)
}

/// Candidate ids ordered by descending similarity, ties by id.
#[pyfunction]
fn rank(query: Vec<f64>, candidates: HashMap<String, Vec<f64>>) -> PyResult<Vec<(String, f64)>> {
    let vectors = candidates
        .into_iter()
        .map(|(id, v)| Ok((id, vector(v)?)))
        .collect::<PyResult<Vec<_>>>()?;
    let refs: Vec<(&str, &EmbeddingVector)> = vectors.iter().map(|(id, v)| (id.as_str(), v)).collect();
    let ranked = rank_by_similarity(&vector(query)?, &refs).map_err(value_error)?;
    Ok(ranked.into_iter().map(|r| (r.id, r.similarity)).collect())
}

#[pyfunction]
fn scattered_ranks(n: usize, k: usize) -> PyResult<Vec<usize>> {
    if k == 0 || k > n {
        return Err(PyValueError::new_err(format!("need 1 <= k <= n, got k={k}, n={n}")));
    }
    Ok(ranks(n, k))
}

/// Demonstration ids chosen by `strategy` for one query.
#[pyfunction]
#[pyo3(signature = (strategy, db, embeddings, query=None, k=3, pinned=None, order="descending"))]
fn select_samples(
    strategy: &str,
    db: &Database,
    embeddings: HashMap<String, Vec<f64>>,
    query: Option<Vec<f64>>,
    k: usize,
    pinned: Option<Vec<String>>,
    order: &str,
) -> PyResult<Vec<String>> {
    let kind: StrategyKind = strategy.parse().map_err(PyValueError::new_err)?;
    let mut s = SamplingStrategy::new(kind).with_k(k);
    s.pinned_ids = pinned.unwrap_or_default();
    s.order = order.parse::<SelectionOrder>().map_err(PyValueError::new_err)?;
    let embeddings = embeddings
        .into_iter()
        .map(|(id, v)| Ok((id, vector(v)?)))
        .collect::<PyResult<HashMap<_, _>>>()?;
    let query = query.map(vector).transpose()?;
    select(&s, query.as_ref(), &db.inner, &embeddings)
        .map(|sel| sel.sample_ids)
        .map_err(value_error)
}

/// Parses a raw model answer; knowledge points are matched against the
/// database rubric when one is given.
#[pyfunction]
#[pyo3(signature = (raw, db=None))]
fn parse_response<'py>(py: Python<'py>, raw: &str, db: Option<&Database>) -> PyResult<Bound<'py, PyAny>> {
    let rubric = db.map(|d| d.inner.knowledge_base.points.as_slice()).unwrap_or(&[]);
    to_py(py, &parse(raw, rubric))
}

/// Relevance score of one review against a relevant point set.
#[pyfunction]
#[pyo3(signature = (covered, n_inappropriate, relevant, weight=1.0))]
fn knowledge_relevance(covered: Vec<String>, n_inappropriate: usize, relevant: Vec<String>, weight: f64) -> PyResult<f64> {
    let review = ReviewRecord {
        run_id: String::new(),
        item_id: String::new(),
        reviewer_id: String::new(),
        validity: true,
        covered_points: covered.into_iter().collect(),
        inappropriate_points: (0..n_inappropriate)
            .map(|i| InappropriatePoint {
                text: format!("#{i}"),
                point_id: None,
            })
            .collect(),
        notes: String::new(),
        reviewed_at: String::new(),
    };
    let relevant: BTreeSet<String> = relevant.into_iter().collect();
    ::iclqa::metrics::knowledge_relevance(&review, &relevant, weight).map_err(value_error)
}

/// Metrics for a saved `qa_run.json`, optionally with a review log.
#[pyfunction]
#[pyo3(signature = (run_path, db, reviews_path=None))]
fn metrics<'py>(
    py: Python<'py>,
    run_path: PathBuf,
    db: &Database,
    reviews_path: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let run = QaRun::load(&run_path).map_err(|e| PyIOError::new_err(format!("{}: {e}", run_path.display())))?;
    let reviews = match reviews_path {
        Some(p) => ::iclqa::review_service::read_review_log(&p).map_err(value_error)?,
        None => Vec::new(),
    };
    let summary = summarize_run(&run, &reviews, &db.inner.knowledge_base, &RelevanceConfig::default())
        .map_err(value_error)?;
    to_py(py, &summary)
}

/// 2-D projection of row vectors with PCA or seeded t-SNE.
#[pyfunction]
#[pyo3(signature = (rows, method="pca", seed=0, perplexity=5.0))]
fn project(rows: Vec<Vec<f64>>, method: &str, seed: u64, perplexity: f64) -> PyResult<Vec<(f64, f64)>> {
    let cfg = ProjectionConfig {
        method: method.parse::<ProjectionMethod>().map_err(PyValueError::new_err)?,
        seed,
        tsne: TsneParams {
            perplexity,
            ..TsneParams::default()
        },
    };
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let points = project_rows(&refs, &cfg).map_err(value_error)?;
    Ok(points.into_iter().map(|[x, y]| (x, y)).collect())
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("iclqa".to_string()).chain(args).collect();
    py.detach(|| match ::iclqa::cli::run_args(argv, Arc::new(ReqwestTransport::new())) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    })
}

#[pymodule]
#[pyo3(name = "iclqa")]
pub fn iclqa_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Database>()?;
    m.add_function(wrap_pyfunction!(validate_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(scattered_ranks, m)?)?;
    m.add_function(wrap_pyfunction!(select_samples, m)?)?;
    m.add_function(wrap_pyfunction!(parse_response, m)?)?;
    m.add_function(wrap_pyfunction!(knowledge_relevance, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
