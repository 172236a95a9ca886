use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::svg::{escape, Svg, PALETTE};
use super::{AnalysisError, ProjectionMethod};
use crate::metrics::MetricsSummary;
use crate::prompt::Conclusion;
use crate::sampler::{SamplingStrategy, StrategyKind};
use crate::vlm_gateway::QaRun;

/// Radar axis order; every polygon lists its values in this order.
pub const RADAR_AXES: [&str; 3] = [
    "rationale validity",
    "knowledge relevance",
    "conclusion correctness",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Structured,
    Plot,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "table" => Ok(ReportFormat::Table),
            "structured" => Ok(ReportFormat::Structured),
            "plot" => Ok(ReportFormat::Plot),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub run_id: String,
    pub item_id: String,
    pub strategy: StrategyKind,
    pub backend_id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub method: ProjectionMethod,
    pub seed: u64,
    pub provider_id: String,
    pub points: Vec<ProjectedPoint>,
}

fn strategy_label(s: &SamplingStrategy) -> String {
    if s.kind.uses_k() && s.k != crate::sampler::DEFAULT_K {
        format!("{} (k={})", s.kind.label(), s.k)
    } else {
        s.kind.label().to_string()
    }
}

fn sorted(summaries: &[MetricsSummary]) -> Vec<&MetricsSummary> {
    let mut v: Vec<&MetricsSummary> = summaries.iter().collect();
    v.sort_by(|a, b| {
        (&a.backend_id, a.strategy.kind, a.strategy.k, &a.run_id).cmp(&(
            &b.backend_id,
            b.strategy.kind,
            b.strategy.k,
            &b.run_id,
        ))
    });
    v
}

fn write(path: PathBuf, content: &str) -> Result<PathBuf, AnalysisError> {
    std::fs::write(&path, content).map_err(|source| AnalysisError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Writes the report files for `format` into `out_dir` and returns their
/// paths. Output depends only on the inputs.
pub fn emit_report(
    summaries: &[MetricsSummary],
    runs: &[QaRun],
    projections: Option<&ProjectionSet>,
    format: ReportFormat,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, AnalysisError> {
    if summaries.is_empty() {
        return Err(AnalysisError::EmptySummaries);
    }
    std::fs::create_dir_all(out_dir).map_err(|source| AnalysisError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let summaries = sorted(summaries);
    match format {
        ReportFormat::Table => Ok(vec![
            write(out_dir.join("summary.csv"), &summary_csv(&summaries)?)?,
            write(out_dir.join("summary.md"), &summary_markdown(&summaries))?,
        ]),
        ReportFormat::Structured => {
            let text = structured(&summaries, runs, projections);
            Ok(vec![write(out_dir.join("report.json"), &text)?])
        }
        ReportFormat::Plot => {
            let mut files = Vec::new();
            let backends: BTreeSet<&str> = summaries.iter().map(|s| s.backend_id.as_str()).collect();
            for backend in backends {
                let rows: Vec<&MetricsSummary> = summaries
                    .iter()
                    .copied()
                    .filter(|s| s.backend_id == backend)
                    .collect();
                files.push(write(
                    out_dir.join(format!("radar_{}.svg", file_safe(backend))),
                    &radar_svg(backend, &rows),
                )?);
            }
            files.push(write(out_dir.join("confusion.svg"), &confusion_svg(&summaries))?);
            if let Some(p) = projections {
                files.push(write(out_dir.join("projection.svg"), &projection_svg(p))?);
            }
            Ok(files)
        }
    }
}

/// Writes `projection.json` and `projection.svg` for a standalone projection.
pub fn write_projection(p: &ProjectionSet, out_dir: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    std::fs::create_dir_all(out_dir).map_err(|source| AnalysisError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut json = serde_json::to_string_pretty(p).expect("projection serializes");
    json.push('\n');
    Ok(vec![
        write(out_dir.join("projection.json"), &json)?,
        write(out_dir.join("projection.svg"), &projection_svg(p))?,
    ])
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_csv(summaries: &[&MetricsSummary]) -> Result<String, AnalysisError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| AnalysisError::Csv(e.to_string());
    w.write_record([
        "strategy",
        "k",
        "backend_id",
        "run_id",
        "conclusion_correctness",
        "rationale_validity",
        "knowledge_relevance",
        "n_items",
        "n_reviewed",
        "p_pos_a_pos",
        "p_pos_a_neg",
        "p_neg_a_pos",
        "p_neg_a_neg",
    ])
    .map_err(csv_err)?;
    for s in summaries {
        let c = s.confusion;
        w.write_record([
            s.strategy.kind.as_str().to_string(),
            if s.strategy.kind.uses_k() { s.strategy.k.to_string() } else { String::new() },
            s.backend_id.clone(),
            s.run_id.clone(),
            s.conclusion_correctness.to_string(),
            opt(s.rationale_validity),
            opt(s.knowledge_relevance),
            s.n_items.to_string(),
            s.n_reviewed.to_string(),
            c.pred_high_actual_high.to_string(),
            c.pred_high_actual_low.to_string(),
            c.pred_low_actual_high.to_string(),
            c.pred_low_actual_low.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| AnalysisError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Strategy rows × (correctness, validity, relevance) per backend.
fn summary_markdown(summaries: &[&MetricsSummary]) -> String {
    let backends: Vec<&str> = summaries
        .iter()
        .map(|s| s.backend_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rows: BTreeMap<(StrategyKind, usize, String), BTreeMap<&str, &MetricsSummary>> =
        BTreeMap::new();
    for s in summaries {
        rows.entry((s.strategy.kind, s.strategy.k, strategy_label(&s.strategy)))
            .or_default()
            .insert(s.backend_id.as_str(), s);
    }
    let fmt2 = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into());

    let mut out = String::new();
    out.push_str("| Sample strategy |");
    for b in &backends {
        let _ = write!(
            out,
            " {b} conclusion correctness | {b} rationale validity | {b} knowledge relevance |"
        );
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in &backends {
        out.push_str("---|---|---|");
    }
    out.push('\n');
    for ((_, _, label), per_backend) in &rows {
        let _ = write!(out, "| {label} |");
        for b in &backends {
            match per_backend.get(b) {
                Some(s) => {
                    let _ = write!(
                        out,
                        " {} | {} | {} |",
                        fmt2(Some(s.conclusion_correctness)),
                        fmt2(s.rationale_validity),
                        fmt2(s.knowledge_relevance)
                    );
                }
                None => out.push_str(" | | |"),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct RunDigest<'a> {
    run_id: &'a str,
    backend_id: &'a str,
    model_name: &'a str,
    strategy: &'a SamplingStrategy,
    n_items: usize,
    n_correct: usize,
    n_unparseable: usize,
    n_errors: usize,
}

fn structured(
    summaries: &[&MetricsSummary],
    runs: &[QaRun],
    projections: Option<&ProjectionSet>,
) -> String {
    let mut digests: Vec<RunDigest<'_>> = runs
        .iter()
        .map(|r| RunDigest {
            run_id: &r.run_id,
            backend_id: &r.backend_id,
            model_name: &r.model_name,
            strategy: &r.strategy,
            n_items: r.items.len(),
            n_correct: r.items.iter().filter(|i| i.is_correct()).count(),
            n_unparseable: r
                .items
                .iter()
                .filter(|i| i.response.conclusion == Conclusion::Unparseable)
                .count(),
            n_errors: r.items.iter().filter(|i| i.error.is_some()).count(),
        })
        .collect();
    digests.sort_by(|a, b| a.run_id.cmp(b.run_id));
    let value = serde_json::json!({
        "summaries": summaries,
        "runs": digests,
        "projections": projections,
    });
    let mut s = serde_json::to_string_pretty(&value).expect("report serializes");
    s.push('\n');
    s
}

fn radar_svg(backend: &str, rows: &[&MetricsSummary]) -> String {
    let (cx, cy, radius) = (320.0, 300.0, 200.0);
    let angle = |axis: usize| -std::f64::consts::FRAC_PI_2 + axis as f64 * 2.0 * std::f64::consts::PI / 3.0;
    let at = |axis: usize, v: f64| {
        let a = angle(axis);
        (cx + radius * v * a.cos(), cy + radius * v * a.sin())
    };

    let mut svg = Svg::new(640.0, 600.0);
    svg.text(cx, 30.0, 16.0, "middle", &format!("Assessment quality by strategy: {backend}"));
    for level in [0.25, 0.5, 0.75, 1.0] {
        let pts: Vec<String> = (0..3)
            .map(|a| {
                let (x, y) = at(a, level);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        svg.raw(&format!(
            r##"<polygon points="{}" fill="none" stroke="#cccccc" stroke-width="1"/>"##,
            pts.join(" ")
        ));
    }
    for (a, name) in RADAR_AXES.iter().enumerate() {
        let (x, y) = at(a, 1.0);
        svg.line(cx, cy, x, y, "#999999");
        let (lx, ly) = at(a, 1.12);
        svg.text(lx, ly, 13.0, "middle", name);
    }

    let mut data = Vec::new();
    for (i, s) in rows.iter().enumerate() {
        let values = [
            s.rationale_validity,
            s.knowledge_relevance,
            Some(s.conclusion_correctness),
        ];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(a, v)| {
                let (x, y) = at(a, v.unwrap_or(0.0));
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let data_values: Vec<String> = values
            .iter()
            .map(|v| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into()))
            .collect();
        let color = PALETTE[i % PALETTE.len()];
        svg.raw(&format!(
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="{color}" stroke-width="2" data-strategy="{}" data-values="{}"/>"#,
            pts.join(" "),
            escape(s.strategy.kind.as_str()),
            data_values.join(",")
        ));
        let ly = 470.0 + 16.0 * i as f64;
        svg.rect(20.0, ly - 10.0, 10.0, 10.0, color);
        svg.text(36.0, ly, 12.0, "start", &strategy_label(&s.strategy));
        data.push(serde_json::json!({
            "strategy": s.strategy.kind,
            "run_id": s.run_id,
            "rationale_validity": s.rationale_validity,
            "knowledge_relevance": s.knowledge_relevance,
            "conclusion_correctness": s.conclusion_correctness,
        }));
    }
    svg.finish(
        &format!("radar {backend}"),
        &serde_json::json!({"axes": RADAR_AXES, "backend_id": backend, "rows": data}),
    )
}

fn confusion_svg(summaries: &[&MetricsSummary]) -> String {
    let cell = 40.0;
    let block_w = 2.0 * cell + 60.0;
    let block_h = 2.0 * cell + 70.0;
    let cols = summaries.len().min(7).max(1);
    let rows = summaries.len().div_ceil(cols);
    let mut svg = Svg::new(cols as f64 * block_w + 40.0, rows as f64 * block_h + 40.0);
    let mut data = Vec::new();
    for (i, s) in summaries.iter().enumerate() {
        let x0 = 40.0 + (i % cols) as f64 * block_w;
        let y0 = 40.0 + (i / cols) as f64 * block_h;
        svg.text(x0 + cell, y0 - 18.0, 10.0, "middle", &strategy_label(&s.strategy));
        svg.text(x0 + cell, y0 - 6.0, 9.0, "middle", &s.backend_id);
        svg.text(x0 + cell * 0.5, y0 + 2.0 * cell + 12.0, 10.0, "middle", "A+");
        svg.text(x0 + cell * 1.5, y0 + 2.0 * cell + 12.0, 10.0, "middle", "A\u{2212}");
        svg.text(x0 - 4.0, y0 + cell * 0.6, 10.0, "end", "P+");
        svg.text(x0 - 4.0, y0 + cell * 1.6, 10.0, "end", "P\u{2212}");
        let m = s.confusion.as_array();
        let total = s.confusion.total().max(1) as f64;
        for (r, row) in m.iter().enumerate() {
            for (c, &count) in row.iter().enumerate() {
                let shade = 255 - ((count as f64 / total) * 200.0).round() as u8;
                let fill = format!("#{shade:02x}{shade:02x}ff");
                let (x, y) = (x0 + c as f64 * cell, y0 + r as f64 * cell);
                svg.rect(x, y, cell, cell, &fill);
                svg.text(x + cell / 2.0, y + cell / 2.0 + 4.0, 12.0, "middle", &count.to_string());
            }
        }
        data.push(serde_json::json!({
            "run_id": s.run_id,
            "strategy": s.strategy.kind,
            "backend_id": s.backend_id,
            "matrix": m,
        }));
    }
    svg.finish("confusion matrices", &serde_json::json!({"cells": data}))
}

fn projection_svg(p: &ProjectionSet) -> String {
    let (w, h, pad) = (640.0, 640.0, 40.0);
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for pt in &p.points {
        xmin = xmin.min(pt.x);
        xmax = xmax.max(pt.x);
        ymin = ymin.min(pt.y);
        ymax = ymax.max(pt.y);
    }
    let sx = if xmax > xmin { (w - 2.0 * pad) / (xmax - xmin) } else { 1.0 };
    let sy = if ymax > ymin { (h - 2.0 * pad) / (ymax - ymin) } else { 1.0 };
    let groups: Vec<(StrategyKind, &str)> = p
        .points
        .iter()
        .map(|pt| (pt.strategy, pt.backend_id.as_str()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut svg = Svg::new(w, h + 20.0 + 16.0 * groups.len() as f64);
    let method = match p.method {
        ProjectionMethod::Pca => "PCA",
        ProjectionMethod::Tsne => "t-SNE",
    };
    svg.text(w / 2.0, 24.0, 16.0, "middle", &format!("Response embeddings ({method})"));
    for pt in &p.points {
        let g = groups
            .iter()
            .position(|g| *g == (pt.strategy, pt.backend_id.as_str()))
            .unwrap_or(0);
        let x = pad + (pt.x - xmin) * sx;
        let y = h - pad - (pt.y - ymin) * sy;
        svg.circle(
            x,
            y,
            4.0,
            PALETTE[g % PALETTE.len()],
            &format!("{} {} {}", pt.backend_id, pt.strategy, pt.item_id),
        );
    }
    for (g, (kind, backend)) in groups.iter().enumerate() {
        let ly = h + 10.0 + 16.0 * g as f64;
        svg.rect(20.0, ly - 10.0, 10.0, 10.0, PALETTE[g % PALETTE.len()]);
        svg.text(36.0, ly, 12.0, "start", &format!("{} / {backend}", kind.label()));
    }
    svg.finish("response projection", &serde_json::to_value(p).expect("points serialize"))
}
