use iclqa::analysis::{
    emit_report, pca_2d, project_rows, tsne_2d, AnalysisError, ProjectedPoint, ProjectionConfig, ProjectionMethod,
    ProjectionSet, ReportFormat, TsneParams,
};
use iclqa::metrics::{ConfusionMatrix, MetricsSummary};
use iclqa::sampler::{SamplingStrategy, StrategyKind};
use proptest::prelude::*;

fn rows_of(points: &[Vec<f64>]) -> Vec<&[f64]> {
    points.iter().map(Vec::as_slice).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn pca_of_planar_data_is_an_isometry(points in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 2), 3..30)) {
        let out = pca_2d(&rows_of(&points));
        for i in 0..points.len() {
            for j in 0..points.len() {
                prop_assert!((dist(&points[i], &points[j]) - dist(&out[i], &out[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_output_is_centered(points in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 3..25)) {
        let out = pca_2d(&rows_of(&points));
        let n = out.len() as f64;
        prop_assert!((out.iter().map(|p| p[0]).sum::<f64>() / n).abs() < 1e-9);
        prop_assert!((out.iter().map(|p| p[1]).sum::<f64>() / n).abs() < 1e-9);
        // first axis carries at least as much variance as the second
        let var = |k: usize| out.iter().map(|p| p[k] * p[k]).sum::<f64>();
        prop_assert!(var(0) + 1e-9 >= var(1));
    }
}

#[test]
fn pca_is_deterministic_and_sign_stable() {
    let points: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i % 7) as f64, 1.0]).collect();
    let a = pca_2d(&rows_of(&points));
    let b = pca_2d(&rows_of(&points));
    assert_eq!(a, b);
    let shifted: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|x| x + 100.0).collect()).collect();
    let c = pca_2d(&rows_of(&shifted));
    for (p, q) in a.iter().zip(&c) {
        assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
    }
}

fn two_clusters() -> Vec<Vec<f64>> {
    (0..30)
        .map(|i| {
            let centre = if i < 15 { 0.0 } else { 40.0 };
            (0..5).map(|d| centre + ((i * 7 + d * 3) % 11) as f64 * 0.1).collect()
        })
        .collect()
}

#[test]
fn tsne_is_seeded_and_keeps_clusters_apart() {
    let points = two_clusters();
    let params = TsneParams { iterations: 500, ..TsneParams::default() };
    let a = tsne_2d(&rows_of(&points), &params, 7);
    assert_eq!(a, tsne_2d(&rows_of(&points), &params, 7));
    assert_ne!(a, tsne_2d(&rows_of(&points), &params, 8));
    assert!(a.iter().all(|p| p[0].is_finite() && p[1].is_finite()));

    let centroid = |r: std::ops::Range<usize>| {
        let n = r.len() as f64;
        let (x, y) = r.map(|i| (a[i][0], a[i][1])).fold((0.0, 0.0), |s, p| (s.0 + p.0, s.1 + p.1));
        [x / n, y / n]
    };
    let (c0, c1) = (centroid(0..15), centroid(15..30));
    let spread = (0..15).map(|i| dist(&a[i], &c0)).fold(0.0, f64::max);
    assert!(dist(&c0, &c1) > 2.0 * spread);
}

#[test]
fn projection_preconditions() {
    let cfg = ProjectionConfig { method: ProjectionMethod::Tsne, seed: 1, tsne: TsneParams::default() };
    let few: Vec<Vec<f64>> = (0..15).map(|i| vec![i as f64, 1.0]).collect();
    assert!(matches!(
        project_rows(&rows_of(&few), &cfg),
        Err(AnalysisError::PerplexityTooLarge { n: 15, .. })
    ));
    let pca = ProjectionConfig::default();
    assert!(matches!(project_rows(&rows_of(&few[..2]), &pca), Err(AnalysisError::TooFewPoints(2))));
    let ragged = vec![vec![1.0, 2.0], vec![1.0], vec![3.0, 4.0]];
    assert!(matches!(project_rows(&rows_of(&ragged), &pca), Err(AnalysisError::DimensionMismatch { .. })));
    assert_eq!(project_rows(&rows_of(&few), &pca).unwrap().len(), 15);
    assert_eq!("t-SNE".parse::<ProjectionMethod>().unwrap(), ProjectionMethod::Tsne);
}

fn summary(kind: StrategyKind, backend: &str, acc: f64, reviewed: bool) -> MetricsSummary {
    let strategy = SamplingStrategy::new(kind);
    MetricsSummary {
        run_id: format!("{}-{backend}", kind.as_str()),
        strategy,
        backend_id: backend.into(),
        conclusion_correctness: acc,
        rationale_validity: reviewed.then_some(0.5),
        knowledge_relevance: reviewed.then_some(0.25),
        confusion: ConfusionMatrix {
            pred_high_actual_high: 3,
            pred_high_actual_low: 1,
            pred_low_actual_high: 0,
            pred_low_actual_low: 4,
        },
        n_items: 8,
        n_reviewed: if reviewed { 8 } else { 0 },
    }
}

#[test]
fn reports_are_deterministic_and_order_independent() {
    let summaries = vec![
        summary(StrategyKind::ManyShot, "b", 0.875, true),
        summary(StrategyKind::Baseline, "a", 0.5, false),
        summary(StrategyKind::KnnFewShot, "a", 0.625, true),
    ];
    let projection = ProjectionSet {
        method: ProjectionMethod::Pca,
        seed: 0,
        provider_id: "p".into(),
        points: (0..4)
            .map(|i| ProjectedPoint {
                run_id: "many_shot-b".into(),
                item_id: format!("t{i}"),
                strategy: StrategyKind::ManyShot,
                backend_id: "b".into(),
                x: i as f64,
                y: -(i as f64),
            })
            .collect(),
    };
    let write = |s: &[MetricsSummary]| {
        let dir = tempfile::tempdir().unwrap();
        let mut files = Vec::new();
        for f in [ReportFormat::Table, ReportFormat::Structured, ReportFormat::Plot] {
            for path in emit_report(s, &[], Some(&projection), f, dir.path()).unwrap() {
                files.push((path.file_name().unwrap().to_owned(), std::fs::read(&path).unwrap()));
            }
        }
        files
    };
    let a = write(&summaries);
    let mut reversed = summaries.clone();
    reversed.reverse();
    assert_eq!(a, write(&reversed));

    let names: Vec<String> = a.iter().map(|(n, _)| n.to_string_lossy().into_owned()).collect();
    assert_eq!(
        names,
        ["summary.csv", "summary.md", "report.json", "radar_a.svg", "radar_b.svg", "confusion.svg", "projection.svg"]
    );
    let md = String::from_utf8(a[1].1.clone()).unwrap();
    assert!(md.contains("0.88") && md.contains("0.62") && md.contains("0.50"));
    let csv = String::from_utf8(a[0].1.clone()).unwrap();
    let baseline_row = csv.lines().find(|l| l.contains("baseline-a")).unwrap();
    assert!(baseline_row.contains(",,") || baseline_row.ends_with(','));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        emit_report(&[], &[], None, ReportFormat::Table, empty.path()),
        Err(AnalysisError::EmptySummaries)
    ));
}
