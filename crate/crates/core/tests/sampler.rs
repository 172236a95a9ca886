use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use iclqa::embedding::{EmbeddingVector, SourceKind};
use iclqa::sample_store::{
    Annotation, DefectCategory, KnowledgeBase, QualityLabel, Sample, SampleDatabase,
};
use iclqa::sampler::{
    describe_selection, scattered_ranks, select_samples, SamplerError, SamplingStrategy, SelectionOrder,
    StrategyKind,
};
use proptest::prelude::*;

fn db(n: usize) -> SampleDatabase {
    let samples = (0..n)
        .map(|i| {
            let high = i % 3 == 0;
            Sample {
                id: format!("s{i:02}"),
                image_ref: PathBuf::from(format!("s{i}.png")),
                defect_category: if high { DefectCategory::None } else { DefectCategory::InsufficientHeight },
                tags: vec![],
                annotation: Annotation {
                    quality_label: if high { QualityLabel::High } else { QualityLabel::Low },
                    unsatisfactory_comments: if high { vec![] } else { vec!["thin".into()] },
                    satisfactory_comments: vec![],
                    knowledge_point_ids: vec![],
                },
            }
        })
        .collect();
    SampleDatabase {
        knowledge_base: KnowledgeBase {
            instruction_text: "assess".into(),
            knowledge_text: "rules".into(),
            points: vec![],
        },
        samples,
        test_items: vec![],
        root: PathBuf::new(),
    }
}

fn v(values: &[f64]) -> EmbeddingVector {
    EmbeddingVector::new(values.to_vec(), SourceKind::Image, "p").unwrap()
}

fn embeddings(rows: &[Vec<f64>]) -> HashMap<String, EmbeddingVector> {
    rows.iter().enumerate().map(|(i, r)| (format!("s{i:02}"), v(r))).collect()
}

fn oracle_ranking(query: &[f64], rows: &[Vec<f64>]) -> Vec<String> {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut scored: Vec<(String, f64)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (format!("s{i:02}"), cos(query, r)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.into_iter().map(|s| s.0).collect()
}

/// Non-degenerate vectors: at least one coordinate bounded away from zero.
fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-10.0f64..10.0, dim).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn scenario() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, usize)> {
    (2usize..12, 1usize..8).prop_flat_map(|(n, dim)| {
        (proptest::collection::vec(vector(dim), n), vector(dim), 1..=n)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn knn_is_brute_force_top_k((rows, query, k) in scenario()) {
        let db = db(rows.len());
        let s = SamplingStrategy::new(StrategyKind::KnnFewShot).with_k(k);
        let sel = select_samples(&s, Some(&v(&query)), &db, &embeddings(&rows)).unwrap();
        let oracle = oracle_ranking(&query, &rows);
        prop_assert_eq!(&sel.sample_ids, &oracle[..k].to_vec());
        prop_assert_eq!(sel.similarity_scores.len(), k);
    }

    #[test]
    fn scattered_spans_both_ends((rows, query, k) in scenario()) {
        prop_assume!(k >= 2);
        let db = db(rows.len());
        let s = SamplingStrategy::new(StrategyKind::ScatteredFewShot).with_k(k);
        let sel = select_samples(&s, Some(&v(&query)), &db, &embeddings(&rows)).unwrap();
        let oracle = oracle_ranking(&query, &rows);
        prop_assert_eq!(sel.sample_ids.len(), k);
        prop_assert_eq!(sel.sample_ids.iter().collect::<BTreeSet<_>>().len(), k);
        prop_assert_eq!(sel.sample_ids.first(), oracle.first());
        prop_assert_eq!(sel.sample_ids.last(), oracle.last());
        // listed in ranking order
        let pos: Vec<usize> = sel.sample_ids.iter().map(|id| oracle.iter().position(|o| o == id).unwrap()).collect();
        prop_assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn many_shot_is_full_ranking((rows, query, _k) in scenario()) {
        let db = db(rows.len());
        let s = SamplingStrategy::new(StrategyKind::ManyShot);
        let sel = select_samples(&s, Some(&v(&query)), &db, &embeddings(&rows)).unwrap();
        prop_assert_eq!(sel.sample_ids, oracle_ranking(&query, &rows));
    }

    #[test]
    fn ascending_reverses_descending((rows, query, k) in scenario()) {
        let db = db(rows.len());
        let desc = SamplingStrategy::new(StrategyKind::KnnFewShot).with_k(k);
        let mut asc = desc.clone();
        asc.order = SelectionOrder::Ascending;
        let e = embeddings(&rows);
        let a = select_samples(&desc, Some(&v(&query)), &db, &e).unwrap().sample_ids;
        let mut b = select_samples(&asc, Some(&v(&query)), &db, &e).unwrap().sample_ids;
        b.reverse();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn selection_is_deterministic((rows, query, k) in scenario()) {
        let db = db(rows.len());
        let e = embeddings(&rows);
        for kind in [StrategyKind::KnnFewShot, StrategyKind::ScatteredFewShot, StrategyKind::ManyShot] {
            let s = SamplingStrategy::new(kind).with_k(k);
            let a = select_samples(&s, Some(&v(&query)), &db, &e).unwrap();
            let b = select_samples(&s, Some(&v(&query)), &db, &e).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn scattered_ranks_are_distinct_and_in_range(n in 1usize..200, k_frac in 0.0f64..1.0) {
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let ranks = scattered_ranks(n, k);
        prop_assert_eq!(ranks.len(), k);
        prop_assert!(ranks.iter().all(|&r| r < n));
        prop_assert_eq!(ranks.iter().collect::<BTreeSet<_>>().len(), k);
        prop_assert_eq!(ranks[0], 0);
        if k >= 2 {
            prop_assert!(ranks.contains(&(n - 1)));
        }
    }
}

#[test]
fn scattered_middle_for_three() {
    assert_eq!(scattered_ranks(9, 3), vec![0, 4, 8]);
    assert_eq!(scattered_ranks(10, 3), vec![0, 5, 9]);
    assert_eq!(scattered_ranks(5, 5), vec![0, 1, 2, 3, 4]);
}

#[test]
fn ties_break_by_id() {
    let rows = vec![vec![1.0, 0.0]; 5];
    let db = db(5);
    let sel = select_samples(
        &SamplingStrategy::new(StrategyKind::KnnFewShot).with_k(3),
        Some(&v(&[2.0, 0.0])),
        &db,
        &embeddings(&rows),
    )
    .unwrap();
    assert_eq!(sel.sample_ids, vec!["s00", "s01", "s02"]);
}

#[test]
fn strategies_without_demonstrations() {
    let db = db(4);
    let base = select_samples(&SamplingStrategy::new(StrategyKind::Baseline), None, &db, &HashMap::new()).unwrap();
    assert!(base.sample_ids.is_empty() && !base.include_knowledge_text);
    let zero = select_samples(&SamplingStrategy::new(StrategyKind::ZeroShot), None, &db, &HashMap::new()).unwrap();
    assert!(zero.sample_ids.is_empty() && zero.include_knowledge_text);
    assert!(describe_selection(&zero).starts_with("zero_shot"));
}

#[test]
fn pinned_strategies_ignore_query_for_membership() {
    let db = db(9);
    let rows: Vec<Vec<f64>> = (0..9).map(|i| vec![1.0, i as f64]).collect();
    let e = embeddings(&rows);
    let one = SamplingStrategy::new(StrategyKind::OneShot).with_pinned(["s03"]);
    for q in [[1.0, 0.0], [0.0, 1.0], [-1.0, 5.0]] {
        let sel = select_samples(&one, Some(&v(&q)), &db, &e).unwrap();
        assert_eq!(sel.sample_ids, vec!["s03"]);
    }
    let expert = SamplingStrategy::new(StrategyKind::ExpertFewShot).with_pinned(["s01", "s08", "s04"]);
    let sel = select_samples(&expert, Some(&v(&[0.0, 1.0])), &db, &e).unwrap();
    assert_eq!(sel.sample_ids, vec!["s08", "s04", "s01"]);
    // without a query the pinned order is kept
    let sel = select_samples(&expert, None, &db, &HashMap::new()).unwrap();
    assert_eq!(sel.sample_ids, vec!["s01", "s08", "s04"]);
}

#[test]
fn invalid_configurations() {
    let db = db(6);
    let e = embeddings(&vec![vec![1.0]; 6]);
    let q = v(&[1.0]);
    let err = |s: SamplingStrategy| select_samples(&s, Some(&q), &db, &e).unwrap_err();

    assert!(matches!(err(SamplingStrategy::new(StrategyKind::KnnFewShot).with_k(0)), SamplerError::InvalidK { k: 0, n: 6 }));
    assert!(matches!(err(SamplingStrategy::new(StrategyKind::ScatteredFewShot).with_k(7)), SamplerError::InvalidK { k: 7, n: 6 }));
    // s01 is low quality
    assert!(matches!(err(SamplingStrategy::new(StrategyKind::OneShot).with_pinned(["s01"])), SamplerError::InvalidPinnedId { .. }));
    assert!(matches!(err(SamplingStrategy::new(StrategyKind::OneShot).with_pinned(["s00", "s03"])), SamplerError::InvalidPinnedId { .. }));
    assert!(matches!(err(SamplingStrategy::new(StrategyKind::ExpertFewShot).with_pinned(["s00", "zz"])), SamplerError::InvalidPinnedId { .. }));
    assert!(matches!(err(SamplingStrategy::new(StrategyKind::ExpertFewShot).with_pinned(["s00", "s00"])), SamplerError::InvalidPinnedId { .. }));
    assert!(matches!(err(SamplingStrategy::new(StrategyKind::ExpertFewShot)), SamplerError::InvalidPinnedId { .. }));

    let missing = select_samples(
        &SamplingStrategy::new(StrategyKind::KnnFewShot),
        Some(&q),
        &db,
        &embeddings(&vec![vec![1.0]; 5]),
    )
    .unwrap_err();
    assert!(matches!(missing, SamplerError::MissingEmbedding(id) if id == "s05"));
    let no_query = select_samples(&SamplingStrategy::new(StrategyKind::KnnFewShot), None, &db, &e).unwrap_err();
    assert!(matches!(no_query, SamplerError::MissingEmbedding(_)));
}

#[test]
fn strategy_names_parse() {
    for kind in StrategyKind::ALL {
        assert_eq!(kind.as_str().parse::<StrategyKind>().unwrap(), kind);
        assert_eq!(kind.short_name().parse::<StrategyKind>().unwrap(), kind);
    }
    assert!("five_shot".parse::<StrategyKind>().is_err());
    assert_eq!("asc".parse::<SelectionOrder>().unwrap(), SelectionOrder::Ascending);
}
