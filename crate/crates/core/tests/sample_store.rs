mod common;

use std::path::PathBuf;

use iclqa::sample_store::{
    label_counts, load_database, read_manifest, render_annotation, save_database, validate_database,
    DefectCategory, QualityLabel, Rule, SampleDatabase, StoreError, TestItem,
};
use proptest::prelude::*;

use common::{fixtures, tiny_db};

#[test]
fn fixture_database_is_valid() {
    let db = load_database(&fixtures().join("database.toml")).unwrap();
    assert_eq!(db.samples.len(), 9);
    assert_eq!(db.test_items.len(), 56);
    assert_eq!(db.knowledge_base.points.len(), 6);
    let counts = label_counts(&db);
    assert_eq!(counts[&QualityLabel::High], 3);
    assert_eq!(counts[&QualityLabel::Low], 6);
}

#[test]
fn save_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (db, manifest) = tiny_db(dir.path());
    let loaded = load_database(&manifest).unwrap();
    assert_eq!(loaded, db);

    let copy = dir.path().join("copy.toml");
    save_database(&loaded, &copy).unwrap();
    assert_eq!(
        std::fs::read_to_string(&manifest).unwrap(),
        std::fs::read_to_string(&copy).unwrap()
    );
}

/// Applies one mutation and returns the rules reported afterwards.
fn rules_after(mutate: impl FnOnce(&mut SampleDatabase)) -> Vec<Rule> {
    let dir = tempfile::tempdir().unwrap();
    let (mut db, _) = tiny_db(dir.path());
    mutate(&mut db);
    let mut rules: Vec<Rule> = validate_database(&db).violations.iter().map(|v| v.rule).collect();
    rules.dedup();
    rules
}

#[test]
fn each_mutation_reports_its_rule() {
    let cases: Vec<(Rule, Box<dyn FnOnce(&mut SampleDatabase)>)> = vec![
        (Rule::EmptyInstruction, Box::new(|db| db.knowledge_base.instruction_text = " ".into())),
        (
            Rule::DuplicateKnowledgePointId,
            Box::new(|db| db.knowledge_base.points[1].id = "height".into()),
        ),
        (
            Rule::EmptyKnowledgeDescription,
            Box::new(|db| db.knowledge_base.points[2].description.clear()),
        ),
        (Rule::DuplicateSampleId, Box::new(|db| db.samples[3].id = "s1".into())),
        (Rule::DuplicateTestItemId, Box::new(|db| db.test_items[1].id = "t1".into())),
        (Rule::SampleTestOverlap, Box::new(|db| db.test_items[0].id = "s4".into())),
        (
            Rule::MissingImage,
            Box::new(|db| db.samples[0].image_ref = PathBuf::from("images/nope.png")),
        ),
        (
            Rule::DanglingKnowledgeRef,
            Box::new(|db| db.samples[2].annotation.knowledge_point_ids.push("ghost".into())),
        ),
        (
            Rule::DefectLabelMismatch,
            Box::new(|db| db.samples[0].defect_category = DefectCategory::InsufficientHeight),
        ),
        (
            Rule::LowQualityWithoutComments,
            Box::new(|db| db.samples[4].annotation.unsatisfactory_comments.clear()),
        ),
        (
            Rule::HighQualityWithUnsatisfactoryComments,
            Box::new(|db| db.samples[1].annotation.unsatisfactory_comments.push("rough".into())),
        ),
    ];
    for (rule, mutate) in cases {
        assert_eq!(rules_after(mutate), vec![rule], "{}", rule.name());
    }
}

#[test]
fn unsupported_image_format_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (db, _) = tiny_db(dir.path());
    std::fs::write(dir.path().join("images/s3.png"), b"GIF89a not really").unwrap();
    let report = validate_database(&db);
    assert_eq!(report.len(), 1);
    assert!(report.has(Rule::UnsupportedImageFormat));
    assert_eq!(report.violations[0].subject, "s3");
}

#[test]
fn database_wide_rules() {
    let rules = rules_after(|db| {
        for s in &mut db.samples {
            s.annotation.quality_label = QualityLabel::Low;
            s.defect_category = DefectCategory::ExcessiveHeight;
            s.annotation.unsatisfactory_comments = vec!["x".into()];
        }
    });
    assert_eq!(rules, vec![Rule::NoHighQualitySample]);

    let rules = rules_after(|db| db.samples.clear());
    assert_eq!(rules, vec![Rule::EmptySamples]);

    let rules = rules_after(|db| {
        db.knowledge_base.points.clear();
        for s in &mut db.samples {
            s.annotation.knowledge_point_ids.clear();
        }
    });
    assert_eq!(rules, vec![Rule::EmptyKnowledgeBase]);
}

#[test]
fn multiple_violations_are_all_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (mut db, _) = tiny_db(dir.path());
    db.samples[0].id = "s2".into();
    db.samples[5].annotation.unsatisfactory_comments.clear();
    db.test_items.push(TestItem {
        id: "t9".into(),
        image_ref: PathBuf::from("images/missing.png"),
        ground_truth: QualityLabel::Low,
    });
    let report = validate_database(&db);
    assert_eq!(report.len(), 3);
    assert!(report.has(Rule::DuplicateSampleId));
    assert!(report.has(Rule::LowQualityWithoutComments));
    assert!(report.has(Rule::MissingImage));
}

#[test]
fn load_maps_first_violation_to_typed_error() {
    let dir = tempfile::tempdir().unwrap();
    let (mut db, manifest) = tiny_db(dir.path());

    db.samples[1].annotation.knowledge_point_ids = vec!["ghost".into()];
    save_database(&db, &manifest).unwrap();
    match load_database(&manifest) {
        Err(StoreError::DanglingKnowledgeRef { id, point }) => {
            assert_eq!((id.as_str(), point.as_str()), ("s2", "ghost"));
        }
        other => panic!("unexpected {other:?}"),
    }

    db.samples[1].annotation.knowledge_point_ids.clear();
    db.samples[2].image_ref = PathBuf::from("images/gone.png");
    save_database(&db, &manifest).unwrap();
    match load_database(&manifest) {
        Err(StoreError::MissingImage { id, path }) => {
            assert_eq!(id, "s3");
            assert!(path.ends_with("images/gone.png"));
        }
        other => panic!("unexpected {other:?}"),
    }
    // the unvalidated reader still parses it
    assert_eq!(read_manifest(&manifest).unwrap().samples.len(), 6);

    std::fs::write(&manifest, "this is = = not toml").unwrap();
    assert!(matches!(load_database(&manifest), Err(StoreError::Parse { .. })));
    assert!(matches!(
        load_database(&dir.path().join("absent.toml")),
        Err(StoreError::Io { .. })
    ));
}

#[test]
fn icl_context_hides_test_items() {
    let dir = tempfile::tempdir().unwrap();
    let (db, _) = tiny_db(dir.path());
    let ctx = db.context();
    assert!(ctx.sample("s1").is_some());
    assert!(ctx.sample("t1").is_none());
}

#[test]
fn annotation_rendering_mentions_label_and_comments() {
    let s = common::sample("s9", false);
    let text = render_annotation(&s);
    assert!(text.to_lowercase().contains("low"));
    assert!(text.contains("bead too tall"));
    assert!(text.contains("even ripples"));
}

fn comment() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.'\"\\\\#=\\[\\]{}-]{1,24}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn arbitrary_annotations_round_trip(
        good in proptest::collection::vec(comment(), 0..4),
        bad in proptest::collection::vec(comment(), 1..4),
        tags in proptest::collection::vec("[a-z_]{1,8}", 0..3),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let (mut db, manifest) = tiny_db(dir.path());
        db.samples[3].annotation.satisfactory_comments = good;
        db.samples[3].annotation.unsatisfactory_comments = bad;
        db.samples[3].tags = tags;
        save_database(&db, &manifest).unwrap();
        prop_assert_eq!(load_database(&manifest).unwrap(), db);
    }
}
