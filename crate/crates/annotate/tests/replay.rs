mod common;

use chrono::{TimeZone, Utc};
use proptest::prelude::*;
use vulnforge_annotate::{replay, AnnotationState, Ledger, LedgerEvent};
use vulnforge_core::model::{GradeRecord, StudyRecord};

fn label(id: usize, who: usize, text: &str, t: i64) -> LedgerEvent {
    LedgerEvent::Label {
        id: common::instance(id, false).cve_id,
        annotator_id: format!("a{who}"),
        summary: text.to_string(),
        extractive_ratio: 0.5,
        at: Utc.timestamp_opt(t, 0).unwrap(),
    }
}

fn grade(id: usize, v: u8) -> LedgerEvent {
    LedgerEvent::Grades {
        id: common::instance(id, false).cve_id,
        record: GradeRecord {
            fluency: v,
            completeness: v,
            correctness: v,
            understanding: v,
            grader_id: "g".into(),
            graded_at: Utc.timestamp_opt(1_700_000_000, 0).unwrap(),
        },
    }
}

fn event_strategy() -> impl Strategy<Value = LedgerEvent> {
    prop_oneof![
        (0usize..4, 0usize..3, "[a-z]{1,8}", 0i64..1000).prop_map(|(i, w, s, t)| label(i, w, &s, t)),
        // only even instances carry a generated summary
        (0usize..2, 1u8..=3).prop_map(|(i, v)| grade(2 * i, v)),
        (0usize..4, 1u8..=3, 1u8..=3).prop_map(|(i, a, b)| LedgerEvent::Study {
            id: common::instance(i, false).cve_id,
            record: StudyRecord {
                enrichment: a,
                accuracy: b,
                understanding: a,
                evaluator_id: "e".into(),
            },
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn replaying_the_ledger_reproduces_live_state(events in proptest::collection::vec(event_strategy(), 0..25)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let mut ledger = Ledger::open(&path).unwrap();
        let mut live = AnnotationState::new(common::manifest(4));
        for e in &events {
            live.apply(e.clone()).unwrap();
            ledger.append(e).unwrap();
        }
        let back = replay(&path).unwrap();
        prop_assert_eq!(&back, &events);
        let rebuilt = AnnotationState::replay(common::manifest(4), &back).unwrap();
        prop_assert_eq!(&rebuilt, &live);
        prop_assert_eq!(rebuilt.materialized_manifest(), live.materialized_manifest());
    }
}

#[test]
fn labels_are_last_write_wins_per_annotator() {
    let events = vec![
        label(0, 1, "first", 1),
        label(0, 2, "other", 2),
        label(0, 1, "second", 3),
    ];
    let s = AnnotationState::replay(common::manifest(2), &events).unwrap();
    let v = s.view(&common::instance(0, false).cve_id).unwrap();
    let texts: Vec<(&str, &str)> = v
        .labels
        .iter()
        .map(|l| (l.annotator_id.as_str(), l.summary.as_str()))
        .collect();
    assert_eq!(texts, vec![("a1", "second"), ("a2", "other")]);
    // the instance carries the most recent write overall
    assert_eq!(v.instance.label.as_deref(), Some("second"));
}

#[test]
fn torn_tail_is_skipped_but_corruption_is_not() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.jsonl");
    let mut ledger = Ledger::open(&path).unwrap();
    ledger.append(&label(1, 1, "ok", 5)).unwrap();
    drop(ledger);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"kind\":\"label\",\"id\":\"CVE");
    std::fs::write(&path, &text).unwrap();
    assert_eq!(replay(&path).unwrap().len(), 1);

    text.push('\n');
    std::fs::write(&path, &text).unwrap();
    assert!(matches!(
        replay(&path),
        Err(vulnforge_annotate::AnnotateError::Corrupt { line: 2, .. })
    ));
}

#[test]
fn invalid_records_fail_on_reload() {
    let bad = vec![grade(0, 4)];
    assert!(AnnotationState::replay(common::manifest(2), &bad).is_err());
    let ungraded_target = vec![grade(1, 2)];
    assert!(AnnotationState::replay(common::manifest(2), &ungraded_target).is_err());
}
