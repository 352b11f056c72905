mod common;

use std::collections::BTreeSet;

use blockrag_core::evaluation::{ActionOp, ExperimentReport, Script, ScriptAction};
use blockrag_core::{Engine, Error};

const STRATEGIES: [&str; 3] = ["naive", "label_naive", "symbiotic"];

fn strategies() -> Vec<String> {
    STRATEGIES.iter().map(|s| s.to_string()).collect()
}

fn fixture_scripts() -> Vec<Script> {
    Script::load_dir(&common::fixtures().join("scripts")).unwrap()
}

fn experiment(engine: &Engine) -> ExperimentReport {
    engine.run_experiment(&fixture_scripts(), &strategies()).unwrap()
}

fn act(turn: usize, op: ActionOp) -> ScriptAction {
    ScriptAction { turn, op }
}

#[test]
fn copying_the_retrieval_gives_zero_distance() {
    let engine = common::corpus_engine("mock");
    let queries = vec!["zinc assays".to_owned(), "camp road".to_owned()];
    let copy = Script::new(
        "copy",
        queries.clone(),
        vec![act(0, ActionOp::SelectRetrieved), act(1, ActionOp::SelectRetrieved)],
        Some(5),
    );
    let idle = Script::new("idle", queries, vec![], Some(1));
    for strategy in STRATEGIES {
        let report = engine.run_experiment(&[copy.clone(), idle.clone()], &[strategy.to_owned()]).unwrap();
        let [c, i] = &report.outcomes[..] else { panic!("two outcomes") };
        assert!(!c.retriever_selected.is_empty());
        assert_eq!(c.human_selected, c.retriever_selected);
        assert_eq!(c.distance, 0.0, "{strategy}");
        assert!(i.human_selected.is_empty());
        assert_eq!(i.distance, 1.0, "{strategy}");
        let row = report.row(strategy).unwrap();
        assert_eq!(row.mean_distance, Some(0.5));
        assert_eq!(row.mean_satisfaction, Some(3.0));
    }
}

#[test]
fn table_means_match_a_recomputation_from_outcomes() {
    let engine = common::corpus_engine("mock");
    let report = experiment(&engine);
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.outcomes.len(), 15);
    for row in &report.rows {
        let mine: Vec<_> = report.outcomes.iter().filter(|o| o.strategy_name == row.strategy).collect();
        assert_eq!(row.sessions, 5);
        assert_eq!(mine.len(), 5);
        let mut d_sum = 0.0;
        for o in &mine {
            let d = common::oracle::distance(&o.human_selected, &o.retriever_selected);
            assert!((o.distance - d).abs() < 1e-12);
            d_sum += d;
        }
        assert!((row.mean_distance.unwrap() - d_sum / 5.0).abs() < 1e-12);
        // the sample-prep script is unrated, so four ratings count
        let ratings: Vec<f64> = mine.iter().filter_map(|o| o.satisfaction_rating).map(f64::from).collect();
        assert_eq!(ratings.len(), 4);
        let s = ratings.iter().sum::<f64>() / 4.0;
        assert!((row.mean_satisfaction.unwrap() - s).abs() < 1e-12);
        assert!((s - 3.5).abs() < 1e-12);
    }
    let table = report.render_table();
    assert!(table.lines().count() == 4 && table.contains("label_naive"), "{table}");
}

#[test]
fn experiment_sessions_stay_inspectable() {
    let engine = common::corpus_engine("mock");
    let report = experiment(&engine);
    for o in &report.outcomes {
        let session = engine.session(&o.session_id).unwrap();
        assert_eq!(session.strategy_name, o.strategy_name);
        assert_eq!(session.staging, o.human_selected);
        assert_eq!(session.retrieved_blocks(), o.retriever_selected);
    }
}

#[test]
fn experiments_are_deterministic() {
    let a = experiment(&common::corpus_engine("mock"));
    let b = experiment(&common::corpus_engine("mock"));
    assert_eq!(a, b);
    assert_eq!(a.render_table(), b.render_table());
}

#[test]
fn unknown_references_fail_with_the_script_line() {
    let engine = common::corpus_engine("mock");
    let text = r#"{
  "name": "bad",
  "queries": ["zinc"],
  "actions": [
    {"turn": 0, "action": "select_rank", "rank": 1},
    {"turn": 0, "action": "select", "block_id": "blk_missing"}
  ]
}"#;
    let script = Script::parse("bad", text).unwrap();
    match script.validate(&engine) {
        Err(Error::Script { line, script, .. }) => assert_eq!((line, script.as_str()), (6, "bad")),
        other => panic!("{other:?}"),
    }
    // nothing ran
    let before = engine.session_ids().len();
    assert!(engine.run_experiment(&[script], &strategies()).is_err());
    assert_eq!(engine.session_ids().len(), before);

    let late = Script::new("late", vec!["q".into()], vec![act(3, ActionOp::Like)], None);
    assert!(matches!(late.validate(&engine), Err(Error::Script { .. })));
    let rating = Script::new("rating", vec!["q".into()], vec![], Some(9));
    assert!(matches!(rating.validate(&engine), Err(Error::Script { .. })));
}

#[test]
fn malformed_scripts_report_a_line() {
    let err = Script::parse("broken", "{\n  \"queries\": [\"a\"],\n  \"actions\": [ {\"turn\": }\n]}").unwrap_err();
    assert!(matches!(err, Error::Script { line: 3, .. }), "{err:?}");
}

#[test]
fn unknown_strategies_are_rejected() {
    let engine = common::corpus_engine("mock");
    let err = engine.run_experiment(&fixture_scripts(), &["raw_log_concat".to_owned()]).unwrap_err();
    assert!(matches!(err, Error::NotFound { .. }), "{err:?}");
}

#[test]
fn strategy_restricted_scripts_run_once() {
    let engine = common::corpus_engine("mock");
    let mut only = Script::new("only", vec!["zinc".into()], vec![], Some(4));
    only.strategy = Some("symbiotic".into());
    let report = engine.run_experiment(&[only], &strategies()).unwrap();
    let sessions: Vec<_> = report.rows.iter().map(|r| r.sessions).collect();
    assert_eq!(sessions, vec![0, 0, 1]);
    assert_eq!(report.row("naive").unwrap().mean_distance, None);
    assert_eq!(report.row("naive").unwrap().mean_satisfaction, None);
}

#[test]
fn corpus_restricted_scripts_retrieve_inside_it() {
    let engine = common::corpus_engine("mock");
    let docs = common::document_ids(&engine);
    let keep: BTreeSet<_> = docs.iter().take(1).cloned().collect();
    let mut script = Script::new("narrow", vec!["zinc".into(), "camp".into()], vec![], None);
    script.corpus = Some(keep.clone());
    let report = engine.run_experiment(&[script], &strategies()).unwrap();
    let store = engine.store_snapshot();
    for o in &report.outcomes {
        assert!(o.retriever_selected.iter().all(|b| keep.contains(&store.block(b).unwrap().document_id)));
    }
}
