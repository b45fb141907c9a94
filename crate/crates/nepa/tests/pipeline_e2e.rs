use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use auditlm::engine::{Engine, EngineConfig};
use auditlm::store::Store;
use commentnepa::eval::sentences::split_sentences;
use commentnepa::fixtures;
use commentnepa::pipeline::{Pipeline, RunConfig, RunInput, STATE_REVIEWABLE, STATE_SUPERSEDED};
use commentnepa::quote::recheck;
use commentnepa::scripted::pipeline_backend;
use commentnepa::stages::Stage;

fn pipeline(store: Store) -> Pipeline {
    let engine = Engine::new(Arc::new(store), Arc::new(pipeline_backend()), EngineConfig::default());
    Pipeline::new(Arc::new(engine)).unwrap()
}

fn input(n: usize) -> RunInput {
    RunInput {
        letters: fixtures::corpus(n, 3),
        guidance: fixtures::guidance(),
        context: fixtures::PROJECT_CONTEXT.to_string(),
    }
}

fn config(batch_size: usize) -> RunConfig {
    RunConfig { batch_size, ..RunConfig::default() }
}

#[test]
fn ten_letters_complete_all_stages() {
    let p = pipeline(Store::in_memory().unwrap());
    let reports = p.run(&input(10), &config(10)).unwrap();
    assert_eq!(reports.len(), 1);
    let r = &reports[0];
    assert_eq!(r.state, STATE_REVIEWABLE);
    assert_eq!(r.letters.len(), 10);
    assert!(r.dead_tasks.is_empty(), "{:?}", r.dead_tasks);
    assert!(r.letters.iter().all(|l| l.complete()), "{:#?}", r.letters);
    assert!(r.concerns > 0);
    assert!(!r.bins.is_empty());
    for b in &r.bins {
        assert!(!b.citations.is_empty());
    }

    // every persisted span re-verifies, every bin name is declared
    let spans = p.all_quote_spans().unwrap();
    assert!(!spans.is_empty());
    for (_, span, text) in &spans {
        assert!(span.start < span.end && span.end <= text.chars().count());
        let sim = recheck(span, text);
        assert!(sim >= 0.85 && (sim - span.similarity).abs() < 1e-12);
    }
    let g = fixtures::guidance();
    for b in p.all_bin_names().unwrap() {
        assert!(g.has_bin(&b), "{b}");
    }

    // each stage-4 trace reaches the ingest records of its letters
    let store = p.engine().store();
    for b in &r.bins {
        let trace = store.trace(&b.invocation_id).unwrap();
        let stages: BTreeSet<String> = trace.nodes.iter().filter_map(|n| n.invocation.stage.clone()).collect();
        for s in ["ingest", "summarize", "extract", "bin", "bin_summary"] {
            assert!(stages.contains(s), "{s} missing from {stages:?}");
        }
        let ingested: HashSet<String> = trace
            .nodes
            .iter()
            .filter(|n| n.invocation.stage.as_deref() == Some("ingest"))
            .map(|n| n.invocation.input["letter_id"].as_str().unwrap().to_string())
            .collect();
        for c in &b.citations {
            assert!(ingested.contains(&c.letter_id));
        }
    }

    // all invocations of one subroutine in the batch share a snapshot
    let mut versions: HashMap<String, BTreeSet<Option<i64>>> = HashMap::new();
    for inv in store.invocations().unwrap() {
        if inv.stage.as_deref() != Some("ingest") {
            versions.entry(inv.subroutine_id.clone()).or_default().insert(inv.snapshot_version);
        }
    }
    for (sub, v) in versions {
        assert_eq!(v.len(), 1, "{sub}: {v:?}");
        assert!(v.iter().next().unwrap().is_some());
    }

    // replaying every recorded call reproduces its output
    for inv in store.invocations().unwrap() {
        if inv.arm_id.is_some() {
            assert!(p.engine().replay(&inv).unwrap().matches(), "{}", inv.invocation_id);
        }
    }

    // review items exist per stage
    for stage in Stage::ALL {
        assert!(!store.list_review_items(&r.batch_id, stage.as_str()).unwrap().is_empty());
    }

    // evaluator sees the exported output
    let out = p.export(&r.run_id).unwrap();
    assert_eq!(out.letters.len(), 10);
    assert!(out.letters.iter().all(|l| !split_sentences(&l.text).is_empty()));
}

#[test]
fn twenty_five_letters_make_three_batches() {
    let p = pipeline(Store::in_memory().unwrap());
    let plan = p.plan(&input(25), &config(10)).unwrap();
    let sizes: Vec<i64> = plan
        .batch_ids
        .iter()
        .map(|b| p.engine().store().batch(b).unwrap().size)
        .collect();
    assert_eq!(sizes, vec![10, 10, 5]);
    assert_eq!(p.plan(&input(25), &config(10)).unwrap(), plan);
}

#[test]
fn rerun_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.db");
    let first = pipeline(Store::open(&path).unwrap()).run(&input(4), &config(2)).unwrap();
    let count = Store::open(&path).unwrap().invocations().unwrap().len();
    let p = pipeline(Store::open(&path).unwrap());
    let second = p.run(&input(4), &config(2)).unwrap();
    assert_eq!(p.engine().store().invocations().unwrap().len(), count);
    assert_eq!(first[0].bins, second[0].bins);
    assert_eq!(second[0].state, STATE_SUPERSEDED);
    assert_eq!(second[1].state, STATE_REVIEWABLE);
}
