//! Four workers race within each batch; the outcome must not depend on it.

use std::collections::BTreeSet;
use std::sync::Arc;

use auditlm::engine::{Engine, EngineConfig};
use auditlm::store::{Snapshot, Store};
use commentnepa::pipeline::{RunConfig, RunInput};
use commentnepa::scripted::pipeline_backend;
use commentnepa::{fixtures, Pipeline};

fn run_once() -> (BTreeSet<String>, Vec<Snapshot>) {
    let engine = Engine::new(Arc::new(Store::in_memory().unwrap()), Arc::new(pipeline_backend()), EngineConfig::default());
    let p = Pipeline::new(Arc::new(engine)).unwrap();
    let input = RunInput {
        letters: fixtures::corpus(10, 5),
        guidance: fixtures::guidance(),
        context: fixtures::PROJECT_CONTEXT.into(),
    };
    p.run(&input, &RunConfig { batch_size: 5, ..RunConfig::default() }).unwrap();
    let s = p.engine().store();
    let keys = s
        .invocations()
        .unwrap()
        .into_iter()
        .filter_map(|i| i.invocation_key.map(|k| format!("{}|{k}", i.subroutine_id)))
        .collect();
    let mut snaps = Vec::new();
    for b in s.batches().unwrap() {
        for sub in s.subroutines().unwrap() {
            snaps.extend(s.snapshot(&b.batch_id, &sub.subroutine_id).unwrap());
        }
    }
    (keys, snaps)
}

#[test]
fn concurrent_runs_agree() {
    let (keys, snaps) = run_once();
    for _ in 0..3 {
        let (k, s) = run_once();
        assert_eq!(k, keys);
        let states = |v: &[Snapshot]| v.iter().map(|s| serde_json::to_string(&s.state).unwrap()).collect::<Vec<_>>();
        assert_eq!(states(&s), states(&snaps));
    }
}
