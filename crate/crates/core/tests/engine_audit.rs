use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use auditlm::backend::{
    fingerprint, Behavior, GenerationRequest, LmBackend, PoolPrompt, ScriptedBackend, ScriptedConfig,
    SynthesisRequest,
};
use auditlm::engine::{Engine, EngineConfig, InvokeOptions};
use auditlm::queue::{Clock, Queue, TaskState};
use auditlm::rare_letters;
use auditlm::schema::Record;
use auditlm::store::{InvocationStatus, Store};
use serde_json::json;

fn pool() -> ScriptedConfig {
    ScriptedConfig::strict().with_pool(
        "rare_letters",
        vec![
            PoolPrompt::new("Count the words.", 0.1, Behavior::new("rare_letters_correct", "rare_letters_wrong")),
            PoolPrompt::new("Think, then count.", 0.5, Behavior::new("rare_letters_correct", "schema_invalid")),
        ],
    )
}

#[test]
fn concurrent_invocations_keep_pull_accounting() {
    let engine = Arc::new(Engine::new(
        Arc::new(Store::in_memory().unwrap()),
        Arc::new(ScriptedBackend::with_builtin(pool()).unwrap()),
        EngineConfig::default(),
    ));
    let h = engine.register(&rare_letters::spec()).unwrap();
    let root = engine
        .invoke(&h, &Record::new().with("given_text", "Zap."), InvokeOptions::new())
        .map(|i| i.invocation_id)
        .unwrap_or_else(|e| e.failed_invocation().unwrap().to_string());
    std::thread::scope(|s| {
        for t in 0..8 {
            let engine = engine.clone();
            let h = h.clone();
            let root = root.clone();
            s.spawn(move || {
                for i in 0..25 {
                    let text = rare_letters::PANGRAMS[(t + i) % rare_letters::PANGRAMS.len()];
                    let _ = engine.invoke(
                        &h,
                        &Record::new().with("given_text", text),
                        InvokeOptions::new().parents([root.clone()]),
                    );
                }
            });
        }
    });
    let invs = engine.store().invocations_of(&h.subroutine_id).unwrap();
    assert_eq!(invs.len(), 201);
    let arms = engine.store().arms(&h.subroutine_id).unwrap();
    assert_eq!(arms.iter().map(|a| a.pulls).sum::<u64>(), 201);
    let failed = invs.iter().filter(|i| i.status == InvocationStatus::Failed).count() as u64;
    let failure_losses: u64 = arms.iter().map(|a| a.observations).sum();
    assert_eq!(failed, failure_losses);

    // topological order by created_at: parents always precede children
    let at: HashMap<_, _> = invs.iter().map(|i| (i.invocation_id.clone(), i.created_at)).collect();
    for e in engine.store().edges().unwrap() {
        assert!(at[&e.parent] < at[&e.child]);
    }
    // every succeeded output re-validates against its recorded schema
    for inv in invs.iter().filter(|i| i.succeeded()) {
        assert!(inv.output_record().is_some());
    }
}

#[test]
fn scripted_backend_is_pure() {
    let b = ScriptedBackend::with_builtin(pool()).unwrap();
    let prompt = b
        .synthesize_prompt(&SynthesisRequest { spec: rare_letters::spec(), context: None, ordinal: 0, seed: 3 })
        .unwrap();
    let req = GenerationRequest {
        system_prompt: prompt,
        user_payload: "<given_text>\nPack my box with five dozen liquor jugs.\n</given_text>".into(),
        schema: rare_letters::output_schema(),
        temperature: 0.2,
        seed: Some(11),
    };
    let first = b.generate(&req).unwrap().raw_text;
    for _ in 0..1000 {
        assert_eq!(b.generate(&req).unwrap().raw_text, first);
    }
}

#[test]
fn pool_variants_are_distinct() {
    let b = ScriptedBackend::with_builtin(pool()).unwrap();
    let prompts: Vec<String> = (0..3)
        .map(|ordinal| {
            b.synthesize_prompt(&SynthesisRequest { spec: rare_letters::spec(), context: None, ordinal, seed: 0 })
                .unwrap()
        })
        .collect();
    assert_ne!(prompts[0], prompts[2]);
    assert!(prompts[0].contains("scratch_work") && prompts[0].contains("character_count"));
    let with_ctx = b
        .synthesize_prompt(&SynthesisRequest {
            spec: rare_letters::spec(),
            context: Some("focus on precision".into()),
            ordinal: 0,
            seed: 0,
        })
        .unwrap();
    assert_ne!(fingerprint(&prompts[0]), fingerprint(&with_ctx));
}

#[test]
fn enqueued_tasks_survive_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.db");
    let id = {
        let q = Queue::new(Arc::new(Store::open(&path).unwrap()));
        let id = q.enqueue("k", json!({"a": 1}), "key").unwrap();
        q.lease("dead-worker", std::time::Duration::from_secs(3600)).unwrap();
        id
    };
    let q = Queue::new(Arc::new(Store::open(&path).unwrap())).with_clock(Clock::System);
    let t = q.task(&id).unwrap();
    assert_eq!(t.state, TaskState::Leased);
    q.reclaim_leases("fresh").unwrap();
    let again = q.lease("fresh-w0", std::time::Duration::from_secs(60)).unwrap().unwrap();
    assert_eq!(again.task_id, id);
    assert_eq!(again.payload, json!({"a": 1}));
}

#[test]
fn concurrent_leases_never_share_a_task() {
    let q = Queue::new(Arc::new(Store::in_memory().unwrap()));
    for i in 0..50 {
        q.enqueue("k", json!(i), &format!("t{i}")).unwrap();
    }
    let got: Vec<Vec<String>> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..6)
            .map(|w| {
                let q = q.clone();
                s.spawn(move || {
                    let mut mine = Vec::new();
                    while let Some(t) = q.lease(&format!("w{w}"), std::time::Duration::from_secs(60)).unwrap() {
                        mine.push(t.task_id);
                    }
                    mine
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let all: Vec<&String> = got.iter().flatten().collect();
    let unique: HashSet<&String> = all.iter().copied().collect();
    assert_eq!(all.len(), 50);
    assert_eq!(unique.len(), 50);
}
