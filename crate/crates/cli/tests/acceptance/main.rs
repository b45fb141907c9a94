//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any
//! criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod oracle;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use auditlm::backend::{Behavior, GeneratorRegistry, PoolPrompt, ScriptedBackend, ScriptedConfig};
use auditlm::bandit::{ArmStats, BanditState};
use auditlm::critique::{
    critique_candidate, critique_loss, propagate_sme_feedback, register_pair, self_critique_loop, CritiquePair,
    ExitReason, LoopConfig, LoopContext, RatingDimension, SmeFeedback,
};
use auditlm::engine::{Engine, EngineConfig, InvokeOptions};
use auditlm::queue::Queue;
use auditlm::rare_letters::{PANGRAMS, RARE_LETTERS};
use auditlm::schema::{FieldKind, FieldSpec, Record, Schema, SubroutineSpec};
use auditlm::store::{ArmRecord, Store};
use auditlm::Choice;
use commentnepa::eval::demo::oracle as rare_letter_count;
use commentnepa::eval::metrics::length_variability;
use commentnepa::eval::sentences::{sentence_texts, split_sentences};
use commentnepa::eval::{evaluate, run_demo, DemoConfig, SystemConcernRecord, SystemLetter, SystemOutput};
use commentnepa::pipeline::{RunConfig, RunInput};
use commentnepa::quote::{recheck, slice_chars};
use commentnepa::scripted::{one_typo, pipeline_backend, FABRICATED};
use commentnepa::{fixtures, verify_quote, MatchConfig, Pipeline, QuoteSpan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value as Json};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn within(label: &str, started: Instant, limit: Duration) -> Result<f64, String> {
    let secs = started.elapsed().as_secs_f64();
    ensure!(started.elapsed() < limit, "{label} took {secs:.1}s, limit {}s", limit.as_secs());
    Ok(secs)
}

// ---------------------------------------------------------------------------

fn boltzmann() -> Outcome {
    // only the sampler is timed; the checks below are quadratic
    let mut sampling = Duration::ZERO;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_sum, mut worst_oracle) = (0.0f64, 0.0f64);
    for k in 0..10_000 {
        let n = rng.random_range(0..=50);
        let beta: f64 = rng.random_range(0.0..=100.0);
        let arms: Vec<ArmStats<f64>> = (0..n)
            .map(|i| {
                let obs = rng.random_range(0..20u64);
                let sum = if obs == 0 { 0.0 } else { rng.random_range(0.0..=obs as f64) };
                ArmStats::with_history(format!("a{i}").as_str(), obs, sum)
            })
            .collect();
        let means: Vec<Option<f64>> = arms.iter().map(|a| a.mean_loss()).collect();
        let state = BanditState::with_arms("s", arms, beta).map_err(|e| e.to_string())?;
        let t0 = Instant::now();
        let dist = state.sample_distribution();
        sampling += t0.elapsed();
        let probs: Vec<f64> = (0..n)
            .map(|i| dist.probability(&Choice::Arm(format!("a{i}").as_str().into())))
            .chain([dist.explore_probability()])
            .collect();
        worst_sum = worst_sum.max((probs.iter().sum::<f64>() - 1.0).abs());
        let expected = oracle::boltzmann(&means, beta, state.explore_prior);
        for (p, q) in probs.iter().zip(&expected) {
            worst_oracle = worst_oracle.max((p - q).abs());
        }
        ensure!(probs.iter().all(|&p| p > 0.0 || beta > 0.0), "state {k}: zero probability");
        // monotone in loss
        let eff = |i: usize| means[i].unwrap_or(state.explore_loss());
        for i in 0..n {
            for j in 0..n {
                if eff(i) < eff(j) {
                    ensure!(probs[i] >= probs[j], "state {k}: arm {i} (loss {}) below arm {j}", eff(i));
                }
            }
        }
        // the same losses at zero temperature
        let mut flat = state.clone();
        flat.beta = 0.0;
        let u = flat.sample_distribution();
        for (_, p) in &u.entries {
            ensure!((p - 1.0 / (n as f64 + 1.0)).abs() <= 1e-12, "state {k}: β = 0 not uniform");
        }
    }
    ensure!(worst_sum <= 1e-12, "normalization error {worst_sum:e}");
    ensure!(worst_oracle <= 1e-12, "oracle disagreement {worst_oracle:e}");

    let state = BanditState::with_arms(
        "s",
        vec![ArmStats::with_mean("a", 0.2), ArmStats::with_mean("b", 0.8)],
        1.0,
    )
    .map_err(|e| e.to_string())?;
    let d = state.sample_distribution();
    let got = [
        d.probability(&Choice::Arm("a".into())),
        d.probability(&Choice::Arm("b".into())),
        d.explore_probability(),
    ];
    for (g, want) in got.iter().zip([0.4368f64, 0.2397, 0.3236]) {
        ensure!((g - want).abs() <= 1e-4, "β = 1 example: {got:?}");
    }
    let secs = sampling.as_secs_f64();
    ensure!(secs < 10.0, "10^4 distributions took {secs:.1}s");
    Ok(format!(
        "10^4 states, max |Σp − 1| = {worst_sum:.1e}, max oracle diff = {worst_oracle:.1e}, β=1 example ({:.4}, {:.4}, {:.4}), {secs:.1}s",
        got[0], got[1], got[2]
    ))
}

fn convergence() -> Outcome {
    let t0 = Instant::now();
    let (mut decreased, mut modal) = (0, 0);
    let mut rows = Vec::new();
    for seed in 0..10 {
        let trace = run_demo(&DemoConfig { trials: 500, seed, ..DemoConfig::default() }).map_err(|e| e.to_string())?;
        let (lead, trail) = (trace.leading_mean(100).unwrap(), trace.trailing_mean(100).unwrap());
        if trail < lead {
            decreased += 1;
        }
        if trace.modal_arm(100) == Some(0) {
            modal += 1;
        }
        rows.push(format!("{lead:.2}→{trail:.2}"));
    }
    let secs = within("10 × 500 trials", t0, Duration::from_secs(30))?;
    let detail = format!("loss fell in {decreased}/10 seeds, best arm modal in {modal}/10 [{}], {secs:.1}s", rows.join(" "));
    ensure!(decreased >= 8 && modal >= 7, "{detail}");
    Ok(detail)
}

fn rare_letters() -> Outcome {
    let t0 = Instant::now();
    let s = "Pack my box with five dozen liquor jugs.";
    ensure!(rare_letter_count(s, &RARE_LETTERS) == 4, "oracle({s}) = {}", rare_letter_count(s, &RARE_LETTERS));
    ensure!(oracle::rare_words(s, &RARE_LETTERS) == 4, "reference count disagrees");
    for p in PANGRAMS {
        ensure!(
            rare_letter_count(p, &RARE_LETTERS) == oracle::rare_words(p, &RARE_LETTERS),
            "count differs on {p}"
        );
    }
    let trace = run_demo(&DemoConfig { trials: 100, error_rates: vec![0.0], seed: 3, ..DemoConfig::default() })
        .map_err(|e| e.to_string())?;
    ensure!(trace.cumulative_loss() == 0.0, "perfect arm lost {}", trace.cumulative_loss());
    let secs = within("rare letters", t0, Duration::from_secs(5))?;
    Ok(format!("oracle = 4, {} pangrams agree, perfect arm cumulative loss 0 over 100 trials, {secs:.1}s", PANGRAMS.len()))
}

// ---------------------------------------------------------------------------

fn counter_spec() -> SubroutineSpec {
    SubroutineSpec::new(
        "counter",
        "Produce the next draft number.",
        Schema::new(vec![FieldSpec::new("topic", FieldKind::Text, "")]).unwrap(),
        Schema::new(vec![FieldSpec::new("n", FieldKind::Integer, "draft number")]).unwrap(),
    )
    .unwrap()
}

/// Draft `n` is rated `ratings[n - 1]` unless a `probe` field overrides it.
fn loop_engine(ratings: Vec<i64>) -> (Engine, CritiquePair) {
    let mut reg = GeneratorRegistry::builtin();
    reg.register("next_draft", |cx| {
        let prev = cx
            .field("previous_output")
            .and_then(|s| serde_json::from_str::<Json>(s).ok())
            .and_then(|v| v["n"].as_i64())
            .unwrap_or(0);
        json!({"n": prev + 1})
    });
    reg.register("table_critique", move |cx| {
        let n = cx.field("output_n").and_then(|s| s.trim().parse::<usize>().ok()).unwrap_or(1);
        let r = cx
            .field("probe")
            .and_then(|s| s.trim().parse::<i64>().ok())
            .unwrap_or_else(|| ratings[(n - 1).min(ratings.len() - 1)]);
        json!({"explanation": format!("draft {n}"), "quality": r})
    });
    let cfg = ScriptedConfig::strict()
        .with_pool("counter", vec![PoolPrompt::new("Write drafts.", 0.0, Behavior::new("next_draft", "next_draft"))])
        .with_pool(
            "critique_counter",
            vec![PoolPrompt::new("Judge drafts.", 0.0, Behavior::new("table_critique", "table_critique"))],
        );
    let engine = Engine::new(
        Arc::new(Store::in_memory().unwrap()),
        Arc::new(ScriptedBackend::new(cfg, reg).unwrap()),
        EngineConfig::default(),
    );
    let pair = register_pair(&engine, &counter_spec(), &[RatingDimension::bounded("quality", 0, 10)]).unwrap();
    (engine, pair)
}

fn all_arms(e: &Engine) -> BTreeMap<(String, String), ArmRecord> {
    let mut out = BTreeMap::new();
    for sub in e.store().subroutines().unwrap() {
        for arm in e.store().arms(&sub.subroutine_id).unwrap() {
            out.insert((sub.subroutine_id.clone(), arm.arm_id.to_string()), arm);
        }
    }
    out
}

fn critique_alignment() -> Outcome {
    for i in 0..=100 {
        let x = i as f64 / 100.0;
        ensure!(critique_loss(x, x) == 0.0, "critique_loss({x}, {x}) != 0");
    }
    ensure!(critique_loss(1.0, 0.0) == 1.0, "critique_loss(1, 0) = {}", critique_loss(1.0, 0.0));
    ensure!(critique_loss(0.2, 0.7) == 0.25, "critique_loss(0.2, 0.7) = {}", critique_loss(0.2, 0.7));

    let (e, pair) = loop_engine(vec![9]);
    let topic = Record::new().with("topic", "roads");
    let candidate = e.invoke(&pair.target, &topic, InvokeOptions::new()).map_err(|e| e.to_string())?;
    let mut critiques = Vec::new();
    for probe in ["7", "1"] {
        let opts = InvokeOptions { extra: vec![("probe".into(), probe.into())], ..Default::default() };
        let out = critique_candidate(&e, &pair, &topic, &candidate, &candidate.output_record().unwrap(), opts)
            .map_err(|e| e.to_string())?;
        critiques.push(out.0);
    }
    let other = e.invoke(&pair.target, &Record::new().with("topic", "rivers"), InvokeOptions::new()).unwrap();
    critique_candidate(&e, &pair, &topic, &other, &other.output_record().unwrap(), InvokeOptions::new()).unwrap();

    let before = all_arms(&e);
    let fb = SmeFeedback {
        submission_id: "acc".into(),
        invocation_id: candidate.invocation_id.clone(),
        reviewer_id: "r".into(),
        ratings: BTreeMap::from([("quality".to_string(), 5)]),
        comment: None,
    };
    let report = propagate_sme_feedback(&e, &fb, false).map_err(|e| e.to_string())?;
    let after = all_arms(&e);

    // expected: target arm +0.5, critique arms +(0.5 − 0.3)² and +(0.5 − 0.9)²
    let mut expected: BTreeMap<(String, String), (u64, f64)> =
        before.iter().map(|(k, a)| (k.clone(), (a.observations, a.loss_sum))).collect();
    let bump = |m: &mut BTreeMap<(String, String), (u64, f64)>, sub: &str, arm: &str, l: f64| {
        let v = m.get_mut(&(sub.to_string(), arm.to_string())).unwrap();
        v.0 += 1;
        v.1 += l;
    };
    bump(&mut expected, &pair.target.subroutine_id, candidate.arm_id.as_ref().unwrap().as_str(), 0.5);
    for (c, l) in critiques.iter().zip([0.04, 0.16]) {
        bump(&mut expected, &pair.critique.subroutine_id, c.arm_id.as_ref().unwrap().as_str(), l);
    }
    let mut changed = 0;
    for (k, a) in &after {
        let (obs, sum) = expected[k];
        ensure!(a.observations == obs && (a.loss_sum - sum).abs() < 1e-12, "arm {k:?} differs from expected");
        ensure!(a.pulls == before[k].pulls, "arm {k:?} pulls changed");
        if a.observations != before[k].observations {
            changed += 1;
        }
    }
    ensure!(after.len() == before.len(), "arm set changed");
    ensure!(report.sme_loss == 0.5, "sme loss {}", report.sme_loss);
    Ok(format!(
        "identities exact; one rating on a target with {} critiques changed exactly the {changed} expected arms, {} untouched",
        critiques.len(),
        after.len() - changed
    ))
}

fn critique_loop() -> Outcome {
    let mut rows = Vec::new();
    for (ratings, want_exit, want_sel, want_losses) in [
        (vec![4, 6, 5, 9, 9], ExitReason::NoImprovement, 2, vec![0.6, 0.4, 0.5]),
        (vec![1, 2, 3], ExitReason::MaxIters, 3, vec![0.9, 0.8, 0.7]),
    ] {
        let (e, pair) = loop_engine(ratings);
        let cfg = LoopConfig { max_iters: 3, loss_threshold: 0.1 };
        let out = self_critique_loop(&e, &pair, &Record::new().with("topic", "roads"), &cfg, &LoopContext::default())
            .map_err(|e| e.to_string())?;
        let losses: Vec<f64> = out.trace.iterations.iter().map(|i| i.derived_loss).collect();
        ensure!(losses == want_losses, "losses {losses:?}");
        ensure!(out.trace.exit_reason == want_exit, "{want_losses:?}: exit {:?}", out.trace.exit_reason);
        ensure!(out.trace.selected_index + 1 == want_sel, "{want_losses:?}: selected {}", out.trace.selected_index + 1);
        rows.push(format!("{losses:?} → {:?}, selected {}", out.trace.exit_reason, out.trace.selected_index + 1));
    }
    Ok(rows.join("; "))
}

// ---------------------------------------------------------------------------

fn pipeline(store: Store) -> Pipeline {
    let engine = Engine::new(Arc::new(store), Arc::new(pipeline_backend()), EngineConfig::default());
    Pipeline::new(Arc::new(engine)).unwrap()
}

fn input(n: usize, seed: u64) -> RunInput {
    RunInput {
        letters: fixtures::corpus(n, seed),
        guidance: fixtures::guidance(),
        context: fixtures::PROJECT_CONTEXT.to_string(),
    }
}

fn quote_guarantee() -> Outcome {
    let cfg = MatchConfig::default();
    let letters = fixtures::corpus(50, 11);
    let mut typo_min = 1.0f64;
    for (i, l) in letters.iter().enumerate() {
        let sentences = sentence_texts(&l.text);
        let s = &sentences[1.min(sentences.len() - 1)];
        let exact = verify_quote(s, &l.text, &cfg).ok_or(format!("{}: exact quote dropped", l.letter_id))?;
        ensure!(exact.similarity == 1.0 && slice_chars(&l.text, exact.start, exact.end) == *s, "{}: exact span wrong", l.letter_id);
        let typo = verify_quote(&one_typo(s), &l.text, &cfg).ok_or(format!("{}: 1-typo quote dropped", l.letter_id))?;
        ensure!(typo.similarity >= 0.85, "{}: typo similarity {}", l.letter_id, typo.similarity);
        typo_min = typo_min.min(typo.similarity);
        let fake = FABRICATED[i % FABRICATED.len()];
        ensure!(verify_quote(fake, &l.text, &cfg).is_none(), "{}: fabricated quote kept", l.letter_id);
    }

    // the pipeline's own persisted spans on the same corpus
    let p = pipeline(Store::in_memory().unwrap());
    p.run(&RunInput { letters: letters.clone(), ..input(0, 0) }, &RunConfig { batch_size: 25, ..RunConfig::default() })
        .map_err(|e| e.to_string())?;
    let spans = p.all_quote_spans().map_err(|e| e.to_string())?;
    let mut bad = 0;
    for (_, span, text) in &spans {
        let sim = oracle::similarity(&span.raw_quote, &slice_chars(text, span.start, span.end));
        if sim < 0.85 || (sim - span.similarity).abs() > 1e-12 || (recheck(span, text) - sim).abs() > 1e-12 {
            bad += 1;
        }
        if FABRICATED.contains(&span.raw_quote.as_str()) {
            bad += 1;
        }
    }
    let dropped = p.engine().store().events(Some(commentnepa::pipeline::EVENT_FAILED_VERIFICATION)).unwrap().len();
    ensure!(bad == 0, "{bad} persisted spans fail recomputation");
    Ok(format!(
        "50/50 exact and 50/50 one-typo quotes kept (min similarity {typo_min:.3}), 50/50 fabricated rejected; pipeline persisted {} spans, 0 fail recomputation, {dropped} dropped",
        spans.len()
    ))
}

fn evaluator_oracle() -> Outcome {
    let v = length_variability::<f64>(&[10, 20, 30]).ok_or("no variability")?;
    ensure!((v - 40.8).abs() <= 0.05, "length_variability([10,20,30]) = {v}");

    let (letters, truth) = fixtures::annotated_corpus(120, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let bins = ["water_quality", "traffic_noise", "wildlife", "economics", "other"];
    let mut system = SystemOutput::default();
    for l in &letters {
        let n = l.text.chars().count();
        let k = rng.random_range(0..4);
        let concerns = (0..k)
            .map(|i| {
                let s = rng.random_range(0..n);
                let e = (s + rng.random_range(1..90)).min(n);
                let nb = rng.random_range(1..=2);
                SystemConcernRecord {
                    concern_id: format!("c{i}"),
                    statement: String::new(),
                    bins: (0..nb).map(|_| bins[rng.random_range(0..bins.len())].to_string()).collect(),
                    quotes: vec![QuoteSpan { raw_quote: String::new(), start: s, end: e, similarity: 1.0 }],
                }
            })
            .collect();
        system.letters.push(SystemLetter { letter_id: l.letter_id.clone(), text: l.text.clone(), concerns });
    }
    let total: usize = letters.iter().map(|l| split_sentences(&l.text).len()).sum();
    ensure!(total <= 1000, "fixture has {total} sentences");
    let r = evaluate::<f64>(&system, &truth, &[0, 200, 400]).map_err(|e| e.to_string())?;

    let mut pooled = [0u64; 4];
    let mut pooled_bins = [0u64; 3];
    let mut confusion: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut lengths = Vec::new();
    for (sl, score) in system.letters.iter().zip(&r.letters) {
        let n = sl.text.chars().count();
        let sentences: Vec<(usize, usize)> = split_sentences(&sl.text).iter().map(|s| (s.start, s.end)).collect();
        let gt: Vec<_> = truth.iter().filter(|c| c.letter_id == sl.letter_id).collect();
        let sme: Vec<(usize, usize)> = gt.iter().map(|c| (c.start, c.end)).collect();
        let quotes: Vec<(usize, usize)> =
            sl.concerns.iter().flat_map(|c| c.quotes.iter().map(|q| (q.start, q.end))).collect();
        lengths.extend(quotes.iter().map(|(s, e)| e - s));
        let c = oracle::quote_counts(n, &sentences, &quotes, &sme);
        let got = [score.quotes.sentences, score.quotes.quoted, score.quotes.selected, score.quotes.both];
        ensure!(got == c, "{}: quote counts {got:?} vs {c:?}", sl.letter_id);
        for k in 0..4 {
            pooled[k] += c[k];
        }
        let sb: BTreeSet<String> = gt.iter().map(|c| c.bin_name.clone()).collect();
        let yb: BTreeSet<String> = sl.concerns.iter().flat_map(|c| c.bins.iter().cloned()).collect();
        let b = oracle::bin_counts(&sb, &yb);
        ensure!([score.bins.sme, score.bins.system, score.bins.both] == b, "{}: bin counts", sl.letter_id);
        for k in 0..3 {
            pooled_bins[k] += b[k];
        }
        let comments: Vec<oracle::Comment> =
            gt.iter().map(|c| oracle::Comment { span: (c.start, c.end), bin: c.bin_name.clone() }).collect();
        let concerns: Vec<oracle::Concern> = sl
            .concerns
            .iter()
            .map(|c| oracle::Concern { spans: c.quotes.iter().map(|q| (q.start, q.end)).collect(), bins: c.bins.clone() })
            .collect();
        for (k, v) in oracle::confusion(n, &sentences, &comments, &concerns) {
            *confusion.entry(k).or_insert(0) += v;
        }
    }
    let a = &r.aggregate;
    ensure!([a.quotes.sentences, a.quotes.quoted, a.quotes.selected, a.quotes.both] == pooled, "pooled counts");
    ensure!(a.precision == Some(pooled[3] as f64 / pooled[1] as f64), "aggregate precision");
    ensure!(a.recall == Some(pooled[3] as f64 / pooled[2] as f64), "aggregate recall");
    ensure!([a.bins.sme, a.bins.system, a.bins.both] == pooled_bins, "pooled bin counts");
    let got: BTreeMap<(String, String), u64> =
        r.confusion.iter().map(|c| ((c.sme_bin.clone(), c.system_bin.clone()), c.count)).collect();
    ensure!(got == confusion, "confusion counts differ");
    let (sv, ov) = (r.system_length_variability.unwrap(), oracle::variability(&lengths).unwrap());
    ensure!((sv - ov).abs() <= 1e-9 * ov, "variability {sv} vs {ov}");
    Ok(format!(
        "{} letters / {total} sentences: per-letter and pooled counts, {} confusion cells and variability match; [10,20,30] → {v:.2}%",
        letters.len(),
        confusion.len()
    ))
}

// ---------------------------------------------------------------------------

fn audit_integrity() -> Outcome {
    let p = pipeline(Store::in_memory().unwrap());
    let reports = p.run(&input(10, 3), &RunConfig { batch_size: 10, ..RunConfig::default() }).map_err(|e| e.to_string())?;
    let r = &reports[0];
    ensure!(r.letters.iter().all(|l| l.complete()), "incomplete letters");
    let store = p.engine().store();
    let invs = store.invocations().unwrap();

    // acyclic: Kahn's algorithm over every edge
    let edges = store.edges().unwrap();
    let mut indeg: HashMap<&str, usize> = invs.iter().map(|i| (i.invocation_id.as_str(), 0)).collect();
    let mut children: HashMap<&str, Vec<&str>> = HashMap::new();
    for e in &edges {
        *indeg.get_mut(e.child.as_str()).ok_or("edge to unknown child")? += 1;
        children.entry(e.parent.as_str()).or_default().push(e.child.as_str());
    }
    let mut ready: Vec<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut seen = 0;
    while let Some(n) = ready.pop() {
        seen += 1;
        for c in children.get(n).into_iter().flatten() {
            let d = indeg.get_mut(c).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(c);
            }
        }
    }
    ensure!(seen == invs.len(), "cycle: {} of {} nodes sorted", seen, invs.len());

    let summaries: Vec<_> = invs.iter().filter(|i| i.stage.as_deref() == Some("bin_summary")).collect();
    ensure!(!summaries.is_empty(), "no stage-4 invocations");
    for s in &summaries {
        let t = store.trace(&s.invocation_id).unwrap();
        let stages: HashSet<&str> = t.nodes.iter().filter_map(|n| n.invocation.stage.as_deref()).collect();
        for want in ["bin", "extract", "summarize", "ingest"] {
            ensure!(stages.contains(want), "{}: trace lacks {want}", s.invocation_id);
        }
    }
    let mut replayed = 0;
    for inv in invs.iter().filter(|i| i.arm_id.is_some()) {
        let rep = p.engine().replay(inv).map_err(|e| e.to_string())?;
        ensure!(rep.matches(), "{} replay differs", inv.invocation_id);
        replayed += 1;
    }
    Ok(format!(
        "{} invocations, {} edges acyclic, {} stage-4 traces reach ingest, {replayed} replays byte-exact",
        invs.len(),
        edges.len(),
        summaries.len()
    ))
}

struct Audit {
    keys: BTreeSet<String>,
    duplicates: usize,
    tasks: u64,
    unfinished: u64,
    incomplete_letters: usize,
}

fn audit(store_path: &Path) -> Result<Audit, String> {
    let store = Arc::new(Store::open(store_path).map_err(|e| e.to_string())?);
    let invs = store.invocations().map_err(|e| e.to_string())?;
    let mut keys = BTreeSet::new();
    let mut duplicates = 0;
    for inv in &invs {
        let k = inv.invocation_key.clone().ok_or(format!("{} has no idempotency key", inv.invocation_id))?;
        if !keys.insert(format!("{}|{k}", inv.subroutine_id)) {
            duplicates += 1;
        }
    }
    let counts = Queue::new(store.clone()).counts().map_err(|e| e.to_string())?;
    let p = pipeline_for(store);
    let mut incomplete_letters = 0;
    for run in p.run_ids().map_err(|e| e.to_string())? {
        for r in p.reports(&run).map_err(|e| e.to_string())? {
            incomplete_letters += r.letters.iter().filter(|l| !l.complete()).count();
        }
    }
    Ok(Audit {
        keys,
        duplicates,
        tasks: counts.pending + counts.leased + counts.done + counts.dead,
        unfinished: counts.pending + counts.leased + counts.dead,
        incomplete_letters,
    })
}

fn pipeline_for(store: Arc<Store>) -> Pipeline {
    let engine = Engine::new(store, Arc::new(pipeline_backend()), EngineConfig::default());
    Pipeline::new(Arc::new(engine)).unwrap()
}

fn run_cli(dir: &Path, store: &Path, delay_ms: u64) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_commentnepa"));
    c.arg("run")
        .arg("--corpus")
        .arg(dir.join("corpus.jsonl"))
        .arg("--guidance")
        .arg(dir.join("guidance.toml"))
        .arg("--context")
        .arg(dir.join("context.txt"))
        .args(["--batch-size", "5", "--backend", "scripted", "--store"])
        .arg(store)
        .env("COMMENTNEPA_TASK_DELAY_MS", delay_ms.to_string())
        .env_remove("COMMENTNEPA_SCRIPTED_PROFILE")
        .stdout(Stdio::null())
        .stderr(Stdio::null());
    c
}

fn durability() -> Outcome {
    const DELAY_MS: u64 = 25;
    let t = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = t.path();
    let letters = fixtures::corpus(10, 5);
    std::fs::write(dir.join("corpus.jsonl"), fixtures::corpus_jsonl(&letters)).unwrap();
    std::fs::write(dir.join("guidance.toml"), fixtures::guidance_toml()).unwrap();
    std::fs::write(dir.join("context.txt"), fixtures::PROJECT_CONTEXT).unwrap();

    // uninterrupted reference, slowed like the trials so the kill window is known
    let reference = dir.join("reference.db");
    let t0 = Instant::now();
    let st = run_cli(dir, &reference, DELAY_MS).status().map_err(|e| e.to_string())?;
    let span_ms = t0.elapsed().as_millis() as u64;
    ensure!(st.success(), "reference run failed");
    let want = audit(&reference)?;
    ensure!(want.duplicates == 0 && want.unfinished == 0, "reference run is itself inconsistent");

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut killed_mid_run = 0;
    for trial in 0..10 {
        let store = dir.join(format!("trial{trial}.db"));
        let mut child = run_cli(dir, &store, DELAY_MS).spawn().map_err(|e| e.to_string())?;
        std::thread::sleep(Duration::from_millis(rng.random_range(span_ms / 20..span_ms * 9 / 10)));
        if child.try_wait().map_err(|e| e.to_string())?.is_none() {
            killed_mid_run += 1;
        }
        let _ = child.kill();
        let _ = child.wait();
        let st = run_cli(dir, &store, 0).status().map_err(|e| e.to_string())?;
        ensure!(st.success(), "trial {trial}: restart failed");
        let got = audit(&store)?;
        ensure!(got.duplicates == 0, "trial {trial}: {} duplicate invocations", got.duplicates);
        let extra: Vec<_> = got.keys.symmetric_difference(&want.keys).take(6).collect();
        ensure!(extra.is_empty(), "trial {trial}: invocation set differs from reference ({} vs {}): {extra:?}", got.keys.len(), want.keys.len());
        ensure!(got.unfinished == 0 && got.tasks == want.tasks, "trial {trial}: {} unfinished tasks, {} of {}", got.unfinished, got.tasks, want.tasks);
        ensure!(got.incomplete_letters == 0, "trial {trial}: {} incomplete letters", got.incomplete_letters);
    }
    ensure!(killed_mid_run >= 8, "only {killed_mid_run}/10 kills landed mid-run");
    Ok(format!(
        "10/10 trials ({killed_mid_run} killed mid-run, window {span_ms} ms): {} invocations, {} tasks, 0 duplicates, 0 lost",
        want.keys.len(),
        want.tasks
    ))
}

fn batch_freeze() -> Outcome {
    let p = pipeline(Store::in_memory().unwrap());
    let plan = p.plan(&input(6, 11), &RunConfig { batch_size: 3, ..RunConfig::default() }).map_err(|e| e.to_string())?;
    let first = p.process_next_batch(&plan.run_id).map_err(|e| e.to_string())?.ok_or("no batch")?;
    let store = p.engine().store();
    let subs: Vec<String> = store.subroutines().unwrap().into_iter().map(|s| s.subroutine_id).collect();
    let frozen: BTreeMap<String, _> =
        subs.iter().filter_map(|s| store.snapshot(&first.batch_id, s).unwrap().map(|snap| (s.clone(), snap))).collect();
    let item = store.list_review_items(&first.batch_id, "summarize").unwrap().remove(0).invocation;
    let arm = item.arm_id.clone().ok_or("unrated item")?;
    let live_before = store.arms(&item.subroutine_id).unwrap().into_iter().find(|a| a.arm_id == arm).unwrap();

    let fb = SmeFeedback {
        submission_id: "freeze".into(),
        invocation_id: item.invocation_id.clone(),
        reviewer_id: "r".into(),
        ratings: BTreeMap::from([("coverage".to_string(), 1), ("brevity".to_string(), 1)]),
        comment: None,
    };
    let out = p.submit_feedback(&fb).map_err(|e| e.to_string())?;
    ensure!(out.report.applied && !out.late, "feedback not applied on time");
    for (s, snap) in &frozen {
        ensure!(store.snapshot(&first.batch_id, s).unwrap().as_ref() == Some(snap), "batch-1 snapshot of {s} changed");
    }
    let second = p.process_next_batch(&plan.run_id).map_err(|e| e.to_string())?.ok_or("no second batch")?;
    let next = store.snapshot(&second.batch_id, &item.subroutine_id).unwrap().ok_or("no batch-2 snapshot")?;
    let next_arm = next.state.arms.iter().find(|a| a.arm_id == arm).ok_or("arm missing from batch-2 snapshot")?;
    ensure!(
        next_arm.observations > live_before.observations && next_arm.loss_sum >= live_before.loss_sum + 0.9 - 1e-12,
        "batch-2 snapshot lacks the rating"
    );
    for inv in store.list_review_items(&second.batch_id, "summarize").unwrap() {
        ensure!(inv.invocation.snapshot_version == Some(next.version), "batch-2 item sampled from another snapshot");
    }
    Ok(format!(
        "{} batch-1 snapshots unchanged; batch-2 snapshot carries the rating (arm observations {} → {})",
        frozen.len(),
        live_before.observations,
        next_arm.observations
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 10] = [
        ("boltzmann correctness", boltzmann),
        ("bandit convergence", convergence),
        ("rare-letters oracle", rare_letters),
        ("critique alignment", critique_alignment),
        ("self-critique loop", critique_loop),
        ("quote guarantee", quote_guarantee),
        ("evaluator oracle equivalence", evaluator_oracle),
        ("audit integrity", audit_integrity),
        ("durability", durability),
        ("batch-freeze semantics", batch_freeze),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
