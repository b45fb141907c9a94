//! Implementations of the non-server commands.

use std::fs;
use std::path::{Path, PathBuf};

use auditlm::bandit::BetaSchedule;
use commentnepa::corpus::{load_context, load_corpus};
use commentnepa::eval::report::DEFAULT_LENGTH_EDGES;
use commentnepa::eval::{evaluate, load_ground_truth, run_demo, DemoConfig, SystemOutput};
use commentnepa::{fixtures, BatchReport, Guidance, Pipeline, RunConfig, RunInput};
use serde_json::json;

use crate::setup::Environment;
use crate::CliError;

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))
}

/// Run configuration file (TOML); missing keys take their defaults.
pub fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub struct RunArgs {
    pub corpus: PathBuf,
    pub guidance: PathBuf,
    pub context: Option<PathBuf>,
    pub batch_size: Option<usize>,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn batch_line(r: &BatchReport) -> String {
    let complete = r.letters.iter().filter(|l| l.complete()).count();
    format!(
        "{} [{}]: {}/{} letters complete, {} concerns, {} bins, {} failed quotes, {} dead tasks",
        r.batch_id,
        r.state,
        complete,
        r.letters.len(),
        r.concerns,
        r.bins.len(),
        r.failed_verifications,
        r.dead_tasks.len()
    )
}

/// Plans the run (or finds it, if it already exists) and processes every
/// batch that is not yet reviewable.
pub fn run(env: &Environment, args: &RunArgs) -> Result<String, CliError> {
    // inputs are checked before the store is touched
    let guidance = Guidance::load(&args.guidance)?;
    let letters = load_corpus(&args.corpus)?;
    let context = match &args.context {
        Some(p) => load_context(p)?,
        None => String::new(),
    };
    let mut config = match &args.config {
        Some(p) => load_run_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(n) = args.batch_size {
        config.batch_size = n;
    }
    let pipeline = env.pipeline()?;
    let input = RunInput { letters, guidance, context };
    let plan = pipeline.plan(&input, &config)?;
    let mut out = format!("run {} ({} batches)\n", plan.run_id, plan.batch_ids.len());
    pipeline.resume(&plan.run_id)?;
    let reports = pipeline.reports(&plan.run_id)?;
    for r in &reports {
        out.push_str(&batch_line(r));
        out.push('\n');
    }
    if let Some(dir) = &args.out {
        ensure_dir(dir)?;
        for r in &reports {
            write(dir, &format!("{}.json", r.batch_id), &r.to_json())?;
            write(dir, &format!("{}.md", r.batch_id), &r.to_markdown())?;
        }
        let system = pipeline.export(&plan.run_id)?;
        write(dir, "system_output.json", &serde_json::to_string_pretty(&system).map_err(CliError::failed)?)?;
        out.push_str(&format!("reports written to {}\n", dir.display()));
    }
    Ok(out)
}

fn latest_run(pipeline: &Pipeline) -> Result<String, CliError> {
    pipeline
        .run_ids()?
        .pop()
        .ok_or_else(|| CliError::Input("the store holds no runs".into()))
}

/// System output of a run in the evaluator's input format.
pub fn export(env: &Environment, run_id: Option<&str>, out: &Path) -> Result<String, CliError> {
    let pipeline = env.pipeline()?;
    let run_id = match run_id {
        Some(r) => r.to_string(),
        None => latest_run(&pipeline)?,
    };
    let system = pipeline.export(&run_id)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    fs::write(out, serde_json::to_string_pretty(&system).map_err(CliError::failed)?)?;
    Ok(format!("run {run_id}: {} letters written to {}\n", system.letters.len(), out.display()))
}

pub struct DemoArgs {
    pub trials: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub beta_end: f64,
    pub ramp: u64,
    pub error_rates: Vec<f64>,
}

pub fn demo_bandit(args: &DemoArgs) -> Result<String, CliError> {
    if args.trials == 0 {
        return Err(CliError::Input("--trials must be positive".into()));
    }
    if args.error_rates.is_empty() || args.error_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(CliError::Input("error rates must lie in [0, 1]".into()));
    }
    let cfg = DemoConfig {
        trials: args.trials,
        seed: args.seed,
        schedule: BetaSchedule::linear(0.0, args.beta_end, args.ramp),
        error_rates: args.error_rates.clone(),
        ..DemoConfig::default()
    };
    let trace = run_demo(&cfg).map_err(CliError::failed)?;
    ensure_dir(&args.out)?;
    write(&args.out, "loss_trace.csv", &trace.loss_csv())?;
    write(&args.out, "arm_trace.csv", &trace.arm_csv())?;
    write(&args.out, "loss.svg", &trace.loss_svg())?;
    write(&args.out, "arms.svg", &trace.arm_svg())?;
    let window = 100.min(args.trials);
    let summary = json!({
        "trials": args.trials,
        "seed": args.seed,
        "cumulative_loss": trace.cumulative_loss(),
        "leading_mean_loss": trace.leading_mean(window),
        "trailing_mean_loss": trace.trailing_mean(window),
        "window": window,
        "modal_arm_of_window": trace.modal_arm(window),
        "selection_counts": trace.selection_counts(),
        "arms": trace.arms,
    });
    let summary = serde_json::to_string_pretty(&summary).map_err(CliError::failed)?;
    write(&args.out, "summary.json", &summary)?;
    let mut out = format!(
        "{} trials, seed {}: cumulative loss {}, first {window} mean {:.3}, last {window} mean {:.3}\n",
        args.trials,
        args.seed,
        trace.cumulative_loss(),
        trace.leading_mean(window).unwrap_or(f64::NAN),
        trace.trailing_mean(window).unwrap_or(f64::NAN),
    );
    for a in &trace.arms {
        out.push_str(&format!(
            "  arm {} (error rate {}): {} pulls, mean loss {}\n",
            a.arm,
            a.error_rate,
            a.pulls,
            a.mean_loss.map_or("-".to_string(), |m| format!("{m:.3}"))
        ));
    }
    out.push_str(&format!("written to {}\n", args.out.display()));
    Ok(out)
}

pub fn eval(system: &Path, truth: &Path, out: &Path, edges: Option<&[usize]>) -> Result<String, CliError> {
    let system = SystemOutput::load(system)?;
    let truth = load_ground_truth(truth)?;
    let report = evaluate::<f64>(&system, &truth, edges.unwrap_or(DEFAULT_LENGTH_EDGES))?;
    ensure_dir(out)?;
    write(out, "eval_report.json", &report.to_json())?;
    write(out, "eval_report.md", &report.to_markdown())?;
    let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.1}%", v * 100.0));
    let a = &report.aggregate;
    Ok(format!(
        "{} letters: quote precision {}, recall {}; bin precision {}, recall {}\nwritten to {}\n",
        report.letters.len(),
        pct(a.precision),
        pct(a.recall),
        pct(a.bin_precision),
        pct(a.bin_recall),
        out.display()
    ))
}

/// Synthetic annotated corpus plus guidance and context, for trying the
/// pipeline and evaluator offline.
pub fn fixtures(letters: usize, seed: u64, out: &Path) -> Result<String, CliError> {
    if letters == 0 {
        return Err(CliError::Input("--letters must be positive".into()));
    }
    let (corpus, truth) = fixtures::annotated_corpus(letters, seed);
    ensure_dir(out)?;
    write(out, "corpus.jsonl", &fixtures::corpus_jsonl(&corpus))?;
    write(out, "truth.jsonl", &fixtures::truth_jsonl(&truth))?;
    write(out, "guidance.toml", &fixtures::guidance_toml())?;
    write(out, "context.txt", fixtures::PROJECT_CONTEXT)?;
    Ok(format!("{letters} letters, {} annotations written to {}\n", truth.len(), out.display()))
}

pub fn trace(env: &Environment, invocation: &str, full: bool) -> Result<String, CliError> {
    let store = crate::setup::open_store(&env.store)?;
    let t = store.trace(invocation)?;
    Ok(crate::trace::render(&t, full))
}
