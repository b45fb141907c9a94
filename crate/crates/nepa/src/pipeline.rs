//! Batched execution of the four stages over a durable task queue.
//!
//! A run partitions the corpus into batches. Each batch freezes the arm
//! statistics of every stage subroutine when it starts, so all of its
//! invocations sample from the same snapshot; feedback given while the
//! batch is under review only reaches later batches. Within a batch the
//! coordinator runs three barriered phases:
//!
//! 1. per-letter tasks: ingest, summarize, then extract concerns
//! 2. binning tasks over chunks of the batch's concerns
//! 3. one summary task per bin that received concerns
//!
//! Every task is idempotent. Invocations carry keys derived from the batch
//! and the letter (or chunk, or bin), and each task's results are written
//! together with a completion marker in one transaction, so a task re-run
//! after a crash finds its stored invocations and writes nothing twice.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Duration;

use auditlm::critique::{
    self_critique_loop, register_pair, CritiqueError, CritiquePair, LoopConfig, LoopContext, LoopOutcome,
    PropagationReport, SmeFeedback,
};
use auditlm::engine::{Engine, EngineError, InvokeOptions, SubroutineHandle};
use auditlm::queue::{run_until_idle, NewTask, PoolConfig, Queue, QueueError, Task, TaskState};
use auditlm::schema::{Record, Value};
use auditlm::store::{self, Snapshot, StoreError};
use parking_lot::Mutex;
use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use sha2::{Digest, Sha256};

use crate::corpus::{partition, Guidance, Letter};
use crate::quote::{verify_quote, MatchConfig, QuoteSpan};
use crate::report::{BatchReport, BinReport, Citation, DeadTask, LetterStatus};
use crate::stages::{
    assignments, assignments_view, binning_schema, concern_keys, ingest_spec, stage_spec, Stage, StageDims,
    DEFAULT_BIN_BATCH, INGEST_STAGE,
};

/// Letters per batch unless configured otherwise.
pub const DEFAULT_BATCH_SIZE: usize = 100;

pub const STATE_CREATED: &str = "created";
pub const STATE_RUNNING: &str = "running";
pub const STATE_REVIEWABLE: &str = "reviewable";
pub const STATE_SUPERSEDED: &str = "superseded";

pub const EVENT_FAILED_VERIFICATION: &str = "failed_verification";
pub const EVENT_CITATION_REJECTED: &str = "citation_rejected";

const KIND_LETTER: &str = "letter";
const KIND_EXTRACT: &str = "extract";
const KIND_BIN: &str = "bin";
const KIND_BIN_SUMMARY: &str = "bin_summary";

const DDL: &str = r#"
CREATE TABLE IF NOT EXISTS nepa_runs (
    run_id         TEXT PRIMARY KEY,
    config_json    TEXT NOT NULL,
    guidance_json  TEXT NOT NULL,
    context        TEXT NOT NULL,
    letter_count   INTEGER NOT NULL,
    batch_count    INTEGER NOT NULL,
    created_at     INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS nepa_letters (
    run_id        TEXT NOT NULL,
    letter_id     TEXT NOT NULL,
    batch_id      TEXT NOT NULL,
    position      INTEGER NOT NULL,
    text          TEXT NOT NULL,
    metadata_json TEXT NOT NULL,
    PRIMARY KEY (run_id, letter_id)
);
CREATE INDEX IF NOT EXISTS nepa_letters_batch ON nepa_letters(batch_id, position);
CREATE TABLE IF NOT EXISTS nepa_summaries (
    batch_id      TEXT NOT NULL,
    letter_id     TEXT NOT NULL,
    invocation_id TEXT NOT NULL,
    summary       TEXT NOT NULL,
    PRIMARY KEY (batch_id, letter_id)
);
CREATE TABLE IF NOT EXISTS nepa_extractions (
    batch_id      TEXT NOT NULL,
    letter_id     TEXT NOT NULL,
    invocation_id TEXT NOT NULL,
    kept          INTEGER NOT NULL,
    dropped       INTEGER NOT NULL,
    PRIMARY KEY (batch_id, letter_id)
);
CREATE TABLE IF NOT EXISTS nepa_concerns (
    concern_id    TEXT PRIMARY KEY,
    batch_id      TEXT NOT NULL,
    letter_id     TEXT NOT NULL,
    ordinal       INTEGER NOT NULL,
    statement     TEXT NOT NULL,
    invocation_id TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS nepa_concerns_batch ON nepa_concerns(batch_id, letter_id);
CREATE TABLE IF NOT EXISTS nepa_quote_spans (
    concern_id TEXT NOT NULL,
    ordinal    INTEGER NOT NULL,
    raw_quote  TEXT NOT NULL,
    start      INTEGER NOT NULL,
    end        INTEGER NOT NULL,
    similarity REAL NOT NULL,
    PRIMARY KEY (concern_id, ordinal)
);
CREATE TABLE IF NOT EXISTS nepa_bin_chunks (
    batch_id      TEXT NOT NULL,
    chunk         INTEGER NOT NULL,
    invocation_id TEXT NOT NULL,
    PRIMARY KEY (batch_id, chunk)
);
CREATE TABLE IF NOT EXISTS nepa_bin_assignments (
    concern_id    TEXT NOT NULL,
    bin_name      TEXT NOT NULL,
    invocation_id TEXT NOT NULL,
    PRIMARY KEY (concern_id, bin_name)
);
CREATE TABLE IF NOT EXISTS nepa_bin_summaries (
    batch_id      TEXT NOT NULL,
    bin_name      TEXT NOT NULL,
    summary       TEXT NOT NULL,
    invocation_id TEXT NOT NULL,
    PRIMARY KEY (batch_id, bin_name)
);
CREATE TABLE IF NOT EXISTS nepa_citations (
    batch_id   TEXT NOT NULL,
    bin_name   TEXT NOT NULL,
    ordinal    INTEGER NOT NULL,
    letter_id  TEXT NOT NULL,
    concern_id TEXT NOT NULL,
    raw_quote  TEXT NOT NULL,
    start      INTEGER NOT NULL,
    end        INTEGER NOT NULL,
    similarity REAL NOT NULL,
    PRIMARY KEY (batch_id, bin_name, ordinal)
);
"#;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("the corpus is empty")]
    EmptyCorpus,
    #[error("batch size must be positive")]
    BadBatchSize,
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("unknown letter `{0}`")]
    UnknownLetter(String),
    #[error(transparent)]
    Input(#[from] crate::corpus::InputError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Critique(#[from] CritiqueError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error("{0}")]
    Stage(String),
}

impl From<rusqlite::Error> for PipelineError {
    fn from(e: rusqlite::Error) -> Self {
        PipelineError::Store(StoreError::Sqlite(e))
    }
}

pub type PipelineResult<T> = Result<T, PipelineError>;

/// invocation id, kept quotes, dropped quotes
type ExtractionRow = (String, i64, i64);

/// Settings that shape a run's outputs. They are part of the run id, so
/// restarting with the same inputs and settings resumes the same run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub batch_size: usize,
    /// Concerns per binning call, at most.
    pub bin_batch: usize,
    pub loop_config: LoopConfig,
    pub matching: MatchConfig,
    pub dims: StageDims,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            bin_batch: DEFAULT_BIN_BATCH,
            loop_config: LoopConfig::default(),
            matching: MatchConfig::default(),
            dims: StageDims::default(),
        }
    }
}

/// Execution settings that do not affect results.
#[derive(Debug, Clone)]
pub struct ExecOptions {
    pub pool: PoolConfig,
    /// Sleep before each task; lets tests interrupt a run part-way.
    pub task_delay: Duration,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            pool: PoolConfig::default(),
            task_delay: Duration::ZERO,
        }
    }
}

/// Everything a run consumes.
#[derive(Debug, Clone)]
pub struct RunInput {
    pub letters: Vec<Letter>,
    pub guidance: Guidance,
    pub context: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunPlan {
    pub run_id: String,
    pub batch_ids: Vec<String>,
}

fn short_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())[..16].to_string()
}

pub fn run_id(input: &RunInput, config: &RunConfig) -> String {
    let letters = serde_json::to_string(&input.letters).expect("letters serialize");
    let guidance = serde_json::to_string(&input.guidance).expect("guidance serializes");
    let config = serde_json::to_string(config).expect("config serializes");
    format!("run_{}", short_hash(&[&letters, &guidance, &input.context, &config]))
}

pub fn batch_id(run_id: &str, index: usize) -> String {
    format!("{run_id}-b{index}")
}

/// Identifier of the `ordinal`-th concern extracted from a letter.
pub fn concern_id(batch_id: &str, letter_id: &str, ordinal: usize) -> String {
    format!("c{}", short_hash(&[batch_id, letter_id, &ordinal.to_string()]))
}

/// Registered subroutines of one run, plus its stored inputs.
struct RunContext {
    guidance: Guidance,
    config: RunConfig,
    ingest: SubroutineHandle,
    pairs: BTreeMap<Stage, CritiquePair>,
}

impl RunContext {
    fn pair(&self, stage: Stage) -> &CritiquePair {
        &self.pairs[&stage]
    }

    fn subroutine_ids(&self) -> Vec<String> {
        self.pairs
            .values()
            .flat_map(|p| [p.target.subroutine_id.clone(), p.critique.subroutine_id.clone()])
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaskRef {
    run_id: String,
    batch_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    letter_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chunk: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    concern_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bin_name: Option<String>,
}

impl TaskRef {
    fn new(run_id: &str, batch_id: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            batch_id: batch_id.to_string(),
            letter_id: None,
            chunk: None,
            concern_ids: Vec::new(),
            bin_name: None,
        }
    }

    fn letter(&self) -> Result<&str, String> {
        self.letter_id.as_deref().ok_or_else(|| "task has no letter".to_string())
    }

    fn to_json(&self) -> Json {
        serde_json::to_value(self).expect("task ref serializes")
    }
}

/// Outcome of a reviewer rating submitted through the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub late: bool,
    pub report: PropagationReport,
}

/// One concern as stored, with its verified quotes and bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredConcern {
    pub concern_id: String,
    pub letter_id: String,
    pub statement: String,
    pub quotes: Vec<QuoteSpan>,
    pub bins: Vec<String>,
    pub invocation_id: String,
}

pub struct Pipeline {
    engine: Arc<Engine>,
    queue: Queue,
    exec: ExecOptions,
    runs: Mutex<HashMap<String, Arc<RunContext>>>,
}

impl Pipeline {
    pub fn new(engine: Arc<Engine>) -> PipelineResult<Self> {
        Self::with_options(engine, ExecOptions::default())
    }

    pub fn with_options(engine: Arc<Engine>, exec: ExecOptions) -> PipelineResult<Self> {
        engine.store().transaction(|tx| -> PipelineResult<()> {
            tx.execute_batch(DDL)?;
            Ok(())
        })?;
        let queue = Queue::new(engine.store().clone());
        Ok(Self {
            engine,
            queue,
            exec,
            runs: Mutex::new(HashMap::new()),
        })
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn queue(&self) -> &Queue {
        &self.queue
    }

    /// Persist a run and its batches. Planning the same inputs twice is a
    /// no-op that returns the same plan.
    pub fn plan(&self, input: &RunInput, config: &RunConfig) -> PipelineResult<RunPlan> {
        if input.letters.is_empty() {
            return Err(PipelineError::EmptyCorpus);
        }
        if config.batch_size == 0 || config.bin_batch == 0 {
            return Err(PipelineError::BadBatchSize);
        }
        crate::corpus::validate_corpus(&input.letters)?;
        input.guidance.validate()?;
        let run_id = run_id(input, config);
        let batches = partition(&input.letters, config.batch_size);
        let batch_ids: Vec<String> = (0..batches.len()).map(|i| batch_id(&run_id, i)).collect();
        self.engine.store().transaction(|tx| -> PipelineResult<()> {
            let exists: Option<String> = tx
                .query_row("SELECT run_id FROM nepa_runs WHERE run_id = ?1", [&run_id], |r| r.get(0))
                .optional()?;
            if exists.is_some() {
                return Ok(());
            }
            let now = store::tick(tx)?;
            tx.execute(
                "INSERT INTO nepa_runs(run_id, config_json, guidance_json, context, letter_count, batch_count, created_at)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
                params![
                    run_id,
                    serde_json::to_string(config).expect("config serializes"),
                    serde_json::to_string(&input.guidance).expect("guidance serializes"),
                    input.context,
                    input.letters.len() as i64,
                    batches.len() as i64,
                    now
                ],
            )?;
            for (i, batch) in batches.iter().enumerate() {
                store::create_batch(tx, &batch_ids[i], &run_id, i as i64, batch.len() as i64)?;
                for (pos, letter) in batch.iter().enumerate() {
                    tx.execute(
                        "INSERT INTO nepa_letters(run_id, letter_id, batch_id, position, text, metadata_json)
                         VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                        params![
                            run_id,
                            letter.letter_id,
                            batch_ids[i],
                            pos as i64,
                            letter.text,
                            serde_json::to_string(&letter.metadata).expect("metadata serializes")
                        ],
                    )?;
                }
            }
            Ok(())
        })?;
        Ok(RunPlan { run_id, batch_ids })
    }

    /// Plan and process every batch in order.
    pub fn run(&self, input: &RunInput, config: &RunConfig) -> PipelineResult<Vec<BatchReport>> {
        let plan = self.plan(input, config)?;
        plan.batch_ids.iter().map(|b| self.process_batch(b)).collect()
    }

    /// Process the first batch of a run that is not yet reviewable.
    /// Returns `None` once every batch has been processed.
    pub fn process_next_batch(&self, run_id: &str) -> PipelineResult<Option<BatchReport>> {
        for b in self.run_batches(run_id)? {
            if b.state == STATE_CREATED || b.state == STATE_RUNNING {
                return self.process_batch(&b.batch_id).map(Some);
            }
        }
        Ok(None)
    }

    /// Finish every unfinished batch of a run.
    pub fn resume(&self, run_id: &str) -> PipelineResult<Vec<BatchReport>> {
        let mut out = Vec::new();
        while let Some(r) = self.process_next_batch(run_id)? {
            out.push(r);
        }
        Ok(out)
    }

    /// Current report of every batch of a run.
    pub fn reports(&self, run_id: &str) -> PipelineResult<Vec<BatchReport>> {
        self.run_batches(run_id)?.iter().map(|b| self.report(&b.batch_id)).collect()
    }

    pub fn run_batches(&self, run_id: &str) -> PipelineResult<Vec<store::BatchRecord>> {
        let mut bs: Vec<_> = self
            .engine
            .store()
            .batches()?
            .into_iter()
            .filter(|b| b.run_id == run_id)
            .collect();
        bs.sort_by_key(|b| b.batch_index);
        Ok(bs)
    }

    pub fn run_ids(&self) -> PipelineResult<Vec<String>> {
        self.engine.store().read(|c| -> PipelineResult<Vec<String>> {
            let mut st = c.prepare("SELECT run_id FROM nepa_runs ORDER BY created_at")?;
            let ids = st.query_map([], |r| r.get(0))?.collect::<Result<_, _>>()?;
            Ok(ids)
        })
    }

    /// Drive one batch through its three phases and mark it reviewable.
    /// Safe to call again after an interruption.
    pub fn process_batch(&self, batch_id: &str) -> PipelineResult<BatchReport> {
        let batch = self.engine.store().batch(batch_id)?;
        if batch.state == STATE_REVIEWABLE || batch.state == STATE_SUPERSEDED {
            return self.report(batch_id);
        }
        let run_id = batch.run_id.clone();
        let cx = self.context(&run_id)?;
        if batch.state == STATE_CREATED {
            self.engine.store().transaction(|tx| -> PipelineResult<()> {
                for sid in cx.subroutine_ids() {
                    store::freeze_snapshot(tx, batch_id, &sid)?;
                }
                if batch.batch_index > 0 {
                    let prev = self::batch_id(&run_id, batch.batch_index as usize - 1);
                    if store::batch(tx, &prev)?.state == STATE_REVIEWABLE {
                        store::set_batch_state(tx, &prev, STATE_SUPERSEDED)?;
                    }
                }
                store::set_batch_state(tx, batch_id, STATE_RUNNING)?;
                Ok(())
            })?;
        }

        let handler = |task: &Task| self.handle(task);
        let tref = TaskRef::new(&run_id, batch_id);

        for letter_id in self.letter_ids(batch_id)? {
            let mut t = tref.clone();
            t.letter_id = Some(letter_id.clone());
            self.queue
                .enqueue(KIND_LETTER, t.to_json(), &format!("{batch_id}/letter/{letter_id}"))?;
        }
        run_until_idle(&self.queue, &handler, &self.exec.pool)?;

        let concerns = self.concern_rows(batch_id)?;
        for (i, chunk) in concerns.chunks(cx.config.bin_batch).enumerate() {
            let mut t = tref.clone();
            t.chunk = Some(i);
            t.concern_ids = chunk.iter().map(|c| c.0.clone()).collect();
            self.queue.enqueue(KIND_BIN, t.to_json(), &format!("{batch_id}/bin/{i}"))?;
        }
        run_until_idle(&self.queue, &handler, &self.exec.pool)?;

        let assigned = self.assigned_bins(batch_id)?;
        for bin in cx.guidance.bin_names() {
            if !assigned.contains(&bin) {
                continue;
            }
            let mut t = tref.clone();
            t.bin_name = Some(bin.clone());
            self.queue
                .enqueue(KIND_BIN_SUMMARY, t.to_json(), &format!("{batch_id}/bin_summary/{bin}"))?;
        }
        run_until_idle(&self.queue, &handler, &self.exec.pool)?;

        self.engine
            .store()
            .transaction(|tx| store::set_batch_state(tx, batch_id, STATE_REVIEWABLE))?;
        self.report(batch_id)
    }

    /// Apply a reviewer rating. Ratings of outputs from a superseded batch
    /// are still applied and flagged late.
    pub fn submit_feedback(&self, feedback: &SmeFeedback) -> PipelineResult<FeedbackOutcome> {
        let inv = self.engine.store().invocation(&feedback.invocation_id)?;
        let late = match &inv.batch_id {
            Some(b) => self.engine.store().batch(b).map(|b| b.state == STATE_SUPERSEDED).unwrap_or(false),
            None => false,
        };
        let report = auditlm::critique::propagate_sme_feedback(&self.engine, feedback, late)?;
        Ok(FeedbackOutcome { late, report })
    }

    fn context(&self, run_id: &str) -> PipelineResult<Arc<RunContext>> {
        if let Some(cx) = self.runs.lock().get(run_id) {
            return Ok(cx.clone());
        }
        let row: Option<(String, String, String)> = self.engine.store().read(|c| -> PipelineResult<_> {
            Ok(c.query_row(
                "SELECT config_json, guidance_json, context FROM nepa_runs WHERE run_id = ?1",
                [run_id],
                |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)),
            )
            .optional()?)
        })?;
        let (config, guidance, context) = row.ok_or_else(|| PipelineError::UnknownRun(run_id.to_string()))?;
        let corrupt = |e: serde_json::Error| PipelineError::Store(StoreError::Corrupt(e.to_string()));
        let config: RunConfig = serde_json::from_str(&config).map_err(corrupt)?;
        let guidance: Guidance = serde_json::from_str(&guidance).map_err(corrupt)?;
        let ingest = self.engine.register(&ingest_spec())?;
        let mut pairs = BTreeMap::new();
        for stage in Stage::ALL {
            pairs.insert(
                stage,
                register_pair(&self.engine, &stage_spec(stage, &context), config.dims.get(stage))?,
            );
        }
        let cx = Arc::new(RunContext {
            guidance,
            config,
            ingest,
            pairs,
        });
        self.runs.lock().insert(run_id.to_string(), cx.clone());
        Ok(cx)
    }

    fn handle(&self, task: &Task) -> Result<Vec<NewTask>, String> {
        if !self.exec.task_delay.is_zero() {
            std::thread::sleep(self.exec.task_delay);
        }
        let tref: TaskRef = serde_json::from_value(task.payload.clone()).map_err(|e| e.to_string())?;
        let cx = self.context(&tref.run_id).map_err(|e| e.to_string())?;
        let out = match task.kind.as_str() {
            KIND_LETTER => self.letter_task(&cx, &tref),
            KIND_EXTRACT => self.extract_task(&cx, &tref).map(|()| vec![]),
            KIND_BIN => self.bin_task(&cx, &tref).map(|()| vec![]),
            KIND_BIN_SUMMARY => self.bin_summary_task(&cx, &tref).map(|()| vec![]),
            other => return Err(format!("unknown task kind `{other}`")),
        };
        out.map_err(|e| e.to_string())
    }

    fn snapshots(&self, batch_id: &str, pair: &CritiquePair) -> PipelineResult<(Option<Snapshot>, Option<Snapshot>)> {
        let s = self.engine.store();
        Ok((
            s.snapshot(batch_id, &pair.target.subroutine_id)?,
            s.snapshot(batch_id, &pair.critique.subroutine_id)?,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_loop(
        &self,
        cx: &RunContext,
        stage: Stage,
        batch_id: &str,
        key: String,
        input: &Record,
        parents: Vec<String>,
        output_schema: Option<auditlm::Schema>,
        output_view: Option<auditlm::critique::OutputView<'_>>,
    ) -> PipelineResult<LoopOutcome> {
        let pair = cx.pair(stage);
        let (target_snapshot, critique_snapshot) = self.snapshots(batch_id, pair)?;
        let lcx = LoopContext {
            parents,
            key: Some(key),
            batch_id: Some(batch_id.to_string()),
            stage: Some(stage.as_str().to_string()),
            target_snapshot,
            critique_snapshot,
            output_schema,
            output_view,
        };
        Ok(self_critique_loop(&self.engine, pair, input, &cx.config.loop_config, &lcx)?)
    }

    fn letter_task(&self, cx: &RunContext, t: &TaskRef) -> PipelineResult<Vec<NewTask>> {
        let letter_id = t.letter().map_err(PipelineError::Stage)?;
        let text = self.letter_text(&t.run_id, letter_id)?;
        let b = &t.batch_id;
        let ingest = self.engine.record_source(
            &cx.ingest,
            &Record::new().with("letter_id", letter_id).with("text", text.as_str()),
            InvokeOptions::new()
                .key(format!("{b}/{letter_id}/ingest"))
                .batch(b.as_str(), INGEST_STAGE),
        )?;
        let out = self.run_loop(
            cx,
            Stage::Summarize,
            b,
            format!("{b}/{letter_id}/summarize"),
            &Record::new().with("letter", text.as_str()),
            vec![ingest.invocation_id.clone()],
            None,
            None,
        )?;
        let summary = out.best_output.text("summary").unwrap_or_default().to_string();
        self.engine.store().transaction(|tx| -> PipelineResult<()> {
            tx.execute(
                "INSERT OR IGNORE INTO nepa_summaries(batch_id, letter_id, invocation_id, summary) VALUES (?1, ?2, ?3, ?4)",
                params![b, letter_id, out.best.invocation_id, summary],
            )?;
            Ok(())
        })?;
        Ok(vec![NewTask::new(KIND_EXTRACT, t.to_json(), format!("{b}/extract/{letter_id}"))])
    }

    fn extract_task(&self, cx: &RunContext, t: &TaskRef) -> PipelineResult<()> {
        let letter_id = t.letter().map_err(PipelineError::Stage)?;
        let b = &t.batch_id;
        if self.extraction_done(b, letter_id)? {
            return Ok(());
        }
        let text = self.letter_text(&t.run_id, letter_id)?;
        let (summary_inv, summary): (String, String) = self.engine.store().read(|c| -> PipelineResult<_> {
            Ok(c.query_row(
                "SELECT invocation_id, summary FROM nepa_summaries WHERE batch_id = ?1 AND letter_id = ?2",
                params![b, letter_id],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )?)
        })?;
        let out = self.run_loop(
            cx,
            Stage::Extract,
            b,
            format!("{b}/{letter_id}/extract"),
            &Record::new().with("letter", text.as_str()).with("summary", summary.as_str()),
            vec![summary_inv],
            None,
            None,
        )?;
        let inv = out.best.invocation_id.clone();

        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        let items = out.best_output.get("concerns").and_then(Value::as_list).unwrap_or_default();
        for (j, item) in items.iter().enumerate() {
            let Some(rec) = item.as_record() else { continue };
            let statement = rec.text("statement").unwrap_or_default().to_string();
            let quotes: Vec<String> = rec
                .get("quotes")
                .and_then(Value::as_list)
                .unwrap_or_default()
                .iter()
                .filter_map(|q| q.as_text().map(str::to_string))
                .collect();
            let spans: Vec<QuoteSpan> = quotes
                .iter()
                .filter(|q| !q.is_empty())
                .filter_map(|q| verify_quote(q, &text, &cx.config.matching))
                .collect();
            if spans.is_empty() {
                dropped.push(json!({"ordinal": j, "statement": statement, "quotes": quotes}));
            } else {
                kept.push((concern_id(b, letter_id, j), j, statement, spans));
            }
        }

        self.engine.store().transaction(|tx| -> PipelineResult<()> {
            if extraction_done(tx, b, letter_id)? {
                return Ok(());
            }
            for (cid, j, statement, spans) in &kept {
                tx.execute(
                    "INSERT INTO nepa_concerns(concern_id, batch_id, letter_id, ordinal, statement, invocation_id)
                     VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                    params![cid, b, letter_id, *j as i64, statement, inv],
                )?;
                for (k, s) in spans.iter().enumerate() {
                    tx.execute(
                        "INSERT INTO nepa_quote_spans(concern_id, ordinal, raw_quote, start, end, similarity)
                         VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
                        params![cid, k as i64, s.raw_quote, s.start as i64, s.end as i64, s.similarity],
                    )?;
                }
            }
            for d in &dropped {
                let mut detail = d.clone();
                detail["letter_id"] = json!(letter_id);
                store::record_event(tx, EVENT_FAILED_VERIFICATION, Some(&inv), Some(b), &detail)?;
            }
            tx.execute(
                "INSERT INTO nepa_extractions(batch_id, letter_id, invocation_id, kept, dropped) VALUES (?1, ?2, ?3, ?4, ?5)",
                params![b, letter_id, inv, kept.len() as i64, dropped.len() as i64],
            )?;
            Ok(())
        })
    }

    fn bin_task(&self, cx: &RunContext, t: &TaskRef) -> PipelineResult<()> {
        let b = &t.batch_id;
        let chunk = t.chunk.ok_or_else(|| PipelineError::Stage("bin task has no chunk".into()))?;
        if self.chunk_done(b, chunk)? {
            return Ok(());
        }
        let all = self.concern_rows(b)?;
        let by_id: HashMap<&str, &(String, String, String)> = all.iter().map(|c| (c.0.as_str(), c)).collect();
        let rows: Vec<&(String, String, String)> = t
            .concern_ids
            .iter()
            .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| PipelineError::Stage(format!("unknown concern `{id}`"))))
            .collect::<Result<_, _>>()?;
        let keys = concern_keys(&t.concern_ids).map_err(|e| PipelineError::Stage(e.to_string()))?;
        let keyed: Vec<(String, String)> = keys.iter().cloned().zip(rows.iter().map(|r| r.1.clone())).collect();
        let bin_names = cx.guidance.bin_names();
        let schema = binning_schema(&keyed, &bin_names).map_err(|e| PipelineError::Stage(e.to_string()))?;

        let concerns: Vec<Value> = keyed
            .iter()
            .map(|(k, s)| Value::Record(Record::new().with("key", k.as_str()).with("statement", s.as_str())))
            .collect();
        let bins: Vec<Value> = cx
            .guidance
            .bins
            .iter()
            .map(|d| Value::Record(Record::new().with("name", d.bin_name.as_str()).with("guidance", d.guidance.as_str())))
            .collect();
        let input = Record::new()
            .with("concerns", concerns)
            .with("bins", bins)
            .with("instructions", cx.guidance.instructions.as_str());
        let parents: BTreeSet<String> = rows.iter().map(|r| r.2.clone()).collect();
        let view = |r: &Record| assignments_view(r);
        let out = self.run_loop(
            cx,
            Stage::Bin,
            b,
            format!("{b}/bin/{chunk}"),
            &input,
            parents.into_iter().collect(),
            Some(schema),
            Some(&view),
        )?;
        let inv = out.best.invocation_id.clone();
        let picked = assignments(&out.best_output);
        let mut rows_out = Vec::new();
        for (key, id) in keys.iter().zip(&t.concern_ids) {
            let bins = picked.get(key).cloned().unwrap_or_default();
            if bins.is_empty() {
                return Err(PipelineError::Stage(format!("concern `{id}` received no bin")));
            }
            for bin in bins {
                if !cx.guidance.has_bin(&bin) {
                    return Err(PipelineError::Stage(format!("unknown bin `{bin}`")));
                }
                rows_out.push((id.clone(), bin));
            }
        }
        self.engine.store().transaction(|tx| -> PipelineResult<()> {
            if chunk_done(tx, b, chunk)? {
                return Ok(());
            }
            for (id, bin) in &rows_out {
                tx.execute(
                    "INSERT OR IGNORE INTO nepa_bin_assignments(concern_id, bin_name, invocation_id) VALUES (?1, ?2, ?3)",
                    params![id, bin, inv],
                )?;
            }
            tx.execute(
                "INSERT INTO nepa_bin_chunks(batch_id, chunk, invocation_id) VALUES (?1, ?2, ?3)",
                params![b, chunk as i64, inv],
            )?;
            Ok(())
        })
    }

    fn bin_summary_task(&self, cx: &RunContext, t: &TaskRef) -> PipelineResult<()> {
        let b = &t.batch_id;
        let bin = t
            .bin_name
            .as_deref()
            .ok_or_else(|| PipelineError::Stage("bin summary task has no bin".into()))?;
        if self.bin_summary_done(b, bin)? {
            return Ok(());
        }
        let def = cx
            .guidance
            .bins
            .iter()
            .find(|d| d.bin_name == bin)
            .ok_or_else(|| PipelineError::Stage(format!("unknown bin `{bin}`")))?;
        let members: Vec<StoredConcern> = self
            .concerns(b)?
            .into_iter()
            .filter(|c| c.bins.iter().any(|x| x == bin))
            .collect();
        if members.is_empty() {
            return Ok(());
        }
        let parents: BTreeSet<String> = self.engine.store().read(|c| -> PipelineResult<_> {
            let mut st = c.prepare(
                "SELECT DISTINCT a.invocation_id FROM nepa_bin_assignments a
                 JOIN nepa_concerns c ON c.concern_id = a.concern_id
                 WHERE c.batch_id = ?1 AND a.bin_name = ?2",
            )?;
            let ids = st.query_map(params![b, bin], |r| r.get(0))?.collect::<Result<_, _>>()?;
            Ok(ids)
        })?;
        let concerns: Vec<Value> = members
            .iter()
            .map(|c| {
                let quotes: Vec<Value> = c.quotes.iter().map(|q| Value::from(q.raw_quote.as_str())).collect();
                Value::Record(
                    Record::new()
                        .with("letter_id", c.letter_id.as_str())
                        .with("statement", c.statement.as_str())
                        .with("quotes", quotes),
                )
            })
            .collect();
        let input = Record::new()
            .with("bin_name", bin)
            .with("bin_guidance", def.guidance.as_str())
            .with("concerns", concerns);
        let out = self.run_loop(
            cx,
            Stage::BinSummary,
            b,
            format!("{b}/bin_summary/{bin}"),
            &input,
            parents.into_iter().collect(),
            None,
            None,
        )?;
        let inv = out.best.invocation_id.clone();
        let summary = out.best_output.text("summary").unwrap_or_default().to_string();

        let mut texts: HashMap<String, String> = HashMap::new();
        for c in &members {
            if !texts.contains_key(&c.letter_id) {
                texts.insert(c.letter_id.clone(), self.letter_text(&t.run_id, &c.letter_id)?);
            }
        }
        let mut valid: Vec<Citation> = Vec::new();
        let mut rejected: Vec<Json> = Vec::new();
        let cites = out.best_output.get("citations").and_then(Value::as_list).unwrap_or_default();
        for item in cites {
            let Some(rec) = item.as_record() else { continue };
            let letter_id = rec.text("letter_id").unwrap_or_default();
            let quote = rec.text("quote").unwrap_or_default();
            let Some(text) = texts.get(letter_id) else {
                rejected.push(json!({"letter_id": letter_id, "quote": quote, "reason": "letter not assigned to bin"}));
                continue;
            };
            let span = (!quote.is_empty())
                .then(|| verify_quote(quote, text, &cx.config.matching))
                .flatten();
            let Some(span) = span else {
                rejected.push(json!({"letter_id": letter_id, "quote": quote, "reason": "quote not found in letter"}));
                continue;
            };
            let concern_id = best_concern(&members, letter_id, &span);
            valid.push(Citation {
                letter_id: letter_id.to_string(),
                concern_id,
                span,
            });
        }
        if valid.is_empty() {
            return Err(PipelineError::Stage(format!(
                "bin `{bin}`: no valid citations ({} rejected)",
                rejected.len()
            )));
        }
        self.engine.store().transaction(|tx| -> PipelineResult<()> {
            if bin_summary_done(tx, b, bin)? {
                return Ok(());
            }
            for (k, c) in valid.iter().enumerate() {
                tx.execute(
                    "INSERT INTO nepa_citations(batch_id, bin_name, ordinal, letter_id, concern_id, raw_quote, start, end, similarity)
                     VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
                    params![
                        b,
                        bin,
                        k as i64,
                        c.letter_id,
                        c.concern_id,
                        c.span.raw_quote,
                        c.span.start as i64,
                        c.span.end as i64,
                        c.span.similarity
                    ],
                )?;
            }
            for r in &rejected {
                let mut detail = r.clone();
                detail["bin_name"] = json!(bin);
                store::record_event(tx, EVENT_CITATION_REJECTED, Some(&inv), Some(b), &detail)?;
            }
            tx.execute(
                "INSERT INTO nepa_bin_summaries(batch_id, bin_name, summary, invocation_id) VALUES (?1, ?2, ?3, ?4)",
                params![b, bin, summary, inv],
            )?;
            Ok(())
        })
    }

    // --- reads ---------------------------------------------------------------

    fn letter_ids(&self, batch_id: &str) -> PipelineResult<Vec<String>> {
        self.engine.store().read(|c| -> PipelineResult<_> {
            let mut st = c.prepare("SELECT letter_id FROM nepa_letters WHERE batch_id = ?1 ORDER BY position")?;
            let ids = st.query_map([batch_id], |r| r.get(0))?.collect::<Result<_, _>>()?;
            Ok(ids)
        })
    }

    pub fn letters(&self, batch_id: &str) -> PipelineResult<Vec<Letter>> {
        self.engine.store().read(|c| -> PipelineResult<_> {
            let mut st = c.prepare(
                "SELECT letter_id, text, metadata_json FROM nepa_letters WHERE batch_id = ?1 ORDER BY position",
            )?;
            let rows: Vec<(String, String, String)> = st
                .query_map([batch_id], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?
                .collect::<Result<_, _>>()?;
            Ok(rows
                .into_iter()
                .map(|(id, text, meta)| {
                    let mut l = Letter::new(id, text);
                    l.metadata = serde_json::from_str(&meta).unwrap_or_default();
                    l
                })
                .collect())
        })
    }

    fn letter_text(&self, run_id: &str, letter_id: &str) -> PipelineResult<String> {
        self.engine
            .store()
            .read(|c| -> PipelineResult<_> {
                Ok(c.query_row(
                    "SELECT text FROM nepa_letters WHERE run_id = ?1 AND letter_id = ?2",
                    params![run_id, letter_id],
                    |r| r.get(0),
                )
                .optional()?)
            })?
            .ok_or_else(|| PipelineError::UnknownLetter(letter_id.to_string()))
    }

    fn extraction_done(&self, batch_id: &str, letter_id: &str) -> PipelineResult<bool> {
        self.engine.store().read(|c| extraction_done(c, batch_id, letter_id))
    }

    fn chunk_done(&self, batch_id: &str, chunk: usize) -> PipelineResult<bool> {
        self.engine.store().read(|c| chunk_done(c, batch_id, chunk))
    }

    fn bin_summary_done(&self, batch_id: &str, bin: &str) -> PipelineResult<bool> {
        self.engine.store().read(|c| bin_summary_done(c, batch_id, bin))
    }

    /// (concern_id, statement, extraction invocation) sorted by id.
    fn concern_rows(&self, batch_id: &str) -> PipelineResult<Vec<(String, String, String)>> {
        self.engine.store().read(|c| -> PipelineResult<_> {
            let mut st = c.prepare(
                "SELECT concern_id, statement, invocation_id FROM nepa_concerns WHERE batch_id = ?1 ORDER BY concern_id",
            )?;
            let rows = st
                .query_map([batch_id], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?
                .collect::<Result<_, _>>()?;
            Ok(rows)
        })
    }

    fn assigned_bins(&self, batch_id: &str) -> PipelineResult<BTreeSet<String>> {
        self.engine.store().read(|c| -> PipelineResult<_> {
            let mut st = c.prepare(
                "SELECT DISTINCT a.bin_name FROM nepa_bin_assignments a
                 JOIN nepa_concerns c ON c.concern_id = a.concern_id WHERE c.batch_id = ?1",
            )?;
            let rows = st.query_map([batch_id], |r| r.get(0))?.collect::<Result<_, _>>()?;
            Ok(rows)
        })
    }

    /// Stored concerns of a batch in letter order, then extraction order.
    pub fn concerns(&self, batch_id: &str) -> PipelineResult<Vec<StoredConcern>> {
        self.engine.store().read(|c| -> PipelineResult<_> {
            let mut st = c.prepare(
                "SELECT c.concern_id, c.letter_id, c.statement, c.invocation_id FROM nepa_concerns c
                 JOIN nepa_letters l ON l.batch_id = c.batch_id AND l.letter_id = c.letter_id
                 WHERE c.batch_id = ?1 ORDER BY l.position, c.ordinal",
            )?;
            let heads: Vec<(String, String, String, String)> = st
                .query_map([batch_id], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?)))?
                .collect::<Result<_, _>>()?;
            let mut spans = c.prepare(
                "SELECT raw_quote, start, end, similarity FROM nepa_quote_spans WHERE concern_id = ?1 ORDER BY ordinal",
            )?;
            let mut bins = c.prepare("SELECT bin_name FROM nepa_bin_assignments WHERE concern_id = ?1 ORDER BY bin_name")?;
            let mut out = Vec::with_capacity(heads.len());
            for (concern_id, letter_id, statement, invocation_id) in heads {
                let quotes = spans
                    .query_map([&concern_id], |r| {
                        Ok(QuoteSpan {
                            raw_quote: r.get(0)?,
                            start: r.get::<_, i64>(1)? as usize,
                            end: r.get::<_, i64>(2)? as usize,
                            similarity: r.get(3)?,
                        })
                    })?
                    .collect::<Result<_, _>>()?;
                let bins = bins.query_map([&concern_id], |r| r.get(0))?.collect::<Result<_, _>>()?;
                out.push(StoredConcern {
                    concern_id,
                    letter_id,
                    statement,
                    quotes,
                    bins,
                    invocation_id,
                });
            }
            Ok(out)
        })
    }

    /// Every persisted quote span with the text of its letter, for
    /// re-verification.
    pub fn all_quote_spans(&self) -> PipelineResult<Vec<(String, QuoteSpan, String)>> {
        self.engine.store().read(|c| -> PipelineResult<_> {
            let mut st = c.prepare(
                "SELECT s.concern_id, s.raw_quote, s.start, s.end, s.similarity, l.text
                 FROM nepa_quote_spans s
                 JOIN nepa_concerns c ON c.concern_id = s.concern_id
                 JOIN batches b ON b.batch_id = c.batch_id
                 JOIN nepa_letters l ON l.run_id = b.run_id AND l.letter_id = c.letter_id
                 UNION ALL
                 SELECT t.concern_id, t.raw_quote, t.start, t.end, t.similarity, l.text
                 FROM nepa_citations t
                 JOIN batches b ON b.batch_id = t.batch_id
                 JOIN nepa_letters l ON l.run_id = b.run_id AND l.letter_id = t.letter_id",
            )?;
            let rows = st
                .query_map([], |r| {
                    Ok((
                        r.get(0)?,
                        QuoteSpan {
                            raw_quote: r.get(1)?,
                            start: r.get::<_, i64>(2)? as usize,
                            end: r.get::<_, i64>(3)? as usize,
                            similarity: r.get(4)?,
                        },
                        r.get(5)?,
                    ))
                })?
                .collect::<Result<_, _>>()?;
            Ok(rows)
        })
    }

    /// Every persisted bin name, from assignments and summaries.
    pub fn all_bin_names(&self) -> PipelineResult<Vec<String>> {
        self.engine.store().read(|c| -> PipelineResult<_> {
            let mut st = c.prepare(
                "SELECT bin_name FROM nepa_bin_assignments UNION SELECT bin_name FROM nepa_bin_summaries",
            )?;
            let rows = st.query_map([], |r| r.get(0))?.collect::<Result<_, _>>()?;
            Ok(rows)
        })
    }

    /// Guidance a run was started with.
    pub fn guidance(&self, run_id: &str) -> PipelineResult<Guidance> {
        Ok(self.context(run_id)?.guidance.clone())
    }

    pub fn bin_reports(&self, batch_id: &str) -> PipelineResult<Vec<BinReport>> {
        self.engine.store().read(|c| -> PipelineResult<_> {
            let mut st = c.prepare(
                "SELECT bin_name, summary, invocation_id FROM nepa_bin_summaries WHERE batch_id = ?1 ORDER BY bin_name",
            )?;
            let heads: Vec<(String, String, String)> = st
                .query_map([batch_id], |r| Ok((r.get(0)?, r.get(1)?, r.get(2)?)))?
                .collect::<Result<_, _>>()?;
            let mut cites = c.prepare(
                "SELECT letter_id, concern_id, raw_quote, start, end, similarity FROM nepa_citations
                 WHERE batch_id = ?1 AND bin_name = ?2 ORDER BY ordinal",
            )?;
            let mut out = Vec::new();
            for (bin_name, summary, invocation_id) in heads {
                let citations = cites
                    .query_map(params![batch_id, bin_name], |r| {
                        Ok(Citation {
                            letter_id: r.get(0)?,
                            concern_id: r.get(1)?,
                            span: QuoteSpan {
                                raw_quote: r.get(2)?,
                                start: r.get::<_, i64>(3)? as usize,
                                end: r.get::<_, i64>(4)? as usize,
                                similarity: r.get(5)?,
                            },
                        })
                    })?
                    .collect::<Result<_, _>>()?;
                out.push(BinReport {
                    bin_name,
                    summary,
                    invocation_id,
                    citations,
                });
            }
            Ok(out)
        })
    }

    /// Tasks of a batch that exhausted their attempts.
    pub fn dead_tasks(&self, batch_id: &str) -> PipelineResult<Vec<DeadTask>> {
        Ok(self
            .queue
            .tasks(Some(TaskState::Dead))?
            .into_iter()
            .filter(|t| t.payload.get("batch_id").and_then(Json::as_str) == Some(batch_id))
            .map(|t| DeadTask {
                kind: t.kind,
                key: t.idempotency_key,
                attempts: t.attempts,
                error: t.last_error,
            })
            .collect())
    }

    pub fn report(&self, batch_id: &str) -> PipelineResult<BatchReport> {
        let batch = self.engine.store().batch(batch_id)?;
        let letters = self.letter_ids(batch_id)?;
        let concerns = self.concerns(batch_id)?;
        let (summaries, extractions): (BTreeMap<String, String>, BTreeMap<String, ExtractionRow>) =
            self.engine.store().read(|c| -> PipelineResult<_> {
                let mut st = c.prepare("SELECT letter_id, invocation_id FROM nepa_summaries WHERE batch_id = ?1")?;
                let s = st
                    .query_map([batch_id], |r| Ok((r.get(0)?, r.get(1)?)))?
                    .collect::<Result<_, _>>()?;
                let mut st = c.prepare(
                    "SELECT letter_id, invocation_id, kept, dropped FROM nepa_extractions WHERE batch_id = ?1",
                )?;
                let e = st
                    .query_map([batch_id], |r| Ok((r.get(0)?, (r.get(1)?, r.get(2)?, r.get(3)?))))?
                    .collect::<Result<_, _>>()?;
                Ok((s, e))
            })?;
        let bins = self.bin_reports(batch_id)?;
        let letter_status = letters
            .iter()
            .map(|id| {
                let mine: Vec<&StoredConcern> = concerns.iter().filter(|c| &c.letter_id == id).collect();
                let binned = mine.iter().filter(|c| !c.bins.is_empty()).count();
                let cited = bins.iter().any(|b| b.citations.iter().any(|c| &c.letter_id == id));
                let ex = extractions.get(id);
                LetterStatus {
                    letter_id: id.clone(),
                    summary_invocation: summaries.get(id).cloned(),
                    extract_invocation: ex.map(|e| e.0.clone()),
                    concerns: mine.len(),
                    dropped_concerns: ex.map(|e| e.2 as usize).unwrap_or(0),
                    binned_concerns: binned,
                    cited,
                }
            })
            .collect();
        let events = self.engine.store().events(None)?;
        let count = |kind: &str| {
            events
                .iter()
                .filter(|e| e.kind == kind && e.batch_id.as_deref() == Some(batch_id))
                .count()
        };
        Ok(BatchReport {
            run_id: batch.run_id,
            batch_id: batch.batch_id,
            batch_index: batch.batch_index as usize,
            state: batch.state,
            letters: letter_status,
            concerns: concerns.len(),
            failed_verifications: count(EVENT_FAILED_VERIFICATION),
            rejected_citations: count(EVENT_CITATION_REJECTED),
            bins,
            dead_tasks: self.dead_tasks(batch_id)?,
        })
    }

    /// Letters, concerns, quote spans and bins of a run, in the form the
    /// evaluator reads.
    pub fn export(&self, run_id: &str) -> PipelineResult<crate::eval::SystemOutput> {
        let mut letters = Vec::new();
        for b in self.run_batches(run_id)? {
            let concerns = self.concerns(&b.batch_id)?;
            for l in self.letters(&b.batch_id)? {
                let mine = concerns
                    .iter()
                    .filter(|c| c.letter_id == l.letter_id)
                    .map(|c| crate::eval::SystemConcernRecord {
                        concern_id: c.concern_id.clone(),
                        statement: c.statement.clone(),
                        bins: c.bins.clone(),
                        quotes: c.quotes.clone(),
                    })
                    .collect();
                letters.push(crate::eval::SystemLetter {
                    letter_id: l.letter_id,
                    text: l.text,
                    concerns: mine,
                });
            }
        }
        Ok(crate::eval::SystemOutput { letters })
    }
}

/// The assigned concern of `letter_id` whose quotes overlap `span` most;
/// the first such concern when none overlaps.
fn best_concern(members: &[StoredConcern], letter_id: &str, span: &QuoteSpan) -> String {
    let overlap = |c: &StoredConcern| -> usize {
        c.quotes
            .iter()
            .map(|q| q.end.min(span.end).saturating_sub(q.start.max(span.start)))
            .sum()
    };
    let mine: Vec<&StoredConcern> = members.iter().filter(|c| c.letter_id == letter_id).collect();
    let mut best = mine[0];
    for c in &mine[1..] {
        if overlap(c) > overlap(best) {
            best = c;
        }
    }
    best.concern_id.clone()
}

fn extraction_done(c: &Connection, batch_id: &str, letter_id: &str) -> PipelineResult<bool> {
    Ok(c.query_row(
        "SELECT 1 FROM nepa_extractions WHERE batch_id = ?1 AND letter_id = ?2",
        params![batch_id, letter_id],
        |_| Ok(()),
    )
    .optional()?
    .is_some())
}

fn chunk_done(c: &Connection, batch_id: &str, chunk: usize) -> PipelineResult<bool> {
    Ok(c.query_row(
        "SELECT 1 FROM nepa_bin_chunks WHERE batch_id = ?1 AND chunk = ?2",
        params![batch_id, chunk as i64],
        |_| Ok(()),
    )
    .optional()?
    .is_some())
}

fn bin_summary_done(c: &Connection, batch_id: &str, bin: &str) -> PipelineResult<bool> {
    Ok(c.query_row(
        "SELECT 1 FROM nepa_bin_summaries WHERE batch_id = ?1 AND bin_name = ?2",
        params![batch_id, bin],
        |_| Ok(()),
    )
    .optional()?
    .is_some())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_stable_and_distinct() {
        assert_eq!(concern_id("b", "l", 0), concern_id("b", "l", 0));
        assert_ne!(concern_id("b", "l", 0), concern_id("b", "l", 1));
        assert_ne!(concern_id("b", "l1", 0), concern_id("b1", "l", 0));
        assert!(auditlm::schema::is_identifier(&concern_id("run_x-b0", "letter 7", 3)));
        assert_eq!(batch_id("run_a", 2), "run_a-b2");
    }

    #[test]
    fn best_concern_prefers_overlap() {
        let q = |s, e| QuoteSpan { raw_quote: String::new(), start: s, end: e, similarity: 1.0 };
        let c = |id: &str, letter: &str, spans: Vec<QuoteSpan>| StoredConcern {
            concern_id: id.into(),
            letter_id: letter.into(),
            statement: String::new(),
            quotes: spans,
            bins: vec![],
            invocation_id: String::new(),
        };
        let members = vec![c("a", "L", vec![q(0, 5)]), c("b", "L", vec![q(10, 30)]), c("z", "M", vec![q(10, 30)])];
        assert_eq!(best_concern(&members, "L", &q(12, 20)), "b");
        assert_eq!(best_concern(&members, "L", &q(50, 60)), "a");
    }
}
