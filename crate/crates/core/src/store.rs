//! Relational source of truth for subroutines, arms, invocations, dependency
//! edges, feedback, batches and queue tasks.
//!
//! Invocation, edge, loss-event and feedback rows are append-only. Arm
//! counters, batch state and task state are the only rows that change.
//! All timestamps come from a logical clock kept in the `meta` table, so
//! ordering by `created_at` is a topological order of the dependency DAG.
//!
//! The table layout is documented in `docs/store-schema.md`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::Duration;

use parking_lot::Mutex;
use rusqlite::{params, Connection, OptionalExtension, Row, Transaction, TransactionBehavior};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::bandit::{ArmId, ArmStats, BanditError, BanditState};
use crate::schema::SubroutineSpec;

pub const SCHEMA_VERSION: i64 = 1;

const DDL: &str = r#"
CREATE TABLE IF NOT EXISTS meta (
    key   TEXT PRIMARY KEY,
    value INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS subroutines (
    subroutine_id    TEXT PRIMARY KEY,
    name             TEXT NOT NULL,
    spec_json        TEXT NOT NULL,
    spec_hash        TEXT NOT NULL,
    rating_dims_json TEXT,
    created_at       INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS arms (
    subroutine_id TEXT NOT NULL REFERENCES subroutines(subroutine_id),
    arm_id        TEXT NOT NULL,
    prompt        TEXT NOT NULL,
    pulls         INTEGER NOT NULL DEFAULT 0,
    observations  INTEGER NOT NULL DEFAULT 0,
    loss_sum      REAL NOT NULL DEFAULT 0,
    created_at    INTEGER NOT NULL,
    PRIMARY KEY (subroutine_id, arm_id)
);
CREATE TABLE IF NOT EXISTS invocations (
    invocation_id      TEXT PRIMARY KEY,
    invocation_key     TEXT UNIQUE,
    subroutine_id      TEXT NOT NULL REFERENCES subroutines(subroutine_id),
    arm_id             TEXT,
    input_json         TEXT NOT NULL,
    output_json        TEXT,
    raw_output         TEXT,
    user_payload       TEXT NOT NULL,
    output_schema_json TEXT NOT NULL,
    output_schema_hash TEXT NOT NULL,
    seed               INTEGER NOT NULL,
    attempts           INTEGER NOT NULL,
    status             TEXT NOT NULL,
    error              TEXT,
    batch_id           TEXT,
    stage              TEXT,
    snapshot_version   INTEGER,
    created_at         INTEGER NOT NULL UNIQUE
);
CREATE INDEX IF NOT EXISTS invocations_batch ON invocations(batch_id, stage);
CREATE TABLE IF NOT EXISTS edges (
    child  TEXT NOT NULL REFERENCES invocations(invocation_id),
    parent TEXT NOT NULL REFERENCES invocations(invocation_id),
    PRIMARY KEY (child, parent)
);
CREATE INDEX IF NOT EXISTS edges_parent ON edges(parent);
CREATE TABLE IF NOT EXISTS loss_events (
    event_key     TEXT PRIMARY KEY,
    subroutine_id TEXT NOT NULL,
    arm_id        TEXT NOT NULL,
    invocation_id TEXT,
    loss          REAL NOT NULL,
    source        TEXT NOT NULL,
    created_at    INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS feedback (
    feedback_id            TEXT PRIMARY KEY,
    invocation_id          TEXT NOT NULL REFERENCES invocations(invocation_id),
    source                 TEXT NOT NULL,
    reviewer_id            TEXT,
    critique_invocation_id TEXT,
    ratings_json           TEXT,
    loss                   REAL NOT NULL,
    rationale              TEXT,
    late                   INTEGER NOT NULL DEFAULT 0,
    submission_id          TEXT UNIQUE,
    created_at             INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS feedback_invocation ON feedback(invocation_id);
CREATE TABLE IF NOT EXISTS batches (
    batch_id    TEXT PRIMARY KEY,
    run_id      TEXT NOT NULL,
    batch_index INTEGER NOT NULL,
    state       TEXT NOT NULL,
    size        INTEGER NOT NULL,
    created_at  INTEGER NOT NULL,
    updated_at  INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS arm_snapshots (
    batch_id      TEXT NOT NULL,
    subroutine_id TEXT NOT NULL,
    version       INTEGER NOT NULL,
    state_json    TEXT NOT NULL,
    PRIMARY KEY (batch_id, subroutine_id)
);
CREATE TABLE IF NOT EXISTS events (
    event_id      INTEGER PRIMARY KEY AUTOINCREMENT,
    kind          TEXT NOT NULL,
    invocation_id TEXT,
    batch_id      TEXT,
    detail_json   TEXT NOT NULL,
    created_at    INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS tasks (
    task_id         TEXT PRIMARY KEY,
    kind            TEXT NOT NULL,
    payload         TEXT NOT NULL,
    idempotency_key TEXT NOT NULL UNIQUE,
    attempts        INTEGER NOT NULL DEFAULT 0,
    max_attempts    INTEGER NOT NULL,
    state           TEXT NOT NULL,
    lease_owner     TEXT,
    lease_expiry    INTEGER,
    last_error      TEXT,
    created_at      INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS tasks_state ON tasks(state, created_at);
CREATE TABLE IF NOT EXISTS passed_over (
    invocation_id TEXT PRIMARY KEY REFERENCES invocations(invocation_id),
    selected_id   TEXT NOT NULL REFERENCES invocations(invocation_id)
);
"#;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("database error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("invocation `{0}` already exists")]
    DuplicateId(String),
    #[error("parent invocation `{0}` does not exist")]
    DanglingParent(String),
    #[error("edge {child} -> {parent} would create a cycle")]
    Cycle { child: String, parent: String },
    #[error("unknown invocation `{0}`")]
    UnknownInvocation(String),
    #[error("unknown subroutine `{0}`")]
    UnknownSubroutine(String),
    #[error("unknown batch `{0}`")]
    UnknownBatch(String),
    #[error("unknown arm `{arm}` for subroutine `{subroutine}`")]
    UnknownArm { subroutine: String, arm: String },
    #[error(transparent)]
    Bandit(#[from] BanditError),
    #[error("corrupt row: {0}")]
    Corrupt(String),
}

pub type StoreResult<T> = Result<T, StoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvocationStatus {
    Succeeded,
    Failed,
}

impl InvocationStatus {
    fn as_str(self) -> &'static str {
        match self {
            InvocationStatus::Succeeded => "succeeded",
            InvocationStatus::Failed => "failed",
        }
    }

    fn parse(s: &str) -> StoreResult<Self> {
        match s {
            "succeeded" => Ok(Self::Succeeded),
            "failed" => Ok(Self::Failed),
            other => Err(StoreError::Corrupt(format!("status `{other}`"))),
        }
    }
}

/// One recorded subroutine call: the node type of the audit DAG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub invocation_id: String,
    pub invocation_key: Option<String>,
    pub subroutine_id: String,
    /// `None` for records that are not LM calls (e.g. data ingest).
    pub arm_id: Option<ArmId>,
    pub input: Json,
    pub output: Option<Json>,
    pub raw_output: Option<String>,
    pub user_payload: String,
    pub output_schema: Json,
    pub output_schema_hash: String,
    pub seed: u64,
    pub attempts: u32,
    pub status: InvocationStatus,
    pub error: Option<String>,
    pub batch_id: Option<String>,
    pub stage: Option<String>,
    pub snapshot_version: Option<i64>,
    pub parent_ids: Vec<String>,
    pub created_at: i64,
}

impl Invocation {
    pub fn succeeded(&self) -> bool {
        self.status == InvocationStatus::Succeeded
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub child: String,
    pub parent: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSource {
    Sme,
    Critique,
}

impl FeedbackSource {
    fn as_str(self) -> &'static str {
        match self {
            FeedbackSource::Sme => "sme",
            FeedbackSource::Critique => "critique",
        }
    }

    fn parse(s: &str) -> StoreResult<Self> {
        match s {
            "sme" => Ok(Self::Sme),
            "critique" => Ok(Self::Critique),
            other => Err(StoreError::Corrupt(format!("feedback source `{other}`"))),
        }
    }
}

/// A scalar-loss judgment of an invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub feedback_id: String,
    pub invocation_id: String,
    pub source: FeedbackSource,
    pub reviewer_id: Option<String>,
    pub critique_invocation_id: Option<String>,
    pub ratings: Option<BTreeMap<String, i64>>,
    pub loss: f64,
    pub rationale: Option<String>,
    pub late: bool,
    pub submission_id: Option<String>,
    pub created_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub arm_id: ArmId,
    pub prompt: String,
    pub pulls: u64,
    pub observations: u64,
    pub loss_sum: f64,
    pub created_at: i64,
}

impl ArmRecord {
    pub fn mean_loss(&self) -> Option<f64> {
        (self.observations > 0).then(|| self.loss_sum / self.observations as f64)
    }

    pub fn stats(&self) -> ArmStats<f64> {
        ArmStats {
            arm_id: self.arm_id.clone(),
            pulls: self.pulls,
            observations: self.observations,
            loss_sum: self.loss_sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubroutineRecord {
    pub subroutine_id: String,
    pub spec: SubroutineSpec,
    pub rating_dims: Option<Json>,
    pub created_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceNode {
    pub invocation: Invocation,
    pub prompt: Option<String>,
    pub feedback: Vec<FeedbackRecord>,
}

/// Ancestor closure of one invocation, in topological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditTrace {
    pub root: String,
    pub nodes: Vec<TraceNode>,
    pub edges: Vec<DependencyEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub invocation: Invocation,
    pub feedback: Vec<FeedbackRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_id: String,
    pub run_id: String,
    pub batch_index: i64,
    pub state: String,
    pub size: i64,
    pub created_at: i64,
    pub updated_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: i64,
    pub state: BanditState<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: i64,
    pub kind: String,
    pub invocation_id: Option<String>,
    pub batch_id: Option<String>,
    pub detail: Json,
    pub created_at: i64,
}

/// Everything needed to insert an invocation row.
#[derive(Debug, Clone)]
pub struct NewInvocation {
    pub invocation_id: String,
    pub invocation_key: Option<String>,
    pub subroutine_id: String,
    pub arm_id: Option<ArmId>,
    pub input: Json,
    pub output: Option<Json>,
    pub raw_output: Option<String>,
    pub user_payload: String,
    pub output_schema: Json,
    pub output_schema_hash: String,
    pub seed: u64,
    pub attempts: u32,
    pub status: InvocationStatus,
    pub error: Option<String>,
    pub batch_id: Option<String>,
    pub stage: Option<String>,
    pub snapshot_version: Option<i64>,
}

pub struct Store {
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Store")
    }
}

fn text_json(s: &str) -> StoreResult<Json> {
    serde_json::from_str(s).map_err(|e| StoreError::Corrupt(e.to_string()))
}

impl Store {
    pub fn open(path: impl AsRef<Path>) -> StoreResult<Self> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "FULL")?;
        Self::init(conn)
    }

    pub fn in_memory() -> StoreResult<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> StoreResult<Self> {
        conn.busy_timeout(Duration::from_secs(30))?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute_batch(DDL)?;
        conn.execute(
            "INSERT OR IGNORE INTO meta(key, value) VALUES ('clock', 0), ('schema_version', ?1)",
            params![SCHEMA_VERSION],
        )?;
        Ok(Self {
            conn: Mutex::new(conn),
        })
    }

    /// Run `f` inside one immediate (write-locking) transaction. The
    /// transaction commits iff `f` returns `Ok`.
    pub fn transaction<T, E>(&self, f: impl FnOnce(&Transaction<'_>) -> Result<T, E>) -> Result<T, E>
    where
        E: From<StoreError>,
    {
        let mut conn = self.conn.lock();
        let tx = conn
            .transaction_with_behavior(TransactionBehavior::Immediate)
            .map_err(StoreError::from)?;
        let out = f(&tx)?;
        tx.commit().map_err(StoreError::from)?;
        Ok(out)
    }

    /// Read-only access; reads see a consistent snapshot.
    pub fn read<T, E>(&self, f: impl FnOnce(&Connection) -> Result<T, E>) -> Result<T, E>
    where
        E: From<StoreError>,
    {
        let mut conn = self.conn.lock();
        let tx = conn
            .transaction_with_behavior(TransactionBehavior::Deferred)
            .map_err(StoreError::from)?;
        let out = f(&tx)?;
        tx.commit().map_err(StoreError::from)?;
        Ok(out)
    }

    // --- subroutines & arms -------------------------------------------------

    pub fn subroutine(&self, id: &str) -> StoreResult<SubroutineRecord> {
        self.read(|c| subroutine(c, id))
    }

    pub fn subroutines(&self) -> StoreResult<Vec<SubroutineRecord>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT subroutine_id, spec_json, rating_dims_json, created_at FROM subroutines ORDER BY created_at",
            )?;
            let rows = stmt.query_map([], subroutine_row)?;
            rows.map(|r| r.map_err(StoreError::from).and_then(|x| x))
                .collect()
        })
    }

    pub fn arms(&self, subroutine_id: &str) -> StoreResult<Vec<ArmRecord>> {
        self.read(|c| arms(c, subroutine_id))
    }

    pub fn bandit_state(&self, subroutine_id: &str) -> StoreResult<BanditState<f64>> {
        self.read(|c| bandit_state(c, subroutine_id))
    }

    /// Full loss history of one arm in recording order.
    pub fn loss_history(&self, subroutine_id: &str, arm_id: &ArmId) -> StoreResult<Vec<f64>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT loss FROM loss_events WHERE subroutine_id = ?1 AND arm_id = ?2 ORDER BY created_at",
            )?;
            let rows = stmt.query_map(params![subroutine_id, arm_id.as_str()], |r| r.get(0))?;
            rows.collect::<Result<Vec<f64>, _>>().map_err(StoreError::from)
        })
    }

    // --- invocations ----------------------------------------------------------

    pub fn invocation(&self, id: &str) -> StoreResult<Invocation> {
        self.read(|c| invocation(c, id))
    }

    pub fn invocation_by_key(&self, key: &str) -> StoreResult<Option<Invocation>> {
        self.read(|c| invocation_by_key(c, key))
    }

    pub fn invocations(&self) -> StoreResult<Vec<Invocation>> {
        self.read(|c| invocations_where(c, "1 = 1", []))
    }

    pub fn invocations_of(&self, subroutine_id: &str) -> StoreResult<Vec<Invocation>> {
        self.read(|c| invocations_where(c, "subroutine_id = ?1", [subroutine_id]))
    }

    pub fn persist_invocation(&self, new: &NewInvocation, parents: &[String]) -> StoreResult<i64> {
        self.transaction(|tx| persist_invocation(tx, new, parents))
    }

    pub fn edges(&self) -> StoreResult<Vec<DependencyEdge>> {
        self.read(|c| {
            let mut stmt = c.prepare("SELECT child, parent FROM edges ORDER BY child, parent")?;
            let rows = stmt.query_map([], |r| {
                Ok(DependencyEdge {
                    child: r.get(0)?,
                    parent: r.get(1)?,
                })
            })?;
            rows.collect::<Result<Vec<_>, _>>().map_err(StoreError::from)
        })
    }

    pub fn feedback_for(&self, invocation_id: &str) -> StoreResult<Vec<FeedbackRecord>> {
        self.read(|c| feedback_for(c, invocation_id))
    }

    pub fn feedback_by_submission(&self, submission_id: &str) -> StoreResult<Option<FeedbackRecord>> {
        self.read(|c| {
            c.query_row(
                &format!("SELECT {FEEDBACK_COLS} FROM feedback WHERE submission_id = ?1"),
                [submission_id],
                feedback_row,
            )
            .optional()?
            .transpose()
        })
    }

    /// Ancestor closure of `invocation_id` with prompts and feedback.
    pub fn trace(&self, invocation_id: &str) -> StoreResult<AuditTrace> {
        self.read(|c| trace(c, invocation_id))
    }

    /// Stage invocations of a batch, minus candidates a self-critique loop
    /// passed over in favour of a sibling.
    pub fn list_review_items(&self, batch_id: &str, stage: &str) -> StoreResult<Vec<ReviewItem>> {
        self.read(|c| {
            batch(c, batch_id)?;
            let invs = invocations_where(
                c,
                "batch_id = ?1 AND stage = ?2 \
                 AND invocation_id NOT IN (SELECT invocation_id FROM passed_over)",
                [batch_id, stage],
            )?;
            invs.into_iter()
                .map(|inv| {
                    let feedback = feedback_for(c, &inv.invocation_id)?;
                    Ok(ReviewItem {
                        invocation: inv,
                        feedback,
                    })
                })
                .collect()
        })
    }

    // --- batches & snapshots ----------------------------------------------------

    pub fn batch(&self, batch_id: &str) -> StoreResult<BatchRecord> {
        self.read(|c| batch(c, batch_id))
    }

    pub fn batches(&self) -> StoreResult<Vec<BatchRecord>> {
        self.read(|c| {
            let mut stmt = c.prepare(&format!(
                "SELECT {BATCH_COLS} FROM batches ORDER BY run_id, batch_index"
            ))?;
            let rows = stmt.query_map([], batch_row)?;
            rows.collect::<Result<Vec<_>, _>>().map_err(StoreError::from)
        })
    }

    pub fn snapshot(&self, batch_id: &str, subroutine_id: &str) -> StoreResult<Option<Snapshot>> {
        self.read(|c| snapshot(c, batch_id, subroutine_id))
    }

    pub fn events(&self, kind: Option<&str>) -> StoreResult<Vec<EventRecord>> {
        self.read(|c| {
            let mut stmt = c.prepare(
                "SELECT event_id, kind, invocation_id, batch_id, detail_json, created_at FROM events \
                 WHERE ?1 IS NULL OR kind = ?1 ORDER BY event_id",
            )?;
            let rows = stmt.query_map([kind], |r| {
                Ok((
                    r.get::<_, i64>(0)?,
                    r.get::<_, String>(1)?,
                    r.get::<_, Option<String>>(2)?,
                    r.get::<_, Option<String>>(3)?,
                    r.get::<_, String>(4)?,
                    r.get::<_, i64>(5)?,
                ))
            })?;
            rows.map(|r| {
                let (event_id, kind, invocation_id, batch_id, detail, created_at) = r?;
                Ok(EventRecord {
                    event_id,
                    kind,
                    invocation_id,
                    batch_id,
                    detail: text_json(&detail)?,
                    created_at,
                })
            })
            .collect()
        })
    }
}

// ---------------------------------------------------------------------------
// Transaction-level helpers. These take a `Connection` (a `Transaction`
// derefs to one) so callers can compose them inside a single transaction.

/// Advance and return the logical clock.
pub fn tick(c: &Connection) -> StoreResult<i64> {
    c.execute("UPDATE meta SET value = value + 1 WHERE key = 'clock'", [])?;
    Ok(c.query_row("SELECT value FROM meta WHERE key = 'clock'", [], |r| r.get(0))?)
}

pub fn upsert_subroutine(
    c: &Connection,
    subroutine_id: &str,
    spec: &SubroutineSpec,
    rating_dims: Option<&Json>,
) -> StoreResult<bool> {
    let exists: bool = c
        .query_row(
            "SELECT 1 FROM subroutines WHERE subroutine_id = ?1",
            [subroutine_id],
            |_| Ok(()),
        )
        .optional()?
        .is_some();
    if exists {
        if let Some(dims) = rating_dims {
            c.execute(
                "UPDATE subroutines SET rating_dims_json = ?2 WHERE subroutine_id = ?1",
                params![subroutine_id, dims.to_string()],
            )?;
        }
        return Ok(false);
    }
    let now = tick(c)?;
    c.execute(
        "INSERT INTO subroutines(subroutine_id, name, spec_json, spec_hash, rating_dims_json, created_at) \
         VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
        params![
            subroutine_id,
            spec.name(),
            serde_json::to_string(spec).expect("spec serializes"),
            spec.hash(),
            rating_dims.map(|d| d.to_string()),
            now
        ],
    )?;
    Ok(true)
}

fn subroutine_row(r: &Row<'_>) -> rusqlite::Result<StoreResult<SubroutineRecord>> {
    let id: String = r.get(0)?;
    let spec: String = r.get(1)?;
    let dims: Option<String> = r.get(2)?;
    let created_at: i64 = r.get(3)?;
    Ok((|| {
        Ok(SubroutineRecord {
            subroutine_id: id,
            spec: serde_json::from_str(&spec).map_err(|e| StoreError::Corrupt(e.to_string()))?,
            rating_dims: dims.as_deref().map(text_json).transpose()?,
            created_at,
        })
    })())
}

pub fn subroutine(c: &Connection, id: &str) -> StoreResult<SubroutineRecord> {
    c.query_row(
        "SELECT subroutine_id, spec_json, rating_dims_json, created_at FROM subroutines WHERE subroutine_id = ?1",
        [id],
        subroutine_row,
    )
    .optional()?
    .ok_or_else(|| StoreError::UnknownSubroutine(id.to_string()))?
}

pub fn arms(c: &Connection, subroutine_id: &str) -> StoreResult<Vec<ArmRecord>> {
    let mut stmt = c.prepare(
        "SELECT arm_id, prompt, pulls, observations, loss_sum, created_at FROM arms \
         WHERE subroutine_id = ?1 ORDER BY created_at",
    )?;
    let rows = stmt.query_map([subroutine_id], |r| {
        Ok(ArmRecord {
            arm_id: ArmId(r.get(0)?),
            prompt: r.get(1)?,
            pulls: r.get::<_, i64>(2)? as u64,
            observations: r.get::<_, i64>(3)? as u64,
            loss_sum: r.get(4)?,
            created_at: r.get(5)?,
        })
    })?;
    rows.collect::<Result<Vec<_>, _>>().map_err(StoreError::from)
}

pub fn arm_prompt(c: &Connection, subroutine_id: &str, arm_id: &ArmId) -> StoreResult<Option<String>> {
    Ok(c.query_row(
        "SELECT prompt FROM arms WHERE subroutine_id = ?1 AND arm_id = ?2",
        params![subroutine_id, arm_id.as_str()],
        |r| r.get(0),
    )
    .optional()?)
}

pub fn bandit_state(c: &Connection, subroutine_id: &str) -> StoreResult<BanditState<f64>> {
    subroutine(c, subroutine_id)?;
    let arms = arms(c, subroutine_id)?;
    let mut state =
        BanditState::with_arms(subroutine_id, arms.iter().map(ArmRecord::stats).collect(), 0.0)?;
    state.trial_index = arms.iter().map(|a| a.pulls).sum();
    Ok(state)
}

/// Like [`bandit_state`], but independent of the order in which arms were
/// created and losses arrived: arms sorted by id, sums re-added in event-key
/// order. Concurrent or resumed runs freeze bit-identical snapshots.
fn canonical_state(c: &Connection, subroutine_id: &str) -> StoreResult<BanditState<f64>> {
    let mut state = bandit_state(c, subroutine_id)?;
    state.arms.sort_by(|a, b| a.arm_id.cmp(&b.arm_id));
    let mut stmt = c.prepare(
        "SELECT loss FROM loss_events WHERE subroutine_id = ?1 AND arm_id = ?2 ORDER BY event_key",
    )?;
    for arm in &mut state.arms {
        let losses = stmt
            .query_map(params![subroutine_id, arm.arm_id.as_str()], |r| r.get::<_, f64>(0))?
            .collect::<Result<Vec<_>, _>>()?;
        arm.loss_sum = losses.iter().sum();
    }
    Ok(state)
}

/// Insert an arm if it does not exist yet. Returns whether it was new.
pub fn ensure_arm(c: &Connection, subroutine_id: &str, arm_id: &ArmId, prompt: &str) -> StoreResult<bool> {
    if arm_prompt(c, subroutine_id, arm_id)?.is_some() {
        return Ok(false);
    }
    let now = tick(c)?;
    c.execute(
        "INSERT INTO arms(subroutine_id, arm_id, prompt, created_at) VALUES (?1, ?2, ?3, ?4)",
        params![subroutine_id, arm_id.as_str(), prompt, now],
    )?;
    Ok(true)
}

pub fn record_pull(c: &Connection, subroutine_id: &str, arm_id: &ArmId) -> StoreResult<()> {
    let n = c.execute(
        "UPDATE arms SET pulls = pulls + 1 WHERE subroutine_id = ?1 AND arm_id = ?2",
        params![subroutine_id, arm_id.as_str()],
    )?;
    if n == 0 {
        return Err(StoreError::UnknownArm {
            subroutine: subroutine_id.to_string(),
            arm: arm_id.to_string(),
        });
    }
    Ok(())
}

/// Record one loss observation, at most once per `event_key`.
///
/// Returns `false` (and changes nothing) if the key was already used.
pub fn record_loss(
    c: &Connection,
    event_key: &str,
    subroutine_id: &str,
    arm_id: &ArmId,
    invocation_id: Option<&str>,
    loss: f64,
    source: &str,
) -> StoreResult<bool> {
    if !(0.0..=1.0).contains(&loss) {
        return Err(BanditError::LossOutOfRange(loss).into());
    }
    let seen = c
        .query_row(
            "SELECT 1 FROM loss_events WHERE event_key = ?1",
            [event_key],
            |_| Ok(()),
        )
        .optional()?
        .is_some();
    if seen {
        return Ok(false);
    }
    let n = c.execute(
        "UPDATE arms SET observations = observations + 1, loss_sum = loss_sum + ?3 \
         WHERE subroutine_id = ?1 AND arm_id = ?2",
        params![subroutine_id, arm_id.as_str(), loss],
    )?;
    if n == 0 {
        return Err(StoreError::UnknownArm {
            subroutine: subroutine_id.to_string(),
            arm: arm_id.to_string(),
        });
    }
    let now = tick(c)?;
    c.execute(
        "INSERT INTO loss_events(event_key, subroutine_id, arm_id, invocation_id, loss, source, created_at) \
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
        params![event_key, subroutine_id, arm_id.as_str(), invocation_id, loss, source, now],
    )?;
    Ok(true)
}

fn exists(c: &Connection, id: &str) -> StoreResult<bool> {
    Ok(c.query_row(
        "SELECT 1 FROM invocations WHERE invocation_id = ?1",
        [id],
        |_| Ok(()),
    )
    .optional()?
    .is_some())
}

/// Whether `target` is `start` or one of its ancestors.
fn is_ancestor_or_self(c: &Connection, start: &str, target: &str) -> StoreResult<bool> {
    if start == target {
        return Ok(true);
    }
    Ok(c.query_row(
        "WITH RECURSIVE anc(id) AS (SELECT ?1 UNION SELECT e.parent FROM edges e JOIN anc ON e.child = anc.id) \
         SELECT 1 FROM anc WHERE id = ?2",
        params![start, target],
        |_| Ok(()),
    )
    .optional()?
    .is_some())
}

/// Insert an invocation and its parent edges. Returns the assigned
/// `created_at`.
pub fn persist_invocation(c: &Connection, new: &NewInvocation, parents: &[String]) -> StoreResult<i64> {
    let id = new.invocation_id.as_str();
    for p in parents {
        // an edge to a node reachable from the parent closes a cycle
        if is_ancestor_or_self(c, p, id)? {
            return Err(StoreError::Cycle {
                child: id.to_string(),
                parent: p.clone(),
            });
        }
    }
    if exists(c, id)? {
        return Err(StoreError::DuplicateId(id.to_string()));
    }
    for p in parents {
        if !exists(c, p)? {
            return Err(StoreError::DanglingParent(p.clone()));
        }
    }
    let now = tick(c)?;
    c.execute(
        "INSERT INTO invocations(invocation_id, invocation_key, subroutine_id, arm_id, input_json, output_json, \
         raw_output, user_payload, output_schema_json, output_schema_hash, seed, attempts, status, error, \
         batch_id, stage, snapshot_version, created_at) \
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15, ?16, ?17, ?18)",
        params![
            id,
            new.invocation_key,
            new.subroutine_id,
            new.arm_id.as_ref().map(ArmId::as_str),
            new.input.to_string(),
            new.output.as_ref().map(Json::to_string),
            new.raw_output,
            new.user_payload,
            new.output_schema.to_string(),
            new.output_schema_hash,
            new.seed as i64,
            new.attempts,
            new.status.as_str(),
            new.error,
            new.batch_id,
            new.stage,
            new.snapshot_version,
            now
        ],
    )?;
    let mut seen = HashSet::new();
    for p in parents {
        if seen.insert(p.as_str()) {
            c.execute(
                "INSERT INTO edges(child, parent) VALUES (?1, ?2)",
                params![id, p],
            )?;
        }
    }
    Ok(now)
}

const INVOCATION_COLS: &str = "invocation_id, invocation_key, subroutine_id, arm_id, input_json, output_json, \
    raw_output, user_payload, output_schema_json, output_schema_hash, seed, attempts, status, error, batch_id, \
    stage, snapshot_version, created_at";

fn invocation_row(c: &Connection, r: &Row<'_>) -> StoreResult<Invocation> {
    let id: String = r.get(0)?;
    let input: String = r.get(4)?;
    let output: Option<String> = r.get(5)?;
    let schema: String = r.get(8)?;
    let status: String = r.get(12)?;
    let parent_ids = parents_of(c, &id)?;
    Ok(Invocation {
        invocation_key: r.get(1)?,
        subroutine_id: r.get(2)?,
        arm_id: r.get::<_, Option<String>>(3)?.map(ArmId),
        input: text_json(&input)?,
        output: output.as_deref().map(text_json).transpose()?,
        raw_output: r.get(6)?,
        user_payload: r.get(7)?,
        output_schema: text_json(&schema)?,
        output_schema_hash: r.get(9)?,
        seed: r.get::<_, i64>(10)? as u64,
        attempts: r.get(11)?,
        status: InvocationStatus::parse(&status)?,
        error: r.get(13)?,
        batch_id: r.get(14)?,
        stage: r.get(15)?,
        snapshot_version: r.get(16)?,
        created_at: r.get(17)?,
        parent_ids,
        invocation_id: id,
    })
}

fn parents_of(c: &Connection, id: &str) -> StoreResult<Vec<String>> {
    let mut stmt = c.prepare_cached(
        "SELECT e.parent FROM edges e JOIN invocations i ON i.invocation_id = e.parent \
         WHERE e.child = ?1 ORDER BY i.created_at",
    )?;
    let rows = stmt.query_map([id], |r| r.get(0))?;
    rows.collect::<Result<Vec<String>, _>>().map_err(StoreError::from)
}

fn invocations_where<P: rusqlite::Params>(
    c: &Connection,
    clause: &str,
    p: P,
) -> StoreResult<Vec<Invocation>> {
    let mut stmt = c.prepare(&format!(
        "SELECT {INVOCATION_COLS} FROM invocations WHERE {clause} ORDER BY created_at"
    ))?;
    let mut rows = stmt.query(p)?;
    let mut out = Vec::new();
    while let Some(r) = rows.next()? {
        out.push(invocation_row(c, r)?);
    }
    Ok(out)
}

pub fn invocation(c: &Connection, id: &str) -> StoreResult<Invocation> {
    invocations_where(c, "invocation_id = ?1", [id])?
        .pop()
        .ok_or_else(|| StoreError::UnknownInvocation(id.to_string()))
}

pub fn invocation_by_key(c: &Connection, key: &str) -> StoreResult<Option<Invocation>> {
    Ok(invocations_where(c, "invocation_key = ?1", [key])?.pop())
}

pub fn invocation_by_key_opt(c: &Connection, key: Option<&str>) -> StoreResult<Option<Invocation>> {
    match key {
        Some(k) => invocation_by_key(c, k),
        None => Ok(None),
    }
}

/// Invocations that list `parent` among their parents.
pub fn children_of(c: &Connection, parent: &str) -> StoreResult<Vec<Invocation>> {
    invocations_where(
        c,
        "invocation_id IN (SELECT child FROM edges WHERE parent = ?1)",
        [parent],
    )
}

const FEEDBACK_COLS: &str = "feedback_id, invocation_id, source, reviewer_id, critique_invocation_id, \
    ratings_json, loss, rationale, late, submission_id, created_at";

fn feedback_row(r: &Row<'_>) -> rusqlite::Result<StoreResult<FeedbackRecord>> {
    let source: String = r.get(2)?;
    let ratings: Option<String> = r.get(5)?;
    let rec = (|| -> StoreResult<FeedbackRecord> {
        Ok(FeedbackRecord {
            feedback_id: r.get(0)?,
            invocation_id: r.get(1)?,
            source: FeedbackSource::parse(&source)?,
            reviewer_id: r.get(3)?,
            critique_invocation_id: r.get(4)?,
            ratings: ratings
                .as_deref()
                .map(|s| serde_json::from_str(s).map_err(|e| StoreError::Corrupt(e.to_string())))
                .transpose()?,
            loss: r.get(6)?,
            rationale: r.get(7)?,
            late: r.get::<_, i64>(8)? != 0,
            submission_id: r.get(9)?,
            created_at: r.get(10)?,
        })
    })();
    Ok(rec)
}

pub fn feedback_for(c: &Connection, invocation_id: &str) -> StoreResult<Vec<FeedbackRecord>> {
    let mut stmt = c.prepare_cached(&format!(
        "SELECT {FEEDBACK_COLS} FROM feedback WHERE invocation_id = ?1 ORDER BY created_at"
    ))?;
    let rows = stmt.query_map([invocation_id], feedback_row)?;
    rows.map(|r| r.map_err(StoreError::from).and_then(|x| x))
        .collect()
}

/// Fields of a feedback row supplied by the caller.
#[derive(Debug, Clone)]
pub struct NewFeedback<'a> {
    pub feedback_id: &'a str,
    pub invocation_id: &'a str,
    pub source: FeedbackSource,
    pub reviewer_id: Option<&'a str>,
    pub critique_invocation_id: Option<&'a str>,
    pub ratings: Option<&'a BTreeMap<String, i64>>,
    pub loss: f64,
    pub rationale: Option<&'a str>,
    pub late: bool,
    pub submission_id: Option<&'a str>,
}

/// Insert a feedback row unless one with the same id exists. Returns whether
/// a row was written.
pub fn insert_feedback(c: &Connection, f: &NewFeedback<'_>) -> StoreResult<bool> {
    if !exists(c, f.invocation_id)? {
        return Err(StoreError::UnknownInvocation(f.invocation_id.to_string()));
    }
    let seen = c
        .query_row(
            "SELECT 1 FROM feedback WHERE feedback_id = ?1",
            [f.feedback_id],
            |_| Ok(()),
        )
        .optional()?
        .is_some();
    if seen {
        return Ok(false);
    }
    let now = tick(c)?;
    c.execute(
        &format!("INSERT INTO feedback({FEEDBACK_COLS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)"),
        params![
            f.feedback_id,
            f.invocation_id,
            f.source.as_str(),
            f.reviewer_id,
            f.critique_invocation_id,
            f.ratings.map(|r| serde_json::to_string(r).expect("ratings serialize")),
            f.loss,
            f.rationale,
            f.late as i64,
            f.submission_id,
            now
        ],
    )?;
    Ok(true)
}

pub fn trace(c: &Connection, root: &str) -> StoreResult<AuditTrace> {
    if !exists(c, root)? {
        return Err(StoreError::UnknownInvocation(root.to_string()));
    }
    let invs = invocations_where(
        c,
        "invocation_id IN (WITH RECURSIVE anc(id) AS \
         (SELECT ?1 UNION SELECT e.parent FROM edges e JOIN anc ON e.child = anc.id) SELECT id FROM anc)",
        [root],
    )?;
    let ids: HashSet<&str> = invs.iter().map(|i| i.invocation_id.as_str()).collect();
    let mut edges = Vec::new();
    for inv in &invs {
        for p in &inv.parent_ids {
            if ids.contains(p.as_str()) {
                edges.push(DependencyEdge {
                    child: inv.invocation_id.clone(),
                    parent: p.clone(),
                });
            }
        }
    }
    let mut nodes = Vec::with_capacity(invs.len());
    for inv in &invs {
        let prompt = match &inv.arm_id {
            Some(arm) => arm_prompt(c, &inv.subroutine_id, arm)?,
            None => None,
        };
        let feedback = feedback_for(c, &inv.invocation_id)?;
        nodes.push(TraceNode {
            invocation: inv.clone(),
            prompt,
            feedback,
        });
    }
    Ok(AuditTrace {
        root: root.to_string(),
        nodes,
        edges,
    })
}

const BATCH_COLS: &str = "batch_id, run_id, batch_index, state, size, created_at, updated_at";

fn batch_row(r: &Row<'_>) -> rusqlite::Result<BatchRecord> {
    Ok(BatchRecord {
        batch_id: r.get(0)?,
        run_id: r.get(1)?,
        batch_index: r.get(2)?,
        state: r.get(3)?,
        size: r.get(4)?,
        created_at: r.get(5)?,
        updated_at: r.get(6)?,
    })
}

pub fn batch(c: &Connection, batch_id: &str) -> StoreResult<BatchRecord> {
    c.query_row(
        &format!("SELECT {BATCH_COLS} FROM batches WHERE batch_id = ?1"),
        [batch_id],
        batch_row,
    )
    .optional()?
    .ok_or_else(|| StoreError::UnknownBatch(batch_id.to_string()))
}

/// Create a batch row if absent. Returns whether it was new.
pub fn create_batch(c: &Connection, batch_id: &str, run_id: &str, index: i64, size: i64) -> StoreResult<bool> {
    if batch(c, batch_id).is_ok() {
        return Ok(false);
    }
    let now = tick(c)?;
    c.execute(
        &format!("INSERT INTO batches({BATCH_COLS}) VALUES (?1, ?2, ?3, 'created', ?4, ?5, ?5)"),
        params![batch_id, run_id, index, size, now],
    )?;
    Ok(true)
}

pub fn set_batch_state(c: &Connection, batch_id: &str, state: &str) -> StoreResult<()> {
    let now = tick(c)?;
    let n = c.execute(
        "UPDATE batches SET state = ?2, updated_at = ?3 WHERE batch_id = ?1",
        params![batch_id, state, now],
    )?;
    if n == 0 {
        return Err(StoreError::UnknownBatch(batch_id.to_string()));
    }
    Ok(())
}

pub fn snapshot(c: &Connection, batch_id: &str, subroutine_id: &str) -> StoreResult<Option<Snapshot>> {
    let row: Option<(i64, String)> = c
        .query_row(
            "SELECT version, state_json FROM arm_snapshots WHERE batch_id = ?1 AND subroutine_id = ?2",
            params![batch_id, subroutine_id],
            |r| Ok((r.get(0)?, r.get(1)?)),
        )
        .optional()?;
    row.map(|(version, json)| {
        Ok(Snapshot {
            version,
            state: serde_json::from_str(&json).map_err(|e| StoreError::Corrupt(e.to_string()))?,
        })
    })
    .transpose()
}

/// Freeze the current arm statistics of a subroutine for a batch. An
/// existing snapshot is returned unchanged.
pub fn freeze_snapshot(c: &Connection, batch_id: &str, subroutine_id: &str) -> StoreResult<Snapshot> {
    if let Some(s) = snapshot(c, batch_id, subroutine_id)? {
        return Ok(s);
    }
    let state = canonical_state(c, subroutine_id)?;
    let version = tick(c)?;
    c.execute(
        "INSERT INTO arm_snapshots(batch_id, subroutine_id, version, state_json) VALUES (?1, ?2, ?3, ?4)",
        params![
            batch_id,
            subroutine_id,
            version,
            serde_json::to_string(&state).expect("state serializes")
        ],
    )?;
    Ok(Snapshot { version, state })
}

/// Mark loop candidates that lost to `selected`. Repeating is a no-op.
pub fn record_passed_over(c: &Connection, selected: &str, others: &[String]) -> StoreResult<()> {
    for id in others.iter().filter(|id| *id != selected) {
        c.execute(
            "INSERT OR IGNORE INTO passed_over(invocation_id, selected_id) VALUES (?1, ?2)",
            params![id, selected],
        )?;
    }
    Ok(())
}

pub fn record_event(
    c: &Connection,
    kind: &str,
    invocation_id: Option<&str>,
    batch_id: Option<&str>,
    detail: &Json,
) -> StoreResult<()> {
    let now = tick(c)?;
    c.execute(
        "INSERT INTO events(kind, invocation_id, batch_id, detail_json, created_at) VALUES (?1, ?2, ?3, ?4, ?5)",
        params![kind, invocation_id, batch_id, detail.to_string(), now],
    )?;
    Ok(())
}
