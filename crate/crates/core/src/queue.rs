//! Durable at-least-once task queue and a thread-based worker pool.
//!
//! Tasks live in the `tasks` table of the audit store. A lease is an atomic
//! `pending → leased` transition with an expiry; expired leases are picked
//! up again by the next `lease` call. Every lease counts as an attempt.

use std::panic::AssertUnwindSafe;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};

use crate::store::{self, Store, StoreError};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
pub const DEFAULT_LEASE: Duration = Duration::from_secs(300);

#[derive(Debug, thiserror::Error)]
pub enum QueueError {
    #[error("idempotency key must be nonempty")]
    EmptyKey,
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("worker `{worker}` does not hold the lease on task `{task}`")]
    LeaseNotHeld { task: String, worker: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<rusqlite::Error> for QueueError {
    fn from(e: rusqlite::Error) -> Self {
        QueueError::Store(e.into())
    }
}

pub type QueueResult<T> = Result<T, QueueError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Leased,
    Done,
    Dead,
}

impl TaskState {
    fn as_str(self) -> &'static str {
        match self {
            TaskState::Pending => "pending",
            TaskState::Leased => "leased",
            TaskState::Done => "done",
            TaskState::Dead => "dead",
        }
    }

    fn parse(s: &str) -> QueueResult<Self> {
        Ok(match s {
            "pending" => Self::Pending,
            "leased" => Self::Leased,
            "done" => Self::Done,
            "dead" => Self::Dead,
            other => return Err(StoreError::Corrupt(format!("task state `{other}`")).into()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub kind: String,
    pub payload: Json,
    pub idempotency_key: String,
    pub attempts: u32,
    pub max_attempts: u32,
    pub state: TaskState,
    pub lease_owner: Option<String>,
    /// Milliseconds on the queue clock.
    pub lease_expiry: Option<i64>,
    pub last_error: Option<String>,
    pub created_at: i64,
}

/// A task to enqueue.
#[derive(Debug, Clone, PartialEq)]
pub struct NewTask {
    pub kind: String,
    pub payload: Json,
    pub idempotency_key: String,
}

impl NewTask {
    pub fn new(kind: &str, payload: Json, key: impl Into<String>) -> Self {
        Self {
            kind: kind.to_string(),
            payload,
            idempotency_key: key.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub pending: u64,
    pub leased: u64,
    pub done: u64,
    pub dead: u64,
}

impl TaskCounts {
    pub fn live(&self) -> u64 {
        self.pending + self.leased
    }

    pub fn total(&self) -> u64 {
        self.pending + self.leased + self.done + self.dead
    }
}

/// Wall clock, or a manually advanced clock for tests.
#[derive(Debug, Clone)]
pub enum Clock {
    System,
    Virtual(Arc<AtomicI64>),
}

impl Clock {
    pub fn virtual_at(ms: i64) -> Self {
        Clock::Virtual(Arc::new(AtomicI64::new(ms)))
    }

    pub fn now_ms(&self) -> i64 {
        match self {
            Clock::System => std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as i64)
                .unwrap_or(0),
            Clock::Virtual(t) => t.load(Ordering::SeqCst),
        }
    }

    /// Advance a virtual clock; no effect on the system clock.
    pub fn advance(&self, by: Duration) {
        if let Clock::Virtual(t) = self {
            t.fetch_add(by.as_millis() as i64, Ordering::SeqCst);
        }
    }
}

fn task_id_for(key: &str) -> String {
    format!("task_{}", &hex::encode(Sha256::digest(key.as_bytes()))[..24])
}

const TASK_COLS: &str = "task_id, kind, payload, idempotency_key, attempts, max_attempts, state, \
    lease_owner, lease_expiry, last_error, created_at";

fn task_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<(Task, String, String)> {
    Ok((
        Task {
            task_id: r.get(0)?,
            kind: r.get(1)?,
            payload: Json::Null,
            idempotency_key: r.get(3)?,
            attempts: r.get(4)?,
            max_attempts: r.get(5)?,
            state: TaskState::Pending,
            lease_owner: r.get(7)?,
            lease_expiry: r.get(8)?,
            last_error: r.get(9)?,
            created_at: r.get(10)?,
        },
        r.get(2)?,
        r.get(6)?,
    ))
}

fn decode(row: (Task, String, String)) -> QueueResult<Task> {
    let (mut t, payload, state) = row;
    t.payload = serde_json::from_str(&payload).map_err(|e| StoreError::Corrupt(e.to_string()))?;
    t.state = TaskState::parse(&state)?;
    Ok(t)
}

fn get_task(c: &Connection, task_id: &str) -> QueueResult<Task> {
    let row = c
        .query_row(
            &format!("SELECT {TASK_COLS} FROM tasks WHERE task_id = ?1"),
            [task_id],
            task_row,
        )
        .optional()?
        .ok_or_else(|| QueueError::UnknownTask(task_id.to_string()))?;
    decode(row)
}

/// Insert a task unless one with the same key exists; returns the id of
/// whichever task holds the key.
pub fn enqueue_in(c: &Connection, task: &NewTask, max_attempts: u32) -> QueueResult<String> {
    if task.idempotency_key.is_empty() {
        return Err(QueueError::EmptyKey);
    }
    let existing: Option<String> = c
        .query_row(
            "SELECT task_id FROM tasks WHERE idempotency_key = ?1",
            [&task.idempotency_key],
            |r| r.get(0),
        )
        .optional()?;
    if let Some(id) = existing {
        return Ok(id);
    }
    let id = task_id_for(&task.idempotency_key);
    let now = store::tick(c)?;
    c.execute(
        "INSERT INTO tasks(task_id, kind, payload, idempotency_key, attempts, max_attempts, state, created_at) \
         VALUES (?1, ?2, ?3, ?4, 0, ?5, 'pending', ?6)",
        params![id, task.kind, task.payload.to_string(), task.idempotency_key, max_attempts, now],
    )?;
    Ok(id)
}

#[derive(Debug, Clone)]
pub struct Queue {
    store: Arc<Store>,
    clock: Clock,
    max_attempts: u32,
}

impl Queue {
    pub fn new(store: Arc<Store>) -> Self {
        Self {
            store,
            clock: Clock::System,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_max_attempts(mut self, n: u32) -> Self {
        self.max_attempts = n.max(1);
        self
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn enqueue(&self, kind: &str, payload: Json, key: &str) -> QueueResult<String> {
        let task = NewTask::new(kind, payload, key);
        self.store.transaction(|tx| enqueue_in(tx, &task, self.max_attempts))
    }

    pub fn task(&self, task_id: &str) -> QueueResult<Task> {
        self.store.read(|c| get_task(c, task_id))
    }

    /// Lease the oldest available task. Tasks whose expired lease already
    /// used their last attempt are marked dead instead.
    pub fn lease(&self, worker_id: &str, duration: Duration) -> QueueResult<Option<Task>> {
        let now = self.clock.now_ms();
        self.store.transaction(|tx| -> QueueResult<Option<Task>> {
            loop {
                let row = tx
                    .query_row(
                        &format!(
                            "SELECT {TASK_COLS} FROM tasks WHERE state = 'pending' \
                             OR (state = 'leased' AND lease_expiry <= ?1) ORDER BY created_at LIMIT 1"
                        ),
                        [now],
                        task_row,
                    )
                    .optional()?;
                let Some(row) = row else { return Ok(None) };
                let task = decode(row)?;
                if task.attempts >= task.max_attempts {
                    tx.execute(
                        "UPDATE tasks SET state = 'dead', lease_owner = NULL, lease_expiry = NULL, \
                         last_error = COALESCE(last_error, 'lease expired') WHERE task_id = ?1",
                        [&task.task_id],
                    )?;
                    continue;
                }
                let expiry = now + duration.as_millis() as i64;
                tx.execute(
                    "UPDATE tasks SET state = 'leased', attempts = attempts + 1, lease_owner = ?2, \
                     lease_expiry = ?3 WHERE task_id = ?1",
                    params![task.task_id, worker_id, expiry],
                )?;
                return Ok(Some(get_task(tx, &task.task_id)?));
            }
        })
    }

    fn holds(&self, c: &Connection, task_id: &str, worker_id: &str) -> QueueResult<Task> {
        let task = get_task(c, task_id)?;
        let live = task.state == TaskState::Leased
            && task.lease_owner.as_deref() == Some(worker_id)
            && task.lease_expiry.is_some_and(|e| e > self.clock.now_ms());
        if !live {
            return Err(QueueError::LeaseNotHeld {
                task: task_id.to_string(),
                worker: worker_id.to_string(),
            });
        }
        Ok(task)
    }

    pub fn ack(&self, task_id: &str, worker_id: &str) -> QueueResult<()> {
        self.complete(task_id, worker_id, &[]).map(|_| ())
    }

    /// Mark a task done and enqueue its children atomically. Returns the
    /// child task ids.
    pub fn complete(&self, task_id: &str, worker_id: &str, children: &[NewTask]) -> QueueResult<Vec<String>> {
        self.store.transaction(|tx| -> QueueResult<Vec<String>> {
            self.holds(tx, task_id, worker_id)?;
            let ids = children
                .iter()
                .map(|t| enqueue_in(tx, t, self.max_attempts))
                .collect::<QueueResult<Vec<_>>>()?;
            tx.execute(
                "UPDATE tasks SET state = 'done', lease_owner = NULL, lease_expiry = NULL WHERE task_id = ?1",
                [task_id],
            )?;
            Ok(ids)
        })
    }

    pub fn nack(&self, task_id: &str, worker_id: &str, reason: &str) -> QueueResult<TaskState> {
        self.store.transaction(|tx| -> QueueResult<TaskState> {
            let task = self.holds(tx, task_id, worker_id)?;
            let next = if task.attempts < task.max_attempts {
                TaskState::Pending
            } else {
                TaskState::Dead
            };
            tx.execute(
                "UPDATE tasks SET state = ?2, lease_owner = NULL, lease_expiry = NULL, last_error = ?3 \
                 WHERE task_id = ?1",
                params![task_id, next.as_str(), reason],
            )?;
            Ok(next)
        })
    }

    /// Expire every lease not held by a worker whose id starts with
    /// `live_prefix`. Used when a pool starts to take over work from a
    /// crashed process without waiting for the lease duration.
    pub fn reclaim_leases(&self, live_prefix: &str) -> QueueResult<usize> {
        let now = self.clock.now_ms();
        let pattern = format!("{}%", live_prefix.replace('%', "\\%").replace('_', "\\_"));
        self.store.transaction(|tx| -> QueueResult<usize> {
            Ok(tx.execute(
                "UPDATE tasks SET lease_expiry = ?1 WHERE state = 'leased' \
                 AND (lease_owner IS NULL OR lease_owner NOT LIKE ?2 ESCAPE '\\')",
                params![now, pattern],
            )?)
        })
    }

    pub fn counts(&self) -> QueueResult<TaskCounts> {
        self.store.read(|c| -> QueueResult<TaskCounts> {
            let mut stmt = c.prepare("SELECT state, COUNT(*) FROM tasks GROUP BY state")?;
            let rows = stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?)))?;
            let mut counts = TaskCounts::default();
            for row in rows {
                let (state, n) = row?;
                let n = n as u64;
                match TaskState::parse(&state)? {
                    TaskState::Pending => counts.pending = n,
                    TaskState::Leased => counts.leased = n,
                    TaskState::Done => counts.done = n,
                    TaskState::Dead => counts.dead = n,
                }
            }
            Ok(counts)
        })
    }

    pub fn tasks(&self, state: Option<TaskState>) -> QueueResult<Vec<Task>> {
        self.store.read(|c| -> QueueResult<Vec<Task>> {
            let mut stmt = c.prepare(&format!(
                "SELECT {TASK_COLS} FROM tasks WHERE ?1 IS NULL OR state = ?1 ORDER BY created_at"
            ))?;
            let rows = stmt.query_map([state.map(TaskState::as_str)], task_row)?;
            rows.map(|r| decode(r?)).collect()
        })
    }
}

/// Executes one task. Returned tasks are enqueued as children when the task
/// is acknowledged.
pub trait TaskHandler: Send + Sync {
    fn handle(&self, task: &Task) -> Result<Vec<NewTask>, String>;
}

impl<F> TaskHandler for F
where
    F: Fn(&Task) -> Result<Vec<NewTask>, String> + Send + Sync,
{
    fn handle(&self, task: &Task) -> Result<Vec<NewTask>, String> {
        self(task)
    }
}

#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub workers: usize,
    pub lease: Duration,
    pub poll: Duration,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            lease: DEFAULT_LEASE,
            poll: Duration::from_millis(5),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PoolReport {
    pub executed: u64,
    pub failed: u64,
}

/// Run workers until no pending or leased task remains.
pub fn run_until_idle(queue: &Queue, handler: &dyn TaskHandler, config: &PoolConfig) -> QueueResult<PoolReport> {
    let instance = format!(
        "pool-{}-{}",
        std::process::id(),
        &hex::encode(Sha256::digest(format!("{:?}", std::time::SystemTime::now()).as_bytes()))[..8]
    );
    queue.reclaim_leases(&instance)?;
    let results: Vec<QueueResult<PoolReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..config.workers.max(1))
            .map(|i| {
                let worker = format!("{instance}-w{i}");
                s.spawn(move || worker_loop(queue, handler, config, &worker))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut report = PoolReport::default();
    for r in results {
        let r = r?;
        report.executed += r.executed;
        report.failed += r.failed;
    }
    Ok(report)
}

fn worker_loop(queue: &Queue, handler: &dyn TaskHandler, config: &PoolConfig, worker: &str) -> QueueResult<PoolReport> {
    let mut report = PoolReport::default();
    loop {
        match queue.lease(worker, config.lease)? {
            Some(task) => {
                let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| handler.handle(&task)))
                    .unwrap_or_else(|_| Err("task handler panicked".to_string()));
                report.executed += 1;
                let settled = match outcome {
                    Ok(children) => queue.complete(&task.task_id, worker, &children).map(|_| ()),
                    Err(reason) => {
                        report.failed += 1;
                        queue.nack(&task.task_id, worker, &reason).map(|_| ())
                    }
                };
                match settled {
                    // the lease ran out mid-task; another worker owns it now
                    Err(QueueError::LeaseNotHeld { .. }) => {}
                    other => other?,
                }
            }
            None => {
                if queue.counts()?.live() == 0 {
                    return Ok(report);
                }
                std::thread::sleep(config.poll);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn queue() -> Queue {
        Queue::new(Arc::new(Store::in_memory().unwrap())).with_clock(Clock::virtual_at(0))
    }

    const MIN: Duration = Duration::from_secs(60);

    #[test]
    fn enqueue_dedups() {
        let q = queue();
        let a = q.enqueue("k", json!({}), "key").unwrap();
        let b = q.enqueue("k", json!({"x": 1}), "key").unwrap();
        let c = q.enqueue("k", json!({}), "other").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(matches!(q.enqueue("k", json!({}), ""), Err(QueueError::EmptyKey)));
    }

    #[test]
    fn empty_queue_leases_nothing() {
        assert!(queue().lease("w", MIN).unwrap().is_none());
    }

    #[test]
    fn lease_is_exclusive() {
        let q = queue();
        q.enqueue("k", json!({}), "one").unwrap();
        let a = q.lease("w1", MIN).unwrap();
        let b = q.lease("w2", MIN).unwrap();
        assert!(a.is_some() && b.is_none());
    }

    #[test]
    fn expired_lease_is_retaken() {
        let q = queue();
        let id = q.enqueue("k", json!({}), "one").unwrap();
        let first = q.lease("w1", MIN).unwrap().unwrap();
        assert_eq!(first.attempts, 1);
        q.clock().advance(MIN + Duration::from_millis(1));
        let second = q.lease("w2", MIN).unwrap().unwrap();
        assert_eq!(second.task_id, id);
        assert_eq!(second.attempts, 2);
        assert!(matches!(q.ack(&id, "w1"), Err(QueueError::LeaseNotHeld { .. })));
        q.ack(&id, "w2").unwrap();
        assert_eq!(q.task(&id).unwrap().state, TaskState::Done);
    }

    #[test]
    fn nack_until_dead() {
        let q = queue().with_max_attempts(2);
        let id = q.enqueue("k", json!({}), "one").unwrap();
        q.lease("w", MIN).unwrap().unwrap();
        assert_eq!(q.nack(&id, "w", "boom").unwrap(), TaskState::Pending);
        q.lease("w", MIN).unwrap().unwrap();
        assert_eq!(q.nack(&id, "w", "boom").unwrap(), TaskState::Dead);
        let t = q.task(&id).unwrap();
        assert_eq!(t.last_error.as_deref(), Some("boom"));
        assert!(q.lease("w", MIN).unwrap().is_none());
    }

    #[test]
    fn pool_runs_children() {
        let q = Queue::new(Arc::new(Store::in_memory().unwrap()));
        q.enqueue("count", json!({"n": 3}), "root").unwrap();
        let handler = |t: &Task| -> Result<Vec<NewTask>, String> {
            let n = t.payload["n"].as_i64().unwrap();
            Ok(if n > 0 {
                vec![NewTask::new("count", json!({"n": n - 1}), format!("n{}", n - 1))]
            } else {
                vec![]
            })
        };
        let report = run_until_idle(&q, &handler, &PoolConfig { workers: 3, ..PoolConfig::default() }).unwrap();
        assert_eq!(report.executed, 4);
        assert_eq!(q.counts().unwrap().done, 4);
    }
}
