//! Subroutine registration and invocation.
//!
//! An invocation draws an arm from the subroutine's bandit, synthesizes a
//! new prompt when the exploration arm comes up, runs the backend with
//! retries on constraint violations, and persists the result together with
//! its parent edges and the arm's pull in one store transaction.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};

use crate::backend::{
    fingerprint, BackendError, GenerationRequest, LmBackend, SynthesisRequest, TASK_TEMPERATURE,
};
use crate::bandit::{ArmId, BanditState, BetaSchedule, Choice, DEFAULT_EXPLORE_PRIOR};
use crate::payload;
use crate::schema::{
    describe_fields, validate_payload, validate_text, Record, Schema, SchemaError, SubroutineSpec,
    Violation,
};
use crate::store::{self, Invocation, InvocationStatus, NewInvocation, Snapshot, Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid declaration: {0}")]
    SpecInvalid(#[from] SchemaError),
    #[error("input does not match the input schema: {0}")]
    InputInvalid(Violation),
    #[error("invocation {invocation_id} failed: {reason}")]
    InvocationFailed {
        invocation_id: String,
        reason: String,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

impl EngineError {
    /// Id of the persisted failed invocation, if this error left one.
    pub fn failed_invocation(&self) -> Option<&str> {
        match self {
            EngineError::InvocationFailed { invocation_id, .. } => Some(invocation_id),
            _ => None,
        }
    }
}

pub type EngineResult<T> = Result<T, EngineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub schedule: BetaSchedule<f64>,
    pub explore_prior: f64,
    /// Extra attempts after a constraint violation.
    pub max_retries: u32,
    pub task_temperature: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            schedule: BetaSchedule::linear(0.0, 1.0, 100),
            explore_prior: DEFAULT_EXPLORE_PRIOR,
            max_retries: 2,
            task_temperature: TASK_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubroutineHandle {
    pub subroutine_id: String,
    pub spec: SubroutineSpec,
}

/// Stable id: the declaration name plus a prefix of its hash.
pub fn subroutine_id(spec: &SubroutineSpec) -> String {
    format!("{}-{}", spec.name(), &spec.hash()[..12])
}

fn short_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(&h.finalize()[..12])
}

fn seed_of(invocation_id: &str) -> u64 {
    let digest = Sha256::digest(invocation_id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

/// Invocation id for an idempotency key. Equal keys map to equal ids.
pub fn keyed_invocation_id(subroutine_id: &str, key: &str) -> String {
    format!("inv_{}", short_hash(&[subroutine_id, key]))
}

static FRESH: AtomicU64 = AtomicU64::new(0);

fn fresh_invocation_id(subroutine_id: &str) -> String {
    let n = FRESH.fetch_add(1, Ordering::Relaxed);
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    format!(
        "inv_{}",
        short_hash(&[subroutine_id, &n.to_string(), &nanos.to_string(), &std::process::id().to_string()])
    )
}

/// Human-readable rendering of a declaration, embedded in the
/// prompt-engineer request.
pub fn serialize_declaration(spec: &SubroutineSpec) -> String {
    let mut out = format!("Subroutine: {}\n\nTask:\n{}\n", spec.name(), spec.task_doc().trim());
    out.push_str("\nInputs:\n");
    if spec.input_schema().is_empty() {
        out.push_str("(none)\n");
    } else {
        out.push_str(&describe_fields(spec.input_schema()));
    }
    out.push_str("\nOutputs:\n");
    if spec.output_schema().is_empty() {
        out.push_str("(none)\n");
    } else {
        out.push_str(&describe_fields(spec.output_schema()));
    }
    if let Some(ctx) = spec.context() {
        out.push_str(&format!("\nContext:\n{}\n", ctx.trim()));
    }
    out
}

/// Per-call options beyond the input record.
#[derive(Debug, Clone, Default)]
pub struct InvokeOptions {
    pub parents: Vec<String>,
    /// Idempotency key: a second call with the same key returns the first
    /// call's invocation without running anything.
    pub key: Option<String>,
    pub batch_id: Option<String>,
    pub stage: Option<String>,
    /// Frozen arm statistics to sample from instead of the live ones.
    pub snapshot: Option<Snapshot>,
    /// Output schema for this call only (e.g. a per-batch enumeration).
    pub output_schema: Option<Schema>,
    /// Extra user-payload sections after the declared inputs.
    pub extra: Vec<(String, String)>,
    pub seed: Option<u64>,
}

impl InvokeOptions {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parents<I, S>(mut self, parents: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.parents = parents.into_iter().map(Into::into).collect();
        self
    }

    pub fn key(mut self, key: impl Into<String>) -> Self {
        self.key = Some(key.into());
        self
    }

    pub fn batch(mut self, batch_id: impl Into<String>, stage: impl Into<String>) -> Self {
        self.batch_id = Some(batch_id.into());
        self.stage = Some(stage.into());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

impl Invocation {
    /// Output decoded against the schema recorded with the invocation.
    pub fn output_record(&self) -> Option<Record> {
        let schema: Schema = serde_json::from_value(self.output_schema.clone()).ok()?;
        validate_payload(&schema, self.output.as_ref()?).ok()
    }

    pub fn output_schema(&self) -> Option<Schema> {
        serde_json::from_value(self.output_schema.clone()).ok()
    }
}

/// Result of re-running a recorded generation.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub invocation_id: String,
    pub recorded: Option<String>,
    pub replayed: Option<String>,
}

impl ReplayOutcome {
    pub fn matches(&self) -> bool {
        self.recorded == self.replayed
    }
}

struct Attempt {
    raw: Option<String>,
    output: Option<Record>,
    attempts: u32,
    error: Option<String>,
}

pub struct Engine {
    store: Arc<Store>,
    backend: Arc<dyn LmBackend>,
    config: EngineConfig,
}

impl Engine {
    pub fn new(store: Arc<Store>, backend: Arc<dyn LmBackend>, config: EngineConfig) -> Self {
        Self {
            store,
            backend,
            config,
        }
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn backend(&self) -> &Arc<dyn LmBackend> {
        &self.backend
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Register a declaration. Idempotent: the same spec yields the same
    /// handle and leaves existing arms alone.
    pub fn register(&self, spec: &SubroutineSpec) -> EngineResult<SubroutineHandle> {
        self.register_with_dims(spec, None)
    }

    /// Register with rating dimensions (JSON list) attached for reviewers.
    pub fn register_with_dims(
        &self,
        spec: &SubroutineSpec,
        rating_dims: Option<&Json>,
    ) -> EngineResult<SubroutineHandle> {
        let id = subroutine_id(spec);
        self.store
            .transaction(|tx| store::upsert_subroutine(tx, &id, spec, rating_dims))?;
        Ok(SubroutineHandle {
            subroutine_id: id,
            spec: spec.clone(),
        })
    }

    /// Live bandit state with β taken from the schedule.
    pub fn bandit_state(&self, subroutine_id: &str) -> EngineResult<BanditState<f64>> {
        let mut state = self.store.bandit_state(subroutine_id)?;
        self.tune(&mut state);
        Ok(state)
    }

    fn tune(&self, state: &mut BanditState<f64>) {
        state.beta = self.config.schedule.beta_at(state.trial_index);
        state.explore_prior = self.config.explore_prior;
    }

    /// Record a non-LM source datum (e.g. an ingested document) as an
    /// invocation whose output equals its input.
    pub fn record_source(
        &self,
        handle: &SubroutineHandle,
        input: &Record,
        opts: InvokeOptions,
    ) -> EngineResult<Invocation> {
        let input_json = input.to_json();
        validate_payload(handle.spec.input_schema(), &input_json).map_err(EngineError::InputInvalid)?;
        let id = match &opts.key {
            Some(k) => keyed_invocation_id(&handle.subroutine_id, k),
            None => fresh_invocation_id(&handle.subroutine_id),
        };
        let schema = handle.spec.input_schema();
        let new = NewInvocation {
            invocation_id: id.clone(),
            invocation_key: opts.key.clone(),
            subroutine_id: handle.subroutine_id.clone(),
            arm_id: None,
            input: input_json.clone(),
            output: Some(input_json),
            raw_output: None,
            user_payload: payload::render(input, &[]),
            output_schema: serde_json::to_value(schema).expect("schema serializes"),
            output_schema_hash: schema.hash(),
            seed: 0,
            attempts: 0,
            status: InvocationStatus::Succeeded,
            error: None,
            batch_id: opts.batch_id.clone(),
            stage: opts.stage.clone(),
            snapshot_version: None,
        };
        self.store.transaction(|tx| -> EngineResult<()> {
            if store::invocation_by_key_opt(tx, opts.key.as_deref())?.is_some() {
                return Ok(());
            }
            store::persist_invocation(tx, &new, &opts.parents)?;
            Ok(())
        })?;
        Ok(self.store.invocation(&id)?)
    }

    /// Run one invocation. A backend failure persists a failed invocation,
    /// charges its arm loss 1.0 and returns [`EngineError::InvocationFailed`].
    pub fn invoke(
        &self,
        handle: &SubroutineHandle,
        input: &Record,
        opts: InvokeOptions,
    ) -> EngineResult<Invocation> {
        let input_json = input.to_json();
        validate_payload(handle.spec.input_schema(), &input_json).map_err(EngineError::InputInvalid)?;

        let sid = handle.subroutine_id.as_str();
        let id = match &opts.key {
            Some(k) => {
                if let Some(existing) = self.store.invocation_by_key(k)? {
                    return settle(existing);
                }
                keyed_invocation_id(sid, k)
            }
            None => fresh_invocation_id(sid),
        };
        let seed = opts.seed.unwrap_or_else(|| seed_of(&id));

        let (mut state, snapshot_version) = match &opts.snapshot {
            Some(s) => (s.state.clone(), Some(s.version)),
            None => (self.store.bandit_state(sid)?, None),
        };
        self.tune(&mut state);

        let schema = opts
            .output_schema
            .clone()
            .unwrap_or_else(|| handle.spec.output_schema().clone());
        let user_payload = payload::render(input, &opts.extra);

        // Arm selection. A failed synthesis leaves no arm to charge.
        let picked: Result<(ArmId, String, bool), BackendError> = match state.draw(seed) {
            Choice::Arm(arm) => match self.store.read(|c| store::arm_prompt(c, sid, &arm))? {
                Some(prompt) => Ok((arm, prompt, false)),
                None => Err(BackendError::Protocol(format!("arm {arm} has no prompt"))),
            },
            Choice::Explore => {
                // counted on the sampled state, not the live table, so that
                // concurrent or resumed draws from one snapshot agree
                let ordinal = state.arms.len() as u64;
                self.backend
                    .synthesize_prompt(&SynthesisRequest {
                        spec: handle.spec.clone(),
                        context: handle.spec.context().map(str::to_string),
                        ordinal,
                        seed: seed.rotate_left(17) ^ 0x5eed,
                    })
                    .map(|prompt| (ArmId(fingerprint(&prompt)), prompt, true))
            }
        };

        let (arm, attempt) = match picked {
            Ok((arm, prompt, fresh)) => {
                let attempt = self.generate(&prompt, &user_payload, &schema, seed);
                (Some((arm, prompt, fresh)), attempt)
            }
            Err(e) => (
                None,
                Attempt {
                    raw: None,
                    output: None,
                    attempts: 0,
                    error: Some(format!("prompt synthesis failed: {e}")),
                },
            ),
        };

        let status = if attempt.output.is_some() {
            InvocationStatus::Succeeded
        } else {
            InvocationStatus::Failed
        };
        let new = NewInvocation {
            invocation_id: id.clone(),
            invocation_key: opts.key.clone(),
            subroutine_id: sid.to_string(),
            arm_id: arm.as_ref().map(|(a, _, _)| a.clone()),
            input: input_json,
            output: attempt.output.as_ref().map(Record::to_json),
            raw_output: attempt.raw,
            user_payload,
            output_schema: serde_json::to_value(&schema).expect("schema serializes"),
            output_schema_hash: schema.hash(),
            seed,
            attempts: attempt.attempts,
            status,
            error: attempt.error,
            batch_id: opts.batch_id.clone(),
            stage: opts.stage.clone(),
            snapshot_version,
        };

        let persisted = self.store.transaction(|tx| -> EngineResult<Invocation> {
            // a concurrent call with the same key may have won the race
            if let Some(existing) = store::invocation_by_key_opt(tx, opts.key.as_deref())? {
                return Ok(existing);
            }
            if let Some((arm_id, prompt, fresh)) = &arm {
                if *fresh {
                    store::ensure_arm(tx, sid, arm_id, prompt)?;
                }
                store::record_pull(tx, sid, arm_id)?;
            }
            store::persist_invocation(tx, &new, &opts.parents)?;
            if status == InvocationStatus::Failed {
                if let Some((arm_id, _, _)) = &arm {
                    store::record_loss(tx, &format!("failure:{id}"), sid, arm_id, Some(&id), 1.0, "failure")?;
                }
            }
            Ok(store::invocation(tx, &id)?)
        })?;
        settle(persisted)
    }

    fn generate(&self, prompt: &str, user_payload: &str, schema: &Schema, seed: u64) -> Attempt {
        let mut last_raw = None;
        let mut last_error = None;
        let mut attempts = 0;
        for attempt in 0..=self.config.max_retries {
            attempts += 1;
            let request = GenerationRequest {
                system_prompt: prompt.to_string(),
                user_payload: user_payload.to_string(),
                schema: schema.clone(),
                temperature: self.config.task_temperature,
                seed: Some(seed.wrapping_add(attempt as u64)),
            };
            match self.backend.generate(&request) {
                Ok(result) => match validate_text(schema, &result.raw_text) {
                    Ok(record) => {
                        return Attempt {
                            raw: Some(result.raw_text),
                            output: Some(record),
                            attempts,
                            error: None,
                        }
                    }
                    Err(v) => {
                        last_raw = Some(result.raw_text);
                        last_error = Some(BackendError::ConstraintViolation(v).to_string());
                    }
                },
                Err(e @ BackendError::ConstraintViolation(_)) => last_error = Some(e.to_string()),
                Err(e) => {
                    return Attempt {
                        raw: None,
                        output: None,
                        attempts,
                        error: Some(e.to_string()),
                    }
                }
            }
        }
        Attempt {
            raw: last_raw,
            output: None,
            attempts,
            error: last_error,
        }
    }

    /// Re-run the final attempt of a recorded invocation through the
    /// current backend and compare raw outputs.
    pub fn replay(&self, invocation: &Invocation) -> EngineResult<ReplayOutcome> {
        let recorded = invocation.raw_output.clone();
        let arm = match &invocation.arm_id {
            Some(a) => a,
            None => {
                return Ok(ReplayOutcome {
                    invocation_id: invocation.invocation_id.clone(),
                    recorded: recorded.clone(),
                    replayed: recorded,
                })
            }
        };
        let prompt = self
            .store
            .read(|c| store::arm_prompt(c, &invocation.subroutine_id, arm))?
            .ok_or_else(|| StoreError::UnknownArm {
                subroutine: invocation.subroutine_id.clone(),
                arm: arm.to_string(),
            })?;
        let schema: Schema = serde_json::from_value(invocation.output_schema.clone())
            .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        let last = invocation.attempts.saturating_sub(1) as u64;
        let request = GenerationRequest {
            system_prompt: prompt,
            user_payload: invocation.user_payload.clone(),
            schema,
            temperature: self.config.task_temperature,
            seed: Some(invocation.seed.wrapping_add(last)),
        };
        let replayed = self.backend.generate(&request).ok().map(|r| r.raw_text);
        Ok(ReplayOutcome {
            invocation_id: invocation.invocation_id.clone(),
            recorded,
            replayed,
        })
    }
}

fn settle(inv: Invocation) -> EngineResult<Invocation> {
    match inv.status {
        InvocationStatus::Succeeded => Ok(inv),
        InvocationStatus::Failed => Err(EngineError::InvocationFailed {
            reason: inv.error.clone().unwrap_or_else(|| "unknown failure".into()),
            invocation_id: inv.invocation_id,
        }),
    }
}
