//! Text-generation backends.
//!
//! [`LmBackend`] is the seam between the subroutine engine and a language
//! model. [`HttpBackend`] talks to a remote service; [`ScriptedBackend`]
//! simulates prompts of known quality deterministically so the whole stack
//! can be exercised without a model.

mod generators;
mod http;
mod scripted;

use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::schema::{emit_constraint_schema, Schema, SubroutineSpec, Violation};

pub use generators::{default_for_schema, fill, GenContext, Generator, GeneratorRegistry};
pub use http::{HttpBackend, HttpConfig};
pub use scripted::{Behavior, PoolPrompt, PromptPool, ScriptedBackend, ScriptedConfig, ScriptedProfile};

/// Version tag of the bundled prompt-engineer meta-prompt.
pub const META_PROMPT_VERSION: &str = "v1";

/// System prompt used when asking a backend to write a system prompt.
pub const META_PROMPT: &str = include_str!("../../assets/prompt_engineer_v1.md");

/// Default sampling temperature for prompt synthesis.
pub const SYNTHESIS_TEMPERATURE: f64 = 1.0;
/// Default sampling temperature for task execution.
pub const TASK_TEMPERATURE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("output violates constraint: {0}")]
    ConstraintViolation(Violation),
    #[error("no scripted profile for prompt {0}")]
    UnknownFingerprint(String),
    #[error("backend returned an empty generation")]
    EmptyGeneration,
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("unknown generator `{0}`")]
    UnknownGenerator(String),
}

/// Hex SHA-256 of a prompt. Textually identical prompts share a fingerprint
/// and therefore an arm.
pub fn fingerprint(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub system_prompt: String,
    pub user_payload: String,
    /// Output schema; its constraint document is sent with the request.
    pub schema: Schema,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn constraint(&self) -> String {
        emit_constraint_schema(&self.schema)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub raw_text: String,
    pub backend_id: String,
    pub latency: Duration,
}

/// Request for a fresh system prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRequest {
    pub spec: SubroutineSpec,
    pub context: Option<String>,
    /// Number of arms already explored for this subroutine.
    pub ordinal: u64,
    pub seed: u64,
}

pub trait LmBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    /// One generation. Implementations may validate the output against
    /// `request.schema`; callers validate regardless.
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;

    /// Produce a new candidate system prompt for a subroutine.
    fn synthesize_prompt(&self, request: &SynthesisRequest) -> Result<String, BackendError>;
}

/// Fixed-width unit interval sample derived from arbitrary byte parts.
pub(crate) fn unit_hash(parts: &[&[u8]]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

pub(crate) fn u64_hash(parts: &[&[u8]]) -> u64 {
    (unit_hash(parts) * (1u64 << 53) as f64) as u64
}
