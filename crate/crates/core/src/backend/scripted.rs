use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::generators::{GenContext, GeneratorRegistry};
use super::{
    fingerprint, u64_hash, unit_hash, BackendError, GenerationRequest, GenerationResult,
    LmBackend, SynthesisRequest,
};
use crate::payload;
use crate::schema::{FieldKind, Schema};

/// Generator names for the two outcomes of a scripted call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Behavior {
    pub correct: String,
    pub incorrect: String,
}

impl Behavior {
    pub fn new(correct: &str, incorrect: &str) -> Self {
        Self {
            correct: correct.to_string(),
            incorrect: incorrect.to_string(),
        }
    }
}

impl Default for Behavior {
    fn default() -> Self {
        Behavior::new("schema_default", "schema_default")
    }
}

/// Quality profile for one known prompt, matched by fingerprint or by
/// exact prompt text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedProfile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_text: Option<String>,
    pub error_rate: f64,
    #[serde(flatten)]
    pub behavior: Behavior,
}

/// A canned instruction handed out by prompt synthesis. Every prompt built
/// from it (with any context or variant suffix) inherits its profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolPrompt {
    pub instruction: String,
    pub error_rate: f64,
    #[serde(flatten)]
    pub behavior: Behavior,
}

impl PoolPrompt {
    pub fn new(instruction: &str, error_rate: f64, behavior: Behavior) -> Self {
        Self {
            instruction: instruction.to_string(),
            error_rate,
            behavior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    /// Subroutine name the pool serves.
    pub subroutine: String,
    pub prompts: Vec<PoolPrompt>,
    /// Synthesis draws uniformly from the pool and never appends variant
    /// suffixes, so a repeated draw lands on an existing arm.
    #[serde(default)]
    pub finite: bool,
}

fn default_fallback_rate() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedConfig {
    /// Unknown prompts are an error when set; otherwise they use the
    /// fallback profile.
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "default_fallback_rate")]
    pub fallback_error_rate: f64,
    #[serde(default)]
    pub fallback: Behavior,
    #[serde(default)]
    pub pools: Vec<PromptPool>,
    #[serde(default)]
    pub profiles: Vec<ScriptedProfile>,
}

impl Default for ScriptedConfig {
    fn default() -> Self {
        Self {
            strict: false,
            fallback_error_rate: default_fallback_rate(),
            fallback: Behavior::default(),
            pools: Vec::new(),
            profiles: Vec::new(),
        }
    }
}

impl ScriptedConfig {
    pub fn strict() -> Self {
        Self {
            strict: true,
            ..Self::default()
        }
    }

    pub fn with_pool(mut self, subroutine: &str, prompts: Vec<PoolPrompt>) -> Self {
        self.pools.push(PromptPool {
            subroutine: subroutine.to_string(),
            prompts,
            finite: false,
        });
        self
    }

    /// Like [`ScriptedConfig::with_pool`] with a finite pool.
    pub fn with_finite_pool(mut self, subroutine: &str, prompts: Vec<PoolPrompt>) -> Self {
        self = self.with_pool(subroutine, prompts);
        self.pools.last_mut().expect("just pushed").finite = true;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
        } else {
            Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
        }
    }
}

/// Deterministic stand-in for a language model.
///
/// Generation is a pure function of the profile table, the request seed,
/// the prompt fingerprint and the user payload: a uniform draw decides
/// whether the prompt's correct or incorrect generator produces the output.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    config: ScriptedConfig,
    registry: GeneratorRegistry,
}

struct Resolved<'a> {
    error_rate: f64,
    behavior: &'a Behavior,
}

impl ScriptedBackend {
    pub fn new(config: ScriptedConfig, registry: GeneratorRegistry) -> Result<Self, BackendError> {
        let names = config
            .pools
            .iter()
            .flat_map(|p| p.prompts.iter().map(|q| &q.behavior))
            .chain(config.profiles.iter().map(|p| &p.behavior))
            .chain(std::iter::once(&config.fallback))
            .flat_map(|b| [&b.correct, &b.incorrect]);
        for name in names {
            if !registry.contains(name) {
                return Err(BackendError::UnknownGenerator(name.clone()));
            }
        }
        Ok(Self { config, registry })
    }

    pub fn with_builtin(config: ScriptedConfig) -> Result<Self, BackendError> {
        Self::new(config, GeneratorRegistry::builtin())
    }

    pub fn config(&self) -> &ScriptedConfig {
        &self.config
    }

    fn resolve(&self, prompt: &str) -> Result<Resolved<'_>, BackendError> {
        let fp = fingerprint(prompt);
        if let Some(p) = self.config.profiles.iter().find(|p| {
            p.fingerprint.as_deref() == Some(fp.as_str())
                || p.prompt_text.as_deref() == Some(prompt)
        }) {
            return Ok(Resolved {
                error_rate: p.error_rate,
                behavior: &p.behavior,
            });
        }
        let pooled = self
            .config
            .pools
            .iter()
            .flat_map(|pool| pool.prompts.iter())
            .filter(|q| prompt.starts_with(&q.instruction))
            .max_by_key(|q| q.instruction.len());
        if let Some(q) = pooled {
            return Ok(Resolved {
                error_rate: q.error_rate,
                behavior: &q.behavior,
            });
        }
        if self.config.strict {
            return Err(BackendError::UnknownFingerprint(fp));
        }
        Ok(Resolved {
            error_rate: self.config.fallback_error_rate,
            behavior: &self.config.fallback,
        })
    }
}

const GENERIC_INSTRUCTION: &str = "You are a careful assistant. Perform the task described below.";

impl LmBackend for ScriptedBackend {
    fn backend_id(&self) -> &str {
        "scripted"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let started = Instant::now();
        let resolved = self.resolve(&request.system_prompt)?;
        let fp = fingerprint(&request.system_prompt);
        let seed = request.seed.unwrap_or(0).to_le_bytes();
        let parts: [&[u8]; 3] = [&seed, fp.as_bytes(), request.user_payload.as_bytes()];
        let correct = unit_hash(&parts) >= resolved.error_rate;
        let name = if correct {
            &resolved.behavior.correct
        } else {
            &resolved.behavior.incorrect
        };
        let generator = self
            .registry
            .get(name)
            .ok_or_else(|| BackendError::UnknownGenerator(name.clone()))?;
        let cx = GenContext {
            request,
            fields: payload::parse(&request.user_payload),
            entropy: u64_hash(&[parts[0], parts[1], parts[2], b"entropy"]),
        };
        let raw_text = serde_json::to_string(&generator(&cx)).expect("json serializes");
        Ok(GenerationResult {
            raw_text,
            backend_id: self.backend_id().to_string(),
            latency: started.elapsed(),
        })
    }

    fn synthesize_prompt(&self, request: &SynthesisRequest) -> Result<String, BackendError> {
        let pool = self
            .config
            .pools
            .iter()
            .find(|p| p.subroutine == request.spec.name() && !p.prompts.is_empty());
        let (instruction, variant) = match pool {
            Some(pool) if pool.finite => {
                let k = pool.prompts.len() as u64;
                let pick = u64_hash(&[&request.seed.to_le_bytes(), pool.subroutine.as_bytes()]) % k;
                (pool.prompts[pick as usize].instruction.as_str(), 0)
            }
            Some(pool) => {
                let k = pool.prompts.len() as u64;
                (
                    pool.prompts[(request.ordinal % k) as usize].instruction.as_str(),
                    request.ordinal / k,
                )
            }
            None if self.config.strict => {
                return Err(BackendError::UnknownFingerprint(format!(
                    "no prompt pool for `{}`",
                    request.spec.name()
                )))
            }
            None => (GENERIC_INSTRUCTION, request.ordinal),
        };
        let mut prompt = format!(
            "{instruction}\n\nTask: {}\n\nYour response must be a JSON object adhering to the following schema:\n\n```json\n{}\n```",
            request.spec.task_doc(),
            schema_block(request.spec.output_schema())
        );
        if let Some(ctx) = request.context.as_deref().filter(|c| !c.trim().is_empty()) {
            prompt.push_str(&format!("\n\nContext:\n{ctx}"));
        }
        if variant > 0 {
            prompt.push_str(&format!("\n\n(variant {variant})"));
        }
        Ok(prompt)
    }
}

fn placeholder(kind: &FieldKind) -> String {
    match kind {
        FieldKind::Text => "\"...\"".into(),
        FieldKind::Integer => "integer".into(),
        FieldKind::BoundedInteger { lo, hi } => format!("integer ({lo} to {hi})"),
        FieldKind::Enumeration { values } => values
            .iter()
            .map(|v| format!("\"{v}\""))
            .collect::<Vec<_>>()
            .join(" | "),
        FieldKind::List { item, .. } => format!("[{}, ...]", placeholder(item)),
        FieldKind::Record { fields } => format!(
            "{{ {} }}",
            fields
                .iter()
                .map(|f| format!("\"{}\": {}", f.name, placeholder(&f.kind)))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

/// Annotated JSON skeleton of an output schema, one field per line.
pub fn schema_block(schema: &Schema) -> String {
    let n = schema.fields().len();
    let lines: Vec<String> = schema
        .fields()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let comma = if i + 1 < n { "," } else { "" };
            let doc = if f.doc.is_empty() {
                String::new()
            } else {
                format!(" // {}", f.doc)
            };
            format!("  \"{}\": {}{comma}{doc}", f.name, placeholder(&f.kind))
        })
        .collect();
    format!("{{\n{}\n}}", lines.join("\n"))
}
