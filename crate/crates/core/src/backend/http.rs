use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    BackendError, GenerationRequest, GenerationResult, LmBackend, SynthesisRequest, META_PROMPT,
    SYNTHESIS_TEMPERATURE,
};
use crate::engine::serialize_declaration;
use crate::payload;
use crate::schema::{validate_text, FieldKind, FieldSpec, Record, Schema};

pub const ENV_ENDPOINT: &str = "AUDITLM_LM_ENDPOINT";
pub const ENV_API_KEY: &str = "AUDITLM_LM_API_KEY";
pub const ENV_MODEL: &str = "AUDITLM_LM_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    #[serde(default)]
    pub api_key: Option<String>,
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_synthesis_temperature")]
    pub synthesis_temperature: f64,
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_max_in_flight() -> usize {
    8
}

fn default_synthesis_temperature() -> f64 {
    SYNTHESIS_TEMPERATURE
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            model: model.into(),
            timeout_secs: default_timeout_secs(),
            max_in_flight: default_max_in_flight(),
            synthesis_temperature: default_synthesis_temperature(),
        }
    }

    /// Read endpoint, credential and model from the environment.
    pub fn from_env() -> Result<Self, String> {
        let endpoint =
            std::env::var(ENV_ENDPOINT).map_err(|_| format!("{ENV_ENDPOINT} is not set"))?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".to_string());
        let mut cfg = Self::new(endpoint, model);
        cfg.api_key = std::env::var(ENV_API_KEY).ok();
        Ok(cfg)
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock();
        while *free == 0 {
            self.cv.wait(&mut free);
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

/// Backend speaking a small JSON protocol over HTTP.
///
/// Request body: `{"model", "system", "user", "constraint", "temperature",
/// "seed"}` where `constraint` is the constraint document as a JSON object.
/// Response body: `{"text": "<raw model output>"}`.
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    gate: Gate,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        let gate = Gate::new(config.max_in_flight);
        Ok(Self {
            config,
            client,
            gate,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn round_trip(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let constraint: serde_json::Value =
            serde_json::from_str(&request.constraint()).expect("constraint is json");
        let body = json!({
            "model": self.config.model,
            "system": request.system_prompt,
            "user": request.user_payload,
            "constraint": constraint,
            "temperature": request.temperature,
            "seed": request.seed,
        });
        let _permit = self.gate.acquire();
        let mut call = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.config.api_key {
            call = call.bearer_auth(key);
        }
        let response = call
            .send()
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(BackendError::Unreachable(format!("HTTP {status}")));
        }
        let wire: WireResponse = response
            .json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(wire.text)
    }
}

impl LmBackend for HttpBackend {
    fn backend_id(&self) -> &str {
        "http"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let started = Instant::now();
        let raw_text = self.round_trip(request)?;
        validate_text(&request.schema, &raw_text).map_err(BackendError::ConstraintViolation)?;
        Ok(GenerationResult {
            raw_text,
            backend_id: self.backend_id().to_string(),
            latency: started.elapsed(),
        })
    }

    fn synthesize_prompt(&self, request: &SynthesisRequest) -> Result<String, BackendError> {
        let schema = Schema::new(vec![FieldSpec::new(
            "system_prompt",
            FieldKind::Text,
            "The complete system prompt",
        )])
        .expect("static schema");
        let mut input = Record::new().with("declaration", serialize_declaration(&request.spec));
        if let Some(ctx) = &request.context {
            input.insert("context", ctx.clone());
        }
        let gen = GenerationRequest {
            system_prompt: META_PROMPT.to_string(),
            user_payload: payload::render(&input, &[]),
            schema,
            temperature: self.config.synthesis_temperature,
            seed: Some(request.seed),
        };
        let out = self.generate(&gen)?;
        let record = validate_text(&gen.schema, &out.raw_text)
            .map_err(BackendError::ConstraintViolation)?;
        let prompt = record.text("system_prompt").unwrap_or_default().trim().to_string();
        if prompt.is_empty() {
            return Err(BackendError::EmptyGeneration);
        }
        Ok(prompt)
    }
}
