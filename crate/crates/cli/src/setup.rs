//! Store, backend and pipeline construction shared by every command.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use auditlm::backend::{HttpBackend, HttpConfig, LmBackend};
use auditlm::engine::{Engine, EngineConfig};
use auditlm::queue::PoolConfig;
use auditlm::store::Store;
use auditlm::{ScriptedBackend, ScriptedConfig};
use commentnepa::scripted::{pipeline_config, registry};
use commentnepa::{ExecOptions, Pipeline};

use crate::CliError;

pub const ENV_STORE: &str = "COMMENTNEPA_STORE";
pub const ENV_BACKEND: &str = "COMMENTNEPA_BACKEND";
pub const ENV_SCRIPTED_PROFILE: &str = "COMMENTNEPA_SCRIPTED_PROFILE";
pub const ENV_TASK_DELAY_MS: &str = "COMMENTNEPA_TASK_DELAY_MS";
pub const ENV_WORKERS: &str = "COMMENTNEPA_WORKERS";

pub const DEFAULT_STORE: &str = "commentnepa.db";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendKind {
    /// Deterministic offline backend.
    Scripted,
    /// JSON-over-HTTP model endpoint, configured by `AUDITLM_LM_*`.
    Http,
}

pub fn open_store(path: &Path) -> Result<Arc<Store>, CliError> {
    Store::open(path)
        .map(Arc::new)
        .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

/// `profile` replaces the built-in scripted prompt pools.
pub fn backend(kind: BackendKind, profile: Option<&Path>) -> Result<Arc<dyn LmBackend>, CliError> {
    match kind {
        BackendKind::Scripted => {
            let cfg = match profile {
                Some(p) => ScriptedConfig::load(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
                None => pipeline_config(),
            };
            let b = ScriptedBackend::new(cfg, registry()).map_err(CliError::failed)?;
            Ok(Arc::new(b))
        }
        BackendKind::Http => {
            let cfg = HttpConfig::from_env().map_err(CliError::Input)?;
            Ok(Arc::new(HttpBackend::new(cfg).map_err(CliError::failed)?))
        }
    }
}

fn env_number(name: &str) -> Result<Option<u64>, CliError> {
    match std::env::var(name) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Input(format!("{name} must be a non-negative integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Worker count and per-task delay from the environment.
pub fn exec_options_from_env() -> Result<ExecOptions, CliError> {
    let mut pool = PoolConfig::default();
    if let Some(w) = env_number(ENV_WORKERS)? {
        pool.workers = w.max(1) as usize;
    }
    let task_delay = Duration::from_millis(env_number(ENV_TASK_DELAY_MS)?.unwrap_or(0));
    Ok(ExecOptions { pool, task_delay })
}

/// Where the store lives, what generates text, how tasks execute.
#[derive(Debug, Clone)]
pub struct Environment {
    pub store: PathBuf,
    pub backend: BackendKind,
    pub scripted_profile: Option<PathBuf>,
}

impl Environment {
    pub fn pipeline(&self) -> Result<Pipeline, CliError> {
        let engine = Engine::new(
            open_store(&self.store)?,
            backend(self.backend, self.scripted_profile.as_deref())?,
            EngineConfig::default(),
        );
        Ok(Pipeline::with_options(Arc::new(engine), exec_options_from_env()?)?)
    }
}
