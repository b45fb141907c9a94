//! The rare-letters demonstration: a word-counting subroutine with a few
//! candidate prompts of different reliability, scored 0/1 against an exact
//! count. The bandit should learn to prefer the reliable prompt, so the
//! loss falls over the trials.

use std::fmt::Write as _;
use std::sync::Arc;

use auditlm::backend::{Behavior, PoolPrompt, ScriptedBackend, ScriptedConfig};
use auditlm::bandit::{ArmId, BetaSchedule};
use auditlm::engine::{Engine, EngineConfig, EngineError, InvokeOptions};
use auditlm::rare_letters::{self, count_rare_words, PANGRAMS, RARE_LETTERS};
use auditlm::schema::Record;
use auditlm::store::{self, Store};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::plot;
use super::smooth::gaussian_smooth;

/// Window, in trials, for the leading/trailing comparisons.
pub const WINDOW: usize = 100;

/// Prompt wordings, one per candidate arm; reused cyclically.
const WORDINGS: &[&str] = &[
    "Count the words that contain any of the rare letters, checking each word in turn.",
    "Count the words with rare letters.",
    "How many words have rare letters? Answer quickly.",
    "Give the number of rare-letter words.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub trials: usize,
    pub schedule: BetaSchedule<f64>,
    pub seed: u64,
    /// Letters the oracle counts.
    pub letters: Vec<char>,
    /// Error rate of each candidate prompt.
    pub error_rates: Vec<f64>,
    /// Smoothing width in trials.
    pub sigma: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            schedule: BetaSchedule::linear(0.0, 1.0, 100),
            seed: 0,
            letters: RARE_LETTERS.to_vec(),
            error_rates: vec![0.1, 0.5, 0.9],
            sigma: 15.0,
        }
    }
}

/// Oracle: words containing any of `letters`, case-insensitively.
pub fn oracle(text: &str, letters: &[char]) -> usize {
    count_rare_words(text, letters)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub sentence: usize,
    /// Index into the configured error rates; `None` when no prompt could
    /// be chosen.
    pub arm: Option<usize>,
    pub beta: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: usize,
    pub error_rate: f64,
    pub prompt: String,
    pub pulls: u64,
    pub mean_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoTrace {
    pub config: DemoConfig,
    pub trials: Vec<Trial>,
    pub smoothed: Vec<f64>,
    pub arms: Vec<ArmSummary>,
}

impl DemoTrace {
    pub fn losses(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.loss).collect()
    }

    pub fn cumulative_loss(&self) -> f64 {
        self.trials.iter().map(|t| t.loss).sum()
    }

    fn mean(xs: &[Trial]) -> Option<f64> {
        (!xs.is_empty()).then(|| xs.iter().map(|t| t.loss).sum::<f64>() / xs.len() as f64)
    }

    pub fn leading_mean(&self, window: usize) -> Option<f64> {
        Self::mean(&self.trials[..window.min(self.trials.len())])
    }

    pub fn trailing_mean(&self, window: usize) -> Option<f64> {
        Self::mean(&self.trials[self.trials.len().saturating_sub(window)..])
    }

    /// Most selected arm over the final `window` trials; lowest index on
    /// ties.
    pub fn modal_arm(&self, window: usize) -> Option<usize> {
        let mut counts = vec![0usize; self.config.error_rates.len()];
        for t in &self.trials[self.trials.len().saturating_sub(window)..] {
            if let Some(a) = t.arm {
                counts[a] += 1;
            }
        }
        let best = *counts.iter().max()?;
        (best > 0).then(|| counts.iter().position(|&c| c == best).unwrap())
    }

    pub fn selection_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.config.error_rates.len()];
        for t in &self.trials {
            if let Some(a) = t.arm {
                counts[a] += 1;
            }
        }
        counts
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("trial,sentence,arm,beta,loss,smoothed_loss\n");
        for (t, sm) in self.trials.iter().zip(&self.smoothed) {
            let arm = t.arm.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{:.6},{},{:.6}", t.trial, t.sentence, arm, t.beta, t.loss, sm);
        }
        s
    }

    pub fn arm_csv(&self) -> String {
        let mut s = String::from("trial,arm,error_rate\n");
        for t in &self.trials {
            match t.arm {
                Some(a) => {
                    let _ = writeln!(s, "{},{},{}", t.trial, a, self.config.error_rates[a]);
                }
                None => {
                    let _ = writeln!(s, "{},,", t.trial);
                }
            }
        }
        s
    }

    pub fn loss_svg(&self) -> String {
        plot::loss_chart(&self.losses(), &self.smoothed)
    }

    pub fn arm_svg(&self) -> String {
        let sel: Vec<usize> = self.trials.iter().filter_map(|t| t.arm).collect();
        let labels = self
            .config
            .error_rates
            .iter()
            .map(|r| format!("error {r}"))
            .collect::<Vec<_>>();
        plot::arm_chart(&sel, &labels)
    }
}

fn wording(i: usize) -> String {
    let w = WORDINGS[i % WORDINGS.len()];
    if i < WORDINGS.len() {
        w.to_string()
    } else {
        format!("{w} (#{i})")
    }
}

/// Run the demonstration against a scripted backend whose prompts have
/// the configured error rates.
pub fn run_demo(config: &DemoConfig) -> Result<DemoTrace, EngineError> {
    let prompts: Vec<PoolPrompt> = config
        .error_rates
        .iter()
        .enumerate()
        .map(|(i, &rate)| PoolPrompt::new(&wording(i), rate, Behavior::new("rare_letters_correct", "rare_letters_wrong")))
        .collect();
    let backend = ScriptedBackend::with_builtin(ScriptedConfig::strict().with_finite_pool("rare_letters", prompts))?;
    let engine = Engine::new(
        Arc::new(Store::in_memory()?),
        Arc::new(backend),
        EngineConfig {
            schedule: config.schedule,
            ..EngineConfig::default()
        },
    );
    let handle = engine.register(&rare_letters::spec())?;
    let sid = handle.subroutine_id.clone();
    let arm_index = |engine: &Engine, arm: &ArmId| -> Result<Option<usize>, EngineError> {
        let prompt = engine.store().read(|c| store::arm_prompt(c, &sid, arm))?;
        Ok(prompt.and_then(|p| (0..config.error_rates.len()).find(|&i| p.starts_with(&format!("{}\n", wording(i))))))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trials = Vec::with_capacity(config.trials);
    for t in 0..config.trials {
        let sentence = rng.random_range(0..PANGRAMS.len());
        let call_seed: u64 = rng.random();
        let beta = engine.bandit_state(&sid)?.beta;
        let text = PANGRAMS[sentence];
        let result = engine.invoke(
            &handle,
            &Record::new().with("given_text", text),
            InvokeOptions::new()
                .key(format!("demo/{}/{t}", config.seed))
                .seed(call_seed),
        );
        let (arm, loss) = match result {
            Ok(inv) => {
                let claimed = inv.output_record().and_then(|r| r.integer("character_count"));
                let loss = if claimed == Some(oracle(text, &config.letters) as i64) { 0.0 } else { 1.0 };
                let arm_id = inv.arm_id.clone().expect("LM invocation has an arm");
                engine.store().transaction(|tx| {
                    store::record_loss(tx, &format!("trial:{t}"), &sid, &arm_id, Some(&inv.invocation_id), loss, "oracle")
                })?;
                (arm_index(&engine, &arm_id)?, loss)
            }
            // the engine has already charged the arm for the failure
            Err(EngineError::InvocationFailed { invocation_id, .. }) => {
                let inv = engine.store().invocation(&invocation_id)?;
                let arm = match &inv.arm_id {
                    Some(a) => arm_index(&engine, a)?,
                    None => None,
                };
                (arm, 1.0)
            }
            Err(e) => return Err(e),
        };
        trials.push(Trial { trial: t, sentence, arm, beta, loss });
    }

    let losses: Vec<f64> = trials.iter().map(|t| t.loss).collect();
    let smoothed = gaussian_smooth(&losses, config.sigma);
    let mut arms = Vec::new();
    for rec in engine.store().arms(&sid)? {
        if let Some(i) = arm_index(&engine, &rec.arm_id)? {
            arms.push(ArmSummary {
                arm: i,
                error_rate: config.error_rates[i],
                prompt: rec.prompt.clone(),
                pulls: rec.pulls,
                mean_loss: rec.mean_loss(),
            });
        }
    }
    arms.sort_by_key(|a| a.arm);
    Ok(DemoTrace {
        config: config.clone(),
        trials,
        smoothed,
        arms,
    })
}
