//! Infinite-armed Boltzmann bandit over system prompts.
//!
//! Every explored prompt is an arm with a running mean loss. All prompts
//! that have never been tried are folded into a single persistent
//! exploration arm whose loss estimate is the mean of the explored arms'
//! mean losses. Sampling is a softmax over `-beta * loss`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Loss estimate for the exploration arm when nothing has been observed.
pub const DEFAULT_EXPLORE_PRIOR: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArmId(pub String);

impl ArmId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ArmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ArmId {
    fn from(s: &str) -> Self {
        ArmId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BanditError {
    #[error("unknown arm `{0}`")]
    UnknownArm(ArmId),
    #[error("duplicate arm `{0}`")]
    DuplicateArm(ArmId),
    #[error("loss {0} outside [0, 1]")]
    LossOutOfRange(f64),
}

/// Statistics for one explored arm.
///
/// `pulls` counts invocations made with the arm; `observations` counts the
/// loss values recorded against it. The two differ when a loss arrives
/// later than the pull (or more than once, e.g. critique plus reviewer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmStats<S> {
    pub arm_id: ArmId,
    pub pulls: u64,
    pub observations: u64,
    pub loss_sum: S,
}

impl<S: Scalar> ArmStats<S> {
    pub fn new(arm_id: impl Into<ArmId>) -> Self {
        Self {
            arm_id: arm_id.into(),
            pulls: 0,
            observations: 0,
            loss_sum: S::zero(),
        }
    }

    /// An arm with `observations` recorded losses summing to `loss_sum`.
    pub fn with_history(arm_id: impl Into<ArmId>, observations: u64, loss_sum: S) -> Self {
        Self {
            arm_id: arm_id.into(),
            pulls: observations,
            observations,
            loss_sum,
        }
    }

    /// Arm whose running mean is exactly `mean` after one observation.
    pub fn with_mean(arm_id: impl Into<ArmId>, mean: S) -> Self {
        Self::with_history(arm_id, 1, mean)
    }

    pub fn mean_loss(&self) -> Option<S> {
        (self.observations > 0).then(|| self.loss_sum / S::count(self.observations))
    }
}

impl<S: Scalar> From<&str> for ArmStats<S> {
    fn from(id: &str) -> Self {
        ArmStats::new(id)
    }
}

/// Outcome of a draw: an explored arm or the exploration arm.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Arm(ArmId),
    Explore,
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Choice::Arm(id) => write!(f, "{id}"),
            Choice::Explore => f.write_str("EXPLORE"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Constant,
}

/// Inverse-temperature schedule indexed by trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule<S> {
    #[serde(default)]
    pub kind: ScheduleKind,
    pub start_value: S,
    pub end_value: S,
    pub ramp_trials: u64,
}

impl<S: Scalar> BetaSchedule<S> {
    pub fn linear(start_value: S, end_value: S, ramp_trials: u64) -> Self {
        Self {
            kind: ScheduleKind::Linear,
            start_value,
            end_value,
            ramp_trials: ramp_trials.max(1),
        }
    }

    pub fn constant(value: S) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            start_value: value,
            end_value: value,
            ramp_trials: 1,
        }
    }

    pub fn beta_at(&self, trial_index: u64) -> S {
        match self.kind {
            ScheduleKind::Constant => self.start_value,
            ScheduleKind::Linear => {
                let ramp = self.ramp_trials.max(1);
                if trial_index >= ramp {
                    return self.end_value;
                }
                let t = S::count(trial_index) / S::count(ramp);
                self.start_value + (self.end_value - self.start_value) * t
            }
        }
    }
}

impl<S: Scalar> Default for BetaSchedule<S> {
    fn default() -> Self {
        Self::linear(S::zero(), S::one(), 100)
    }
}

/// Mean of the explored arms' mean losses, or `prior` if none has a loss yet.
pub fn explore_loss<S: Scalar>(arms: &[ArmStats<S>], prior: S) -> S {
    let means: Vec<S> = arms.iter().filter_map(ArmStats::mean_loss).collect();
    if means.is_empty() {
        return prior;
    }
    means.iter().fold(S::zero(), |acc, &m| acc + m) / S::count(means.len() as u64)
}

/// Probability of each explored arm followed by the exploration arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distribution<S> {
    pub entries: Vec<(Choice, S)>,
}

impl<S: Scalar> Distribution<S> {
    pub fn probability(&self, choice: &Choice) -> S {
        self.entries
            .iter()
            .find(|(c, _)| c == choice)
            .map(|(_, p)| *p)
            .unwrap_or_else(S::zero)
    }

    pub fn explore_probability(&self) -> S {
        self.probability(&Choice::Explore)
    }

    pub fn total(&self) -> S {
        self.entries.iter().fold(S::zero(), |acc, (_, p)| acc + *p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditState<S> {
    pub subroutine_id: String,
    pub arms: Vec<ArmStats<S>>,
    pub trial_index: u64,
    pub beta: S,
    pub explore_prior: S,
}

impl<S: Scalar> BanditState<S> {
    pub fn new(subroutine_id: impl Into<String>) -> Self {
        Self {
            subroutine_id: subroutine_id.into(),
            arms: Vec::new(),
            trial_index: 0,
            beta: S::zero(),
            explore_prior: S::lit(DEFAULT_EXPLORE_PRIOR),
        }
    }

    /// Build a state from existing arms. Fails on duplicate ids.
    pub fn with_arms(
        subroutine_id: impl Into<String>,
        arms: Vec<ArmStats<S>>,
        beta: S,
    ) -> Result<Self, BanditError> {
        let mut state = Self::new(subroutine_id);
        state.beta = beta;
        for arm in arms {
            if state.arm(&arm.arm_id).is_some() {
                return Err(BanditError::DuplicateArm(arm.arm_id));
            }
            state.arms.push(arm);
        }
        Ok(state)
    }

    pub fn arm(&self, id: &ArmId) -> Option<&ArmStats<S>> {
        self.arms.iter().find(|a| &a.arm_id == id)
    }

    /// Register a newly explored arm with no pulls.
    pub fn add_arm(&mut self, id: ArmId) -> Result<(), BanditError> {
        if self.arm(&id).is_some() {
            return Err(BanditError::DuplicateArm(id));
        }
        self.arms.push(ArmStats::new(id));
        Ok(())
    }

    pub fn record_pull(&mut self, id: &ArmId) -> Result<(), BanditError> {
        let arm = self
            .arms
            .iter_mut()
            .find(|a| &a.arm_id == id)
            .ok_or_else(|| BanditError::UnknownArm(id.clone()))?;
        arm.pulls += 1;
        self.trial_index += 1;
        Ok(())
    }

    /// Add one loss observation to an arm.
    pub fn record_loss(&mut self, id: &ArmId, loss: S) -> Result<(), BanditError> {
        check_loss(loss)?;
        let arm = self
            .arms
            .iter_mut()
            .find(|a| &a.arm_id == id)
            .ok_or_else(|| BanditError::UnknownArm(id.clone()))?;
        arm.observations += 1;
        arm.loss_sum = arm.loss_sum + loss;
        Ok(())
    }

    pub fn explore_loss(&self) -> S {
        explore_loss(&self.arms, self.explore_prior)
    }

    /// Loss used for sampling: the arm's mean, or the exploration estimate
    /// for arms that have been created but not yet scored.
    fn effective_losses(&self) -> (Vec<S>, S) {
        let l0 = self.explore_loss();
        let losses = self
            .arms
            .iter()
            .map(|a| a.mean_loss().unwrap_or(l0))
            .collect();
        (losses, l0)
    }

    pub fn sample_distribution(&self) -> Distribution<S> {
        let (losses, l0) = self.effective_losses();
        let exponents: Vec<S> = losses
            .iter()
            .chain(std::iter::once(&l0))
            .map(|&l| -self.beta * l)
            .collect();
        let max = exponents
            .iter()
            .copied()
            .fold(S::neg_infinity(), S::max);
        let weights: Vec<S> = exponents.iter().map(|&e| (e - max).exp()).collect();
        let z = weights.iter().fold(S::zero(), |acc, &w| acc + w);
        let choices = self
            .arms
            .iter()
            .map(|a| Choice::Arm(a.arm_id.clone()))
            .chain(std::iter::once(Choice::Explore));
        Distribution {
            entries: choices.zip(weights.iter().map(|&w| w / z)).collect(),
        }
    }

    pub fn expected_loss(&self) -> S {
        let (losses, l0) = self.effective_losses();
        let dist = self.sample_distribution();
        dist.entries
            .iter()
            .zip(losses.iter().chain(std::iter::once(&l0)))
            .fold(S::zero(), |acc, ((_, p), &l)| acc + *p * l)
    }

    pub fn draw_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Choice {
        let dist = self.sample_distribution();
        let u: f64 = rng.random();
        let mut cumulative = 0.0;
        for (choice, p) in &dist.entries {
            cumulative += p.to_f64().unwrap_or(0.0);
            if u < cumulative {
                return choice.clone();
            }
        }
        // rounding left a sliver past the last bucket
        dist.entries
            .last()
            .map(|(c, _)| c.clone())
            .unwrap_or(Choice::Explore)
    }

    /// One categorical draw, reproducible for a given seed.
    pub fn draw(&self, seed: u64) -> Choice {
        self.draw_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}

fn check_loss<S: Scalar>(loss: S) -> Result<(), BanditError> {
    if loss.is_nan() || loss < S::zero() || loss > S::one() {
        return Err(BanditError::LossOutOfRange(loss.to_f64().unwrap_or(f64::NAN)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn state(means: &[f64], beta: f64) -> BanditState<f64> {
        let arms = means
            .iter()
            .enumerate()
            .map(|(i, &m)| ArmStats::with_mean(format!("a{i}").as_str(), m))
            .collect();
        BanditState::with_arms("s", arms, beta).unwrap()
    }

    #[test]
    fn explore_loss_examples() {
        let s = state(&[0.2, 0.8], 0.0);
        assert_abs_diff_eq!(s.explore_loss(), 0.5, epsilon = 1e-15);
        assert_eq!(explore_loss::<f64>(&[], 0.5), 0.5);
        let s = state(&[0.0, 0.0, 0.9], 0.0);
        assert_abs_diff_eq!(s.explore_loss(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn uniform_at_zero_beta() {
        let d = state(&[0.2, 0.8], 0.0).sample_distribution();
        for (_, p) in &d.entries {
            assert_abs_diff_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn beta_one_reference_values() {
        // exp(-0.2), exp(-0.8), exp(-0.5) normalised, evaluated independently
        let d = state(&[0.2, 0.8], 1.0).sample_distribution();
        let p: Vec<f64> = d.entries.iter().map(|(_, p)| *p).collect();
        assert_abs_diff_eq!(p[0], 0.4368, epsilon = 1e-4);
        assert_abs_diff_eq!(p[1], 0.2397, epsilon = 1e-4);
        assert_abs_diff_eq!(p[2], 0.3236, epsilon = 1e-4);
        assert_eq!(d.entries[2].0, Choice::Explore);
    }

    #[test]
    fn large_beta_concentrates() {
        let d = state(&[0.0, 1.0], 50.0).sample_distribution();
        assert!(d.probability(&Choice::Arm("a0".into())) > 0.999);
        assert!(d.explore_probability() > 0.0);
    }

    #[test]
    fn draw_without_arms_explores() {
        let s: BanditState<f64> = BanditState::new("s");
        for seed in 0..100 {
            assert_eq!(s.draw(seed), Choice::Explore);
        }
    }

    #[test]
    fn draw_is_seeded() {
        let s = state(&[0.3, 0.4, 0.5], 2.0);
        assert_eq!(s.draw(99), s.draw(99));
    }

    #[test]
    fn single_arm_ties_with_exploration() {
        // with one explored arm the exploration estimate equals its mean,
        // so no beta can separate them
        let s = state(&[0.0], 1000.0);
        let d = s.sample_distribution();
        assert_abs_diff_eq!(d.explore_probability(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sharp_arm_dominates_draws() {
        let s = state(&[0.0, 1.0], 1000.0);
        let hits = (0..10_000u64)
            .filter(|&seed| s.draw(seed) == Choice::Arm("a0".into()))
            .count();
        assert!(hits as f64 / 10_000.0 > 0.99);
    }

    #[test]
    fn record_loss_running_mean() {
        let mut s: BanditState<f64> =
            BanditState::with_arms("s", vec![ArmStats::with_history("a", 1, 1.0)], 0.0).unwrap();
        s.record_loss(&"a".into(), 0.0).unwrap();
        assert_abs_diff_eq!(s.arms[0].mean_loss().unwrap(), 0.5);

        let mut s: BanditState<f64> =
            BanditState::with_arms("s", vec![ArmStats::with_history("a", 4, 2.0)], 0.0).unwrap();
        s.record_loss(&"a".into(), 0.5).unwrap();
        assert_abs_diff_eq!(s.arms[0].mean_loss().unwrap(), 0.5);
        assert_eq!(s.arms[0].observations, 5);

        assert_eq!(
            s.record_loss(&"a".into(), 1.2),
            Err(BanditError::LossOutOfRange(1.2))
        );
        assert!(matches!(
            s.record_loss(&"zz".into(), 0.1),
            Err(BanditError::UnknownArm(_))
        ));
    }

    #[test]
    fn linear_schedule() {
        let sch = BetaSchedule::linear(0.0f64, 1.0, 100);
        assert_eq!(sch.beta_at(0), 0.0);
        assert_abs_diff_eq!(sch.beta_at(50), 0.5);
        assert_eq!(sch.beta_at(250), 1.0);
        assert_eq!(BetaSchedule::constant(0.7f64).beta_at(1234), 0.7);
    }

    #[test]
    fn expected_loss_examples() {
        assert_abs_diff_eq!(state(&[0.2, 0.8], 0.0).expected_loss(), 0.5, epsilon = 1e-15);
        for beta in [0.0, 1.0, 37.0] {
            assert_abs_diff_eq!(state(&[0.4], beta).expected_loss(), 0.4, epsilon = 1e-12);
        }
        let e = state(&[0.1, 0.9], 200.0).expected_loss();
        assert!((e - 0.1).abs() < 1e-6, "{e}");
    }

    #[test]
    fn unscored_arm_uses_explore_estimate() {
        let mut s = state(&[0.2, 0.8], 1.0);
        s.add_arm("fresh".into()).unwrap();
        let d = s.sample_distribution();
        assert_abs_diff_eq!(
            d.probability(&Choice::Arm("fresh".into())),
            d.explore_probability(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn f32_distribution_normalised() {
        let arms = vec![ArmStats::<f32>::with_mean("a", 0.25), ArmStats::with_mean("b", 0.75)];
        let s = BanditState::with_arms("s", arms, 3.0f32).unwrap();
        assert!((s.sample_distribution().total() - 1.0).abs() < 1e-6);
    }
}
