//! Auditable LM-powered subroutines.
//!
//! A subroutine is declared by a [`schema::SubroutineSpec`]. Its system
//! prompt is chosen per call by a Boltzmann bandit over explored prompts
//! plus an exploration arm ([`bandit`]); new prompts are synthesized by a
//! backend acting as prompt engineer ([`backend`]). Every call, prompt,
//! output and rating is recorded in a relational store ([`store`]) so any
//! output can be traced back through the calls it depended on.

pub mod backend;
pub mod bandit;
pub mod critique;
pub mod engine;
pub mod payload;
pub mod queue;
pub mod rare_letters;
pub mod scalar;
pub mod schema;
pub mod store;

pub use backend::{LmBackend, ScriptedBackend, ScriptedConfig};
pub use bandit::{ArmId, Choice};
pub use engine::{Engine, EngineConfig, EngineError, InvokeOptions, SubroutineHandle};
pub use scalar::Scalar;
pub use schema::{FieldKind, FieldSpec, Record, Schema, SubroutineSpec, Value};
pub use store::{Invocation, Store};

pub type ArmStats = bandit::ArmStats<f64>;
pub type BanditState = bandit::BanditState<f64>;
pub type BetaSchedule = bandit::BetaSchedule<f64>;
pub type Distribution = bandit::Distribution<f64>;

pub type ArmStatsF32 = bandit::ArmStats<f32>;
pub type BanditStateF32 = bandit::BanditState<f32>;
pub type BetaScheduleF32 = bandit::BetaSchedule<f32>;
pub type DistributionF32 = bandit::Distribution<f32>;
