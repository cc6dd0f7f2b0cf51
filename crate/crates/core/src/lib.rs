//! Turn-level credit assignment for multi-turn collaborative agents.
//!
//! The crate trains a turn-wise advantage critic from trajectory preference
//! pairs with a Bradley-Terry objective, where the critic (unlike the actor)
//! is allowed to read hidden training-time information about the task. The
//! trained critic then ranks candidate actions per turn to drive a per-turn
//! DPO update of the actor. Baselines (rejection fine-tuning, multi-turn
//! DPO, a value-head scorer), a Best-of-N harness, and exact numerical
//! checks on small enumerable POMDPs live alongside.
//!
//! Module map:
//! - [`trajectory`]: tasks, turns, trajectories, preference pairs, JSONL I/O
//! - [`env`]: the hidden-slot query game and the enumerable [`env::tiny`] MDPs
//! - [`policy`]: autoregressive token policies (tabular and hashed-linear)
//! - [`critic`]: the advantage critic and its Bradley-Terry training
//! - [`actor`]: per-turn DPO, rejection fine-tuning, multi-turn DPO, value head
//! - [`eval`]: rollouts, success metrics, Best-of-N scaling
//! - [`theory`]: exact Q/V/A tables and the telescoping / policy-gradient checks
//! - [`config`], [`pipeline`]: run configuration and staged experiment driver

pub mod actor;
pub mod config;
pub mod critic;
pub mod env;
pub mod error;
pub mod eval;
pub mod features;
pub mod loss;
pub mod pipeline;
pub mod policy;
pub mod stats;
pub mod theory;
pub mod trajectory;
pub mod warmstart;

pub use error::{Error, Result};

/// Tokens are plain strings drawn from an environment vocabulary.
pub type Token = String;
