//! Speculative decoding inside a reinforcement-learning loop, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: vocabularies, categorical distributions and tabular
//!   autoregressive models (both the actor/target and the drafter).
//! - [`specdec`]: lossless chain and tree speculative sampling.
//! - [`costsim`]: the analytical cost model and a batch-dependent timing model.
//! - [`server`]: offline profiling, the configuration solver and the batched
//!   two-state decode engine.
//! - [`rl`]: rewards, group-relative advantages and the policy-gradient loop.
//! - [`learner`]: replay buffer, reward-weighted distillation onto the drafter
//!   and asynchronous snapshot publication.

pub mod costsim;
pub mod error;
pub mod learner;
pub mod model;
pub mod rl;
pub mod server;
pub mod specdec;

pub use error::{Error, Result};
pub use model::{CategoricalDist, Context, TabularModel, Token, Vocabulary};
pub use specdec::SdConfig;
