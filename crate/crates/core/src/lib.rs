//! Reward-guided speculative decoding.
//!
//! A cheap draft model proposes each reasoning step, a process reward model
//! scores it, and a weighting function decides whether the step is kept or
//! regenerated by the expensive target model.
//!
//! The crate is organised as:
//!
//! * [`types`]: prompts, steps, contexts and decode traces.
//! * [`weighting`]: the acceptance weightings and the accept decision.
//! * [`backends`]: step generators and reward models (tabular and HTTP).
//! * [`engine`]: the RSD loop and the baseline decoders.
//! * [`oracle`]: exact distributions and optimality checks on tabular worlds.
//! * [`metrics`]: FLOPs accounting, run statistics and threshold sweeps.
//! * [`verify`]: randomized property campaigns built on the oracle.

pub mod backends;
pub mod engine;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod types;
pub mod verify;
pub mod weighting;

#[cfg(feature = "test-support")]
pub mod testing;

pub use error::{BackendError, RsdError};
pub use types::{Context, DecodeTrace, ModelProfile, Origin, Prompt, Step, StepRecord, StopReason};
pub use weighting::WeightingSpec;
