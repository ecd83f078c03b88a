//! Model abstractions used by the decoding engine.
//!
//! A [`StepGenerator`] produces one reasoning step for a context; a
//! [`RewardModel`] scores a step. Two families implement them: the
//! [`tabular`] simulator with exact finite distributions, and [`http`]
//! clients for OpenAI-compatible completion servers and PRM servers.

pub mod http;
pub mod tabular;

use serde::{Deserialize, Serialize};

use crate::error::BackendError;
use crate::rng::DecodeRng;
use crate::types::{Context, Step};

/// Sampling parameters forwarded to a generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
}

impl Sampling {
    /// Greedy decoding (temperature 0, top_p 1).
    pub const GREEDY: Sampling = Sampling {
        temperature: 0.0,
        top_p: 1.0,
    };
    /// The setting used for sampling-based baselines.
    pub const DIVERSE: Sampling = Sampling {
        temperature: 0.7,
        top_p: 0.8,
    };
    /// Sample from the model distribution unchanged.
    pub const ANCESTRAL: Sampling = Sampling {
        temperature: 1.0,
        top_p: 1.0,
    };

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0,1], got {}", self.top_p));
        }
        Ok(())
    }
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::GREEDY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCaps {
    pub max_step_tokens: u64,
}

impl Default for StepCaps {
    fn default() -> Self {
        Self {
            max_step_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStop {
    Delimiter,
    Eos,
    LengthCap,
}

/// One generated step and its accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepGeneration {
    pub step: Step,
    pub token_count: u64,
    pub stop_reason: GenerationStop,
    pub per_token_logprobs: Option<Vec<f64>>,
    /// Prompt tokens processed for this call, when the backend reports them.
    pub prompt_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardScale {
    UnitInterval,
    Unbounded,
}

impl RewardScale {
    pub fn name(self) -> &'static str {
        match self {
            RewardScale::UnitInterval => "unit_interval",
            RewardScale::Unbounded => "unbounded",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardScore {
    pub value: f64,
    pub scale: RewardScale,
}

impl RewardScore {
    pub fn new(value: f64, scale: RewardScale) -> Result<Self, BackendError> {
        let ok = value.is_finite()
            && match scale {
                RewardScale::UnitInterval => (0.0..=1.0).contains(&value),
                RewardScale::Unbounded => true,
            };
        if !ok {
            return Err(BackendError::RewardOutOfScale {
                value,
                scale: scale.name(),
            });
        }
        Ok(Self { value, scale })
    }
}

/// Exact finite next-step distribution, available only on simulated backends.
pub trait ExactDistribution {
    /// Step texts of the alphabet, in table order.
    fn alphabet(&self) -> Vec<Step>;
    /// Probability vector over [`ExactDistribution::alphabet`] for `ctx`.
    fn distribution(&self, ctx: &Context) -> Result<Vec<f64>, BackendError>;
    /// Token cost of the alphabet entry `index`.
    fn token_cost(&self, index: usize) -> u64;
}

/// A model that produces one reasoning step at a time.
pub trait StepGenerator: Send + Sync {
    fn id(&self) -> &str;

    fn generate_step(
        &self,
        ctx: &Context,
        sampling: &Sampling,
        caps: &StepCaps,
        rng: &mut DecodeRng,
    ) -> Result<StepGeneration, BackendError>;

    /// log P(step | ctx), if the backend can compute it.
    fn step_logprob(&self, _ctx: &Context, _step: &Step) -> Result<Option<f64>, BackendError> {
        Ok(None)
    }

    fn exact(&self) -> Option<&dyn ExactDistribution> {
        None
    }
}

/// A process (or outcome) reward model.
pub trait RewardModel: Send + Sync {
    fn id(&self) -> &str;

    fn score_step(&self, ctx: &Context, step: &Step) -> Result<RewardScore, BackendError>;
}

/// Convenience wrapper mirroring the trait method.
pub fn generate_step(
    model: &dyn StepGenerator,
    ctx: &Context,
    sampling: &Sampling,
    caps: &StepCaps,
    rng: &mut DecodeRng,
) -> Result<StepGeneration, BackendError> {
    model.generate_step(ctx, sampling, caps, rng)
}

pub fn score_step(
    prm: &dyn RewardModel,
    ctx: &Context,
    step: &Step,
) -> Result<RewardScore, BackendError> {
    if step.text.is_empty() {
        return Err(BackendError::EmptyGeneration);
    }
    prm.score_step(ctx, step)
}
