//! Weighting functions ω(r) and the acceptance criterion built on them.
//!
//! ω maps a step reward to a probability of keeping the draft step. When
//! ω(r) is exactly 0 or 1 the decision is deterministic and no random number
//! is drawn; otherwise a single uniform draw `u` decides `ω(r) >= u`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::RsdError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightingSpec {
    /// ω(r) = p, ignoring the reward.
    Constant { p: f64 },
    /// ω(r) = 1 if r >= δ, else 0.
    BinaryStep { delta: f64 },
    /// ω(r) = min(1, max(0, r)).
    Clip,
    /// ω(r) = max(0, r / (1 + r)).
    SigmoidalRatio,
    /// ω(r) = 1 / (1 + exp(-α (r - δ))).
    Logistic { alpha: f64, delta: f64 },
    /// ω = min(1, α · P_M(y|z) / P_m(y|z)).
    LikelihoodRatio { alpha: f64 },
    /// ω = min(1, β · r · P_M(y|z) / P_m(y|z)).
    Hybrid { beta: f64 },
}

/// What ω is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightInput {
    pub reward: f64,
    /// P_M(y|z) / P_m(y|z). May be `+inf` when the draft probability is zero.
    pub likelihood_ratio: Option<f64>,
}

impl WeightInput {
    pub fn reward(reward: f64) -> Self {
        Self {
            reward,
            likelihood_ratio: None,
        }
    }

    pub fn with_ratio(reward: f64, ratio: f64) -> Self {
        Self {
            reward,
            likelihood_ratio: Some(ratio),
        }
    }
}

impl WeightingSpec {
    pub fn name(&self) -> &'static str {
        match self {
            WeightingSpec::Constant { .. } => "constant",
            WeightingSpec::BinaryStep { .. } => "binary_step",
            WeightingSpec::Clip => "clip",
            WeightingSpec::SigmoidalRatio => "sigmoidal_ratio",
            WeightingSpec::Logistic { .. } => "logistic",
            WeightingSpec::LikelihoodRatio { .. } => "likelihood_ratio",
            WeightingSpec::Hybrid { .. } => "hybrid",
        }
    }

    pub fn needs_likelihood_ratio(&self) -> bool {
        matches!(
            self,
            WeightingSpec::LikelihoodRatio { .. } | WeightingSpec::Hybrid { .. }
        )
    }

    /// True for the variants that depend on the reward alone and are
    /// non-decreasing in it.
    pub fn is_monotone_in_reward(&self) -> bool {
        !matches!(self, WeightingSpec::Constant { .. }) && !self.needs_likelihood_ratio()
    }

    /// Checks the parameters.
    pub fn validate(&self) -> Result<(), RsdError> {
        let bad = |what: String| Err(RsdError::Config(what));
        match *self {
            WeightingSpec::Constant { p } if !(p > 0.0 && p < 1.0) => {
                bad(format!("constant weighting needs p in (0,1), got {p}"))
            }
            WeightingSpec::BinaryStep { delta } if delta.is_nan() => {
                bad("binary step threshold is NaN".into())
            }
            WeightingSpec::Logistic { alpha, delta }
                if !(alpha.is_finite() && alpha > 0.0 && delta.is_finite()) =>
            {
                bad(format!(
                    "logistic weighting needs finite alpha > 0 and finite delta, got alpha={alpha}, delta={delta}"
                ))
            }
            WeightingSpec::LikelihoodRatio { alpha } if !(alpha.is_finite() && alpha > 0.0) => {
                bad(format!("likelihood-ratio weighting needs alpha > 0, got {alpha}"))
            }
            WeightingSpec::Hybrid { beta } if !(beta.is_finite() && beta > 0.0) => {
                bad(format!("hybrid weighting needs beta > 0, got {beta}"))
            }
            _ => Ok(()),
        }
    }
}

/// ω(r) for the given spec. The result is always in [0,1].
pub fn evaluate_weight(spec: &WeightingSpec, input: WeightInput) -> Result<f64, RsdError> {
    spec.validate()?;
    let r = input.reward;
    if !r.is_finite() {
        return Err(RsdError::NonFiniteReward(r));
    }
    let ratio = || -> Result<f64, RsdError> {
        match input.likelihood_ratio {
            Some(q) if q.is_nan() || q < 0.0 => Err(RsdError::InvalidInput(format!(
                "likelihood ratio must be >= 0, got {q}"
            ))),
            Some(q) => Ok(q),
            None => Err(RsdError::MissingLikelihoodRatio(spec.name())),
        }
    };
    let w = match *spec {
        WeightingSpec::Constant { p } => p,
        WeightingSpec::BinaryStep { delta } => {
            if r >= delta {
                1.0
            } else {
                0.0
            }
        }
        WeightingSpec::Clip => r.clamp(0.0, 1.0),
        WeightingSpec::SigmoidalRatio => {
            if r <= -1.0 {
                return Err(RsdError::InvalidInput(format!(
                    "sigmoidal ratio weighting is undefined for r <= -1 (got {r})"
                )));
            }
            (r / (1.0 + r)).max(0.0)
        }
        WeightingSpec::Logistic { alpha, delta } => 1.0 / (1.0 + (-alpha * (r - delta)).exp()),
        WeightingSpec::LikelihoodRatio { alpha } => {
            let q = ratio()?;
            if q.is_infinite() {
                1.0
            } else {
                alpha * q
            }
        }
        WeightingSpec::Hybrid { beta } => {
            let q = ratio()?;
            if q.is_infinite() {
                if r > 0.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                beta * r * q
            }
        }
    };
    Ok(w.clamp(0.0, 1.0))
}

/// Acceptance decision for a draft step.
///
/// Consumes no randomness when ω(r) is 0 or 1.
pub fn accept<R: Rng + ?Sized>(
    spec: &WeightingSpec,
    input: WeightInput,
    rng: &mut R,
) -> Result<bool, RsdError> {
    let w = evaluate_weight(spec, input)?;
    Ok(accept_with_weight(w, rng))
}

/// The acceptance rule given an already computed weight.
pub fn accept_with_weight<R: Rng + ?Sized>(weight: f64, rng: &mut R) -> bool {
    if weight <= 0.0 {
        false
    } else if weight >= 1.0 {
        true
    } else {
        let u: f64 = rng.gen();
        weight >= u
    }
}
