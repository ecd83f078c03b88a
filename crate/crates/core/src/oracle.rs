//! Exact finite-support mathematics for checking the engine.
//!
//! On a single context with alphabet `y_1..y_k`, RSD produces
//!
//! ```text
//! P_rsd(y) = ω(r(y)) P_m(y) + ν P_M(y),   ν = 1 - Σ_y P_m(y) ω(r(y))
//! ```
//!
//! Everything here is computed by direct summation over the tables, with no
//! sampling, so it can serve as the reference for Monte-Carlo runs of the
//! decoding engine.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::tabular::TabularWorld;
use crate::error::RsdError;
use crate::types::Origin;
use crate::weighting::{evaluate_weight, WeightInput, WeightingSpec};

/// Exact RSD step distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureResult {
    pub distribution: Vec<f64>,
    /// Per-symbol ω.
    pub weights: Vec<f64>,
    /// Rejection probability, i.e. the target-invocation rate.
    pub nu: f64,
    pub expected_reward: f64,
}

struct Tables<'a> {
    draft: &'a [f64],
    target: &'a [f64],
    reward: &'a [f64],
}

fn tables<'a>(world: &'a TabularWorld, key: &str) -> Result<Tables<'a>, RsdError> {
    Ok(Tables {
        draft: world.step_distribution(Origin::Draft, key)?,
        target: world.step_distribution(Origin::Target, key)?,
        reward: world.rewards(key)?,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Table ratio P_M/P_m with 0/0 -> 0 and c/0 -> +inf.
fn table_ratio(target: f64, draft: f64) -> f64 {
    if target == 0.0 {
        0.0
    } else if draft == 0.0 {
        f64::INFINITY
    } else {
        target / draft
    }
}

/// ω evaluated on every symbol of the context.
pub fn symbol_weights(
    world: &TabularWorld,
    key: &str,
    weighting: &WeightingSpec,
) -> Result<Vec<f64>, RsdError> {
    let t = tables(world, key)?;
    (0..t.draft.len())
        .map(|i| {
            let input = if weighting.needs_likelihood_ratio() {
                WeightInput::with_ratio(t.reward[i], table_ratio(t.target[i], t.draft[i]))
            } else {
                WeightInput::reward(t.reward[i])
            };
            evaluate_weight(weighting, input)
        })
        .collect()
}

/// Mixture induced by an explicit per-symbol weight vector.
pub fn mixture_from_weights(
    world: &TabularWorld,
    key: &str,
    weights: &[f64],
) -> Result<MixtureResult, RsdError> {
    let t = tables(world, key)?;
    if weights.len() != t.draft.len() {
        return Err(RsdError::InvalidInput("weight vector length mismatch".into()));
    }
    let accepted = dot(t.draft, weights);
    let nu = 1.0 - accepted;
    let distribution: Vec<f64> = (0..weights.len())
        .map(|i| weights[i] * t.draft[i] + nu * t.target[i])
        .collect();
    let expected_reward = expected_reward(&distribution, t.reward)?;
    Ok(MixtureResult {
        distribution,
        weights: weights.to_vec(),
        nu,
        expected_reward,
    })
}

pub fn exact_rsd_distribution(
    world: &TabularWorld,
    key: &str,
    weighting: &WeightingSpec,
) -> Result<MixtureResult, RsdError> {
    let weights = symbol_weights(world, key, weighting)?;
    mixture_from_weights(world, key, &weights)
}

/// Σ_y dist(y) r(y).
pub fn expected_reward(distribution: &[f64], rewards: &[f64]) -> Result<f64, RsdError> {
    if distribution.len() != rewards.len() {
        return Err(RsdError::InvalidInput(format!(
            "distribution has {} entries but reward table has {}",
            distribution.len(),
            rewards.len()
        )));
    }
    Ok(dot(distribution, rewards))
}

/// Reward comparison between RSD and the draft model on one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub e_rsd: f64,
    pub e_draft: f64,
    pub e_target: f64,
    /// E_{P_M}[r] >= E_{P_m}[r].
    pub target_dominates: bool,
    /// ω is a non-decreasing function of r on this instance.
    pub weighting_monotone: bool,
    /// E_{P_rsd}[r] >= E_{P_m}[r] (with slack).
    pub holds: bool,
    /// E_{P_m}[ω r].
    pub accepted_term: f64,
    /// ν E_{P_M}[r].
    pub fallback_term: f64,
    /// Cov_{P_m}(ω, r).
    pub covariance: f64,
    pub nu: f64,
}

impl DominanceReport {
    /// Both premises of the dominance guarantee are met.
    pub fn premises_hold(&self) -> bool {
        self.target_dominates && self.weighting_monotone
    }

    /// |e_rsd - (accepted_term + fallback_term)|.
    pub fn term_residual(&self) -> f64 {
        (self.e_rsd - (self.accepted_term + self.fallback_term)).abs()
    }

    /// |(e_rsd - e_draft) - (covariance + ν (e_target - e_draft))|.
    pub fn covariance_residual(&self) -> f64 {
        ((self.e_rsd - self.e_draft) - (self.covariance + self.nu * (self.e_target - self.e_draft)))
            .abs()
    }
}

pub const DOMINANCE_SLACK: f64 = 1e-12;

pub fn check_reward_dominance(
    world: &TabularWorld,
    key: &str,
    weighting: &WeightingSpec,
) -> Result<DominanceReport, RsdError> {
    let t = tables(world, key)?;
    let mix = exact_rsd_distribution(world, key, weighting)?;
    let e_draft = dot(t.draft, t.reward);
    let e_target = dot(t.target, t.reward);
    let e_weight = dot(t.draft, &mix.weights);
    let accepted_term: f64 = (0..t.draft.len())
        .map(|i| t.draft[i] * mix.weights[i] * t.reward[i])
        .sum();
    let covariance = accepted_term - e_weight * e_draft;
    let weighting_monotone = !matches!(weighting, WeightingSpec::Constant { .. })
        && is_monotone(t.reward, &mix.weights);
    Ok(DominanceReport {
        e_rsd: mix.expected_reward,
        e_draft,
        e_target,
        target_dominates: e_target >= e_draft,
        weighting_monotone,
        holds: mix.expected_reward >= e_draft - DOMINANCE_SLACK,
        accepted_term,
        fallback_term: mix.nu * e_target,
        covariance,
        nu: mix.nu,
    })
}

/// Whether `weights` is a non-decreasing function of `rewards`.
fn is_monotone(rewards: &[f64], weights: &[f64]) -> bool {
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&a, &b| rewards[a].total_cmp(&rewards[b]));
    order.windows(2).all(|w| {
        let (a, b) = (w[0], w[1]);
        if rewards[a] == rewards[b] {
            weights[a] == weights[b]
        } else {
            weights[a] <= weights[b]
        }
    })
}

/// Reward-optimal threshold weighting under a rejection budget ν <= γ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    /// Steps with r > δ are always accepted, steps with r < δ never.
    pub delta_gamma: f64,
    /// Acceptance probability of steps with r == δ.
    pub boundary_weight: f64,
    pub realized_nu: f64,
    pub achieved_reward: f64,
    pub weights: Vec<f64>,
}

/// ν(δ) for the deterministic rule ω = 1(r >= δ).
pub fn threshold_nu(world: &TabularWorld, key: &str, delta: f64) -> Result<f64, RsdError> {
    let t = tables(world, key)?;
    Ok(1.0
        - t.draft
            .iter()
            .zip(t.reward)
            .filter(|(_, r)| **r >= delta)
            .map(|(p, _)| p)
            .sum::<f64>())
}

/// Expected reward of the mixture for per-symbol weights:
/// Σ P_m ω r + (1 - Σ P_m ω) E_{P_M}[r].
fn mixture_reward(t: &Tables<'_>, weights: &[f64]) -> (f64, f64) {
    let accepted = dot(t.draft, weights);
    let gain: f64 = (0..weights.len())
        .map(|i| t.draft[i] * weights[i] * t.reward[i])
        .sum();
    let nu = 1.0 - accepted;
    (gain + nu * dot(t.target, t.reward), nu)
}

/// Best threshold rule subject to ν <= γ.
///
/// Rewards are scanned from high to low, one equal-reward block at a time.
/// Blocks whose reward beats E_{P_M}[r] are accepted outright; below that
/// level blocks are accepted only as far as the budget requires, and the
/// block where the budget is met exactly is accepted with a fractional
/// probability. Among equally good rules the one with the larger threshold
/// wins.
pub fn optimal_threshold(
    world: &TabularWorld,
    key: &str,
    gamma: f64,
) -> Result<ThresholdResult, RsdError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(RsdError::InvalidInput(format!("gamma must be in (0,1), got {gamma}")));
    }
    let t = tables(world, key)?;
    let fallback = dot(t.target, t.reward);
    let need = 1.0 - gamma;

    let mut levels: Vec<f64> = t.reward.to_vec();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();

    let mut accepted = 0.0;
    let mut delta = f64::INFINITY;
    let mut boundary_weight = 1.0;
    for &level in &levels {
        let mass: f64 = t
            .draft
            .iter()
            .zip(t.reward)
            .filter(|(_, r)| **r == level)
            .map(|(p, _)| p)
            .sum();
        if mass == 0.0 {
            continue;
        }
        if level > fallback {
            accepted += mass;
            delta = level;
            continue;
        }
        if accepted >= need {
            break;
        }
        let theta = ((need - accepted) / mass).min(1.0);
        accepted += theta * mass;
        delta = level;
        boundary_weight = theta;
        if theta < 1.0 || accepted >= need {
            break;
        }
    }
    let weights: Vec<f64> = t
        .reward
        .iter()
        .map(|&r| {
            if r > delta {
                1.0
            } else if r == delta {
                boundary_weight
            } else {
                0.0
            }
        })
        .collect();
    let (achieved_reward, realized_nu) = mixture_reward(&t, &weights);
    Ok(ThresholdResult {
        delta_gamma: delta,
        boundary_weight,
        realized_nu,
        achieved_reward,
        weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceResult {
    pub weights: Vec<f64>,
    pub reward: f64,
    pub nu: f64,
}

pub const MAX_BRUTE_FORCE_ALPHABET: usize = 12;
const MAX_BRUTE_FORCE_ASSIGNMENTS: u128 = 20_000_000;

/// Exhaustive search for the reward-optimal weighting with ν <= γ.
///
/// Every symbol's weight ranges over `{0, 1/grid, ..., 1}`. In addition, for
/// every grid assignment of all symbols but one, the remaining symbol's
/// weight is set so the budget is met with equality. The second family
/// contains every vertex of the feasible region, so the search returns the
/// exact optimum for any `grid >= 1`.
pub fn brute_force_optimal_weighting(
    world: &TabularWorld,
    key: &str,
    gamma: f64,
    grid: usize,
) -> Result<BruteForceResult, RsdError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(RsdError::InvalidInput(format!("gamma must be in (0,1], got {gamma}")));
    }
    if grid == 0 {
        return Err(RsdError::InvalidInput("grid must be >= 1".into()));
    }
    let t = tables(world, key)?;
    let k = t.draft.len();
    let levels = grid as u128 + 1;
    if k > MAX_BRUTE_FORCE_ALPHABET
        || levels.checked_pow(k as u32).map_or(true, |n| n > MAX_BRUTE_FORCE_ASSIGNMENTS)
    {
        return Err(RsdError::SearchSpace(format!(
            "alphabet {k} with grid {grid} exceeds the brute-force cap"
        )));
    }
    let need = 1.0 - gamma;
    // Tolerance on the budget for floating-point sums.
    const FEAS_EPS: f64 = 1e-12;

    let mut best: Option<BruteForceResult> = None;
    let mut consider = |weights: &[f64]| {
        let (reward, nu) = mixture_reward(&t, weights);
        if nu > gamma + FEAS_EPS {
            return;
        }
        if best.as_ref().map_or(true, |b| reward > b.reward) {
            best = Some(BruteForceResult {
                weights: weights.to_vec(),
                reward,
                nu,
            });
        }
    };

    let mut digits = vec![0usize; k];
    let mut weights = vec![0.0; k];
    loop {
        for i in 0..k {
            weights[i] = digits[i] as f64 / grid as f64;
        }
        consider(&weights);
        for free in 0..k {
            if t.draft[free] == 0.0 {
                continue;
            }
            let others: f64 = (0..k)
                .filter(|&i| i != free)
                .map(|i| t.draft[i] * weights[i])
                .sum();
            let w = (need - others) / t.draft[free];
            if (0.0..=1.0).contains(&w) {
                let saved = weights[free];
                weights[free] = w;
                consider(&weights);
                weights[free] = saved;
            }
        }
        // Next grid assignment (odometer).
        let mut pos = 0;
        loop {
            if pos == k {
                return best.ok_or_else(|| {
                    RsdError::InvalidInput("no feasible weighting found".into())
                });
            }
            digits[pos] += 1;
            if digits[pos] <= grid {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
    }
}

/// Half the L1 distance.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "total variation needs equal supports");
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalResult {
    pub frequencies: Vec<f64>,
    pub tv: f64,
    pub trials: usize,
}

/// Runs `decode` for `trials` trial indices, tallies the returned symbol
/// index, and compares with `reference`.
pub fn empirical_distribution<E>(
    mut decode: impl FnMut(u64) -> Result<usize, E>,
    trials: usize,
    reference: &[f64],
) -> Result<EmpiricalResult, RsdError>
where
    E: std::fmt::Display,
{
    if trials == 0 {
        return Err(RsdError::InvalidInput("empirical distribution needs trials >= 1".into()));
    }
    let mut counts = vec![0u64; reference.len()];
    for trial in 0..trials as u64 {
        let idx = decode(trial).map_err(|e| RsdError::InvalidInput(format!("trial {trial}: {e}")))?;
        let slot = counts
            .get_mut(idx)
            .ok_or_else(|| RsdError::InvalidInput(format!("symbol index {idx} out of range")))?;
        *slot += 1;
    }
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / trials as f64).collect();
    let tv = total_variation(&frequencies, reference);
    Ok(EmpiricalResult {
        frequencies,
        tv,
        trials,
    })
}

/// Point on the flat simplex of dimension `k`.
pub fn random_simplex<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k)
        .map(|_| -(1.0 - rng.gen::<f64>()).ln())
        .collect();
    let z: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / z).collect();
    // Push the rounding error into the largest entry so the sum is 1 to
    // machine precision.
    let s: f64 = p.iter().sum();
    let imax = (0..k).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
    p[imax] += 1.0 - s;
    p
}

/// Random single-step instance: flat-simplex P_m and P_M, rewards uniform on
/// [0,1]. With `require_target_dominates`, draws are repeated until
/// E_{P_M}[r] >= E_{P_m}[r].
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    require_target_dominates: bool,
) -> TabularWorld {
    loop {
        let draft = random_simplex(rng, k);
        let target = random_simplex(rng, k);
        let reward: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
        if require_target_dominates && dot(&target, &reward) < dot(&draft, &reward) {
            continue;
        }
        return TabularWorld::single_step(draft, target, reward)
            .expect("generated instance is valid");
    }
}
