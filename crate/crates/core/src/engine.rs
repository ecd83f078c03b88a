//! Decoding strategies.
//!
//! [`decode_rsd`] is the reward-guided loop: the draft model proposes a step,
//! the PRM scores it, and the acceptance criterion either keeps it or hands
//! the same context to the target model. The other entry points are the
//! comparison baselines: single-model decoding, Best-of-N, majority voting,
//! process Best-of-N and token-level speculative decoding on exact tables.
//!
//! All strategies loop at most `max_steps - 1` times, stop after a terminal
//! step, and stop once `max_total_tokens` generated tokens are reached.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::tabular::sample_categorical;
use crate::backends::{
    RewardModel, Sampling, StepCaps, StepGeneration, StepGenerator,
};
use crate::error::{BackendError, RsdError};
use crate::rng::{self, DecodeRng, ACCEPT_STREAM};
use crate::types::{Context, DecodeTrace, Origin, Prompt, Step, StepRecord, StopReason, TraceModels};
use crate::weighting::{accept_with_weight, evaluate_weight, WeightInput, WeightingSpec};

/// Length limits shared by every strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    /// N: the loop runs at most N - 1 times.
    pub max_steps: usize,
    pub max_total_tokens: u64,
    #[serde(default)]
    pub caps: StepCaps,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_steps: 64,
            max_total_tokens: 8192,
            caps: StepCaps::default(),
        }
    }
}

impl Limits {
    pub fn validate(&self) -> Result<(), RsdError> {
        if self.max_steps < 2 {
            return Err(RsdError::Config(format!(
                "max_steps must be >= 2 so that at least one step is generated, got {}",
                self.max_steps
            )));
        }
        if self.max_total_tokens == 0 || self.caps.max_step_tokens == 0 {
            return Err(RsdError::Config("token limits must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsdConfig {
    pub weighting: WeightingSpec,
    pub limits: Limits,
    pub sampling_draft: Sampling,
    pub sampling_target: Sampling,
    pub seed: u64,
    /// Score target replacement steps for analytics. Never affects decisions.
    pub score_target_steps: bool,
}

impl Default for RsdConfig {
    fn default() -> Self {
        Self {
            weighting: WeightingSpec::BinaryStep { delta: 0.7 },
            limits: Limits::default(),
            sampling_draft: Sampling::GREEDY,
            sampling_target: Sampling::GREEDY,
            seed: 0,
            score_target_steps: false,
        }
    }
}

impl RsdConfig {
    pub fn validate(&self) -> Result<(), RsdError> {
        self.weighting.validate()?;
        self.limits.validate()?;
        self.sampling_draft.validate().map_err(RsdError::Config)?;
        self.sampling_target.validate().map_err(RsdError::Config)
    }

    /// Same settings with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

/// Settings for single-model strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleConfig {
    pub limits: Limits,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for SingleConfig {
    fn default() -> Self {
        Self {
            limits: Limits::default(),
            sampling: Sampling::GREEDY,
            seed: 0,
        }
    }
}

impl SingleConfig {
    pub fn validate(&self) -> Result<(), RsdError> {
        self.limits.validate()?;
        self.sampling.validate().map_err(RsdError::Config)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

/// A decode that stopped on an error; `partial` holds the records kept so far.
#[derive(Debug, Error)]
#[error("decode failed after {} step(s): {cause}", partial.len())]
pub struct DecodeError {
    pub partial: Vec<StepRecord>,
    pub cause: RsdError,
}

impl DecodeError {
    fn new(partial: Vec<StepRecord>, cause: impl Into<RsdError>) -> Self {
        Self {
            partial,
            cause: cause.into(),
        }
    }
}

impl From<RsdError> for DecodeError {
    fn from(cause: RsdError) -> Self {
        Self::new(Vec::new(), cause)
    }
}

/// Stream label of a generator inside a decode.
fn gen_stream(seed: u64, model: &dyn StepGenerator) -> DecodeRng {
    rng::stream(seed, &format!("gen:{}", model.id()))
}

fn checked(g: StepGeneration) -> Result<StepGeneration, BackendError> {
    if g.token_count == 0 || g.step.text.is_empty() {
        return Err(BackendError::EmptyGeneration);
    }
    Ok(g)
}

/// Shared loop bookkeeping.
struct Ledger {
    ctx: Context,
    records: Vec<StepRecord>,
    generated_tokens: u64,
    limits: Limits,
}

enum Next {
    Continue,
    Stop(StopReason),
}

impl Ledger {
    fn new(prompt: &Prompt, limits: Limits) -> Self {
        Self {
            ctx: Context::new(prompt.clone()),
            records: Vec::new(),
            generated_tokens: 0,
            limits,
        }
    }

    fn fail(self, e: impl Into<RsdError>) -> DecodeError {
        DecodeError::new(self.records, e)
    }

    fn keep(&mut self, record: StepRecord) -> Result<Next, RsdError> {
        self.generated_tokens += record.draft_tokens + record.target_tokens;
        let terminal = record.step.terminal;
        self.ctx.push(record.step.clone())?;
        self.records.push(record);
        if terminal {
            Ok(Next::Stop(StopReason::Eos))
        } else if self.generated_tokens >= self.limits.max_total_tokens {
            Ok(Next::Stop(StopReason::MaxLength))
        } else {
            Ok(Next::Continue)
        }
    }

    fn finish(self, stopped_by: StopReason, models: TraceModels) -> DecodeTrace {
        DecodeTrace {
            final_text: self.ctx.response_text(),
            records: self.records,
            stopped_by,
            models,
        }
    }
}

fn likelihood_ratio(
    draft: &dyn StepGenerator,
    target: &dyn StepGenerator,
    ctx: &Context,
    generation: &StepGeneration,
) -> Result<f64, RsdError> {
    let draft_lp = match &generation.per_token_logprobs {
        Some(lps) => Some(lps.iter().sum()),
        None => draft.step_logprob(ctx, &generation.step)?,
    };
    let target_lp = target.step_logprob(ctx, &generation.step)?;
    match (draft_lp, target_lp) {
        (Some(m), Some(big)) => Ok(ratio_from_logprobs(big, m)),
        _ => Err(RsdError::Backend(BackendError::Unsupported(
            "likelihood-ratio weighting needs step log-probabilities from both models".into(),
        ))),
    }
}

/// P_M / P_m from log-probabilities, with 0/0 -> 0 and c/0 -> +inf.
pub fn ratio_from_logprobs(target_lp: f64, draft_lp: f64) -> f64 {
    if target_lp == f64::NEG_INFINITY {
        0.0
    } else if draft_lp == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        (target_lp - draft_lp).exp()
    }
}

/// Reward-guided speculative decoding.
pub fn decode_rsd(
    prompt: &Prompt,
    draft: &dyn StepGenerator,
    target: &dyn StepGenerator,
    prm: &dyn RewardModel,
    cfg: &RsdConfig,
) -> Result<DecodeTrace, DecodeError> {
    cfg.validate()?;
    let mut draft_rng = gen_stream(cfg.seed, draft);
    let mut target_rng = gen_stream(cfg.seed, target);
    let mut accept_rng = rng::stream(cfg.seed, ACCEPT_STREAM);
    let caps = cfg.limits.caps;
    let mut ledger = Ledger::new(prompt, cfg.limits);
    let mut stopped_by = StopReason::MaxLength;

    for _ in 1..cfg.limits.max_steps {
        let proposal = match draft
            .generate_step(&ledger.ctx, &cfg.sampling_draft, &caps, &mut draft_rng)
            .and_then(checked)
        {
            Ok(g) => g,
            Err(e) => return Err(ledger.fail(e)),
        };
        let reward = match prm.score_step(&ledger.ctx, &proposal.step) {
            Ok(s) => s.value,
            Err(e) => return Err(ledger.fail(e)),
        };
        let input = if cfg.weighting.needs_likelihood_ratio() {
            match likelihood_ratio(draft, target, &ledger.ctx, &proposal) {
                Ok(q) => WeightInput::with_ratio(reward, q),
                Err(e) => return Err(ledger.fail(e)),
            }
        } else {
            WeightInput::reward(reward)
        };
        let weight = match evaluate_weight(&cfg.weighting, input) {
            Ok(w) => w,
            Err(e) => return Err(ledger.fail(e)),
        };
        let record = if accept_with_weight(weight, &mut accept_rng) {
            StepRecord {
                step: proposal.step,
                reward: Some(reward),
                weight: Some(weight),
                origin: Origin::Draft,
                draft_candidate: None,
                target_reward: None,
                draft_tokens: proposal.token_count,
                target_tokens: 0,
                draft_prompt_tokens: proposal.prompt_tokens,
                target_prompt_tokens: 0,
                prm_calls: 1,
            }
        } else {
            let replacement = match target
                .generate_step(&ledger.ctx, &cfg.sampling_target, &caps, &mut target_rng)
                .and_then(checked)
            {
                Ok(g) => g,
                Err(e) => return Err(ledger.fail(e)),
            };
            let target_reward = if cfg.score_target_steps {
                match prm.score_step(&ledger.ctx, &replacement.step) {
                    Ok(s) => Some(s.value),
                    Err(e) => return Err(ledger.fail(e)),
                }
            } else {
                None
            };
            StepRecord {
                step: replacement.step,
                reward: Some(reward),
                weight: Some(weight),
                origin: Origin::Target,
                draft_candidate: Some(proposal.step),
                target_reward,
                draft_tokens: proposal.token_count,
                target_tokens: replacement.token_count,
                draft_prompt_tokens: proposal.prompt_tokens,
                target_prompt_tokens: replacement.prompt_tokens,
                prm_calls: 1 + u64::from(target_reward.is_some()),
            }
        };
        match ledger.keep(record) {
            Ok(Next::Continue) => {}
            Ok(Next::Stop(reason)) => {
                stopped_by = reason;
                break;
            }
            Err(e) => return Err(ledger.fail(e)),
        }
    }
    let models = TraceModels {
        draft: Some(draft.id().to_string()),
        target: Some(target.id().to_string()),
        prm: Some(prm.id().to_string()),
    };
    Ok(ledger.finish(stopped_by, models))
}

fn single_models(model: &dyn StepGenerator, role: Origin, prm: Option<&dyn RewardModel>) -> TraceModels {
    let id = Some(model.id().to_string());
    let (draft, target) = match role {
        Origin::Draft => (id, None),
        Origin::Target => (None, id),
    };
    TraceModels {
        draft,
        target,
        prm: prm.map(|p| p.id().to_string()),
    }
}

/// Plain step-by-step decoding with one model. `role` decides which token
/// column the model's tokens are booked under.
pub fn decode_single(
    prompt: &Prompt,
    model: &dyn StepGenerator,
    role: Origin,
    cfg: &SingleConfig,
) -> Result<DecodeTrace, DecodeError> {
    cfg.validate()?;
    let mut rng = gen_stream(cfg.seed, model);
    let mut ledger = Ledger::new(prompt, cfg.limits);
    let mut stopped_by = StopReason::MaxLength;
    for _ in 1..cfg.limits.max_steps {
        let g = match model
            .generate_step(&ledger.ctx, &cfg.sampling, &cfg.limits.caps, &mut rng)
            .and_then(checked)
        {
            Ok(g) => g,
            Err(e) => return Err(ledger.fail(e)),
        };
        let record = StepRecord::unscored(g.step, role, g.token_count, g.prompt_tokens);
        match ledger.keep(record) {
            Ok(Next::Continue) => {}
            Ok(Next::Stop(reason)) => {
                stopped_by = reason;
                break;
            }
            Err(e) => return Err(ledger.fail(e)),
        }
    }
    Ok(ledger.finish(stopped_by, single_models(model, role, None)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BestOfNSelect {
    /// PRM score of the last step.
    FinalStepReward,
}

#[derive(Debug)]
pub struct BestOfN {
    pub chosen: usize,
    pub candidates: Vec<Result<DecodeTrace, DecodeError>>,
    /// Final-step reward per candidate (`None` for failed candidates).
    pub final_rewards: Vec<Option<f64>>,
}

impl BestOfN {
    pub fn chosen_trace(&self) -> &DecodeTrace {
        self.candidates[self.chosen]
            .as_ref()
            .expect("chosen candidate succeeded")
    }
}

/// Index of the largest value, first one on ties. `None` entries are skipped.
pub fn argmax_first(values: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = *v {
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Scores the last step of `trace` in its own context and books the call.
fn score_final_step(
    prompt: &Prompt,
    trace: &mut DecodeTrace,
    prm: &dyn RewardModel,
) -> Result<f64, RsdError> {
    let n = trace.records.len();
    let ctx = Context::with_steps(
        prompt.clone(),
        trace.records[..n - 1].iter().map(|r| r.step.clone()).collect(),
    )?;
    let last = &mut trace.records[n - 1];
    let score = prm.score_step(&ctx, &last.step)?.value;
    last.reward = Some(score);
    last.prm_calls += 1;
    trace.models.prm = Some(prm.id().to_string());
    Ok(score)
}

/// `n` independent decodes; keeps the one whose final step scores highest.
/// Candidate `i` is seeded with `trajectory_seed(cfg.seed, i)`.
pub fn decode_best_of_n(
    prompt: &Prompt,
    model: &dyn StepGenerator,
    role: Origin,
    prm: &dyn RewardModel,
    n: usize,
    select: BestOfNSelect,
    cfg: &SingleConfig,
) -> Result<BestOfN, RsdError> {
    if n == 0 {
        return Err(RsdError::Config("best-of-n needs n >= 1".into()));
    }
    let BestOfNSelect::FinalStepReward = select;
    let mut candidates = Vec::with_capacity(n);
    let mut final_rewards = Vec::with_capacity(n);
    for i in 0..n {
        let seed = rng::trajectory_seed(cfg.seed, i as u64);
        let mut outcome = decode_single(prompt, model, role, &cfg.with_seed(seed));
        let reward = match &mut outcome {
            Ok(trace) => match score_final_step(prompt, trace, prm) {
                Ok(r) => Some(r),
                Err(e) => {
                    let partial = std::mem::take(&mut trace.records);
                    outcome = Err(DecodeError::new(partial, e));
                    None
                }
            },
            Err(_) => None,
        };
        candidates.push(outcome);
        final_rewards.push(reward);
    }
    let chosen = argmax_first(&final_rewards)
        .ok_or_else(|| RsdError::InvalidInput("every best-of-n candidate failed".into()))?;
    Ok(BestOfN {
        chosen,
        candidates,
        final_rewards,
    })
}

/// Extracts the content of the last `\boxed{...}` in `text`.
pub fn boxed_answer(text: &str) -> Option<String> {
    let start = text.rfind("\\boxed{")? + "\\boxed{".len();
    let mut depth = 1usize;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    let answer = text[start..start + i].trim();
                    return (!answer.is_empty()).then(|| answer.to_string());
                }
            }
            _ => {}
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub winner: String,
    /// Answers in order of first appearance with their vote counts.
    pub votes: Vec<(String, usize)>,
    pub abstained: usize,
}

/// Most frequent answer; ties go to the answer seen first.
pub fn tally_votes(answers: &[Option<String>]) -> Option<Tally> {
    let mut votes: Vec<(String, usize)> = Vec::new();
    let mut abstained = 0;
    for a in answers {
        match a {
            Some(a) => match votes.iter_mut().find(|(k, _)| k == a) {
                Some((_, c)) => *c += 1,
                None => votes.push((a.clone(), 1)),
            },
            None => abstained += 1,
        }
    }
    let mut best: Option<&(String, usize)> = None;
    for v in &votes {
        if best.map_or(true, |b| v.1 > b.1) {
            best = Some(v);
        }
    }
    let winner = best?.0.clone();
    Some(Tally {
        winner,
        votes,
        abstained,
    })
}

#[derive(Debug)]
pub struct MajorityVote {
    pub tally: Tally,
    pub samples: Vec<Result<DecodeTrace, DecodeError>>,
    /// First sample whose answer is the winner.
    pub winner_index: usize,
}

pub fn decode_majority_voting(
    prompt: &Prompt,
    model: &dyn StepGenerator,
    role: Origin,
    n: usize,
    extractor: &dyn Fn(&str) -> Option<String>,
    cfg: &SingleConfig,
) -> Result<MajorityVote, RsdError> {
    if n == 0 {
        return Err(RsdError::Config("majority voting needs n >= 1".into()));
    }
    let samples: Vec<_> = (0..n)
        .map(|i| {
            let seed = rng::trajectory_seed(cfg.seed, i as u64);
            decode_single(prompt, model, role, &cfg.with_seed(seed))
        })
        .collect();
    let answers: Vec<Option<String>> = samples
        .iter()
        .map(|s| s.as_ref().ok().and_then(|t| extractor(&t.final_text)))
        .collect();
    let tally = tally_votes(&answers)
        .ok_or_else(|| RsdError::InvalidInput("every majority-voting sample abstained".into()))?;
    let winner_index = answers
        .iter()
        .position(|a| a.as_deref() == Some(tally.winner.as_str()))
        .expect("winner was voted for");
    Ok(MajorityVote {
        tally,
        samples,
        winner_index,
    })
}

/// Per step, draws `n_per_step` candidates and keeps the highest-reward one.
pub fn decode_process_best_of_n(
    prompt: &Prompt,
    model: &dyn StepGenerator,
    role: Origin,
    prm: &dyn RewardModel,
    n_per_step: usize,
    cfg: &SingleConfig,
) -> Result<DecodeTrace, DecodeError> {
    if n_per_step == 0 {
        return Err(RsdError::Config("process best-of-n needs n >= 1".into()).into());
    }
    cfg.validate()?;
    let mut rng = gen_stream(cfg.seed, model);
    let mut ledger = Ledger::new(prompt, cfg.limits);
    let mut stopped_by = StopReason::MaxLength;
    for _ in 1..cfg.limits.max_steps {
        let mut candidates = Vec::with_capacity(n_per_step);
        let mut rewards = Vec::with_capacity(n_per_step);
        for _ in 0..n_per_step {
            let g = match model
                .generate_step(&ledger.ctx, &cfg.sampling, &cfg.limits.caps, &mut rng)
                .and_then(checked)
            {
                Ok(g) => g,
                Err(e) => return Err(ledger.fail(e)),
            };
            match prm.score_step(&ledger.ctx, &g.step) {
                Ok(s) => rewards.push(Some(s.value)),
                Err(e) => return Err(ledger.fail(e)),
            }
            candidates.push(g);
        }
        let best = argmax_first(&rewards).expect("at least one candidate");
        let tokens: u64 = candidates.iter().map(|g| g.token_count).sum();
        let prompt_tokens: u64 = candidates.iter().map(|g| g.prompt_tokens).sum();
        let chosen = candidates.swap_remove(best);
        let mut record = StepRecord::unscored(chosen.step, role, tokens, prompt_tokens);
        record.reward = rewards[best];
        record.prm_calls = n_per_step as u64;
        match ledger.keep(record) {
            Ok(Next::Continue) => {}
            Ok(Next::Stop(reason)) => {
                stopped_by = reason;
                break;
            }
            Err(e) => return Err(ledger.fail(e)),
        }
    }
    Ok(ledger.finish(stopped_by, single_models(model, role, Some(prm))))
}

/// One draft-and-verify round of [`decode_sd`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SdRound {
    pub proposed: usize,
    /// Proposals the target checked; the ones after a rejection are dropped unchecked.
    pub verified: usize,
    pub accepted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdOutcome {
    pub trace: DecodeTrace,
    pub rounds: Vec<SdRound>,
}

impl SdOutcome {
    /// Accepted proposals over verified proposals.
    pub fn acceptance_rate(&self) -> f64 {
        let verified: usize = self.rounds.iter().map(|r| r.verified).sum();
        let accepted: usize = self.rounds.iter().map(|r| r.accepted).sum();
        if verified == 0 {
            1.0
        } else {
            accepted as f64 / verified as f64
        }
    }
}

/// Speculative decoding over symbols of exact tables.
///
/// The draft proposes up to `k_spec` symbols; each is kept with probability
/// `min(1, P_M/P_m)`. The first rejected symbol is replaced by a draw from
/// the normalized residual `max(0, P_M - P_m)`; if every proposal survives
/// the target adds one more symbol. Both models must expose
/// [`crate::backends::ExactDistribution`]s over the same alphabet.
///
/// Token booking per round: draft tokens for every proposal, target tokens
/// for every verified proposal plus the replacement or bonus symbol. The
/// round's costs are attached to the last record it emitted.
pub fn decode_sd(
    prompt: &Prompt,
    draft: &dyn StepGenerator,
    target: &dyn StepGenerator,
    k_spec: usize,
    cfg: &SingleConfig,
) -> Result<SdOutcome, DecodeError> {
    if k_spec == 0 {
        return Err(RsdError::Config("speculative length must be >= 1".into()).into());
    }
    cfg.validate()?;
    let unsupported = |who: &str| {
        RsdError::Backend(BackendError::Unsupported(format!(
            "speculative decoding needs exact next-step distributions; the {who} backend does not expose them"
        )))
    };
    let d = draft.exact().ok_or_else(|| unsupported("draft"))?;
    let t = target.exact().ok_or_else(|| unsupported("target"))?;
    let alphabet = d.alphabet();
    if alphabet != t.alphabet() {
        return Err(RsdError::Config("draft and target alphabets differ".into()).into());
    }

    let mut draft_rng = gen_stream(cfg.seed, draft);
    let mut target_rng = gen_stream(cfg.seed, target);
    let mut accept_rng = rng::stream(cfg.seed, ACCEPT_STREAM);
    let mut ledger = Ledger::new(prompt, cfg.limits);
    let mut rounds = Vec::new();
    let budget = cfg.limits.max_steps - 1;

    'outer: while ledger.records.len() < budget {
        // Draft proposals, sampled autoregressively from the draft table.
        let room = (budget - ledger.records.len()).min(k_spec);
        let mut scratch = ledger.ctx.clone();
        let mut proposals: Vec<(usize, Vec<f64>)> = Vec::with_capacity(room);
        while proposals.len() < room {
            let p_draft = match d.distribution(&scratch) {
                Ok(p) => p,
                Err(e) => return Err(ledger.fail(e)),
            };
            let idx = sample_categorical(&p_draft, &mut draft_rng);
            proposals.push((idx, p_draft));
            let step = alphabet[idx].clone();
            let terminal = step.terminal;
            if let Err(e) = scratch.push(step) {
                return Err(ledger.fail(e));
            }
            if terminal {
                break;
            }
        }
        let proposed = proposals.len();
        let mut round_draft_tokens: u64 = proposals.iter().map(|(i, _)| d.token_cost(*i)).sum();
        let mut round_target_tokens = 0u64;
        let mut accepted = 0usize;
        let mut emitted: Vec<(Step, Origin, Option<Step>)> = Vec::new();
        let mut verify_ctx = ledger.ctx.clone();
        let mut rejected_at = None;

        for (idx, p_draft) in &proposals {
            let p_target = match t.distribution(&verify_ctx) {
                Ok(p) => p,
                Err(e) => return Err(ledger.fail(e)),
            };
            round_target_tokens += t.token_cost(*idx);
            let keep_prob = (p_target[*idx] / p_draft[*idx]).min(1.0);
            if accept_with_weight(keep_prob, &mut accept_rng) {
                accepted += 1;
                let step = alphabet[*idx].clone();
                emitted.push((step.clone(), Origin::Draft, None));
                if let Err(e) = verify_ctx.push(step) {
                    return Err(ledger.fail(e));
                }
            } else {
                let residual: Vec<f64> = p_target
                    .iter()
                    .zip(p_draft)
                    .map(|(a, b)| (a - b).max(0.0))
                    .collect();
                let pick = sample_categorical(&residual, &mut target_rng);
                rejected_at = Some((alphabet[*idx].clone(), pick));
                break;
            }
        }
        let verified = accepted + usize::from(rejected_at.is_some());
        match rejected_at {
            Some((candidate, pick)) => {
                round_target_tokens += t.token_cost(pick);
                emitted.push((alphabet[pick].clone(), Origin::Target, Some(candidate)));
            }
            None if !verify_ctx.is_finished()
                && ledger.records.len() + emitted.len() < budget =>
            {
                // Every proposal survived: one bonus symbol from the target.
                let p_target = match t.distribution(&verify_ctx) {
                    Ok(p) => p,
                    Err(e) => return Err(ledger.fail(e)),
                };
                let pick = sample_categorical(&p_target, &mut target_rng);
                round_target_tokens += t.token_cost(pick);
                emitted.push((alphabet[pick].clone(), Origin::Target, None));
            }
            None => {}
        }
        rounds.push(SdRound {
            proposed,
            verified,
            accepted,
        });

        let last = emitted.len().saturating_sub(1);
        for (i, (step, origin, candidate)) in emitted.into_iter().enumerate() {
            let mut record = StepRecord::unscored(step, origin, 0, 0);
            record.draft_candidate = candidate;
            if i == last {
                record.draft_tokens = std::mem::take(&mut round_draft_tokens);
                record.target_tokens = std::mem::take(&mut round_target_tokens);
            }
            match ledger.keep(record) {
                Ok(Next::Continue) => {}
                Ok(Next::Stop(reason)) => {
                    let models = TraceModels {
                        draft: Some(draft.id().to_string()),
                        target: Some(target.id().to_string()),
                        prm: None,
                    };
                    return Ok(SdOutcome {
                        trace: ledger.finish(reason, models),
                        rounds,
                    });
                }
                Err(e) => return Err(ledger.fail(e)),
            }
        }
        if ledger.records.len() >= budget {
            break 'outer;
        }
    }
    let models = TraceModels {
        draft: Some(draft.id().to_string()),
        target: Some(target.id().to_string()),
        prm: None,
    };
    Ok(SdOutcome {
        trace: ledger.finish(StopReason::MaxLength, models),
        rounds,
    })
}
