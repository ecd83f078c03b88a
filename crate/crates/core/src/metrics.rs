//! FLOPs accounting, run statistics and threshold sweeps.
//!
//! FLOPs use the usual transformer estimate of `2 N` per processed token for
//! a model with `N` parameters. PRM calls are charged `prm_tokens_per_call`
//! tokens each at the PRM's parameter count. Only generated tokens count
//! unless `include_prompt_tokens` is set.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backends::RewardModel;
use crate::engine::{decode_rsd, RsdConfig};
use crate::error::RsdError;
use crate::harness::{run_indexed, Backends};
use crate::rng::trajectory_seed;
use crate::types::{Context, DecodeTrace, ModelProfile, Origin, Prompt};
use crate::weighting::WeightingSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsOptions {
    pub prm_tokens_per_call: u64,
    pub include_prompt_tokens: bool,
}

impl Default for FlopsOptions {
    fn default() -> Self {
        Self {
            prm_tokens_per_call: 1,
            include_prompt_tokens: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFlops {
    pub tokens: u64,
    pub params: f64,
    pub flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_model: BTreeMap<String, ModelFlops>,
    pub total_flops: f64,
    pub prompt_tokens_included: bool,
}

pub fn flops_of(
    traces: &[DecodeTrace],
    profiles: &HashMap<String, ModelProfile>,
    opts: FlopsOptions,
) -> Result<FlopsReport, RsdError> {
    let mut tokens: BTreeMap<String, u64> = BTreeMap::new();
    let mut book = |id: &Option<String>, n: u64| -> Result<(), RsdError> {
        if let Some(id) = id {
            if !profiles.contains_key(id) {
                return Err(RsdError::Config(format!("no parameter profile for model `{id}`")));
            }
            *tokens.entry(id.clone()).or_default() += n;
        }
        Ok(())
    };
    for t in traces {
        let prompt = |n: u64| if opts.include_prompt_tokens { n } else { 0 };
        book(&t.models.draft, t.draft_tokens() + prompt(t.draft_prompt_tokens()))?;
        book(&t.models.target, t.target_tokens() + prompt(t.target_prompt_tokens()))?;
        book(&t.models.prm, t.prm_calls() * opts.prm_tokens_per_call)?;
    }
    let per_model: BTreeMap<String, ModelFlops> = tokens
        .into_iter()
        .map(|(id, n)| {
            let params = profiles[&id].param_count;
            (
                id,
                ModelFlops {
                    tokens: n,
                    params,
                    flops: 2.0 * params * n as f64,
                },
            )
        })
        .collect();
    let total_flops = per_model.values().map(|m| m.flops).sum();
    Ok(FlopsReport {
        per_model,
        total_flops,
        prompt_tokens_included: opts.include_prompt_tokens,
    })
}

/// Raw counts behind [`RunStats`]; merging is plain addition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsAccumulator {
    pub trajectories: u64,
    pub records: u64,
    pub draft_records: u64,
    pub target_records: u64,
    pub draft_only_trajectories: u64,
    pub reward_sum: f64,
    pub rewarded_trajectories: u64,
    pub graded: u64,
    pub correct: u64,
}

impl StatsAccumulator {
    /// Adds one trajectory with an optional trajectory-level reward and grade.
    pub fn add(&mut self, trace: &DecodeTrace, reward: Option<f64>, correct: Option<bool>) {
        let target = trace.target_steps() as u64;
        self.trajectories += 1;
        self.records += trace.records.len() as u64;
        self.target_records += target;
        self.draft_records += trace.records.len() as u64 - target;
        if target == 0 {
            self.draft_only_trajectories += 1;
        }
        if let Some(r) = reward {
            self.reward_sum += r;
            self.rewarded_trajectories += 1;
        }
        if let Some(c) = correct {
            self.graded += 1;
            self.correct += u64::from(c);
        }
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        self.trajectories += other.trajectories;
        self.records += other.records;
        self.draft_records += other.draft_records;
        self.target_records += other.target_records;
        self.draft_only_trajectories += other.draft_only_trajectories;
        self.reward_sum += other.reward_sum;
        self.rewarded_trajectories += other.rewarded_trajectories;
        self.graded += other.graded;
        self.correct += other.correct;
    }

    pub fn finish(&self) -> Result<RunStats, RsdError> {
        if self.trajectories == 0 {
            return Err(RsdError::InvalidInput("no trajectories to summarize".into()));
        }
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Ok(RunStats {
            trajectories: self.trajectories,
            step_accept_rate: ratio(self.draft_records, self.records),
            target_invocation_rate: ratio(self.target_records, self.records),
            draft_only_solve_rate: ratio(self.draft_only_trajectories, self.trajectories),
            mean_steps: ratio(self.records, self.trajectories),
            mean_reward: (self.rewarded_trajectories > 0)
                .then(|| self.reward_sum / self.rewarded_trajectories as f64),
            accuracy: (self.graded > 0).then(|| ratio(self.correct, self.graded)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub trajectories: u64,
    /// Draft-origin records over all records.
    pub step_accept_rate: f64,
    /// Target-origin records over all records.
    pub target_invocation_rate: f64,
    /// Trajectories with no target-origin record.
    pub draft_only_solve_rate: f64,
    pub mean_steps: f64,
    pub mean_reward: Option<f64>,
    pub accuracy: Option<f64>,
}

/// Mean reward of the kept steps whose reward is known.
pub fn trace_mean_reward(trace: &DecodeTrace) -> Option<f64> {
    let rewards: Vec<f64> = trace.records.iter().filter_map(|r| r.kept_reward()).collect();
    (!rewards.is_empty()).then(|| rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// Mean PRM reward of the kept steps, each scored in the context it was
/// appended to. Comparable across decoding strategies.
pub fn trajectory_reward(
    prompt: &Prompt,
    trace: &DecodeTrace,
    prm: &dyn RewardModel,
) -> Result<f64, RsdError> {
    if trace.records.is_empty() {
        return Err(RsdError::InvalidInput("trace has no steps".into()));
    }
    let mut ctx = Context::new(prompt.clone());
    let mut total = 0.0;
    for r in &trace.records {
        total += prm.score_step(&ctx, &r.step)?.value;
        ctx.push(r.step.clone())?;
    }
    Ok(total / trace.records.len() as f64)
}

pub fn summarize(traces: &[DecodeTrace]) -> Result<RunStats, RsdError> {
    let mut acc = StatsAccumulator::default();
    for t in traces {
        acc.add(t, trace_mean_reward(t), None);
    }
    acc.finish()
}

/// Per-prompt grader: `(prompt index, trace) -> correct?`.
pub type Grader<'a> = dyn Fn(usize, &DecodeTrace) -> Option<bool> + Sync + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub delta: f64,
    pub stats: RunStats,
    pub flops: FlopsReport,
}

#[derive(Clone, Copy)]
pub struct SweepSettings<'a> {
    /// Trajectories per prompt.
    pub repeats: usize,
    pub concurrency: usize,
    pub flops: FlopsOptions,
    pub profiles: &'a HashMap<String, ModelProfile>,
}

/// Runs RSD with a binary threshold at every δ in `deltas`.
///
/// Trajectory `j` (prompt `j / repeats`) uses seed
/// `trajectory_seed(template.seed, j)` for every δ, so the runs are coupled
/// across thresholds.
pub fn delta_sweep(
    prompts: &[Prompt],
    backends: &Backends,
    template: &RsdConfig,
    deltas: &[f64],
    settings: SweepSettings<'_>,
    grader: Option<&Grader<'_>>,
) -> Result<Vec<SweepPoint>, RsdError> {
    if deltas.is_empty() {
        return Err(RsdError::InvalidInput("delta sweep needs at least one delta".into()));
    }
    if !matches!(template.weighting, WeightingSpec::BinaryStep { .. }) {
        return Err(RsdError::Config("delta sweep needs binary-step weighting".into()));
    }
    if prompts.is_empty() || settings.repeats == 0 {
        return Err(RsdError::InvalidInput("delta sweep needs prompts and repeats >= 1".into()));
    }
    let n = prompts.len() * settings.repeats;
    let mut points = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let cfg = RsdConfig {
            weighting: WeightingSpec::BinaryStep { delta },
            ..*template
        };
        let traces = run_indexed(n, settings.concurrency, |j| {
            let seed = trajectory_seed(template.seed, j as u64);
            decode_rsd(
                &prompts[j / settings.repeats],
                backends.draft.as_ref(),
                backends.target.as_ref(),
                backends.prm.as_ref(),
                &cfg.with_seed(seed),
            )
        });
        let traces: Vec<DecodeTrace> = traces
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(|e| RsdError::InvalidInput(format!("sweep at delta {delta}: {e}")))?;
        let mut acc = StatsAccumulator::default();
        for (j, t) in traces.iter().enumerate() {
            let grade = grader.and_then(|g| g(j / settings.repeats, t));
            acc.add(t, trace_mean_reward(t), grade);
        }
        points.push(SweepPoint {
            delta,
            stats: acc.finish()?,
            flops: flops_of(&traces, settings.profiles, settings.flops)?,
        });
    }
    Ok(points)
}

pub const SWEEP_CSV_HEADER: &str = "delta,accuracy,draft_only_rate,accept_rate,total_flops";

/// Plot-ready CSV; `accuracy` is empty when no grader ran.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for p in points {
        let acc = p.stats.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{:e}",
            p.delta, acc, p.stats.draft_only_solve_rate, p.stats.step_accept_rate, p.flops.total_flops
        );
    }
    out
}

/// Human-readable sweep table.
pub fn sweep_table(points: &[SweepPoint]) -> String {
    let mut out = format!(
        "{:>8}  {:>8}  {:>10}  {:>8}  {:>12}\n",
        "delta", "accuracy", "draft_only", "accept", "flops"
    );
    for p in points {
        let acc = p
            .stats
            .accuracy
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:>8.3}  {:>8}  {:>10.4}  {:>8.4}  {:>12.4e}",
            p.delta, acc, p.stats.draft_only_solve_rate, p.stats.step_accept_rate, p.flops.total_flops
        );
    }
    out
}

/// Fraction of records of `origin` across traces.
pub fn origin_rate(traces: &[DecodeTrace], origin: Origin) -> f64 {
    let total: usize = traces.iter().map(|t| t.records.len()).sum();
    let hits: usize = traces
        .iter()
        .flat_map(|t| &t.records)
        .filter(|r| r.origin == origin)
        .count();
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
