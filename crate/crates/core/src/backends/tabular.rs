//! Finite-alphabet simulator with exact conditional distributions.
//!
//! A [`TabularWorld`] lists step symbols and, per context key, the draft
//! distribution P_m, the target distribution P_M and the reward r(y|z).
//! Context keys are resolved from a [`Context`] in this order:
//!
//! 1. `"{prompt}|{path}"` where `prompt` is the trimmed prompt text and
//!    `path` the symbols generated so far joined by `/` (empty at the root)
//! 2. `"*|{path}"`
//! 3. `"{prompt}|@{depth}"`, with `depth` the number of steps so far
//! 4. `"*|@{depth}"`
//! 5. `"*"`
//!
//! A symbol's step text is the symbol followed by the world's delimiter,
//! except for terminal symbols which are emitted verbatim.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    ExactDistribution, GenerationStop, RewardModel, RewardScale, RewardScore, Sampling, StepCaps,
    StepGeneration, StepGenerator,
};
use crate::error::{BackendError, RsdError};
use crate::rng::DecodeRng;
use crate::types::{Context, Origin, Step, DEFAULT_DELIMITER};

const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpec {
    pub symbol: String,
    #[serde(default)]
    pub terminal: bool,
    /// Token cost of emitting this symbol; falls back to the world default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTable {
    pub key: String,
    pub draft: Vec<f64>,
    pub target: Vec<f64>,
    pub reward: Vec<f64>,
}

fn default_delimiter() -> String {
    DEFAULT_DELIMITER.to_string()
}

fn default_tokens() -> u64 {
    1
}

fn default_scale() -> RewardScale {
    RewardScale::UnitInterval
}

/// On-disk layout of a world (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub alphabet: Vec<SymbolSpec>,
    pub contexts: Vec<ContextTable>,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default = "default_tokens")]
    pub default_tokens: u64,
    #[serde(default = "default_scale")]
    pub reward_scale: RewardScale,
}

/// Validated world with lookup indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularWorld {
    spec: WorldSpec,
    steps: Vec<Step>,
    by_text: HashMap<String, usize>,
    by_key: HashMap<String, usize>,
}

impl TabularWorld {
    pub fn new(spec: WorldSpec) -> Result<Self, RsdError> {
        let k = spec.alphabet.len();
        if k == 0 {
            return Err(RsdError::Config("world alphabet is empty".into()));
        }
        if spec.contexts.is_empty() {
            return Err(RsdError::Config("world has no contexts".into()));
        }
        if spec.delimiter.is_empty() {
            return Err(RsdError::Config("step delimiter is empty".into()));
        }
        let mut steps = Vec::with_capacity(k);
        let mut by_text = HashMap::with_capacity(k);
        for (i, s) in spec.alphabet.iter().enumerate() {
            if s.symbol.is_empty() || s.symbol.contains('/') {
                return Err(RsdError::Config(format!(
                    "symbol `{}` must be non-empty and free of `/`",
                    s.symbol
                )));
            }
            if s.tokens == Some(0) {
                return Err(RsdError::Config(format!("symbol `{}` costs 0 tokens", s.symbol)));
            }
            let text = if s.terminal {
                s.symbol.clone()
            } else {
                format!("{}{}", s.symbol, spec.delimiter)
            };
            if by_text.insert(text.clone(), i).is_some() {
                return Err(RsdError::Config(format!("duplicate symbol `{}`", s.symbol)));
            }
            steps.push(Step {
                text,
                terminal: s.terminal,
            });
        }
        if spec.default_tokens == 0 {
            return Err(RsdError::Config("default token cost must be >= 1".into()));
        }
        let mut by_key = HashMap::with_capacity(spec.contexts.len());
        for (ci, c) in spec.contexts.iter().enumerate() {
            for (name, v) in [("draft", &c.draft), ("target", &c.target)] {
                check_distribution(v, k).map_err(|e| {
                    RsdError::Config(format!("context `{}` {name} distribution: {e}", c.key))
                })?;
            }
            if c.reward.len() != k || c.reward.iter().any(|r| !r.is_finite()) {
                return Err(RsdError::Config(format!(
                    "context `{}` needs {k} finite rewards",
                    c.key
                )));
            }
            if spec.reward_scale == RewardScale::UnitInterval
                && c.reward.iter().any(|r| !(0.0..=1.0).contains(r))
            {
                return Err(RsdError::Config(format!(
                    "context `{}` has rewards outside [0,1] but the scale is unit_interval",
                    c.key
                )));
            }
            if by_key.insert(c.key.clone(), ci).is_some() {
                return Err(RsdError::Config(format!("duplicate context key `{}`", c.key)));
            }
        }
        Ok(Self {
            spec,
            steps,
            by_text,
            by_key,
        })
    }

    /// A one-context world where every symbol is terminal, keyed `*`.
    /// Symbols are named `s0`, `s1`, ...
    pub fn single_step(draft: Vec<f64>, target: Vec<f64>, reward: Vec<f64>) -> Result<Self, RsdError> {
        let alphabet = (0..draft.len())
            .map(|i| SymbolSpec {
                symbol: format!("s{i}"),
                terminal: true,
                tokens: None,
            })
            .collect();
        let scale = if reward.iter().all(|r| (0.0..=1.0).contains(r)) {
            RewardScale::UnitInterval
        } else {
            RewardScale::Unbounded
        };
        Self::new(WorldSpec {
            alphabet,
            contexts: vec![ContextTable {
                key: "*".into(),
                draft,
                target,
                reward,
            }],
            delimiter: default_delimiter(),
            default_tokens: 1,
            reward_scale: scale,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, RsdError> {
        let spec: WorldSpec = serde_json::from_str(text)
            .map_err(|e| RsdError::Config(format!("world file: {e}")))?;
        Self::new(spec)
    }

    pub fn load(path: &Path) -> Result<Self, RsdError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RsdError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.spec).expect("world spec serializes")
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn reward_scale(&self) -> RewardScale {
        self.spec.reward_scale
    }

    pub fn context_keys(&self) -> impl Iterator<Item = &str> {
        self.spec.contexts.iter().map(|c| c.key.as_str())
    }

    pub fn token_cost(&self, index: usize) -> u64 {
        self.spec.alphabet[index]
            .tokens
            .unwrap_or(self.spec.default_tokens)
    }

    pub fn symbol_index(&self, step: &Step) -> Option<usize> {
        self.by_text.get(&step.text).copied()
    }

    fn table(&self, key: &str) -> Result<&ContextTable, BackendError> {
        self.by_key
            .get(key)
            .map(|&i| &self.spec.contexts[i])
            .ok_or_else(|| BackendError::UnknownContext(key.to_string()))
    }

    /// Exact next-step distribution of `role` at context `key`.
    pub fn step_distribution(&self, role: Origin, key: &str) -> Result<&[f64], BackendError> {
        let t = self.table(key)?;
        Ok(match role {
            Origin::Draft => &t.draft,
            Origin::Target => &t.target,
        })
    }

    /// Reward table r(·|z) at context `key`.
    pub fn rewards(&self, key: &str) -> Result<&[f64], BackendError> {
        Ok(&self.table(key)?.reward)
    }

    /// Resolves the table key used for `ctx`.
    pub fn resolve_key(&self, ctx: &Context) -> Result<&str, BackendError> {
        if self.spec.contexts.len() == 1 && self.spec.contexts[0].key == "*" {
            return Ok("*");
        }
        let mut path = String::new();
        for (i, step) in ctx.steps().iter().enumerate() {
            let idx = self
                .symbol_index(step)
                .ok_or_else(|| BackendError::UnknownStep(step.text.clone()))?;
            if i > 0 {
                path.push('/');
            }
            path.push_str(&self.spec.alphabet[idx].symbol);
        }
        let prompt = ctx.prompt().text().trim();
        let depth = ctx.steps().len();
        let candidates = [
            format!("{prompt}|{path}"),
            format!("*|{path}"),
            format!("{prompt}|@{depth}"),
            format!("*|@{depth}"),
            "*".to_string(),
        ];
        for c in &candidates {
            if let Some((k, _)) = self.by_key.get_key_value(c.as_str()) {
                return Ok(k.as_str());
            }
        }
        Err(BackendError::UnknownContext(candidates[0].clone()))
    }

    fn sample_index(
        &self,
        probs: &[f64],
        sampling: &Sampling,
        rng: &mut DecodeRng,
    ) -> usize {
        if sampling.temperature == 0.0 {
            return argmax(probs);
        }
        if sampling.temperature == 1.0 && sampling.top_p >= 1.0 {
            return sample_categorical(probs, rng);
        }
        let shaped = shape(probs, sampling.temperature, sampling.top_p);
        sample_categorical(&shaped, rng)
    }
}

fn check_distribution(v: &[f64], k: usize) -> Result<(), String> {
    if v.len() != k {
        return Err(format!("expected {k} entries, got {}", v.len()));
    }
    if v.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("probabilities must be finite and >= 0".into());
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(format!("sums to {s}, not 1"));
    }
    Ok(())
}

/// Lowest index among the maxima.
fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw. Zero-probability entries are never returned.
pub(crate) fn sample_categorical(probs: &[f64], rng: &mut DecodeRng) -> usize {
    let u: f64 = rng.gen();
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last_positive = i;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Temperature scaling followed by nucleus truncation.
fn shape(probs: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    let inv_t = 1.0 / temperature;
    let mut scaled: Vec<f64> = probs
        .iter()
        .map(|p| if *p > 0.0 { p.powf(inv_t) } else { 0.0 })
        .collect();
    let z: f64 = scaled.iter().sum();
    scaled.iter_mut().for_each(|p| *p /= z);
    if top_p < 1.0 {
        let mut order: Vec<usize> = (0..scaled.len()).collect();
        order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
        let mut keep = vec![false; scaled.len()];
        let mut acc = 0.0;
        for i in order {
            if scaled[i] <= 0.0 {
                break;
            }
            keep[i] = true;
            acc += scaled[i];
            if acc >= top_p {
                break;
            }
        }
        for (p, k) in scaled.iter_mut().zip(keep) {
            if !k {
                *p = 0.0;
            }
        }
    }
    scaled
}

/// A draft or target model backed by a [`TabularWorld`].
#[derive(Debug, Clone)]
pub struct TabularModel {
    world: Arc<TabularWorld>,
    role: Origin,
    id: String,
}

impl TabularModel {
    pub fn new(world: Arc<TabularWorld>, role: Origin) -> Self {
        let id = match role {
            Origin::Draft => "draft",
            Origin::Target => "target",
        };
        Self::with_id(world, role, id)
    }

    pub fn with_id(world: Arc<TabularWorld>, role: Origin, id: impl Into<String>) -> Self {
        Self {
            world,
            role,
            id: id.into(),
        }
    }

    pub fn world(&self) -> &TabularWorld {
        &self.world
    }

    pub fn role(&self) -> Origin {
        self.role
    }
}

impl StepGenerator for TabularModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate_step(
        &self,
        ctx: &Context,
        sampling: &Sampling,
        caps: &StepCaps,
        rng: &mut DecodeRng,
    ) -> Result<StepGeneration, BackendError> {
        let key = self.world.resolve_key(ctx)?;
        let probs = self.world.step_distribution(self.role, key)?;
        let idx = self.world.sample_index(probs, sampling, rng);
        let cost = self.world.token_cost(idx);
        let step = self.world.steps[idx].clone();
        let stop_reason = if step.terminal {
            GenerationStop::Eos
        } else {
            GenerationStop::Delimiter
        };
        // Symbols are atomic: a cap below the symbol cost still emits the
        // whole symbol but reports the truncation.
        let stop_reason = if cost > caps.max_step_tokens {
            GenerationStop::LengthCap
        } else {
            stop_reason
        };
        Ok(StepGeneration {
            step,
            token_count: cost,
            stop_reason,
            per_token_logprobs: None,
            prompt_tokens: 0,
        })
    }

    fn step_logprob(&self, ctx: &Context, step: &Step) -> Result<Option<f64>, BackendError> {
        let key = self.world.resolve_key(ctx)?;
        let idx = self
            .world
            .symbol_index(step)
            .ok_or_else(|| BackendError::UnknownStep(step.text.clone()))?;
        Ok(Some(self.world.step_distribution(self.role, key)?[idx].ln()))
    }

    fn exact(&self) -> Option<&dyn ExactDistribution> {
        Some(self)
    }
}

impl ExactDistribution for TabularModel {
    fn alphabet(&self) -> Vec<Step> {
        self.world.steps.clone()
    }

    fn distribution(&self, ctx: &Context) -> Result<Vec<f64>, BackendError> {
        let key = self.world.resolve_key(ctx)?;
        Ok(self.world.step_distribution(self.role, key)?.to_vec())
    }

    fn token_cost(&self, index: usize) -> u64 {
        self.world.token_cost(index)
    }
}

/// Reward model returning the world's reward table exactly.
#[derive(Debug, Clone)]
pub struct TabularPrm {
    world: Arc<TabularWorld>,
    id: String,
}

impl TabularPrm {
    pub fn new(world: Arc<TabularWorld>) -> Self {
        Self::with_id(world, "prm")
    }

    pub fn with_id(world: Arc<TabularWorld>, id: impl Into<String>) -> Self {
        Self {
            world,
            id: id.into(),
        }
    }
}

impl RewardModel for TabularPrm {
    fn id(&self) -> &str {
        &self.id
    }

    fn score_step(&self, ctx: &Context, step: &Step) -> Result<RewardScore, BackendError> {
        let key = self.world.resolve_key(ctx)?;
        let idx = self
            .world
            .symbol_index(step)
            .ok_or_else(|| BackendError::UnknownStep(step.text.clone()))?;
        RewardScore::new(self.world.rewards(key)?[idx], self.world.reward_scale())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::types::Prompt;

    fn root(prompt: &str) -> Context {
        Context::new(Prompt::new(prompt).unwrap())
    }

    #[test]
    fn degenerate_distribution_is_deterministic() {
        let world = Arc::new(
            TabularWorld::single_step(vec![1.0, 0.0], vec![0.5, 0.5], vec![0.9, 0.1]).unwrap(),
        );
        let m = TabularModel::new(world, Origin::Draft);
        let mut rng = stream(0, "draft");
        for _ in 0..100 {
            let g = m
                .generate_step(&root("q"), &Sampling::ANCESTRAL, &StepCaps::default(), &mut rng)
                .unwrap();
            assert_eq!(g.step.text, "s0");
            assert_eq!(g.token_count, 1);
            assert_eq!(g.stop_reason, GenerationStop::Eos);
        }
    }

    #[test]
    fn table_lookup_and_independence() {
        let world =
            TabularWorld::single_step(vec![0.2, 0.3, 0.5], vec![0.6, 0.3, 0.1], vec![0.9, 0.5, 0.1])
                .unwrap();
        assert_eq!(world.step_distribution(Origin::Draft, "*").unwrap(), &[0.2, 0.3, 0.5]);
        assert_eq!(world.step_distribution(Origin::Target, "*").unwrap(), &[0.6, 0.3, 0.1]);
        assert!(matches!(
            world.step_distribution(Origin::Draft, "nope"),
            Err(BackendError::UnknownContext(_))
        ));
        let prm = TabularPrm::new(Arc::new(world));
        let s = Step::new("s0", true).unwrap();
        assert_eq!(prm.score_step(&root("q"), &s).unwrap().value, 0.9);
    }

    #[test]
    fn invalid_worlds_rejected() {
        assert!(TabularWorld::single_step(vec![0.5, 0.4], vec![0.5, 0.5], vec![0.0, 0.0]).is_err());
        assert!(TabularWorld::single_step(vec![1.0, 0.0], vec![0.5, 0.5], vec![f64::NAN, 0.0]).is_err());
        assert!(TabularWorld::single_step(vec![1.0, 0.0], vec![1.5, -0.5], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn greedy_picks_lowest_index_mode() {
        let world = Arc::new(
            TabularWorld::single_step(vec![0.4, 0.4, 0.2], vec![0.4, 0.4, 0.2], vec![0.0; 3])
                .unwrap(),
        );
        let m = TabularModel::new(world, Origin::Draft);
        let mut rng = stream(3, "x");
        let g = m
            .generate_step(&root("q"), &Sampling::GREEDY, &StepCaps::default(), &mut rng)
            .unwrap();
        assert_eq!(g.step.text, "s0");
    }

    #[test]
    fn nucleus_truncates_tail() {
        let shaped = shape(&[0.5, 0.3, 0.2], 1.0, 0.8);
        assert_eq!(shaped[2], 0.0);
        assert!(shaped[0] > 0.0 && shaped[1] > 0.0);
    }

    #[test]
    fn empirical_frequencies_match_table() {
        let world = Arc::new(
            TabularWorld::single_step(vec![0.5, 0.5], vec![0.5, 0.5], vec![0.0, 0.0]).unwrap(),
        );
        let m = TabularModel::new(world, Origin::Draft);
        let mut rng = stream(17, "draft");
        let n = 100_000;
        let mut hits = 0usize;
        for _ in 0..n {
            let g = m
                .generate_step(&root("q"), &Sampling::ANCESTRAL, &StepCaps::default(), &mut rng)
                .unwrap();
            if g.step.text == "s0" {
                hits += 1;
            }
        }
        let f = hits as f64 / n as f64;
        assert!((f - 0.5).abs() <= 0.01, "{f}");
    }

    #[test]
    fn chi_square_consistency() {
        // Critical value of chi-square with 4 degrees of freedom at 0.001.
        const CRIT_DF4: f64 = 18.467;
        let p = vec![0.05, 0.15, 0.2, 0.25, 0.35];
        let world = Arc::new(TabularWorld::single_step(p.clone(), p.clone(), vec![0.0; 5]).unwrap());
        let m = TabularModel::new(world, Origin::Target);
        let mut rng = stream(23, "target");
        let n = 100_000;
        let mut counts = [0f64; 5];
        for _ in 0..n {
            let g = m
                .generate_step(&root("q"), &Sampling::ANCESTRAL, &StepCaps::default(), &mut rng)
                .unwrap();
            counts[m.world().symbol_index(&g.step).unwrap()] += 1.0;
        }
        let chi2: f64 = counts
            .iter()
            .zip(&p)
            .map(|(o, q)| {
                let e = q * n as f64;
                (o - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < CRIT_DF4, "chi2 = {chi2}");
    }

    #[test]
    fn key_resolution_order() {
        let spec = WorldSpec {
            alphabet: vec![
                SymbolSpec {
                    symbol: "a".into(),
                    terminal: false,
                    tokens: Some(3),
                },
                SymbolSpec {
                    symbol: "end".into(),
                    terminal: true,
                    tokens: None,
                },
            ],
            contexts: vec![
                ContextTable {
                    key: "q1|".into(),
                    draft: vec![1.0, 0.0],
                    target: vec![1.0, 0.0],
                    reward: vec![0.1, 0.2],
                },
                ContextTable {
                    key: "*|@1".into(),
                    draft: vec![0.0, 1.0],
                    target: vec![0.0, 1.0],
                    reward: vec![0.3, 0.4],
                },
                ContextTable {
                    key: "*".into(),
                    draft: vec![0.5, 0.5],
                    target: vec![0.5, 0.5],
                    reward: vec![0.5, 0.6],
                },
            ],
            delimiter: "\n\n".into(),
            default_tokens: 1,
            reward_scale: RewardScale::UnitInterval,
        };
        let world = TabularWorld::new(spec).unwrap();
        let mut ctx = root("q1\n");
        assert_eq!(world.resolve_key(&ctx).unwrap(), "q1|");
        assert_eq!(world.resolve_key(&root("q2")).unwrap(), "*");
        ctx.push(Step::new("a\n\n", false).unwrap()).unwrap();
        assert_eq!(world.resolve_key(&ctx).unwrap(), "*|@1");
        assert_eq!(world.token_cost(0), 3);
        assert_eq!(world.token_cost(1), 1);
        let back = TabularWorld::from_json(&world.to_json()).unwrap();
        assert_eq!(back, world);
    }
}
