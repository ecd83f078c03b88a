//! Run configuration (TOML) and backend construction.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context as _, Result};
use serde::Deserialize;

use rsd_core::backends::http::{
    CompletionEndpoint, HttpCompletionModel, HttpRewardModel, RetryPolicy, RewardEndpoint,
};
use rsd_core::backends::tabular::{TabularModel, TabularPrm, TabularWorld};
use rsd_core::backends::{Sampling, StepCaps, StepGenerator};
use rsd_core::engine::{Limits, RsdConfig, SingleConfig};
use rsd_core::harness::Backends;
use rsd_core::metrics::FlopsOptions;
use rsd_core::{ModelProfile, Origin, WeightingSpec};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub concurrency: usize,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub backend: BackendSpec,
    /// Parameter counts keyed by model id.
    #[serde(default)]
    pub profiles: HashMap<String, f64>,
    #[serde(default = "default_weighting")]
    pub weighting: WeightingSpec,
    #[serde(default)]
    pub rsd: RsdParams,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub flops: FlopsParams,
    /// Score finished trajectories with the PRM for reporting.
    #[serde(default = "yes")]
    pub rescore: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_weighting() -> WeightingSpec {
    WeightingSpec::BinaryStep { delta: 0.7 }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Model ids are `draft`, `target` and `prm`.
    Tabular { world: PathBuf },
    Http {
        draft: CompletionEndpoint,
        target: CompletionEndpoint,
        prm: RewardEndpoint,
        #[serde(default)]
        retry: RetryPolicy,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
}

fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsdParams {
    pub max_steps: usize,
    pub max_total_tokens: u64,
    pub max_step_tokens: u64,
    pub temperature: f64,
    pub top_p: f64,
    pub score_target_steps: bool,
}

impl Default for RsdParams {
    fn default() -> Self {
        let limits = Limits::default();
        Self {
            max_steps: limits.max_steps,
            max_total_tokens: limits.max_total_tokens,
            max_step_tokens: limits.caps.max_step_tokens,
            temperature: Sampling::GREEDY.temperature,
            top_p: Sampling::GREEDY.top_p,
            score_target_steps: false,
        }
    }
}

impl RsdParams {
    pub fn limits(&self) -> Limits {
        Limits {
            max_steps: self.max_steps,
            max_total_tokens: self.max_total_tokens,
            caps: StepCaps {
                max_step_tokens: self.max_step_tokens,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Draft,
    Target,
}

impl Role {
    pub fn origin(self) -> Origin {
        match self {
            Role::Draft => Origin::Draft,
            Role::Target => Origin::Target,
        }
    }
}

fn sampling_temperature() -> f64 {
    Sampling::DIVERSE.temperature
}

fn sampling_top_p() -> f64 {
    Sampling::DIVERSE.top_p
}

fn default_n() -> usize {
    8
}

fn default_k_spec() -> usize {
    7
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    #[default]
    Rsd,
    Single {
        #[serde(default)]
        model: Role,
        #[serde(default)]
        temperature: f64,
        #[serde(default = "unit")]
        top_p: f64,
    },
    BestOfN {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default)]
        model: Role,
        #[serde(default = "sampling_temperature")]
        temperature: f64,
        #[serde(default = "sampling_top_p")]
        top_p: f64,
    },
    Majority {
        #[serde(default = "default_n")]
        n: usize,
        #[serde(default)]
        model: Role,
        #[serde(default = "sampling_temperature")]
        temperature: f64,
        #[serde(default = "sampling_top_p")]
        top_p: f64,
    },
    ProcessBestOfN {
        #[serde(default = "default_n")]
        n_per_step: usize,
        #[serde(default)]
        model: Role,
        #[serde(default = "sampling_temperature")]
        temperature: f64,
        #[serde(default = "sampling_top_p")]
        top_p: f64,
    },
    Sd {
        #[serde(default = "default_k_spec")]
        k_spec: usize,
    },
}

fn unit() -> f64 {
    1.0
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Rsd => "rsd",
            Method::Single { .. } => "single",
            Method::BestOfN { .. } => "best_of_n",
            Method::Majority { .. } => "majority",
            Method::ProcessBestOfN { .. } => "process_best_of_n",
            Method::Sd { .. } => "sd",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsParams {
    pub prm_tokens_per_call: u64,
    pub include_prompt_tokens: bool,
}

impl Default for FlopsParams {
    fn default() -> Self {
        let d = FlopsOptions::default();
        Self {
            prm_tokens_per_call: d.prm_tokens_per_call,
            include_prompt_tokens: d.include_prompt_tokens,
        }
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub concurrency: Option<usize>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    /// Parses `path`, resolves relative paths against its directory and
    /// applies `overrides`.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let BackendSpec::Tabular { world } = &mut cfg.backend {
            resolve(world);
        }
        if let Some(d) = &mut cfg.dataset {
            resolve(d);
        }
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(c) = overrides.concurrency {
            cfg.concurrency = c;
        }
        if let Some(o) = &overrides.output {
            cfg.output = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            bail!("concurrency must be >= 1");
        }
        if let BackendSpec::Tabular { world } = &self.backend {
            if !world.is_file() {
                bail!("tabular world file {} does not exist", world.display());
            }
        }
        if let Some(d) = &self.dataset {
            if !d.is_file() {
                bail!("dataset file {} does not exist", d.display());
            }
        }
        if matches!(self.method, Method::Sd { .. }) && matches!(self.backend, BackendSpec::Http { .. }) {
            bail!(
                "method `sd` needs exact next-step distributions and runs on the tabular backend only; \
                 HTTP completion servers do not expose them"
            );
        }
        self.weighting.validate()?;
        self.rsd_config(self.seed).validate()?;
        for (id, n) in &self.profiles {
            ModelProfile::new(id.clone(), *n)?;
        }
        Ok(())
    }

    pub fn rsd_config(&self, seed: u64) -> RsdConfig {
        let sampling = Sampling {
            temperature: self.rsd.temperature,
            top_p: self.rsd.top_p,
        };
        RsdConfig {
            weighting: self.weighting,
            limits: self.rsd.limits(),
            sampling_draft: sampling,
            sampling_target: sampling,
            seed,
            score_target_steps: self.rsd.score_target_steps,
        }
    }

    pub fn single_config(&self, temperature: f64, top_p: f64, seed: u64) -> SingleConfig {
        SingleConfig {
            limits: self.rsd.limits(),
            sampling: Sampling { temperature, top_p },
            seed,
        }
    }

    pub fn flops_options(&self) -> FlopsOptions {
        FlopsOptions {
            prm_tokens_per_call: self.flops.prm_tokens_per_call,
            include_prompt_tokens: self.flops.include_prompt_tokens,
        }
    }

    /// Profiles from the config, or `None` when none are given.
    pub fn model_profiles(&self) -> Result<Option<HashMap<String, ModelProfile>>> {
        if self.profiles.is_empty() {
            return Ok(None);
        }
        let mut out = HashMap::new();
        for (id, n) in &self.profiles {
            out.insert(id.clone(), ModelProfile::new(id.clone(), *n)?);
        }
        Ok(Some(out))
    }

    pub fn backends(&self) -> Result<Backends> {
        match &self.backend {
            BackendSpec::Tabular { world } => {
                let world = Arc::new(
                    TabularWorld::load(world)
                        .with_context(|| format!("loading tabular world {}", world.display()))?,
                );
                Ok(Backends {
                    draft: Arc::new(TabularModel::new(Arc::clone(&world), Origin::Draft)),
                    target: Arc::new(TabularModel::new(Arc::clone(&world), Origin::Target)),
                    prm: Arc::new(TabularPrm::new(world)),
                })
            }
            BackendSpec::Http {
                draft,
                target,
                prm,
                retry,
                max_in_flight,
            } => Ok(Backends {
                draft: Arc::new(HttpCompletionModel::new(draft.clone(), *retry, *max_in_flight)?),
                target: Arc::new(HttpCompletionModel::new(target.clone(), *retry, *max_in_flight)?),
                prm: Arc::new(HttpRewardModel::new(prm.clone(), *retry, *max_in_flight)?),
            }),
        }
    }
}

/// The generator playing `role`.
pub fn pick(backends: &Backends, role: Role) -> &dyn StepGenerator {
    match role {
        Role::Draft => backends.draft.as_ref(),
        Role::Target => backends.target.as_ref(),
    }
}
