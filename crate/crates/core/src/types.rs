//! Domain types shared by the engine, the backends and the metrics.
//!
//! Everything here is a plain value type. A decode builds a [`Context`] step
//! by step and records what happened in a [`DecodeTrace`].

use serde::{Deserialize, Serialize};

use crate::error::RsdError;

/// Default reasoning-step delimiter: a blank line.
pub const DEFAULT_DELIMITER: &str = "\n\n";

/// The input question.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Prompt(String);

impl Prompt {
    pub fn new(text: impl Into<String>) -> Result<Self, RsdError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(RsdError::InvalidInput("prompt is empty".into()));
        }
        Ok(Self(text))
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Prompt {
    type Error = RsdError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Prompt::new(value)
    }
}

impl From<Prompt> for String {
    fn from(p: Prompt) -> String {
        p.0
    }
}

/// One reasoning step. `terminal` is set when the step carries the
/// end-of-sequence marker.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub text: String,
    pub terminal: bool,
}

impl Step {
    pub fn new(text: impl Into<String>, terminal: bool) -> Result<Self, RsdError> {
        let text = text.into();
        if text.is_empty() {
            return Err(RsdError::InvalidInput("step text is empty".into()));
        }
        Ok(Self { text, terminal })
    }
}

/// The prompt plus the steps accepted so far.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    prompt: Prompt,
    steps: Vec<Step>,
}

impl Context {
    pub fn new(prompt: Prompt) -> Self {
        Self {
            prompt,
            steps: Vec::new(),
        }
    }

    pub fn with_steps(prompt: Prompt, steps: Vec<Step>) -> Result<Self, RsdError> {
        let mut ctx = Self::new(prompt);
        for step in steps {
            ctx.push(step)?;
        }
        Ok(ctx)
    }

    pub fn prompt(&self) -> &Prompt {
        &self.prompt
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn is_finished(&self) -> bool {
        self.steps.last().is_some_and(|s| s.terminal)
    }

    /// Appends a step. Nothing may follow a terminal step.
    pub fn push(&mut self, step: Step) -> Result<(), RsdError> {
        if self.is_finished() {
            return Err(RsdError::InvalidInput(
                "cannot append a step after a terminal step".into(),
            ));
        }
        self.steps.push(step);
        Ok(())
    }

    /// Concatenated step texts, without the prompt.
    pub fn response_text(&self) -> String {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }
}

/// `prompt.text` followed by every step text in order.
pub fn render_context(ctx: &Context) -> String {
    let mut out = String::with_capacity(
        ctx.prompt.0.len() + ctx.steps.iter().map(|s| s.text.len()).sum::<usize>(),
    );
    out.push_str(&ctx.prompt.0);
    for step in &ctx.steps {
        out.push_str(&step.text);
    }
    out
}

/// Which model produced a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Draft,
    Target,
}

/// Ledger entry for one kept step.
///
/// Token counts cover every generation issued while producing this step,
/// including a rejected draft candidate and, for process Best-of-N, all
/// losing candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: Step,
    /// PRM score used for the acceptance decision (the draft candidate's
    /// reward in RSD, the chosen candidate's reward in process Best-of-N).
    pub reward: Option<f64>,
    /// ω(r) at the time of the decision.
    pub weight: Option<f64>,
    pub origin: Origin,
    /// The rejected draft step when `origin` is `Target`.
    pub draft_candidate: Option<Step>,
    /// Analytics-only score of a target replacement step.
    pub target_reward: Option<f64>,
    pub draft_tokens: u64,
    pub target_tokens: u64,
    pub draft_prompt_tokens: u64,
    pub target_prompt_tokens: u64,
    pub prm_calls: u64,
}

impl StepRecord {
    /// A record for a step generated without any PRM involvement.
    pub fn unscored(step: Step, origin: Origin, tokens: u64, prompt_tokens: u64) -> Self {
        let (draft_tokens, target_tokens) = match origin {
            Origin::Draft => (tokens, 0),
            Origin::Target => (0, tokens),
        };
        let (draft_prompt_tokens, target_prompt_tokens) = match origin {
            Origin::Draft => (prompt_tokens, 0),
            Origin::Target => (0, prompt_tokens),
        };
        Self {
            step,
            reward: None,
            weight: None,
            origin,
            draft_candidate: None,
            target_reward: None,
            draft_tokens,
            target_tokens,
            draft_prompt_tokens,
            target_prompt_tokens,
            prm_calls: 0,
        }
    }

    /// Reward of the step that was actually kept, when known.
    pub fn kept_reward(&self) -> Option<f64> {
        match self.origin {
            Origin::Draft => self.reward,
            Origin::Target => self.target_reward,
        }
    }

    pub fn check(&self) -> Result<(), RsdError> {
        if let Some(w) = self.weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(RsdError::InvalidInput(format!("weight {w} outside [0,1]")));
            }
        }
        if self.origin == Origin::Draft && self.draft_candidate.is_some() {
            return Err(RsdError::InvalidInput(
                "draft-origin record carries a rejected candidate".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxLength,
}

/// Identities of the models a trace was produced with, for FLOPs accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceModels {
    pub draft: Option<String>,
    pub target: Option<String>,
    pub prm: Option<String>,
}

/// Full per-step ledger of one decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub records: Vec<StepRecord>,
    pub stopped_by: StopReason,
    pub final_text: String,
    pub models: TraceModels,
}

impl DecodeTrace {
    pub fn draft_tokens(&self) -> u64 {
        self.records.iter().map(|r| r.draft_tokens).sum()
    }

    pub fn target_tokens(&self) -> u64 {
        self.records.iter().map(|r| r.target_tokens).sum()
    }

    pub fn draft_prompt_tokens(&self) -> u64 {
        self.records.iter().map(|r| r.draft_prompt_tokens).sum()
    }

    pub fn target_prompt_tokens(&self) -> u64 {
        self.records.iter().map(|r| r.target_prompt_tokens).sum()
    }

    pub fn prm_calls(&self) -> u64 {
        self.records.iter().map(|r| r.prm_calls).sum()
    }

    /// Number of records whose step came from the target model.
    pub fn target_steps(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.origin == Origin::Target)
            .count()
    }

    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.records.iter().map(|r| &r.step)
    }

    /// Validates the structural invariants of a finished trace.
    pub fn check(&self) -> Result<(), RsdError> {
        if self.records.is_empty() {
            return Err(RsdError::InvalidInput("trace has no records".into()));
        }
        let last = self.records.len() - 1;
        for (i, r) in self.records.iter().enumerate() {
            r.check()?;
            if r.step.terminal && i != last {
                return Err(RsdError::InvalidInput(format!(
                    "terminal step at position {i} is not last"
                )));
            }
        }
        let text: String = self.steps().map(|s| s.text.as_str()).collect();
        if text != self.final_text {
            return Err(RsdError::InvalidInput(
                "final_text differs from the concatenated steps".into(),
            ));
        }
        Ok(())
    }
}

/// A model identity with its parameter count N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub id: String,
    pub param_count: f64,
}

impl ModelProfile {
    pub fn new(id: impl Into<String>, param_count: f64) -> Result<Self, RsdError> {
        if !(param_count.is_finite() && param_count > 0.0) {
            return Err(RsdError::InvalidInput(format!(
                "parameter count must be positive, got {param_count}"
            )));
        }
        Ok(Self {
            id: id.into(),
            param_count,
        })
    }
}
