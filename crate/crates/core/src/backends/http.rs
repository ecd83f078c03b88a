//! HTTP clients for served models.
//!
//! Step generation talks to an OpenAI-compatible `/v1/completions` endpoint
//! and relies on the `stop` array for step segmentation. Rewards come from a
//! minimal PRM endpoint: `POST /score` with `{"context", "step"}` returning
//! `{"reward"}`.
//!
//! Requests are retried on 5xx responses and transport failures with
//! exponential backoff; 4xx responses fail immediately.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    GenerationStop, RewardModel, RewardScale, RewardScore, Sampling, StepCaps, StepGeneration,
    StepGenerator,
};
use crate::error::BackendError;
use crate::rng::DecodeRng;
use crate::types::{render_context, Context, Step, DEFAULT_DELIMITER};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_backoff_ms: 250,
            timeout_ms: 120_000,
        }
    }
}

/// Counting semaphore bounding in-flight requests per backend.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.limit {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug)]
struct JsonClient {
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    in_flight: InFlight,
}

/// `e` followed by its sources, so "connection refused" survives.
fn error_chain(e: &dyn std::error::Error) -> String {
    let mut out = e.to_string();
    let mut cur = e.source();
    while let Some(s) = cur {
        out.push_str(": ");
        out.push_str(&s.to_string());
        cur = s.source();
    }
    out
}

impl JsonClient {
    fn new(retry: RetryPolicy, max_in_flight: usize) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(retry.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport {
                endpoint: "<client>".into(),
                message: error_chain(&e),
            })?;
        Ok(Self {
            client,
            retry,
            in_flight: InFlight::new(max_in_flight),
        })
    }

    fn post(&self, url: &str, body: &Value) -> Result<Value, BackendError> {
        let _slot = self.in_flight.acquire();
        let mut attempt = 0u32;
        loop {
            let outcome = match self.client.post(url).json(body).send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| BackendError::Transport {
                        endpoint: url.to_string(),
                        message: error_chain(&e),
                    });
                    match text {
                        Ok(text) if status.is_success() => {
                            return serde_json::from_str(&text).map_err(|e| {
                                BackendError::Protocol {
                                    endpoint: url.to_string(),
                                    message: format!("invalid JSON: {e}"),
                                }
                            })
                        }
                        Ok(text) => {
                            let err = BackendError::Status {
                                endpoint: url.to_string(),
                                status: status.as_u16(),
                                body: text,
                            };
                            if status.is_client_error() {
                                return Err(err);
                            }
                            err
                        }
                        Err(e) => e,
                    }
                }
                Err(e) => BackendError::Transport {
                    endpoint: url.to_string(),
                    message: error_chain(&e),
                },
            };
            if attempt >= self.retry.max_retries {
                return Err(outcome);
            }
            std::thread::sleep(Duration::from_millis(
                self.retry.base_backoff_ms.saturating_mul(1u64 << attempt.min(16)),
            ));
            attempt += 1;
        }
    }
}

fn join_url(base: &str, path: &str) -> String {
    format!("{}{}", base.trim_end_matches('/'), path)
}

/// Settings for an OpenAI-compatible completion server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionEndpoint {
    /// Server root, e.g. `http://localhost:8000`.
    pub base_url: String,
    /// Model name sent in the request body.
    pub model: String,
    /// Identity used for FLOPs accounting; defaults to `model`.
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub eos: Option<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
}

fn default_delimiter() -> String {
    DEFAULT_DELIMITER.to_string()
}

#[derive(Debug)]
pub struct HttpCompletionModel {
    endpoint: CompletionEndpoint,
    id: String,
    url: String,
    client: JsonClient,
}

impl HttpCompletionModel {
    pub fn new(
        endpoint: CompletionEndpoint,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Result<Self, BackendError> {
        let id = endpoint.id.clone().unwrap_or_else(|| endpoint.model.clone());
        let url = join_url(&endpoint.base_url, "/v1/completions");
        Ok(Self {
            endpoint,
            id,
            url,
            client: JsonClient::new(retry, max_in_flight)?,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn protocol(&self, message: impl Into<String>) -> BackendError {
        BackendError::Protocol {
            endpoint: self.url.clone(),
            message: message.into(),
        }
    }

    fn classify(&self, text: &str, finish: Option<&str>, stop_reason: Option<&Value>) -> GenerationStop {
        if let Some(eos) = &self.endpoint.eos {
            if !eos.is_empty() && text.contains(eos.as_str()) {
                return GenerationStop::Eos;
            }
        }
        match finish {
            Some("length") => GenerationStop::LengthCap,
            _ if text.ends_with(&self.endpoint.delimiter) => GenerationStop::Delimiter,
            _ => match stop_reason {
                Some(Value::String(s)) if *s == self.endpoint.delimiter => {
                    GenerationStop::Delimiter
                }
                _ => GenerationStop::Eos,
            },
        }
    }
}

/// Whitespace-delimited word count, used when the server omits `usage`.
pub fn approximate_tokens(text: &str) -> u64 {
    text.split_whitespace().count().max(1) as u64
}

impl StepGenerator for HttpCompletionModel {
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
        let seed: u32 = rng.gen();
        let body = json!({
            "model": self.endpoint.model,
            "prompt": render_context(ctx),
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "max_tokens": caps.max_step_tokens,
            "stop": [self.endpoint.delimiter],
            "include_stop_str_in_output": true,
            "seed": seed,
        });
        let resp = self.client.post(&self.url, &body)?;
        let choice = resp
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| self.protocol("missing choices[0]"))?;
        let mut text = choice
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| self.protocol("missing choices[0].text"))?
            .to_string();
        if text.is_empty() {
            return Err(BackendError::EmptyGeneration);
        }
        let finish = choice.get("finish_reason").and_then(Value::as_str);
        let stop_reason = self.classify(&text, finish, choice.get("stop_reason"));
        if stop_reason == GenerationStop::Delimiter && !text.ends_with(&self.endpoint.delimiter) {
            text.push_str(&self.endpoint.delimiter);
        }
        let usage = resp.get("usage");
        let token_count = usage
            .and_then(|u| u.get("completion_tokens"))
            .and_then(Value::as_u64)
            .filter(|n| *n > 0)
            .unwrap_or_else(|| approximate_tokens(&text));
        let prompt_tokens = usage
            .and_then(|u| u.get("prompt_tokens"))
            .and_then(Value::as_u64)
            .unwrap_or(0);
        let per_token_logprobs = choice
            .get("logprobs")
            .and_then(|l| l.get("token_logprobs"))
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_f64).collect::<Vec<_>>())
            .filter(|v| v.len() as u64 == token_count);
        Ok(StepGeneration {
            step: Step {
                text,
                terminal: stop_reason == GenerationStop::Eos,
            },
            token_count,
            stop_reason,
            per_token_logprobs,
            prompt_tokens,
        })
    }

    /// Scores `step` by echoing `context + step` with prompt logprobs.
    fn step_logprob(&self, ctx: &Context, step: &Step) -> Result<Option<f64>, BackendError> {
        let prefix = render_context(ctx);
        let full = format!("{prefix}{}", step.text);
        let body = json!({
            "model": self.endpoint.model,
            "prompt": full,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 1,
        });
        let resp = self.client.post(&self.url, &body)?;
        let lp = resp
            .get("choices")
            .and_then(|c| c.get(0))
            .and_then(|c| c.get("logprobs"))
            .ok_or_else(|| self.protocol("echo response carries no logprobs"))?;
        let offsets = lp
            .get("text_offset")
            .and_then(Value::as_array)
            .ok_or_else(|| self.protocol("missing logprobs.text_offset"))?;
        let values = lp
            .get("token_logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| self.protocol("missing logprobs.token_logprobs"))?;
        let (lo, hi) = (prefix.len() as u64, full.len() as u64);
        let mut total = 0.0;
        for (off, v) in offsets.iter().zip(values) {
            let off = off.as_u64().ok_or_else(|| self.protocol("bad text_offset"))?;
            if off >= lo && off < hi {
                total += v.as_f64().ok_or_else(|| self.protocol("null logprob inside step"))?;
            }
        }
        Ok(Some(total))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEndpoint {
    /// Full scoring URL, e.g. `http://localhost:8001/score`.
    pub url: String,
    pub id: String,
    #[serde(default = "default_scale")]
    pub scale: RewardScale,
}

fn default_scale() -> RewardScale {
    RewardScale::UnitInterval
}

#[derive(Debug)]
pub struct HttpRewardModel {
    endpoint: RewardEndpoint,
    client: JsonClient,
}

impl HttpRewardModel {
    pub fn new(
        endpoint: RewardEndpoint,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            endpoint,
            client: JsonClient::new(retry, max_in_flight)?,
        })
    }

    pub fn url(&self) -> &str {
        &self.endpoint.url
    }
}

impl RewardModel for HttpRewardModel {
    fn id(&self) -> &str {
        &self.endpoint.id
    }

    fn score_step(&self, ctx: &Context, step: &Step) -> Result<RewardScore, BackendError> {
        let body = json!({ "context": render_context(ctx), "step": step.text });
        let resp = self.client.post(&self.endpoint.url, &body)?;
        let value = resp
            .get("reward")
            .and_then(Value::as_f64)
            .ok_or_else(|| BackendError::Protocol {
                endpoint: self.endpoint.url.clone(),
                message: "missing numeric `reward`".into(),
            })?;
        RewardScore::new(value, self.endpoint.scale)
    }
}
