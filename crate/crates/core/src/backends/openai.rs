//! Client for OpenAI-compatible HTTP servers.
//!
//! Generation goes through `/chat/completions` or `/completions` depending on
//! the configured route. Continuation scoring always uses `/completions` with
//! `echo` and `logprobs`, summing the log-probabilities of the tokens that
//! fall inside the continuation. The entailment judge is a generation call
//! with a fixed template whose reply is compared against a positive label.

use std::ops::Range;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    BackendError, ContinuationScore, EntailmentBackend, GenerationParams, PolicyBackend,
    ScoringBackend,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteKind {
    Chat,
    Completions,
    Judge,
}

fn default_concurrency() -> usize {
    4
}

fn default_timeout() -> f64 {
    120.0
}

fn default_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

fn default_judge_template() -> String {
    "premise: {premise} hypothesis: {hypothesis}".to_string()
}

fn default_judge_positive() -> String {
    "1".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenAiConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub route: RouteKind,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_judge_template")]
    pub judge_template: String,
    #[serde(default = "default_judge_positive")]
    pub judge_positive: String,
}

impl OpenAiConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, route: RouteKind) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            route,
            max_concurrency: default_concurrency(),
            timeout_s: default_timeout(),
            max_attempts: default_retries(),
            backoff_ms: default_backoff_ms(),
            judge_template: default_judge_template(),
            judge_positive: default_judge_positive(),
        }
    }
}

struct Gate {
    in_flight: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

impl Gate {
    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.in_flight.lock().expect("gate poisoned");
        while *n >= self.cap {
            n = self.freed.wait(n).expect("gate poisoned");
        }
        *n += 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("gate poisoned");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    gate: Gate,
}

impl std::fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiBackend")
            .field("base_url", &self.config.base_url)
            .field("model", &self.config.model)
            .field("route", &self.config.route)
            .finish()
    }
}

enum Failure {
    Retry(String),
    Fatal(BackendError),
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self, BackendError> {
        if config.max_concurrency == 0 || config.max_attempts == 0 {
            return Err(BackendError::Config(
                "max_concurrency and max_attempts must be at least 1".into(),
            ));
        }
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        let gate = Gate {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            cap: config.max_concurrency,
        };
        Ok(Self {
            config,
            api_key,
            agent,
            gate,
        })
    }

    pub fn config(&self) -> &OpenAiConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn post_once(&self, path: &str, body: &Value) -> Result<Value, Failure> {
        let mut req = self
            .agent
            .post(self.url(path))
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Failure::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        if (200..300).contains(&status) {
            return resp
                .body_mut()
                .read_json::<Value>()
                .map_err(|e| Failure::Fatal(BackendError::Response(e.to_string())));
        }
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        if status == 429 || status >= 500 {
            Err(Failure::Retry(format!("HTTP {status}: {text}")))
        } else {
            Err(Failure::Fatal(BackendError::Config(format!(
                "HTTP {status}: {text}"
            ))))
        }
    }

    /// POSTs with capped exponential backoff on transport errors, 429 and 5xx.
    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let _permit = self.gate.acquire();
        let mut last = String::new();
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                let delay = self
                    .config
                    .backoff_ms
                    .saturating_mul(1 << (attempt - 1))
                    .min(5_000);
                thread::sleep(Duration::from_millis(delay));
            }
            match self.post_once(path, body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(msg)) => {
                    log::warn!("{} attempt {} failed: {msg}", self.url(path), attempt + 1);
                    last = msg;
                }
            }
        }
        Err(BackendError::Unavailable {
            attempts: self.config.max_attempts,
            message: last,
        })
    }

    fn complete(
        &self,
        prompt: &str,
        params: &GenerationParams,
        chat: bool,
    ) -> Result<String, BackendError> {
        let mut body = json!({
            "model": self.config.model,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if !params.stop.is_empty() {
            body["stop"] = json!(params.stop);
        }
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        if chat {
            body["messages"] = json!([{"role": "user", "content": prompt}]);
            let v = self.post("chat/completions", &body)?;
            v.pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| BackendError::Response("missing choices[0].message.content".into()))
        } else {
            body["prompt"] = json!(prompt);
            let v = self.post("completions", &body)?;
            v.pointer("/choices/0/text")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| BackendError::Response("missing choices[0].text".into()))
        }
    }
}

impl PolicyBackend for OpenAiBackend {
    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<String, BackendError> {
        self.complete(prompt, params, self.config.route == RouteKind::Chat)
    }
}

/// Sums echoed token log-probabilities whose character offset lies in `span`.
fn sum_echo_logprobs(v: &Value, span: Range<usize>) -> Result<ContinuationScore, BackendError> {
    let lp = v
        .pointer("/choices/0/logprobs")
        .filter(|l| !l.is_null())
        .ok_or_else(|| BackendError::Capability("response carries no logprobs".into()))?;
    let logprobs = lp
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Capability("logprobs.token_logprobs missing".into()))?;
    let offsets = lp
        .get("text_offset")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Capability("logprobs.text_offset missing".into()))?;
    let mut total = 0.0;
    let mut count = 0;
    for (offset, logprob) in offsets.iter().zip(logprobs) {
        let offset = offset.as_u64().unwrap_or(0) as usize;
        if !span.contains(&offset) {
            continue;
        }
        match logprob.as_f64() {
            Some(x) => total += x,
            // the very first token of an echo has no conditional probability
            None => log::debug!("token at offset {offset} has no logprob"),
        }
        count += 1;
    }
    Ok(ContinuationScore {
        logprob: total,
        token_count: count,
    })
}

impl ScoringBackend for OpenAiBackend {
    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<ContinuationScore, BackendError> {
        let body = json!({
            "model": self.config.model,
            "prompt": format!("{context}{continuation}"),
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 1,
        });
        let v = self.post("completions", &body)?;
        let start = context.chars().count();
        // echo also returns the one sampled token past the continuation
        sum_echo_logprobs(&v, start..start + continuation.chars().count())
    }
}

impl EntailmentBackend for OpenAiBackend {
    fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool, BackendError> {
        let prompt = self
            .config
            .judge_template
            .replace("{premise}", premise)
            .replace("{hypothesis}", hypothesis);
        let params = GenerationParams {
            temperature: 0.0,
            max_tokens: 4,
            stop: Vec::new(),
            seed: Some(0),
        };
        let reply = self.complete(&prompt, &params, self.config.route == RouteKind::Chat)?;
        Ok(reply
            .trim()
            .starts_with(self.config.judge_positive.as_str()))
    }
}
