//! HTTP client for an external completion service.
//!
//! Scoring request body (JSON):
//! `{"model": .., "prompt": .., "max_tokens": 1, "logprobs": N, "echo": false}`.
//! The response must carry `choices[0].logprobs.top_logprobs[0]`, a map
//! from token string to log-probability at the next position. A prefix
//! warm-up is the same request with the shared prefix and `max_tokens: 0`.
//!
//! Generation requests add `n` and either `num_beam_groups` plus
//! `diversity_penalty` (grouped decoding) or `temperature` plus `seed` per
//! group (sampled fallback); completions are read from `choices[i].text`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Capabilities, LogitProvider, ProviderError, ScoreRequest, YesNoLogits};
use crate::rerank::{PromptBuilder, PromptNode, PromptParts};
use crate::retrieval::{Diversity, QueryGenerator, QueryRequest, QuerySet, RetrievalError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub retries: u32,
    /// Delay before the first retry; doubles per attempt up to
    /// `backoff_max_ms`.
    pub backoff_ms: u64,
    pub backoff_max_ms: u64,
    /// Environment variable holding the bearer token, if any.
    pub auth_env: Option<String>,
    /// Top-k log-probabilities requested per position (at least 2).
    pub logprobs: u32,
    /// Token spellings accepted for each answer, tried in order.
    pub yes_tokens: Vec<String>,
    pub no_tokens: Vec<String>,
    pub supports_grouped_decoding: bool,
    pub supports_prefix_reuse: bool,
    /// The backend tokenizer splits `Yes`/`No` and returns first-subtoken
    /// logits.
    pub first_subtoken: bool,
    pub gen_max_tokens: u32,
    pub diversity_penalty: f64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://127.0.0.1:8000/v1/completions".into(),
            model: "linkgpt".into(),
            timeout_ms: 30_000,
            max_in_flight: 8,
            retries: 3,
            backoff_ms: 200,
            backoff_max_ms: 5_000,
            auth_env: None,
            logprobs: 5,
            yes_tokens: vec!["Yes".into(), " Yes".into()],
            no_tokens: vec!["No".into(), " No".into()],
            supports_grouped_decoding: false,
            supports_prefix_reuse: false,
            first_subtoken: false,
            gen_max_tokens: 48,
            diversity_penalty: 0.5,
        }
    }
}

impl RemoteConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.timeout_ms == 0 {
            return Err("remote.timeout_ms must be positive".into());
        }
        if self.max_in_flight == 0 {
            return Err("remote.max_in_flight must be positive".into());
        }
        if self.logprobs < 2 {
            return Err("remote.logprobs must be at least 2".into());
        }
        if self.yes_tokens.is_empty() || self.no_tokens.is_empty() {
            return Err("remote.yes_tokens and remote.no_tokens must be non-empty".into());
        }
        Ok(())
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("in-flight lock poisoned");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("in-flight lock poisoned");
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("in-flight lock poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteClient {
    config: RemoteConfig,
    agent: ureq::Agent,
    token: Option<String>,
    in_flight: InFlight,
    requests: AtomicUsize,
    retries: AtomicUsize,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Result<Self, ProviderError> {
        config.validate().map_err(ProviderError::Config)?;
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ProviderError::Config(format!("auth environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteClient {
            in_flight: InFlight {
                limit: config.max_in_flight,
                active: Mutex::new(0),
                freed: Condvar::new(),
            },
            config,
            agent,
            token,
            requests: AtomicUsize::new(0),
            retries: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    /// HTTP requests sent, including retries.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    pub fn retry_count(&self) -> usize {
        self.retries.load(Ordering::Relaxed)
    }

    fn send_once(&self, body: &Value) -> Result<Value, ProviderError> {
        let _permit = self.in_flight.acquire();
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(ProviderError::Status { status, body });
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| ProviderError::Protocol(format!("response is not JSON: {e}")))
    }

    /// POST with retries on retriable failures and exponential backoff.
    pub fn post(&self, body: &Value) -> Result<Value, ProviderError> {
        let mut delay = self.config.backoff_ms;
        let mut attempt = 0u32;
        loop {
            match self.send_once(body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retriable() && attempt < self.config.retries => {
                    log::debug!("retrying after {e}");
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    thread::sleep(Duration::from_millis(delay));
                    delay = (delay * 2).min(self.config.backoff_max_ms);
                    attempt += 1;
                }
                Err(e) if e.is_retriable() => {
                    return Err(ProviderError::RetriesExhausted {
                        attempts: attempt + 1,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn lookup(map: &serde_json::Map<String, Value>, spellings: &[String]) -> Option<f64> {
        spellings
            .iter()
            .find_map(|t| map.get(t).and_then(Value::as_f64))
    }

    /// Yes/No log-probabilities for the position after the prompt.
    pub fn remote_logits(&self, prompt: &PromptParts) -> Result<YesNoLogits, ProviderError> {
        let body = json!({
            "model": self.config.model,
            "prompt": prompt.full_text(),
            "max_tokens": 1,
            "logprobs": self.config.logprobs,
            "echo": false,
        });
        let resp = self.post(&body)?;
        let top = resp
            .pointer("/choices/0/logprobs/top_logprobs/0")
            .and_then(Value::as_object)
            .ok_or_else(|| {
                ProviderError::Protocol("missing choices[0].logprobs.top_logprobs[0]".into())
            })?;
        let yes = Self::lookup(top, &self.config.yes_tokens);
        let no = Self::lookup(top, &self.config.no_tokens);
        match (yes, no) {
            (Some(yes), Some(no)) => YesNoLogits { yes, no }.checked(),
            _ => Err(ProviderError::Capability(format!(
                "answer tokens outside the returned top-{} (yes: {}, no: {})",
                self.config.logprobs,
                yes.is_some(),
                no.is_some()
            ))),
        }
    }

    fn completions(resp: &Value) -> Result<Vec<String>, ProviderError> {
        let choices = resp
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Protocol("missing choices".into()))?;
        choices
            .iter()
            .map(|c| {
                c.get("text")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .ok_or_else(|| ProviderError::Protocol("choice without text".into()))
            })
            .collect()
    }

    /// `n_groups * group_size` generated neighbor texts for a
    /// neighbor-prediction prompt.
    pub fn remote_generate(
        &self,
        prompt: &PromptParts,
        source_text: &str,
        n_groups: usize,
        group_size: usize,
        seed: u64,
    ) -> Result<QuerySet, ProviderError> {
        let text = prompt.full_text();
        let mut groups: Vec<Vec<String>> = Vec::with_capacity(n_groups);
        let diversity = if self.config.supports_grouped_decoding {
            let body = json!({
                "model": self.config.model,
                "prompt": text,
                "max_tokens": self.config.gen_max_tokens,
                "n": n_groups * group_size,
                "num_beam_groups": n_groups,
                "diversity_penalty": self.config.diversity_penalty,
                "echo": false,
            });
            let texts = Self::completions(&self.post(&body)?)?;
            if texts.len() != n_groups * group_size {
                return Err(ProviderError::Protocol(format!(
                    "asked for {} completions, got {}",
                    n_groups * group_size,
                    texts.len()
                )));
            }
            groups.extend(texts.chunks(group_size).map(<[String]>::to_vec));
            Diversity::Grouped
        } else {
            for g in 0..n_groups {
                let body = json!({
                    "model": self.config.model,
                    "prompt": text,
                    "max_tokens": self.config.gen_max_tokens,
                    "n": group_size,
                    "temperature": 0.7 + 0.1 * g as f64,
                    "seed": seed.wrapping_add(g as u64),
                    "echo": false,
                });
                let texts = Self::completions(&self.post(&body)?)?;
                if texts.len() != group_size {
                    return Err(ProviderError::Protocol(format!(
                        "asked for {group_size} completions, got {}",
                        texts.len()
                    )));
                }
                groups.push(texts);
            }
            Diversity::Sampled
        };
        let mut substitutions = 0;
        for group in &mut groups {
            for q in group.iter_mut() {
                let cleaned = clean_generation(q);
                *q = if cleaned.is_empty() {
                    substitutions += 1;
                    source_text.to_string()
                } else {
                    cleaned
                };
            }
        }
        Ok(QuerySet::from_groups(groups, diversity, substitutions))
    }
}

/// First `Text: ...` item of a neighbor-prediction completion.
fn clean_generation(raw: &str) -> String {
    let first = raw
        .split("Text:")
        .map(str::trim)
        .find(|s| !s.is_empty())
        .unwrap_or("");
    first.trim_end_matches('.').trim().to_string()
}

impl LogitProvider for RemoteClient {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_embedding_injection: false,
            supports_grouped_decoding: self.config.supports_grouped_decoding,
            supports_prefix_reuse: self.config.supports_prefix_reuse,
            deterministic: false,
            first_subtoken: self.config.first_subtoken,
        }
    }

    fn prepare_prefix(&self, shared_prefix: &str) -> Result<(), ProviderError> {
        let body = json!({
            "model": self.config.model,
            "prompt": shared_prefix,
            "max_tokens": 0,
            "logprobs": self.config.logprobs,
            "echo": false,
        });
        self.post(&body).map(|_| ())
    }

    fn logits(&self, request: &ScoreRequest<'_>) -> Result<YesNoLogits, ProviderError> {
        self.remote_logits(request.prompt)
    }
}

/// Query generator backed by a remote model prompted for neighbor texts.
pub struct RemoteGenerator {
    client: Arc<RemoteClient>,
}

impl RemoteGenerator {
    pub fn new(client: Arc<RemoteClient>) -> Self {
        RemoteGenerator { client }
    }
}

impl QueryGenerator for RemoteGenerator {
    fn generate(&self, req: &QueryRequest<'_>) -> Result<QuerySet, RetrievalError> {
        let text = req.graph.text(req.source);
        let prompt = PromptBuilder::neighbor_prediction(PromptNode {
            id: req.source,
            text,
        })
        .prefix_only();
        self.client
            .remote_generate(&prompt, text, req.n_groups, req.group_size, req.seed)
            .map_err(|e| RetrievalError::Generator(e.to_string()))
    }
}
