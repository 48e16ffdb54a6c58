//! Generation backends: an HTTP client for completion endpoints that report
//! per-candidate scores, and a seeded offline mock.
//!
//! Wire format sent to the endpoint:
//!
//! ```text
//! {"model": "...", "prompt": "...", "n": 4, "return_scores": true}
//! ```
//!
//! Accepted response shapes, checked per choice in this order:
//! `choices[i].scores` (list), `choices[i].score` (one sequence score per
//! choice; every output then carries the list of all choices' scores),
//! `choices[i].logprobs.token_logprobs` and `choices[i].logprobs.content[].logprob`.

use std::collections::HashMap;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::parsing::{parse_acr_output, parse_asu_output, render_acr_output, render_fragments};
use crate::prompting::PromptRecord;
use crate::reward::{GenerationMeta, GenerationResult};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("environment variable {0} holding the API key is not set")]
    AuthMissing(String),
    #[error("request failed after {attempts} attempt(s): {message}")]
    Network { attempts: usize, message: String },
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("backend response has no scores (expected field `{field}`)")]
    MissingScores { field: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

fn default_n() -> usize {
    4
}
fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> usize {
    3
}
fn default_backoff() -> u64 {
    250
}
fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint: String,
    /// Name of the environment variable that holds the API key.
    #[serde(default)]
    pub auth: Option<String>,
    pub model: String,
    #[serde(default = "default_n")]
    pub n_candidates: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    /// First retry delay; doubled on each further attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        BackendConfig {
            endpoint: endpoint.into(),
            auth: None,
            model: model.into(),
            n_candidates: default_n(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidConfig(m.into()));
        if self.n_candidates < 2 {
            return bad("n_candidates must be at least 2");
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return bad("timeout_secs must be positive");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be positive");
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return bad("endpoint must be an http(s) URL");
        }
        Ok(())
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, prompt: &str) -> Result<GenerationResult, GatewayError>;
}

/// Counting gate that bounds concurrent requests.
struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.count.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.count.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpBackend {
    config: BackendConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    gate: InFlight,
}

impl HttpBackend {
    /// Resolves the API key from the environment and builds the client.
    pub fn new(config: BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let api_key = match &config.auth {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::AuthMissing(var.clone()))?),
            None => None,
        };
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs_f64(config.timeout_secs)).build();
        let gate = InFlight { count: Mutex::new(0), freed: Condvar::new(), limit: config.max_in_flight };
        Ok(HttpBackend { config, api_key, agent, gate })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn request_body(&self, prompt: &str) -> String {
        serde_json::json!({
            "model": self.config.model,
            "prompt": prompt,
            "n": self.config.n_candidates,
            "return_scores": true,
        })
        .to_string()
    }

    fn post(&self, body: &str) -> Result<String, GatewayError> {
        let _permit = self.gate.acquire();
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                log::warn!("retrying request (attempt {}/{attempts}) after {delay} ms: {last}", attempt + 1);
                std::thread::sleep(Duration::from_millis(delay));
            }
            let mut req = self.agent.post(&self.config.endpoint).set("Content-Type", "application/json");
            if let Some(key) = &self.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            match req.send_string(body) {
                Ok(resp) => {
                    return resp.into_string().map_err(|e| GatewayError::Malformed(format!("unreadable body: {e}")));
                }
                Err(ureq::Error::Status(status, resp)) => {
                    let text = resp.into_string().unwrap_or_default();
                    if status == 429 || status >= 500 {
                        last = format!("status {status}");
                        continue;
                    }
                    return Err(GatewayError::Status { status, body: text });
                }
                Err(ureq::Error::Transport(t)) => {
                    last = t.to_string();
                }
            }
        }
        Err(GatewayError::Network { attempts, message: last })
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn generate(&self, prompt: &str) -> Result<GenerationResult, GatewayError> {
        let body = self.request_body(prompt);
        let started = Instant::now();
        let text = self.post(&body)?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| GatewayError::Malformed(format!("invalid JSON: {e}")))?;
        let (outputs, scores) = parse_response(&value)?;
        let meta = GenerationMeta {
            backend: format!("http:{}", self.config.model),
            latency_ms: started.elapsed().as_secs_f64() * 1000.0,
        };
        GenerationResult::new(outputs, scores, meta).map_err(|e| GatewayError::Malformed(e.to_string()))
    }
}

fn choice_text(choice: &Value, i: usize) -> Result<String, GatewayError> {
    if let Some(t) = choice.get("text").and_then(Value::as_str) {
        return Ok(t.to_string());
    }
    if let Some(t) = choice.pointer("/message/content").and_then(Value::as_str) {
        return Ok(t.to_string());
    }
    Err(GatewayError::Malformed(format!("choices[{i}] has no text")))
}

fn number_list(values: &[Value], field: &str) -> Result<Vec<f64>, GatewayError> {
    values
        .iter()
        .map(|v| v.as_f64().ok_or_else(|| GatewayError::Malformed(format!("non-numeric entry in {field}"))))
        .collect()
}

/// Maps a backend response onto candidate texts and score lists.
pub fn parse_response(value: &Value) -> Result<(Vec<String>, Vec<Vec<f64>>), GatewayError> {
    let choices = value
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::Malformed("missing `choices` array".into()))?;
    if choices.is_empty() {
        return Err(GatewayError::Malformed("empty `choices` array".into()));
    }
    let outputs = choices.iter().enumerate().map(|(i, c)| choice_text(c, i)).collect::<Result<Vec<_>, _>>()?;

    if choices.iter().all(|c| c.get("score").is_some_and(Value::is_number)) {
        let shared: Vec<f64> = choices.iter().filter_map(|c| c["score"].as_f64()).collect();
        return Ok((outputs, vec![shared; choices.len()]));
    }
    let mut scores = Vec::with_capacity(choices.len());
    for (i, c) in choices.iter().enumerate() {
        let list = if let Some(s) = c.get("scores").and_then(Value::as_array) {
            number_list(s, &format!("choices[{i}].scores"))?
        } else if let Some(s) = c.pointer("/logprobs/token_logprobs").and_then(Value::as_array) {
            // the first token of a completion may carry a null log-probability
            s.iter().filter_map(Value::as_f64).collect()
        } else if let Some(s) = c.pointer("/logprobs/content").and_then(Value::as_array) {
            s.iter()
                .map(|t| {
                    t.get("logprob").and_then(Value::as_f64).ok_or_else(|| GatewayError::MissingScores {
                        field: format!("choices[{i}].logprobs.content[].logprob"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?
        } else {
            return Err(GatewayError::MissingScores { field: format!("choices[{i}].scores") });
        };
        scores.push(list);
    }
    Ok((outputs, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockBehavior {
    Faithful,
    Noisy,
    Repetitive,
    Gibberish,
}

impl std::str::FromStr for MockBehavior {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "faithful" => Ok(MockBehavior::Faithful),
            "noisy" => Ok(MockBehavior::Noisy),
            "repetitive" => Ok(MockBehavior::Repetitive),
            "gibberish" => Ok(MockBehavior::Gibberish),
            other => Err(format!("unknown mock behavior `{other}`")),
        }
    }
}

fn mock_rng(prompt: &str, behavior: MockBehavior, seed: u64) -> ChaCha8Rng {
    let digest = Sha256::digest(prompt.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let mixed =
        u64::from_le_bytes(bytes) ^ seed.rotate_left(17) ^ (behavior as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Surface variant `k` of `text` that parses to the same thing: `k` extra
/// spaces after each sentence or list separator. Variant 0 is `text` itself.
fn spaced_variant(text: &str, k: usize) -> String {
    if k == 0 {
        return text.to_string();
    }
    let pad = " ".repeat(k);
    for sep in ["\". ", ", ", "。", "["] {
        if text.contains(sep) {
            return text.replace(sep, &format!("{sep}{pad}"));
        }
    }
    format!("{pad}\n{text}")
}

const GIBBERISH: &[&str] =
    &["the", "movie", "about", "really", "maybe", "weekend", "cinema", "went", "with", "and", "so", "quite"];

fn gibberish_text(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(4..12);
    (0..len).map(|_| *GIBBERISH.choose(rng).expect("non-empty")).collect::<Vec<_>>().join(" ")
}

fn perturb(target: &str, rng: &mut ChaCha8Rng) -> Option<String> {
    let parsed = parse_asu_output(target);
    if !parsed.quadruples.is_empty() {
        let mut q = parsed.quadruples;
        let i = rng.gen_range(0..q.len());
        if rng.gen_bool(0.5) {
            q[i].polarity = q[i].polarity.flipped();
        } else {
            q[i].implicit = match q[i].implicit {
                Some(_) => None,
                None => Some("it".into()),
            };
        }
        return Some(render_fragments(&q));
    }
    let n = target.chars().filter(|c| matches!(c, '0' | '1' | '2')).count();
    let mut labels = parse_acr_output(target, n).ok()?.labels;
    let i = rng.gen_range(0..labels.len());
    labels[i] = (labels[i] + rng.gen_range(1..3)) % 3;
    Some(render_acr_output(&labels))
}

/// Score list for one mock output. Faithful outputs get a peaked list,
/// degraded ones a flatter one.
fn mock_scores(rng: &mut ChaCha8Rng, n: usize, confident: bool) -> Vec<f64> {
    let mut s: Vec<f64> = (0..n)
        .map(|i| {
            if i == 0 {
                -rng.gen_range(0.05..0.3)
            } else if confident {
                -rng.gen_range(3.0..8.0)
            } else {
                -rng.gen_range(0.3..1.5)
            }
        })
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Deterministic canned generation for `prompt` whose ideal answer is
/// `target`: `m` outputs, each with `n` scores.
pub fn mock_generate(
    prompt: &str,
    target: &str,
    behavior: MockBehavior,
    seed: u64,
    m: usize,
    n: usize,
) -> GenerationResult {
    let m = m.max(1);
    let n = n.max(2);
    let mut rng = mock_rng(prompt, behavior, seed);
    let outputs: Vec<String> = match behavior {
        MockBehavior::Faithful => (0..m).map(|k| spaced_variant(target, k)).collect(),
        MockBehavior::Noisy => (0..m)
            .map(|k| {
                let base = perturb(target, &mut rng).unwrap_or_else(|| gibberish_text(&mut rng));
                spaced_variant(&base, k)
            })
            .collect(),
        MockBehavior::Repetitive => vec![target.to_string(); m],
        MockBehavior::Gibberish => (0..m).map(|_| gibberish_text(&mut rng)).collect(),
    };
    let confident = matches!(behavior, MockBehavior::Faithful | MockBehavior::Repetitive);
    let scores = (0..m).map(|_| mock_scores(&mut rng, n, confident)).collect();
    GenerationResult {
        outputs,
        scores,
        meta: GenerationMeta { backend: format!("mock:{}", behavior_name(behavior)), latency_ms: 0.0 },
    }
}

fn behavior_name(b: MockBehavior) -> &'static str {
    match b {
        MockBehavior::Faithful => "faithful",
        MockBehavior::Noisy => "noisy",
        MockBehavior::Repetitive => "repetitive",
        MockBehavior::Gibberish => "gibberish",
    }
}

/// Offline backend answering from a prompt → gold target table.
pub struct MockBackend {
    targets: HashMap<String, String>,
    behavior: MockBehavior,
    seed: u64,
    n_candidates: usize,
    n_scores: usize,
}

impl MockBackend {
    pub fn new(behavior: MockBehavior, seed: u64, n_candidates: usize, n_scores: usize) -> Self {
        MockBackend { targets: HashMap::new(), behavior, seed, n_candidates, n_scores }
    }

    pub fn with_target(mut self, prompt: impl Into<String>, target: impl Into<String>) -> Self {
        self.targets.insert(prompt.into(), target.into());
        self
    }

    pub fn insert(&mut self, prompt: impl Into<String>, target: impl Into<String>) {
        self.targets.insert(prompt.into(), target.into());
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn generate(&self, prompt: &str) -> Result<GenerationResult, GatewayError> {
        let target = self.targets.get(prompt).map_or("", String::as_str);
        Ok(mock_generate(prompt, target, self.behavior, self.seed, self.n_candidates, self.n_scores))
    }
}

/// One line of a generations log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt_id: String,
    pub outputs: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    #[serde(default)]
    pub meta: GenerationMeta,
}

impl GenerationRecord {
    pub fn new(prompt_id: impl Into<String>, g: GenerationResult) -> Self {
        GenerationRecord { prompt_id: prompt_id.into(), outputs: g.outputs, scores: g.scores, meta: g.meta }
    }

    pub fn result(&self) -> GenerationResult {
        GenerationResult { outputs: self.outputs.clone(), scores: self.scores.clone(), meta: self.meta.clone() }
    }
}

/// Runs every prompt through `backend` in parallel. Results come back in
/// prompt order; a failed prompt keeps its error.
pub fn generate_batch(backend: &dyn Backend, prompts: &[PromptRecord]) -> Vec<Result<GenerationRecord, GatewayError>> {
    prompts
        .par_iter()
        .map(|p| backend.generate(&p.prompt).map(|g| GenerationRecord::new(p.prompt_id.clone(), g)))
        .collect()
}
