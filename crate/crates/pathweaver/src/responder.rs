//! Response generation: a fixed prompt template over (history, knowledge,
//! subtarget), a deterministic offline template responder, and a
//! chat-completions-compatible HTTP client with retry, a concurrency cap,
//! and redacted optional debug logging.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::types::{KnowledgeTriple, PathStep, Speaker, Utterance};
use crate::metrics::active_triples;

pub const PROMPT_TEMPLATE_ID: &str = "pathweaver-chat";
pub const PROMPT_TEMPLATE_VERSION: &str = "1";

const SYSTEM_INSTRUCTION: &str = "You lead a conversation step by step toward a target topic. \
Ground every reply in the knowledge lines and keep to the requested next step.";

/// Per-section caps applied while rendering a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptCaps {
    pub max_knowledge_lines: usize,
    pub max_history_turns: usize,
}

impl Default for PromptCaps {
    fn default() -> Self {
        PromptCaps { max_knowledge_lines: 12, max_history_turns: 8 }
    }
}

/// A rendered prompt plus its labeled sections, for inspection and tests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptSpec {
    pub template: &'static str,
    pub version: &'static str,
    pub system_instruction: &'static str,
    pub knowledge_block: String,
    pub history_block: String,
    pub subtarget_line: String,
    /// The full user-message text: knowledge, history, then the next step.
    pub rendered: String,
}

fn triple_line(t: &KnowledgeTriple) -> String {
    format!("- {} | {} | {}", t.subject, t.relation, t.object)
}

/// Render the fixed prompt: a system instruction, a "Knowledge:" block with
/// subtarget-relevant triples first under a cap, a "History:" block keeping
/// the most recent turns under a cap, and the next-step line.
pub fn build_prompt(
    history: &[Utterance],
    knowledge: &[KnowledgeTriple],
    subtarget: &PathStep,
    caps: &PromptCaps,
) -> PromptSpec {
    let relevant = active_triples(knowledge, &subtarget.topic);
    let mut ordered: Vec<&KnowledgeTriple> = relevant.clone();
    for t in knowledge {
        if !relevant.iter().any(|r| std::ptr::eq(*r, t)) {
            ordered.push(t);
        }
    }
    ordered.truncate(caps.max_knowledge_lines);
    let knowledge_block = if ordered.is_empty() {
        "Knowledge:\n(none)".to_string()
    } else {
        let lines: Vec<String> = ordered.iter().map(|t| triple_line(t)).collect();
        format!("Knowledge:\n{}", lines.join("\n"))
    };

    let recent = if history.len() > caps.max_history_turns {
        &history[history.len() - caps.max_history_turns..]
    } else {
        history
    };
    let history_block = if recent.is_empty() {
        "History:".to_string()
    } else {
        let lines: Vec<String> = recent
            .iter()
            .map(|u| {
                let tag = match u.speaker {
                    Speaker::User => "user",
                    Speaker::System => "system",
                };
                format!("{tag}: {}", u.text)
            })
            .collect();
        format!("History:\n{}", lines.join("\n"))
    };

    let subtarget_line = format!(
        "Next step: {} about {}. Respond as the system.",
        subtarget.action, subtarget.topic
    );
    let rendered = format!("{knowledge_block}\n\n{history_block}\n\n{subtarget_line}");
    PromptSpec {
        template: PROMPT_TEMPLATE_ID,
        version: PROMPT_TEMPLATE_VERSION,
        system_instruction: SYSTEM_INSTRUCTION,
        knowledge_block,
        history_block,
        subtarget_line,
        rendered,
    }
}

/// Deterministic network-free responder: a fixed sentence naming the
/// subtarget and, when the knowledge grounds it, one active triple.
pub fn generate_offline(subtarget: &PathStep, knowledge: &[KnowledgeTriple]) -> String {
    let action_words = subtarget.action.replace('_', " ");
    match active_triples(knowledge, &subtarget.topic).first() {
        Some(t) => format!(
            "sure , {} {} . i know {} {} {} .",
            action_words,
            subtarget.topic,
            t.subject,
            t.relation.replace('_', " "),
            t.object
        ),
        None => format!("sure , {} {} .", action_words, subtarget.topic),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key. The key value
    /// itself never appears in config files or logs.
    pub api_key_env: String,
    /// Refuse to send requests when the key variable is unset.
    pub api_key_required: bool,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub max_concurrent_requests: usize,
    /// Initial retry backoff; doubles per attempt.
    pub backoff_ms: u64,
    /// Log request/response bodies (with the key redacted) to stderr.
    pub debug_log_bodies: bool,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        LlmEndpointConfig {
            base_url: String::new(),
            model: "gpt-4o-mini".to_string(),
            api_key_env: "PATHWEAVER_API_KEY".to_string(),
            api_key_required: false,
            timeout_secs: 30,
            max_retries: 3,
            max_concurrent_requests: 4,
            backoff_ms: 250,
            debug_log_bodies: false,
        }
    }
}

impl LlmEndpointConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.base_url.is_empty() {
            return Err("llm.base_url must be set for remote generation".into());
        }
        if self.timeout_secs == 0 {
            return Err("llm.timeout_secs must be positive".into());
        }
        if self.max_concurrent_requests == 0 {
            return Err("llm.max_concurrent_requests must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ResponderError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("API key required but environment variable {var} is unset")]
    MissingApiKey { var: String },
    #[error("transport failure after {attempts} attempt(s): {detail}")]
    Transport { attempts: usize, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Replace every occurrence of a secret in text destined for logs.
pub fn redact(text: &str, secret: &str) -> String {
    if secret.is_empty() {
        text.to_string()
    } else {
        text.replace(secret, "***")
    }
}

/// Minimal counting semaphore bounding in-flight requests.
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { permits: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireIncoming,
}

#[derive(Deserialize)]
struct WireIncoming {
    content: String,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

/// Blocking chat-completions client. Shareable across threads; in-flight
/// requests are capped by the configured concurrency limit.
pub struct LlmClient {
    cfg: LlmEndpointConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    gate: Semaphore,
}

impl LlmClient {
    pub fn new(cfg: LlmEndpointConfig) -> Result<Self, ResponderError> {
        cfg.validate().map_err(ResponderError::Config)?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        if cfg.api_key_required && api_key.is_none() {
            return Err(ResponderError::MissingApiKey { var: cfg.api_key_env.clone() });
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| ResponderError::Config(format!("http client: {e}")))?;
        let gate = Semaphore::new(cfg.max_concurrent_requests);
        Ok(LlmClient { cfg, api_key, http, gate })
    }

    fn debug_log(&self, label: &str, body: &str) {
        if self.cfg.debug_log_bodies {
            let safe = match &self.api_key {
                Some(k) => redact(body, k),
                None => body.to_string(),
            };
            eprintln!("[llm {label}] {safe}");
        }
    }

    /// Send one prompt; retries transient failures (connect errors,
    /// timeouts, HTTP 5xx) with exponential backoff up to the configured
    /// retry budget.
    pub fn generate(&self, prompt: &PromptSpec) -> Result<String, ResponderError> {
        let _permit = self.gate.acquire();
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let request = WireRequest {
            model: &self.cfg.model,
            messages: vec![
                WireMessage { role: "system", content: prompt.system_instruction },
                WireMessage { role: "user", content: &prompt.rendered },
            ],
            temperature: 0.0,
        };
        let body = serde_json::to_string(&request)
            .map_err(|e| ResponderError::Protocol(format!("request serialization: {e}")))?;
        self.debug_log("request", &body);

        let attempts_max = self.cfg.max_retries + 1;
        let mut last_detail = String::new();
        for attempt in 0..attempts_max {
            if attempt > 0 {
                let wait = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            let mut req = self
                .http
                .post(&url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.clone());
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                    last_detail = format!("attempt {}: {e}", attempt + 1);
                    continue;
                }
                Err(e) => {
                    return Err(ResponderError::Transport {
                        attempts: attempt + 1,
                        detail: e.to_string(),
                    })
                }
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().map_err(|e| ResponderError::Transport {
                        attempts: attempt + 1,
                        detail: format!("reading body: {e}"),
                    })?;
                    self.debug_log("response", &text);
                    if status.is_server_error() {
                        last_detail = format!("attempt {}: HTTP {status}", attempt + 1);
                        continue;
                    }
                    if !status.is_success() {
                        return Err(ResponderError::Protocol(format!(
                            "endpoint returned HTTP {status}"
                        )));
                    }
                    let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| {
                        ResponderError::Protocol(format!("malformed response body: {e}"))
                    })?;
                    return parsed
                        .choices
                        .first()
                        .map(|c| c.message.content.clone())
                        .ok_or_else(|| ResponderError::Protocol("response has no choices".into()));
                }
            }
        }
        Err(ResponderError::Transport { attempts: attempts_max, detail: last_detail })
    }
}
