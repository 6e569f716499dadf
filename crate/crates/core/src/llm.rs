//! Answer generation: a deterministic mock backend, a remote chat-completion
//! backend, and verdict parsing.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::LlmError;
use crate::prompt::RenderedPrompt;
use crate::retrieval::EvidenceSet;

/// Environment variables consulted by [`BackendConfig::from_env`].
pub const ENV_URL: &str = "MALRAG_LLM_URL";
pub const ENV_MODEL: &str = "MALRAG_LLM_MODEL";
pub const ENV_KEY: &str = "MALRAG_LLM_KEY";

/// Which backend answers the prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Offline: majority vote over the kept evidence pool.
    MockMajority,
    /// A chat-completion HTTP endpoint.
    RemoteChat,
}

/// Backend selection and transport knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub api_key: Option<String>,
    pub timeout_seconds: f64,
    pub max_retries: u32,
    pub temperature: f64,
}

impl BackendConfig {
    pub fn mock() -> Self {
        Self {
            kind: BackendKind::MockMajority,
            endpoint_url: None,
            model_name: None,
            api_key: None,
            timeout_seconds: 30.0,
            max_retries: 2,
            temperature: 0.0,
        }
    }

    pub fn remote(endpoint_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::RemoteChat,
            endpoint_url: Some(endpoint_url.into()),
            model_name: Some(model_name.into()),
            api_key: None,
            timeout_seconds: 30.0,
            max_retries: 2,
            temperature: 0.0,
        }
    }

    /// Builds a remote config from `MALRAG_LLM_URL`, `MALRAG_LLM_MODEL`,
    /// and (optionally) `MALRAG_LLM_KEY`.
    pub fn from_env() -> Result<Self, LlmError> {
        let url = std::env::var(ENV_URL)
            .map_err(|_| LlmError::Config(format!("{ENV_URL} is not set")))?;
        let model = std::env::var(ENV_MODEL)
            .map_err(|_| LlmError::Config(format!("{ENV_MODEL} is not set")))?;
        let mut cfg = Self::remote(url, model);
        cfg.api_key = std::env::var(ENV_KEY).ok();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !self.timeout_seconds.is_finite() || self.timeout_seconds <= 0.0 {
            return Err(LlmError::Config("timeout must be positive".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(LlmError::Config(
                "temperature must be finite and non-negative".into(),
            ));
        }
        if self.kind == BackendKind::RemoteChat {
            match &self.endpoint_url {
                Some(url) if url.starts_with("http://") || url.starts_with("https://") => {}
                Some(url) => {
                    return Err(LlmError::Config(format!(
                        "endpoint url {url:?} must start with http:// or https://"
                    )))
                }
                None => {
                    return Err(LlmError::Config(
                        "the remote backend needs an endpoint url".into(),
                    ))
                }
            }
            if self.model_name.as_deref().unwrap_or("").is_empty() {
                return Err(LlmError::Config(
                    "the remote backend needs a model name".into(),
                ));
            }
        }
        Ok(())
    }

    /// Short backend identity recorded in verdict provenance.
    pub fn identity(&self) -> String {
        match self.kind {
            BackendKind::MockMajority => "mock-majority".to_string(),
            BackendKind::RemoteChat => format!(
                "remote:{}@{}",
                self.model_name.as_deref().unwrap_or("?"),
                self.endpoint_url.as_deref().unwrap_or("?")
            ),
        }
    }
}

/// Majority vote over the kept evidence pool: most votes first, then the
/// smaller best distance, then the lexicographically smaller label. An
/// empty pool votes novel.
pub fn decide_mock(evidence: &EvidenceSet) -> String {
    if evidence.pool.is_empty() {
        return crate::db::NOVEL_LABEL.to_string();
    }
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for item in &evidence.pool {
        let slot = tally
            .entry(item.class_label.as_str())
            .or_insert((0, f64::INFINITY));
        slot.0 += 1;
        if item.distance < slot.1 {
            slot.1 = item.distance;
        }
    }
    let mut best: Option<(&str, usize, f64)> = None;
    for (label, (count, dist)) in tally {
        let better = match best {
            None => true,
            Some((_, bc, bd)) => {
                count > bc || (count == bc && dist.total_cmp(&bd).is_lt())
            }
        };
        if better {
            best = Some((label, count, dist));
        }
    }
    best.expect("non-empty pool").0.to_string()
}

/// Runs the backend for one prompt and returns the assistant text.
///
/// The mock backend replies with one reasoning line and an `ANSWER:` line
/// computed from the evidence alone. The remote backend posts a
/// chat-completion request (`model`, one user message, `temperature`) and
/// returns the first choice's message content; transport failures and
/// retryable statuses (429 and 5xx) are retried up to `max_retries` times.
pub fn generate(
    prompt: &RenderedPrompt,
    evidence: &EvidenceSet,
    cfg: &BackendConfig,
) -> Result<String, LlmError> {
    cfg.validate()?;
    match cfg.kind {
        BackendKind::MockMajority => {
            let label = decide_mock(evidence);
            Ok(format!(
                "Majority vote over the kept evidence pool.\nANSWER: {label}"
            ))
        }
        BackendKind::RemoteChat => generate_remote(prompt, cfg),
    }
}

fn generate_remote(prompt: &RenderedPrompt, cfg: &BackendConfig) -> Result<String, LlmError> {
    let url = cfg.endpoint_url.as_deref().expect("validated");
    let model = cfg.model_name.as_deref().expect("validated");
    let body = json!({
        "model": model,
        "messages": [{"role": "user", "content": prompt.text}],
        "temperature": cfg.temperature,
    });

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_seconds)))
        .http_status_as_error(false)
        .build()
        .into();

    let attempts = cfg.max_retries + 1;
    let mut last_failure = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            let backoff = Duration::from_millis(100 * (1 << (attempt - 1).min(4)));
            std::thread::sleep(backoff);
        }
        let mut req = agent.post(url);
        if let Some(key) = &cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(&body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = match resp.body_mut().read_to_string() {
                    Ok(t) => t,
                    Err(e) => {
                        last_failure = format!("reading response body: {e}");
                        continue;
                    }
                };
                if status == 429 || (500..600).contains(&status) {
                    last_failure = format!("status {status}: {}", truncate(&text, 200));
                    continue;
                }
                if status != 200 {
                    return Err(LlmError::Status {
                        status,
                        message: truncate(&text, 200),
                    });
                }
                return extract_content(&text);
            }
            Err(ureq::Error::Timeout(_)) => {
                return Err(LlmError::Timeout {
                    seconds: cfg.timeout_seconds,
                });
            }
            Err(e) => {
                last_failure = e.to_string();
            }
        }
    }
    Err(LlmError::Backend {
        attempts,
        message: last_failure,
    })
}

/// Pulls the assistant text out of a chat-completion response body.
fn extract_content(body: &str) -> Result<String, LlmError> {
    #[derive(Deserialize)]
    struct Resp {
        choices: Vec<Choice>,
    }
    #[derive(Deserialize)]
    struct Choice {
        message: Message,
    }
    #[derive(Deserialize)]
    struct Message {
        content: String,
    }
    let resp: Resp = serde_json::from_str(body).map_err(|e| LlmError::Parse {
        reason: format!("malformed chat response: {e}"),
        raw: truncate(body, 200),
    })?;
    resp.choices
        .into_iter()
        .next()
        .map(|c| c.message.content)
        .ok_or_else(|| LlmError::Parse {
            reason: "chat response has no choices".into(),
            raw: truncate(body, 200),
        })
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_string()
    } else {
        let mut end = max;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}

/// A parsed backend answer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParsedVerdict {
    pub label: String,
    /// Response text preceding the answer line, when reasoning was
    /// requested and present.
    pub reasoning: Option<String>,
}

/// Extracts the verdict label from raw backend text.
///
/// Primary rule: the last line starting with `ANSWER:` whose remainder,
/// trimmed, equals a label from `label_space` exactly. Recovery rule: if no
/// such line exists, and exactly one label occurs (case-insensitively) in
/// the last three lines, that label wins. Anything else is a parse error
/// carrying the raw text. The verdict is never coerced to novel: novel
/// is returned only when the text names it.
pub fn parse_verdict(
    raw: &str,
    label_space: &[String],
    reasoning: bool,
) -> Result<ParsedVerdict, LlmError> {
    let lines: Vec<&str> = raw.lines().collect();

    for (i, line) in lines.iter().enumerate().rev() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("ANSWER:") {
            let candidate = rest.trim();
            if let Some(label) = label_space.iter().find(|l| l.as_str() == candidate) {
                let reasoning_text = if reasoning && i > 0 {
                    let head = lines[..i].join("\n").trim().to_string();
                    (!head.is_empty()).then_some(head)
                } else {
                    None
                };
                return Ok(ParsedVerdict {
                    label: label.clone(),
                    reasoning: reasoning_text,
                });
            }
        }
    }

    // Recovery: a unique case-insensitive label mention in the last 3 lines.
    let tail = lines
        .iter()
        .rev()
        .take(3)
        .map(|l| l.to_lowercase())
        .collect::<Vec<_>>()
        .join("\n");
    let mut found: Vec<&String> = label_space
        .iter()
        .filter(|l| tail.contains(&l.to_lowercase()))
        .collect();
    found.dedup();
    match found.len() {
        1 => {
            let reasoning_text = if reasoning {
                let whole = raw.trim().to_string();
                (!whole.is_empty()).then_some(whole)
            } else {
                None
            };
            Ok(ParsedVerdict {
                label: found[0].clone(),
                reasoning: reasoning_text,
            })
        }
        0 => Err(LlmError::Parse {
            reason: "no answer line and no label mentioned in the final lines".into(),
            raw: raw.to_string(),
        }),
        n => Err(LlmError::Parse {
            reason: format!("ambiguous answer: {n} labels mentioned in the final lines"),
            raw: raw.to_string(),
        }),
    }
}

/// Everything needed to audit one verdict.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub prompt_sha256: String,
    pub evidence_sha256: String,
    pub backend: String,
    pub raw_response: String,
}

impl Provenance {
    /// SHA-256 of the backend's raw response — the reasoning transcript as
    /// emitted, before verdict parsing.
    pub fn response_sha256(&self) -> String {
        crate::util::sha256_hex(self.raw_response.as_bytes())
    }
}

/// The final per-flow decision.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub label: String,
    pub reasoning: Option<String>,
    pub provenance: Provenance,
}
