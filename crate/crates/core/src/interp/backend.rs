//! Text backends for the describer and generator roles.

use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Result, SaeError};

/// Anything that turns a prompt into a reply.
pub trait Backend: Send + Sync {
    fn send(&self, prompt: &str) -> Result<String>;
}

type Reply = dyn Fn(&str) -> Result<String> + Send + Sync;

/// Deterministic in-process backend.
pub struct MockBackend {
    reply: Box<Reply>,
}

impl MockBackend {
    pub fn new(f: impl Fn(&str) -> Result<String> + Send + Sync + 'static) -> Self {
        MockBackend { reply: Box::new(f) }
    }

    /// Always returns `text`.
    pub fn canned(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_| Ok(text.clone()))
    }

    /// Returns the scripted replies in order; `Err` entries become backend
    /// failures. Once exhausted, every further call fails.
    pub fn scripted(replies: Vec<std::result::Result<String, String>>) -> Self {
        let queue = Mutex::new(replies.into_iter());
        Self::new(move |_| {
            match queue.lock().expect("mock script lock").next() {
                Some(Ok(text)) => Ok(text),
                Some(Err(e)) => Err(SaeError::Backend(e)),
                None => Err(SaeError::Backend("mock script exhausted".into())),
            }
        })
    }

    /// Describer stand-in: answers with the reports it was given, in prompt
    /// order, behind the asterisk marker.
    pub fn echo_reports() -> Self {
        Self::new(|prompt| {
            let reports = tagged_lines(prompt, "Report number ", ": ");
            if reports.is_empty() {
                return Err(SaeError::Backend("prompt contains no reports".into()));
            }
            Ok(format!(
                "Reviewing {} reports.\n*This feature represents {}",
                reports.len(),
                reports.join(" | ")
            ))
        })
    }

    /// Generator stand-in: a findings paragraph made of the feature
    /// descriptions it was given, most important first.
    pub fn echo_features() -> Self {
        Self::new(|prompt| {
            let mut out = Vec::new();
            let mut lines = prompt.lines();
            while let Some(line) = lines.next() {
                if line.starts_with("Feature number ") {
                    if let Some(desc) = lines.next() {
                        out.push(desc.trim().to_string());
                    }
                }
            }
            if out.is_empty() {
                Ok("No acute findings.".to_string())
            } else {
                Ok(out.join(" "))
            }
        })
    }
}

/// Text after `sep` on every line that starts with `prefix` and a number.
fn tagged_lines(prompt: &str, prefix: &str, sep: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|line| {
            let rest = line.strip_prefix(prefix)?;
            let (num, text) = rest.split_once(sep)?;
            num.parse::<usize>().ok()?;
            Some(text.to_string())
        })
        .collect()
}

impl Backend for MockBackend {
    fn send(&self, prompt: &str) -> Result<String> {
        (self.reply)(prompt)
    }
}

/// Settings for a chat-completion style HTTP endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    pub url: String,
    pub model: String,
    /// Name of an environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "HttpConfig::default_auth_header")]
    pub auth_header: String,
    /// Prepended to the key, e.g. `"Bearer "`.
    #[serde(default = "HttpConfig::default_auth_prefix")]
    pub auth_prefix: String,
    #[serde(default = "HttpConfig::default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub temperature: Option<f64>,
}

impl HttpConfig {
    fn default_auth_header() -> String {
        "Authorization".into()
    }
    fn default_auth_prefix() -> String {
        "Bearer ".into()
    }
    fn default_timeout() -> u64 {
        120
    }

    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            url: url.into(),
            model: model.into(),
            api_key_env: None,
            auth_header: Self::default_auth_header(),
            auth_prefix: Self::default_auth_prefix(),
            timeout_secs: Self::default_timeout(),
            max_tokens: None,
            temperature: None,
        }
    }
}

/// Posts `{"model", "messages": [{"role": "user", "content": prompt}]}` and
/// reads back `choices[0].message.content` (or `content[0].text`).
pub struct HttpBackend {
    config: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                SaeError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        Ok(HttpBackend {
            config,
            api_key,
            agent,
        })
    }

    fn body(&self, prompt: &str) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        if let Some(t) = self.config.max_tokens {
            body["max_tokens"] = json!(t);
        }
        if let Some(t) = self.config.temperature {
            body["temperature"] = json!(t);
        }
        body
    }
}

fn reply_text(v: &Value) -> Option<&str> {
    v.pointer("/choices/0/message/content")
        .or_else(|| v.pointer("/content/0/text"))
        .and_then(Value::as_str)
}

impl Backend for HttpBackend {
    fn send(&self, prompt: &str) -> Result<String> {
        let mut req = self.agent.post(&self.config.url);
        if let Some(key) = &self.api_key {
            req = req.header(
                self.config.auth_header.as_str(),
                format!("{}{key}", self.config.auth_prefix),
            );
        }
        let resp = req
            .send_json(self.body(prompt))
            .map_err(|e| SaeError::Backend(format!("{}: {e}", self.config.url)))?;
        let v: Value = resp
            .into_body()
            .read_json()
            .map_err(|e| SaeError::Backend(format!("reading response: {e}")))?;
        reply_text(&v)
            .map(str::to_string)
            .ok_or_else(|| SaeError::Backend("response has no message content".into()))
    }
}
