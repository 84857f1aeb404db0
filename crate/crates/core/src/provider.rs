//! LLM provider registry and the OpenAI-compatible chat-completions client.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use async_trait::async_trait;
use reqwest::Url;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
/// Thinking budget sent to Qwen models.
pub const QWEN_THINKING_BUDGET: u32 = 81920;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider returned HTTP {status}: {body_excerpt}")]
    Http { status: u16, body_excerpt: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
}

impl ProviderError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ProviderError::Http { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid base URL {0:?}: expected an absolute http(s) URL")]
    BaseUrl(String),
    #[error("unknown provider {0:?}")]
    UnknownProvider(String),
    #[error("model name must not be empty")]
    EmptyModel,
    #[error("temperature {0} is outside [0, 2]")]
    Temperature(f64),
    #[error("concurrency {0} is outside [1, 10]")]
    Concurrency(usize),
    #[error("interval {0} ms is outside [0, 10000]")]
    Interval(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderId {
    Deepseek,
    Openai,
    Qwen,
    Zhipu,
    Custom,
}

impl ProviderId {
    pub const ALL: [ProviderId; 5] = [
        ProviderId::Deepseek,
        ProviderId::Openai,
        ProviderId::Qwen,
        ProviderId::Zhipu,
        ProviderId::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProviderId::Deepseek => "deepseek",
            ProviderId::Openai => "openai",
            ProviderId::Qwen => "qwen",
            ProviderId::Zhipu => "zhipu",
            ProviderId::Custom => "custom",
        }
    }
}

impl fmt::Display for ProviderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProviderId {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProviderId::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ConfigError::UnknownProvider(s.to_string()))
    }
}

/// Provider-specific request body changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    None,
    DeepseekReasoning,
    QwenThinking,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderProfile {
    pub id: ProviderId,
    pub base_url: String,
    pub models: Vec<String>,
    pub mutation: Mutation,
}

fn check_base_url(url: &str) -> Result<(), ConfigError> {
    match Url::parse(url) {
        Ok(u) if matches!(u.scheme(), "http" | "https") && u.has_host() => Ok(()),
        _ => Err(ConfigError::BaseUrl(url.to_string())),
    }
}

impl ProviderProfile {
    /// Built-in profile for a provider.
    pub fn builtin(id: ProviderId) -> Self {
        let (base_url, models, mutation): (&str, &[&str], Mutation) = match id {
            ProviderId::Deepseek => (
                "https://api.deepseek.com/v1",
                &["deepseek-v4-flash", "deepseek-v4-pro", "deepseek-chat", "deepseek-reasoner"],
                Mutation::DeepseekReasoning,
            ),
            ProviderId::Openai => (
                "https://api.openai.com/v1",
                &["gpt-4o-mini", "gpt-4o", "gpt-4.1-mini"],
                Mutation::None,
            ),
            ProviderId::Qwen => (
                "https://dashscope.aliyuncs.com/compatible-mode/v1",
                &["qwen-turbo", "qwen-plus", "qwen-max"],
                Mutation::QwenThinking,
            ),
            ProviderId::Zhipu => (
                "https://open.bigmodel.cn/api/paas/v4",
                &["glm-4-flash", "glm-4-plus", "glm-4"],
                Mutation::None,
            ),
            ProviderId::Custom => ("http://127.0.0.1:8000/v1", &[], Mutation::None),
        };
        Self {
            id,
            base_url: base_url.to_string(),
            models: models.iter().map(|m| m.to_string()).collect(),
            mutation,
        }
    }

    /// Replaces the base URL (any provider, typically `custom`).
    pub fn with_base_url(mut self, base_url: impl Into<String>) -> Result<Self, ConfigError> {
        let base_url = base_url.into();
        check_base_url(&base_url)?;
        self.base_url = base_url;
        Ok(self)
    }

    pub fn chat_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    pub fn default_model(&self) -> Option<&str> {
        self.models.first().map(String::as_str)
    }
}

/// The five built-in profiles.
pub fn registry() -> Vec<ProviderProfile> {
    ProviderId::ALL.into_iter().map(ProviderProfile::builtin).collect()
}

fn default_max_retries() -> u32 {
    3
}
fn default_retry_delay_ms() -> u64 {
    1000
}
fn default_concurrency() -> usize {
    3
}
fn default_timeout_secs() -> u64 {
    DEFAULT_TIMEOUT.as_secs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSettings {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub interval_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_retry_delay_ms")]
    pub retry_delay_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

impl RequestSettings {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: None,
            concurrency: default_concurrency(),
            interval_ms: 0,
            max_retries: default_max_retries(),
            retry_delay_ms: default_retry_delay_ms(),
            timeout_secs: default_timeout_secs(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.model.trim().is_empty() {
            return Err(ConfigError::EmptyModel);
        }
        if let Some(t) = self.temperature {
            if !(0.0..=2.0).contains(&t) {
                return Err(ConfigError::Temperature(t));
            }
        }
        if !(1..=10).contains(&self.concurrency) {
            return Err(ConfigError::Concurrency(self.concurrency));
        }
        if self.interval_ms > 10_000 {
            return Err(ConfigError::Interval(self.interval_ms));
        }
        Ok(())
    }

    pub fn retry_delay(&self) -> Duration {
        Duration::from_millis(self.retry_delay_ms)
    }

    pub fn interval(&self) -> Duration {
        Duration::from_millis(self.interval_ms)
    }
}

/// True for DeepSeek model families that take the reasoning parameters.
pub fn is_deepseek_reasoning_model(model: &str) -> bool {
    let m = model.to_ascii_lowercase();
    m.contains("v4") || m.contains("reasoner")
}

/// Builds the chat-completions request body.
pub fn build_request(
    profile: &ProviderProfile,
    settings: &RequestSettings,
    system: &str,
    user: &str,
) -> Value {
    let mut body = json!({
        "model": settings.model,
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
    });
    let obj = body.as_object_mut().expect("object literal");
    match profile.mutation {
        Mutation::DeepseekReasoning if is_deepseek_reasoning_model(&settings.model) => {
            // These models reject temperature.
            obj.insert("reasoning_effort".into(), json!("max"));
            obj.insert("thinking".into(), json!({"type": "enabled"}));
            return body;
        }
        Mutation::QwenThinking => {
            obj.insert("enable_thinking".into(), json!(true));
            obj.insert("thinking_budget".into(), json!(QWEN_THINKING_BUDGET));
        }
        _ => {}
    }
    if let Some(t) = settings.temperature {
        obj.insert("temperature".into(), json!(t));
    }
    body
}

/// One completed call with character tallies (Unicode scalar values).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub system: String,
    pub user: String,
    pub response_text: String,
    pub input_chars: usize,
    pub output_chars: usize,
    pub http_status: u16,
}

impl ChatExchange {
    pub fn new(system: &str, user: &str, response_text: String, http_status: u16) -> Self {
        Self {
            input_chars: prompt_chars(system, user),
            output_chars: response_text.chars().count(),
            system: system.to_string(),
            user: user.to_string(),
            response_text,
            http_status,
        }
    }
}

pub fn prompt_chars(system: &str, user: &str) -> usize {
    system.chars().count() + user.chars().count()
}

/// Anything that can answer a system + user prompt pair.
#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn complete(&self, system: &str, user: &str) -> Result<ChatExchange, ProviderError>;
}

/// HTTP client for one provider profile and settings.
#[derive(Debug, Clone)]
pub struct ChatClient {
    http: reqwest::Client,
    profile: ProviderProfile,
    settings: RequestSettings,
    api_key: String,
}

impl ChatClient {
    pub fn new(
        profile: ProviderProfile,
        settings: RequestSettings,
        api_key: impl Into<String>,
    ) -> Result<Self, ProviderError> {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(settings.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self {
            http,
            profile,
            settings,
            api_key: api_key.into(),
        })
    }

    pub fn profile(&self) -> &ProviderProfile {
        &self.profile
    }

    pub fn settings(&self) -> &RequestSettings {
        &self.settings
    }

    pub async fn chat(&self, system: &str, user: &str) -> Result<ChatExchange, ProviderError> {
        let body = build_request(&self.profile, &self.settings, system, user);
        let resp = self
            .http
            .post(self.profile.chat_url())
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .await
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .await
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::Http {
                status,
                body_excerpt: excerpt(&text, 200),
            });
        }
        let content = response_content(&text)?;
        Ok(ChatExchange::new(system, user, content, status))
    }
}

#[async_trait]
impl ChatBackend for ChatClient {
    async fn complete(&self, system: &str, user: &str) -> Result<ChatExchange, ProviderError> {
        self.chat(system, user).await
    }
}

/// First choice's message content from a chat-completions response body.
pub fn response_content(body: &str) -> Result<String, ProviderError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| ProviderError::MalformedResponse(format!("invalid JSON: {e}")))?;
    let message = value
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .and_then(|c| c.get("message"))
        .ok_or_else(|| ProviderError::MalformedResponse("response has no choices".into()))?;
    match message.get("content") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Null) | None => Ok(String::new()),
        Some(other) => Err(ProviderError::MalformedResponse(format!(
            "message content is not a string: {other}"
        ))),
    }
}

fn excerpt(text: &str, max_chars: usize) -> String {
    let mut out: String = text.chars().take(max_chars).collect();
    if text.chars().count() > max_chars {
        out.push('…');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    use tokio::net::TcpListener;

    fn settings(model: &str, temperature: Option<f64>) -> RequestSettings {
        RequestSettings {
            temperature,
            ..RequestSettings::new(model)
        }
    }

    #[test]
    fn registry_has_five_profiles() {
        let r = registry();
        assert_eq!(r.len(), 5);
        for p in &r {
            assert!(check_base_url(&p.base_url).is_ok());
            if p.id != ProviderId::Custom {
                assert!(!p.models.is_empty());
            }
        }
    }

    #[test]
    fn deepseek_reasoner_gets_reasoning_params_and_no_temperature() {
        let p = ProviderProfile::builtin(ProviderId::Deepseek);
        let body = build_request(&p, &settings("deepseek-reasoner", Some(0.3)), "s", "u");
        assert_eq!(body["reasoning_effort"], "max");
        assert_eq!(body["thinking"], json!({"type": "enabled"}));
        assert!(body.get("temperature").is_none());
        let body = build_request(&p, &settings("DeepSeek-V4-Flash", Some(0.3)), "s", "u");
        assert_eq!(body["reasoning_effort"], "max");
    }

    #[test]
    fn deepseek_chat_keeps_temperature() {
        let p = ProviderProfile::builtin(ProviderId::Deepseek);
        let body = build_request(&p, &settings("deepseek-chat", Some(0.3)), "s", "u");
        assert_eq!(body["temperature"], json!(0.3));
        assert!(body.get("reasoning_effort").is_none());
    }

    #[test]
    fn qwen_gets_thinking_budget() {
        let p = ProviderProfile::builtin(ProviderId::Qwen);
        for model in ["qwen-turbo", "qwen-max", "anything"] {
            let body = build_request(&p, &settings(model, None), "s", "u");
            assert_eq!(body["thinking_budget"], json!(81920));
            assert_eq!(body["enable_thinking"], json!(true));
        }
    }

    #[test]
    fn openai_without_temperature_has_no_optional_keys() {
        let p = ProviderProfile::builtin(ProviderId::Openai);
        let body = build_request(&p, &settings("gpt-4o-mini", None), "sys", "usr");
        let keys: Vec<_> = body.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, ["model", "messages"]);
        assert_eq!(body["messages"][0], json!({"role": "system", "content": "sys"}));
        assert_eq!(body["messages"][1], json!({"role": "user", "content": "usr"}));
    }

    #[test]
    fn settings_ranges() {
        let mut s = RequestSettings::new("m");
        assert!(s.validate().is_ok());
        s.concurrency = 11;
        assert_eq!(s.validate(), Err(ConfigError::Concurrency(11)));
        s.concurrency = 0;
        assert_eq!(s.validate(), Err(ConfigError::Concurrency(0)));
        s.concurrency = 10;
        s.interval_ms = 10_001;
        assert_eq!(s.validate(), Err(ConfigError::Interval(10_001)));
        s.interval_ms = 10_000;
        s.temperature = Some(2.5);
        assert_eq!(s.validate(), Err(ConfigError::Temperature(2.5)));
        s.temperature = None;
        s.model = " ".into();
        assert_eq!(s.validate(), Err(ConfigError::EmptyModel));
    }

    #[test]
    fn base_url_checks() {
        let p = ProviderProfile::builtin(ProviderId::Custom);
        assert!(p.clone().with_base_url("ftp://x").is_err());
        assert!(p.clone().with_base_url("not a url").is_err());
        let p = p.with_base_url("http://localhost:9/v1/").unwrap();
        assert_eq!(p.chat_url(), "http://localhost:9/v1/chat/completions");
    }

    #[test]
    fn exchange_tallies() {
        let x = ChatExchange::new("ab", "cd", "{}".into(), 200);
        assert_eq!(x.input_chars, 4);
        assert_eq!(x.output_chars, 2);
        let x = ChatExchange::new("摘要", "", "是".into(), 200);
        assert_eq!(x.input_chars, 2);
        assert_eq!(x.output_chars, 1);
    }

    #[test]
    fn response_content_shapes() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"{}"}}]}"#;
        assert_eq!(response_content(ok).unwrap(), "{}");
        assert!(matches!(
            response_content(r#"{"choices":[]}"#),
            Err(ProviderError::MalformedResponse(_))
        ));
        assert!(matches!(response_content("nope"), Err(ProviderError::MalformedResponse(_))));
    }

    /// Serves one canned HTTP response and returns the raw request text.
    async fn one_shot_server(status: u16, body: &'static str) -> (String, tokio::task::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = tokio::spawn(async move {
            let (mut sock, _) = listener.accept().await.unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            loop {
                let n = sock.read(&mut chunk).await.unwrap();
                buf.extend_from_slice(&chunk[..n]);
                let text = String::from_utf8_lossy(&buf);
                if let Some(head_end) = text.find("\r\n\r\n") {
                    let len = text[..head_end]
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                        .unwrap_or(0);
                    if buf.len() >= head_end + 4 + len {
                        break;
                    }
                }
            }
            let resp = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            sock.write_all(resp.as_bytes()).await.unwrap();
            String::from_utf8_lossy(&buf).into_owned()
        });
        (format!("http://{addr}/v1"), handle)
    }

    #[tokio::test]
    async fn chat_posts_with_bearer_and_reads_first_choice() {
        let (url, server) =
            one_shot_server(200, r#"{"choices":[{"message":{"content":"{}"}}]}"#).await;
        let profile = ProviderProfile::builtin(ProviderId::Custom).with_base_url(url).unwrap();
        let client = ChatClient::new(profile, RequestSettings::new("m"), "sk-test").unwrap();
        let x = client.chat("ab", "cd").await.unwrap();
        assert_eq!(x.response_text, "{}");
        assert_eq!((x.input_chars, x.output_chars, x.http_status), (4, 2, 200));
        let request = server.await.unwrap();
        assert!(request.starts_with("POST /v1/chat/completions"));
        assert!(request.to_ascii_lowercase().contains("authorization: bearer sk-test"));
    }

    #[tokio::test]
    async fn chat_maps_non_2xx_to_provider_error() {
        let (url, _server) = one_shot_server(429, r#"{"error":"slow down"}"#).await;
        let profile = ProviderProfile::builtin(ProviderId::Custom).with_base_url(url).unwrap();
        let client = ChatClient::new(profile, RequestSettings::new("m"), "k").unwrap();
        match client.chat("s", "u").await {
            Err(ProviderError::Http { status, body_excerpt }) => {
                assert_eq!(status, 429);
                assert!(body_excerpt.contains("slow down"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[tokio::test]
    async fn chat_reports_missing_choices_and_transport_failures() {
        let (url, _server) = one_shot_server(200, r#"{"id":"x"}"#).await;
        let profile = ProviderProfile::builtin(ProviderId::Custom).with_base_url(url).unwrap();
        let client = ChatClient::new(profile, RequestSettings::new("m"), "k").unwrap();
        assert!(matches!(client.chat("s", "u").await, Err(ProviderError::MalformedResponse(_))));

        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let profile = ProviderProfile::builtin(ProviderId::Custom)
            .with_base_url(format!("http://{addr}/v1"))
            .unwrap();
        let client = ChatClient::new(profile, RequestSettings::new("m"), "k").unwrap();
        assert!(matches!(client.chat("s", "u").await, Err(ProviderError::Transport(_))));
    }
}
