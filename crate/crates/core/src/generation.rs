//! Story generation against an LLM backend, and sentence segmentation.

use std::time::Duration;

use async_trait::async_trait;
use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::domain::{Segment, Session, StoryMode, StoryVersion};
use crate::error::{Error, Result};
use crate::http;
use crate::prompthub::{PromptBundle, PromptMode};
use crate::recognition::BackendKind;

/// First retry delay; doubles per attempt and never exceeds the timeout.
pub const INITIAL_BACKOFF_MS: u64 = 250;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmBackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for LlmBackendConfig {
    fn default() -> Self {
        LlmBackendConfig {
            kind: BackendKind::Mock,
            endpoint_url: None,
            api_key_env: None,
            timeout_ms: 30_000,
            retries: 2,
        }
    }
}

impl LlmBackendConfig {
    pub fn remote(endpoint_url: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        LlmBackendConfig {
            kind: BackendKind::Remote,
            endpoint_url: Some(endpoint_url.into()),
            api_key_env: Some(api_key_env.into()),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let remote_fields = self.endpoint_url.is_some() && self.api_key_env.is_some();
        let any_remote_field = self.endpoint_url.is_some() || self.api_key_env.is_some();
        match self.kind {
            BackendKind::Remote if !remote_fields => Err(Error::Config(
                "remote LLM backend needs endpoint_url and api_key_env".into(),
            )),
            BackendKind::Mock if any_remote_field => Err(Error::Config(
                "mock LLM backend takes no endpoint_url or api_key_env".into(),
            )),
            _ if self.timeout_ms == 0 => Err(Error::Config("timeout_ms must be positive".into())),
            _ => Ok(()),
        }
    }
}

#[async_trait]
pub trait LlmBackend: Send + Sync {
    async fn complete(&self, prompt: &PromptBundle) -> Result<String>;
}

/// Deterministic stand-in for the language model.
///
/// Emits `I <keyword>.` per keyword, `I remember <caption>.` per live
/// caption and closes with `It felt <style_id>.`, space separated.
pub fn mock_complete(prompt: &PromptBundle) -> String {
    let inputs = &prompt.inputs;
    let mut sentences: Vec<String> = inputs.keywords.iter().map(|k| format!("I {k}.")).collect();
    if prompt.mode == PromptMode::Imagetalk {
        sentences.extend(inputs.captions.iter().map(|c| format!("I remember {c}.")));
    }
    sentences.push(format!("It felt {}.", inputs.style.style_id.as_str()));
    sentences.join(" ")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockLlm;

#[async_trait]
impl LlmBackend for MockLlm {
    async fn complete(&self, prompt: &PromptBundle) -> Result<String> {
        Ok(mock_complete(prompt))
    }
}

#[derive(Serialize)]
struct CompleteRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    max_length: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct CompleteResponse {
    text: String,
}

/// `POST {endpoint}/complete` with bearer auth and retry on timeouts and
/// transport failures.
#[derive(Debug, Clone)]
pub struct RemoteLlm {
    client: reqwest::Client,
    endpoint: String,
    api_key_env: String,
    timeout_ms: u64,
    retries: u32,
}

impl RemoteLlm {
    pub fn new(config: &LlmBackendConfig) -> Result<Self> {
        config.validate()?;
        match (&config.endpoint_url, &config.api_key_env) {
            (Some(endpoint), Some(env)) => Ok(RemoteLlm {
                client: http::client(),
                endpoint: endpoint.clone(),
                api_key_env: env.clone(),
                timeout_ms: config.timeout_ms,
                retries: config.retries,
            }),
            _ => Err(Error::Config("remote LLM backend needs endpoint_url and api_key_env".into())),
        }
    }
}

pub(crate) fn backoff_delay(attempt: u32, timeout_ms: u64) -> Duration {
    let ms = INITIAL_BACKOFF_MS.saturating_mul(1u64 << attempt.min(32));
    Duration::from_millis(ms.min(timeout_ms))
}

#[async_trait]
impl LlmBackend for RemoteLlm {
    async fn complete(&self, prompt: &PromptBundle) -> Result<String> {
        let token = std::env::var(&self.api_key_env)
            .map_err(|_| Error::Config(format!("credential variable {} is not set", self.api_key_env)))?;
        let body = CompleteRequest {
            prompt: &prompt.assembled_text,
            temperature: prompt.params.temperature,
            max_length: prompt.params.max_length,
            seed: prompt.params.seed,
        };
        let url = http::join_url(&self.endpoint, "complete");
        let mut attempt = 0;
        loop {
            let result: Result<CompleteResponse> =
                http::post_json(&self.client, &url, &body, self.timeout_ms, Some(&token)).await;
            match result {
                Ok(resp) => return Ok(resp.text),
                Err(e @ (Error::BackendTimeout(_) | Error::Transport(_))) if attempt < self.retries => {
                    tracing::warn!(attempt, error = %e, "LLM request failed, retrying");
                    tokio::time::sleep(backoff_delay(attempt, self.timeout_ms)).await;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Splits after every `.`, `!` or `?` that is followed by whitespace or the
/// end of the text. The whitespace run after a terminator becomes that
/// segment's separator, so joining text and separators gives back the input.
pub fn segment_story(text: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let end = i + c.len_utf8();
        match chars.peek() {
            Some((_, next)) if !next.is_whitespace() => continue,
            _ => {}
        }
        let mut sep_end = end;
        while let Some(&(j, w)) = chars.peek() {
            if !w.is_whitespace() {
                break;
            }
            sep_end = j + w.len_utf8();
            chars.next();
        }
        segments.push(Segment {
            index: segments.len(),
            text: text[start..end].to_string(),
            trailing_separator: text[end..sep_end].to_string(),
        });
        start = sep_end;
    }
    if start < text.len() {
        segments.push(Segment {
            index: segments.len(),
            text: text[start..].to_string(),
            trailing_separator: String::new(),
        });
    }
    segments
}

pub(crate) fn check_mode(prompt: &PromptBundle, mode: StoryMode) -> Result<()> {
    let expected = match mode {
        StoryMode::Kts => PromptMode::Kts,
        StoryMode::ImagetalkAuto | StoryMode::ImagetalkSteered => PromptMode::Imagetalk,
    };
    if prompt.mode != expected {
        return Err(Error::Precondition(format!(
            "story mode {mode} needs a {expected:?} prompt"
        )));
    }
    Ok(())
}

/// Runs `prompt` through `backend` and appends the result to `session` as
/// its next version. On any error the session is left untouched.
pub async fn generate_story<'s>(
    backend: &dyn LlmBackend,
    prompt: &PromptBundle,
    session: &'s mut Session,
    mode: StoryMode,
    parent_version: Option<u64>,
) -> Result<&'s StoryVersion> {
    check_mode(prompt, mode)?;
    if let Some(p) = parent_version {
        if session.story(p).is_none() {
            return Err(Error::VersionNotFound(p));
        }
    }
    let text = backend.complete(prompt).await?;
    if text.trim().is_empty() {
        return Err(Error::EmptyCompletion);
    }
    let story = StoryVersion {
        version: session.next_version(),
        segments: segment_story(&text),
        text,
        mode,
        prompt_hash: prompt.hash.clone(),
        parent_version,
        created_at: Utc::now(),
    };
    session.append_story_version(story)?;
    Ok(session.latest_story().expect("just appended"))
}
