//! Per-record attempt loop.

use std::future::Future;
use std::time::Duration;

use indexmap::IndexMap;
use serde_json::Value;

use super::{RecordResult, RecordStatus};
use crate::output::parse_response;
use crate::provider::{prompt_chars, ChatBackend};
use crate::schema::ExtractionField;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub retry_delay: Duration,
}

impl RetryPolicy {
    pub fn new(max_retries: u32, retry_delay: Duration) -> Self {
        Self {
            max_retries,
            retry_delay,
        }
    }

    pub fn max_attempts(&self) -> u32 {
        self.max_retries.saturating_add(1)
    }
}

/// A reply that parsed and validated.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptSuccess {
    pub extracted: IndexMap<String, Value>,
    pub raw_response: String,
    pub input_chars: usize,
    pub output_chars: usize,
}

/// A failed attempt: transport error, HTTP error, or a reply that did not
/// validate.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptFailure {
    pub error: String,
    pub raw_response: String,
    pub input_chars: usize,
    pub output_chars: usize,
}

/// Runs `call` up to `1 + max_retries` times, sleeping `retry_delay`
/// between attempts. `call` receives the 1-based attempt number.
pub async fn attempt_with_retry<F, Fut>(row_index: usize, policy: RetryPolicy, call: F) -> RecordResult
where
    F: FnMut(u32) -> Fut,
    Fut: Future<Output = Result<AttemptSuccess, AttemptFailure>>,
{
    attempt_with_retry_gated(row_index, policy, call, || async {}).await
}

/// Like [`attempt_with_retry`], awaiting `gate` before every retry so a
/// paused engine holds back retries too.
pub(crate) async fn attempt_with_retry_gated<F, Fut, G, GFut>(
    row_index: usize,
    policy: RetryPolicy,
    mut call: F,
    mut gate: G,
) -> RecordResult
where
    F: FnMut(u32) -> Fut,
    Fut: Future<Output = Result<AttemptSuccess, AttemptFailure>>,
    G: FnMut() -> GFut,
    GFut: Future<Output = ()>,
{
    let mut attempt = 1;
    loop {
        match call(attempt).await {
            Ok(ok) => {
                return RecordResult {
                    row_index,
                    status: RecordStatus::Success,
                    extracted: ok.extracted,
                    raw_response: ok.raw_response,
                    error: None,
                    attempts: attempt,
                    input_chars: ok.input_chars,
                    output_chars: ok.output_chars,
                }
            }
            Err(fail) if attempt >= policy.max_attempts() => {
                return RecordResult {
                    row_index,
                    status: RecordStatus::Failed,
                    extracted: IndexMap::new(),
                    raw_response: fail.raw_response,
                    error: Some(fail.error),
                    attempts: attempt,
                    input_chars: fail.input_chars,
                    output_chars: fail.output_chars,
                }
            }
            Err(fail) => {
                tracing::debug!(row_index, attempt, error = %fail.error, "attempt failed, retrying");
                if !policy.retry_delay.is_zero() {
                    tokio::time::sleep(policy.retry_delay).await;
                }
                gate().await;
                attempt += 1;
            }
        }
    }
}

/// One request plus parsing and validation.
pub async fn extract_once(
    backend: &dyn ChatBackend,
    system: &str,
    user: &str,
    fields: &[ExtractionField],
) -> Result<AttemptSuccess, AttemptFailure> {
    match backend.complete(system, user).await {
        Ok(exchange) => match parse_response(&exchange.response_text, fields) {
            Ok(parsed) => Ok(AttemptSuccess {
                extracted: parsed.values,
                raw_response: exchange.response_text,
                input_chars: exchange.input_chars,
                output_chars: exchange.output_chars,
            }),
            Err(e) => Err(AttemptFailure {
                error: e.to_string(),
                raw_response: exchange.response_text,
                input_chars: exchange.input_chars,
                output_chars: exchange.output_chars,
            }),
        },
        Err(e) => Err(AttemptFailure {
            error: e.to_string(),
            raw_response: String::new(),
            input_chars: prompt_chars(system, user),
            output_chars: 0,
        }),
    }
}
