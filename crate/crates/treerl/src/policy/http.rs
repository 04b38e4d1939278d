//! Client for OpenAI-compatible `/v1/completions` endpoints.
//!
//! Each request asks for `logprobs=1`; the sampled tokens' log-probabilities
//! become surprisals. Servers that report tokens as `token_id:N` strings give
//! exact ids; otherwise ids are an FNV-1a hash of the token text.

use super::{BackendError, Continuation, FinishReason, GenParams, HttpErrorKind, PolicyBackend};
use crate::gentree::{Prompt, TokenRecord};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::time::Duration;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub send_seed: bool,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/completions".into(),
            model: "default".into(),
            api_key_env: "TREERL_API_KEY".into(),
            timeout_secs: 600.0,
            max_attempts: 3,
            backoff_ms: 500,
            send_seed: true,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

fn err(kind: HttpErrorKind, message: impl Into<String>) -> BackendError {
    BackendError::Http { kind, message: message.into() }
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| err(HttpErrorKind::Transport, e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self { config, client, api_key })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn request_body(&self, prompt_text: &str, params: &GenParams, max_tokens: usize) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "prompt": prompt_text,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": max_tokens,
            "logprobs": 1,
        });
        if self.config.send_seed {
            body["seed"] = json!(params.seed);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<Value, (bool, BackendError)> {
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            let kind = if e.is_timeout() { HttpErrorKind::Timeout } else { HttpErrorKind::Transport };
            (true, err(kind, e.to_string()))
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| (true, err(HttpErrorKind::Transport, e.to_string())))?;
        if !status.is_success() {
            let retry = status.is_server_error() || status.as_u16() == 429;
            return Err((retry, err(HttpErrorKind::Status, format!("HTTP {status}: {text}"))));
        }
        serde_json::from_str(&text).map_err(|e| (false, err(HttpErrorKind::MalformedJson, e.to_string())))
    }

    /// Request a completion of `prompt_text + prefix_text`.
    pub fn complete(
        &self,
        prompt_text: &str,
        prefix_text: &str,
        params: &GenParams,
        max_tokens: usize,
    ) -> Result<Continuation, BackendError> {
        params.validate()?;
        let body = self.request_body(&format!("{prompt_text}{prefix_text}"), params, max_tokens);
        let attempts = self.config.max_attempts.max(1);
        let mut last = None;
        for i in 0..attempts {
            if i > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (i - 1)));
            }
            match self.attempt(&body) {
                Ok(v) => return parse_completion(&v),
                Err((true, e)) => {
                    log::warn!("completion attempt {} of {attempts} failed: {e}", i + 1);
                    last = Some(e);
                }
                Err((false, e)) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

impl PolicyBackend for HttpBackend {
    fn sample_continuation(
        &self,
        prompt: &Prompt,
        prefix: &[TokenRecord],
        params: &GenParams,
    ) -> Result<Continuation, BackendError> {
        let prefix_text: String = prefix.iter().map(|t| t.text.as_deref().unwrap_or("")).collect();
        let max_tokens = params.max_new_tokens.saturating_sub(prefix.len()).max(1);
        self.complete(&prompt.text, &prefix_text, params, max_tokens)
    }
}

/// Token id for a returned token string.
pub fn token_id_of(text: &str) -> u32 {
    if let Some(id) = text.strip_prefix("token_id:").and_then(|s| s.parse().ok()) {
        return id;
    }
    let mut h: u32 = 0x811C_9DC5;
    for b in text.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h & 0x7FFF_FFFF
}

/// Parse the first choice of a completions response.
pub fn parse_completion(v: &Value) -> Result<Continuation, BackendError> {
    let malformed = |m: &str| err(HttpErrorKind::MalformedJson, m);
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| malformed("response has no choices"))?;
    let missing = || err(HttpErrorKind::MissingLogprobs, "response carries no token logprobs");
    let lp = choice.get("logprobs").filter(|l| !l.is_null()).ok_or_else(missing)?;
    let tokens = lp.get("tokens").and_then(Value::as_array).ok_or_else(missing)?;
    let logprobs = lp.get("token_logprobs").and_then(Value::as_array).ok_or_else(missing)?;
    if tokens.len() != logprobs.len() {
        return Err(malformed("tokens and token_logprobs differ in length"));
    }
    let mut out = Vec::with_capacity(tokens.len());
    for (t, l) in tokens.iter().zip(logprobs) {
        let text = t.as_str().ok_or_else(|| malformed("token is not a string"))?;
        let l = l.as_f64().ok_or_else(missing)?;
        if !l.is_finite() {
            return Err(malformed("non-finite logprob"));
        }
        let mut rec = TokenRecord::new(token_id_of(text), (-l).max(0.0));
        rec.text = Some(text.to_string());
        out.push(rec);
    }
    if out.is_empty() {
        return Err(malformed("empty completion"));
    }
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Length,
        _ => FinishReason::EndToken,
    };
    Ok(Continuation { tokens: out, terminal: true, finish_reason })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_token_ids_are_used() {
        assert_eq!(token_id_of("token_id:4521"), 4521);
        assert_ne!(token_id_of("Hello"), token_id_of("hello"));
    }

    #[test]
    fn length_finish_maps_to_length() {
        let v = json!({"choices":[{"text":"ab","finish_reason":"length",
            "logprobs":{"tokens":["a","b"],"token_logprobs":[-0.5,-1.25]}}]});
        let c = parse_completion(&v).unwrap();
        assert_eq!(c.finish_reason, FinishReason::Length);
        assert!(c.terminal);
        assert_eq!(c.tokens[1].surprisal, 1.25);
    }

    #[test]
    fn missing_logprobs_detected() {
        let v = json!({"choices":[{"text":"ab","finish_reason":"stop","logprobs":null}]});
        assert!(parse_completion(&v).unwrap_err().is_missing_logprobs());
        let v = json!({"choices":[{"text":"ab","finish_reason":"stop"}]});
        assert!(parse_completion(&v).unwrap_err().is_missing_logprobs());
    }
}
