//! Token-generation backends.
//!
//! A [`PolicyBackend`] samples a continuation of `prompt + prefix` and reports
//! each sampled token's surprisal under the untempered model distribution, so
//! fork selection ranks model uncertainty rather than sampler noise.

pub mod fixed;
pub mod http;
pub mod sampling;
pub mod synth;

pub use fixed::FixedLengthBackend;
pub use http::{HttpBackend, HttpConfig};
pub use synth::{
    surrogate_gradient, surrogate_objective, ChainSum, Ctx, GradEvent, SnapshotError, SynthInit, SynthPolicy,
    UpdateError, UpdateStats,
};

use crate::gentree::{Prompt, TokenRecord};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl GenParams {
    pub fn synthetic() -> Self {
        Self { temperature: 1.2, top_p: 0.95, max_new_tokens: 64, seed: 0 }
    }

    pub fn http() -> Self {
        Self { max_new_tokens: 8192, ..Self::synthetic() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidParams(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidParams(format!("top_p {} must lie in (0, 1]", self.top_p)));
        }
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidParams("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

impl Default for GenParams {
    fn default() -> Self {
        Self::synthetic()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    EndToken,
    Length,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Continuation {
    pub tokens: Vec<TokenRecord>,
    pub terminal: bool,
    pub finish_reason: FinishReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HttpErrorKind {
    Transport,
    Status,
    Timeout,
    MalformedJson,
    MissingLogprobs,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("token {token} outside vocabulary of size {vocab}")]
    Vocab { token: u32, vocab: usize },
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("backend request failed ({kind:?}): {message}")]
    Http { kind: HttpErrorKind, message: String },
    #[error("backend error: {0}")]
    Other(String),
}

impl BackendError {
    pub fn is_missing_logprobs(&self) -> bool {
        matches!(self, BackendError::Http { kind: HttpErrorKind::MissingLogprobs, .. })
    }
}

pub trait PolicyBackend: Send + Sync {
    fn sample_continuation(
        &self,
        prompt: &Prompt,
        prefix: &[TokenRecord],
        params: &GenParams,
    ) -> Result<Continuation, BackendError>;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradeError {
    #[error("sequence does not end with the end token")]
    NotTerminal,
    #[error("token {token} outside vocabulary of size {vocab}")]
    Vocab { token: u32, vocab: usize },
    #[error("cannot grade prompt: {0}")]
    BadPrompt(String),
}

/// Outcome check for a complete response.
pub trait Grader: Send + Sync {
    fn grade(&self, prompt: &Prompt, response: &[TokenRecord]) -> Result<bool, GradeError>;
}

impl<F> Grader for F
where
    F: Fn(&Prompt, &[TokenRecord]) -> Result<bool, GradeError> + Send + Sync,
{
    fn grade(&self, prompt: &Prompt, response: &[TokenRecord]) -> Result<bool, GradeError> {
        self(prompt, response)
    }
}
