//! The model boundary.
//!
//! A backend answers the two model touches of the method: stochastic
//! multi-sampling on the full screenshot and one deterministic pass on the
//! zoomed crop. [`http::ChatCompletionsBackend`] speaks the OpenAI-compatible
//! chat-completions dialect; [`oracle::OracleBackend`] is a seeded simulator
//! around a known target used for offline verification.

pub mod http;
pub mod oracle;

use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crop::Axes;
use crate::geometry::{ImageDims, PixelBox, PixelPoint};
use crate::imaging::Screenshot;
use crate::parsing::CompletionRecord;

pub use http::{ChatCompletionsBackend, HttpBackendConfig};
pub use oracle::{ConfidenceModel, OracleBackend, OracleConfig};

#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "snake_case")]
pub enum BackendError {
    /// Connection failure or timeout.
    #[error("transport error: {0}")]
    Transport(String),
    /// The server answered with something we cannot use.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Server overloaded (429/503).
    #[error("server at capacity: {0}")]
    Capacity(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::Capacity(_))
    }

    pub fn code(&self) -> &'static str {
        match self {
            BackendError::Transport(_) => "backend.transport",
            BackendError::Protocol(_) => "backend.protocol",
            BackendError::Capacity(_) => "backend.capacity",
            BackendError::Config(_) => "backend.config",
        }
    }
}

/// Where the image sent to the model sits in the original screenshot:
/// `sent = (global - origin) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    pub origin: PixelPoint,
    pub scale: Axes,
    pub global_dims: ImageDims,
}

impl ViewTransform {
    pub fn identity(dims: ImageDims) -> Self {
        Self {
            origin: PixelPoint::new(0.0, 0.0),
            scale: Axes::new(1.0, 1.0),
            global_dims: dims,
        }
    }

    pub fn to_sent(&self, b: &PixelBox) -> PixelBox {
        b.translate(-self.origin.x, -self.origin.y)
            .scale(self.scale.x, self.scale.y)
    }

    pub fn to_global(&self, b: &PixelBox) -> PixelBox {
        b.scale(1.0 / self.scale.x, 1.0 / self.scale.y)
            .translate(self.origin.x, self.origin.y)
    }
}

#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub image: Arc<Screenshot>,
    pub prompt: String,
    pub temperature: f64,
    pub n: usize,
    pub want_logprobs: bool,
    pub seed: Option<u64>,
    pub view: ViewTransform,
}

impl SampleRequest {
    /// The single deterministic completion request used for refinement.
    pub fn deterministic(image: Arc<Screenshot>, prompt: String, seed: Option<u64>, view: ViewTransform) -> Self {
        Self {
            image,
            prompt,
            temperature: 0.0,
            n: 1,
            want_logprobs: true,
            seed,
            view,
        }
    }
}

/// Completions of one sampling call, in completion-index order, plus errors
/// for completions the server failed to produce.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleBatch {
    pub completions: Vec<CompletionRecord>,
    pub failures: Vec<BackendError>,
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    async fn sample(&self, req: &SampleRequest) -> Result<SampleBatch, BackendError>;

    async fn infer_deterministic(&self, req: &SampleRequest) -> Result<CompletionRecord, BackendError>;
}
