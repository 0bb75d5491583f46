//! Dual-encoder abstraction: unit-norm text and frame embeddings and the
//! scaled-cosine matching score between them.

mod http;
mod toy;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use http::{HttpClientConfig, HttpEncoder, ServiceInfo};
pub(crate) use http::JsonClient;
pub use toy::{ToyEncoder, TOY_DIM};

/// Tolerance on the unit-norm invariant.
pub const NORM_TOL: f64 = 1e-5;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("batch {batch}: {message}")]
    Transport {
        batch: usize,
        message: String,
        retryable: bool,
    },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("unsupported input: {0}")]
    Unsupported(String),
}

impl EncoderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EncoderError::Transport { retryable: true, .. })
    }
}

/// Either unit-norm (within [`NORM_TOL`]) or the all-zero sentinel for
/// empty input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values`; an all-zero vector stays zero.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = l2(&values);
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Embedding(values)
    }

    /// Accepts values that already satisfy the invariant.
    pub fn from_unit(values: Vec<f64>) -> Result<Self, EncoderError> {
        let norm = l2(&values);
        if norm != 0.0 && (norm - 1.0).abs() > NORM_TOL {
            return Err(EncoderError::Protocol(format!(
                "embedding norm {norm} is neither 1 nor 0"
            )));
        }
        Ok(Embedding(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// Cosine similarity; 0 when either side is the zero vector.
    pub fn cosine(&self, other: &Embedding) -> Result<f64, EncoderError> {
        if self.dim() != other.dim() {
            return Err(EncoderError::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let (na, nb) = (self.norm(), other.norm());
        if na == 0.0 || nb == 0.0 {
            return Ok(0.0);
        }
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        Ok(dot / (na * nb))
    }
}

fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// What a frame looks like to an encoder: a bag of visible tokens (desk
/// mode) or encoded image bytes (sidecar mode).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameContent {
    Tokens(Vec<String>),
    Image(Vec<u8>),
}

impl FrameContent {
    pub fn tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        FrameContent::Tokens(tokens.iter().map(|t| t.as_ref().to_owned()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    temperature: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { temperature: 0.01 }
    }
}

impl MatchConfig {
    pub fn new(temperature: f64) -> Result<Self, EncoderError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(EncoderError::Unsupported(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(MatchConfig { temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

pub trait DualEncoder: Send + Sync {
    /// Stable identifier, part of every semantics cache key.
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    fn embed_text(&self, texts: &[String]) -> Result<Vec<Embedding>, EncoderError>;

    fn embed_frames(&self, frames: &[FrameContent]) -> Result<Vec<Embedding>, EncoderError>;
}

/// `S[i][j] = cosine(frame_i, text_j) / temperature`.
pub fn match_scores(
    frames: &[Embedding],
    texts: &[Embedding],
    cfg: &MatchConfig,
) -> Result<Array2<f64>, EncoderError> {
    let mut out = Array2::zeros((frames.len(), texts.len()));
    for (i, f) in frames.iter().enumerate() {
        for (j, t) in texts.iter().enumerate() {
            out[[i, j]] = f.cosine(t)? / cfg.temperature;
        }
    }
    Ok(out)
}
