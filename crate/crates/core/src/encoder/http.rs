//! Client for the external encoder service.
//!
//! Wire protocol (JSON over HTTP):
//! - `GET  /v1/info`        -> `{"model_id": str, "dim": int}`
//! - `POST /v1/embed_text`  `{"texts": [str]}`  -> `{"dim": D, "embeddings": [[f64; D]]}`
//! - `POST /v1/embed_image` `{"images": [base64]}` -> same response shape
//!
//! Requests are split into batches; at most `max_in_flight` batches are
//! outstanding at once and each is retried on transport failures and 5xx
//! responses. Results are reassembled in request order.

use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{DualEncoder, Embedding, EncoderError, FrameContent};

#[derive(Debug, Clone)]
pub struct HttpClientConfig {
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub attempts: usize,
    pub timeout: Duration,
    pub backoff: Duration,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        HttpClientConfig {
            batch_size: 64,
            max_in_flight: 4,
            attempts: 3,
            timeout: Duration::from_secs(60),
            backoff: Duration::from_millis(100),
        }
    }
}

/// Minimal JSON-over-HTTP client with batch fan-out and retries.
#[derive(Debug, Clone)]
pub(crate) struct JsonClient {
    base: String,
    agent: ureq::Agent,
    pub(crate) cfg: HttpClientConfig,
}

impl JsonClient {
    pub(crate) fn new(endpoint: &str, cfg: HttpClientConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        JsonClient {
            base: endpoint.trim_end_matches('/').to_owned(),
            agent,
            cfg,
        }
    }

    fn classify(batch: usize, err: ureq::Error) -> EncoderError {
        let retryable = matches!(
            err,
            ureq::Error::Io(_)
                | ureq::Error::Timeout(_)
                | ureq::Error::ConnectionFailed
                | ureq::Error::HostNotFound
                | ureq::Error::BodyStalled
        );
        EncoderError::Transport {
            batch,
            message: err.to_string(),
            retryable,
        }
    }

    fn once<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: Option<&B>,
        batch: usize,
    ) -> Result<R, EncoderError> {
        let url = format!("{}{}", self.base, path);
        let resp = match body {
            Some(b) => self.agent.post(&url).send_json(b),
            None => self.agent.get(&url).call(),
        };
        let mut resp = resp.map_err(|e| Self::classify(batch, e))?;
        let status = resp.status().as_u16();
        if status != 200 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(EncoderError::Transport {
                batch,
                message: format!("HTTP {status} from {path}: {}", text.trim()),
                retryable: status >= 500,
            });
        }
        resp.body_mut()
            .read_json::<R>()
            .map_err(|e| EncoderError::Protocol(format!("{path}: {e}")))
    }

    pub(crate) fn call<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: Option<&B>,
        batch: usize,
    ) -> Result<R, EncoderError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.once(path, body, batch) {
                Err(e) if e.is_retryable() && attempt < self.cfg.attempts.max(1) => {
                    log::warn!("{e}; retrying ({attempt}/{})", self.cfg.attempts);
                    thread::sleep(self.cfg.backoff * attempt as u32);
                }
                other => return other,
            }
        }
    }

    /// Posts one request per batch, keeping at most `max_in_flight` in the
    /// air, and returns responses in batch order.
    pub(crate) fn fan_out<B, R>(&self, path: &str, batches: Vec<B>) -> Result<Vec<R>, EncoderError>
    where
        B: Serialize + Sync,
        R: DeserializeOwned + Send,
    {
        let mut out = Vec::with_capacity(batches.len());
        let width = self.cfg.max_in_flight.max(1);
        for (wave_idx, wave) in batches.chunks(width).enumerate() {
            let results: Vec<Result<R, EncoderError>> = thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .enumerate()
                    .map(|(i, body)| {
                        let batch = wave_idx * width + i;
                        scope.spawn(move || self.call::<B, R>(path, Some(body), batch))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("request thread panicked"))
                    .collect()
            });
            for r in results {
                out.push(r?);
            }
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct TextRequest<'a> {
    texts: &'a [String],
}

#[derive(Serialize)]
struct ImageRequest {
    images: Vec<String>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize, Serialize, PartialEq)]
pub struct ServiceInfo {
    pub model_id: String,
    pub dim: usize,
}

/// [`DualEncoder`] backed by the encoder service.
#[derive(Debug, Clone)]
pub struct HttpEncoder {
    client: JsonClient,
    info: ServiceInfo,
}

impl HttpEncoder {
    /// Queries `/v1/info` once to learn the model id and dimension.
    pub fn connect(endpoint: &str, cfg: HttpClientConfig) -> Result<Self, EncoderError> {
        let client = JsonClient::new(endpoint, cfg);
        let info: ServiceInfo = client.call::<(), _>("/v1/info", None, 0)?;
        if info.dim == 0 {
            return Err(EncoderError::Protocol("service reports dim 0".into()));
        }
        Ok(HttpEncoder { client, info })
    }

    pub fn info(&self) -> &ServiceInfo {
        &self.info
    }

    fn collect(&self, responses: Vec<EmbedResponse>, expected: usize) -> Result<Vec<Embedding>, EncoderError> {
        let mut out = Vec::with_capacity(expected);
        for resp in responses {
            if resp.dim != self.info.dim {
                return Err(EncoderError::DimensionMismatch {
                    expected: self.info.dim,
                    found: resp.dim,
                });
            }
            for values in resp.embeddings {
                if values.len() != self.info.dim {
                    return Err(EncoderError::DimensionMismatch {
                        expected: self.info.dim,
                        found: values.len(),
                    });
                }
                out.push(Embedding::from_unit(values)?);
            }
        }
        if out.len() != expected {
            return Err(EncoderError::Protocol(format!(
                "requested {expected} embeddings, received {}",
                out.len()
            )));
        }
        Ok(out)
    }
}

impl DualEncoder for HttpEncoder {
    fn id(&self) -> String {
        format!("http:{}", self.info.model_id)
    }

    fn dim(&self) -> usize {
        self.info.dim
    }

    fn embed_text(&self, texts: &[String]) -> Result<Vec<Embedding>, EncoderError> {
        let size = self.client.cfg.batch_size.max(1);
        let batches: Vec<TextRequest<'_>> = texts.chunks(size).map(|texts| TextRequest { texts }).collect();
        let responses = self.client.fan_out("/v1/embed_text", batches)?;
        self.collect(responses, texts.len())
    }

    fn embed_frames(&self, frames: &[FrameContent]) -> Result<Vec<Embedding>, EncoderError> {
        let engine = base64::engine::general_purpose::STANDARD;
        let encoded = frames
            .iter()
            .map(|f| match f {
                FrameContent::Image(bytes) => Ok(engine.encode(bytes)),
                FrameContent::Tokens(_) => Err(EncoderError::Unsupported(
                    "the encoder service only accepts image frames".into(),
                )),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let size = self.client.cfg.batch_size.max(1);
        let batches: Vec<ImageRequest> = encoded
            .chunks(size)
            .map(|c| ImageRequest { images: c.to_vec() })
            .collect();
        let responses = self.client.fan_out("/v1/embed_image", batches)?;
        self.collect(responses, frames.len())
    }
}
