//! Client for an external embedding service, for swapping a hosted model
//! into the same retrieval pipeline. Texts go out in fixed-size batches as
//! `{"input": [...], "task": header}` and come back as `{"embeddings":
//! [[...], ...]}`; responses are L2-normalized and returned in input
//! order. Transport failures and 5xx answers are retried a bounded number
//! of times with linear backoff; 4xx answers fail immediately.

use serde::{Deserialize, Serialize};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    /// Sent as `Authorization: Bearer <token>` when present.
    pub bearer_token: Option<String>,
    pub batch_size: usize,
    /// Extra attempts after the first, per batch.
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            bearer_token: None,
            batch_size: 16,
            max_retries: 2,
            backoff_ms: 200,
            timeout_ms: 10_000,
        }
    }
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("embedding request failed: {0}")]
    Network(String),
    #[error("malformed embedding response: {0}")]
    Schema(String),
    #[error("embedding {index} has dimension {got}, expected {expected}")]
    Dimension {
        index: usize,
        expected: usize,
        got: usize,
    },
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Embed `texts` under one instruction header. Batches are sent
/// sequentially and results keep the input order; the first returned
/// vector fixes the expected dimension for the whole call.
pub fn remote_embed(
    config: &EndpointConfig,
    task_header: &str,
    texts: &[String],
) -> Result<Vec<Vec<f32>>, RemoteError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    if config.batch_size == 0 {
        return Err(RemoteError::Network("batch_size must be positive".into()));
    }
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(config.timeout_ms))
        .build()
        .map_err(|e| RemoteError::Network(e.to_string()))?;

    let mut out: Vec<Vec<f32>> = Vec::with_capacity(texts.len());
    let mut expected_dim: Option<usize> = None;
    for batch in texts.chunks(config.batch_size) {
        let response = post_batch(config, &client, task_header, batch)?;
        if response.embeddings.len() != batch.len() {
            return Err(RemoteError::Schema(format!(
                "{} embeddings for {} inputs",
                response.embeddings.len(),
                batch.len()
            )));
        }
        for vector in response.embeddings {
            let index = out.len();
            let expected = *expected_dim.get_or_insert(vector.len());
            if vector.len() != expected {
                return Err(RemoteError::Dimension {
                    index,
                    expected,
                    got: vector.len(),
                });
            }
            out.push(normalize(&vector, index)?);
        }
    }
    Ok(out)
}

fn post_batch(
    config: &EndpointConfig,
    client: &reqwest::blocking::Client,
    task_header: &str,
    batch: &[String],
) -> Result<EmbedResponse, RemoteError> {
    let body = serde_json::json!({ "input": batch, "task": task_header });
    let mut attempt = 0u32;
    loop {
        let mut request = client.post(&config.url).json(&body);
        if let Some(token) = &config.bearer_token {
            request = request.bearer_auth(token);
        }
        let failure = match request.send() {
            Ok(response) => {
                let status = response.status();
                if status.is_success() {
                    return response
                        .json::<EmbedResponse>()
                        .map_err(|e| RemoteError::Schema(e.to_string()));
                }
                if status.is_server_error() {
                    format!("status {status}")
                } else {
                    return Err(RemoteError::Network(format!("status {status}")));
                }
            }
            Err(e) => e.to_string(),
        };
        if attempt >= config.max_retries {
            return Err(RemoteError::Network(format!(
                "{failure} after {attempt} retries"
            )));
        }
        attempt += 1;
        std::thread::sleep(Duration::from_millis(config.backoff_ms * u64::from(attempt)));
    }
}

fn normalize(vector: &[f64], index: usize) -> Result<Vec<f32>, RemoteError> {
    let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= 0.0 {
        return Err(RemoteError::Schema(format!(
            "embedding {index} is not normalizable (norm {norm})"
        )));
    }
    Ok(vector.iter().map(|x| (x / norm) as f32).collect())
}
