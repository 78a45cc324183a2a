use std::time::Duration;

use quicktext::checkpoint::ClassifierArtifact;
use quicktext::corpus::truncate_context;
use quicktext::model::TokenBatch;
use quicktext::tokenizer::Vocab;
use quicktext::train::top_k;
use thiserror::Error;

use crate::api::PredictRequest;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("model failure: {0}")]
    Model(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub template_ids: Vec<u32>,
    pub probabilities: Vec<f64>,
}

/// Something that scores a conversation context against the catalog.
/// Calls are serialized on one worker thread.
pub trait Backend: Send {
    fn model_version(&self) -> String;
    fn catalog_size(&self) -> usize;
    fn predict(&mut self, req: &PredictRequest, k: usize) -> Result<Scored, BackendError>;
}

/// Softmax in f64 over the full row.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub struct ModelBackend {
    artifact: ClassifierArtifact,
    vocab: Vocab,
    max_len: usize,
    version: String,
}

impl ModelBackend {
    pub fn new(artifact: ClassifierArtifact, vocab: Vocab, max_len: usize) -> Result<Self, BackendError> {
        if artifact.vocab_hash != vocab.hash() {
            return Err(BackendError::Model("vocabulary does not match the checkpoint".into()));
        }
        let version = artifact.version().map_err(|e| BackendError::Model(e.to_string()))?;
        let max_len = max_len.min(artifact.classifier.model.config().context_length);
        Ok(Self {
            artifact,
            vocab,
            max_len,
            version,
        })
    }

    /// Token ids the model sees for a request: prefix-free message texts,
    /// newest kept, oldest dropped first.
    pub fn context_ids(&self, req: &PredictRequest) -> Result<Vec<u32>, BackendError> {
        encode_request(req, self.max_len, &self.vocab)
    }
}

pub fn encode_request(req: &PredictRequest, max_len: usize, vocab: &Vocab) -> Result<Vec<u32>, BackendError> {
    let texts: Vec<&str> = req.messages.iter().map(|m| m.text.as_str()).collect();
    truncate_context(&texts, max_len, vocab).map_err(|e| BackendError::BadRequest(e.to_string()))
}

impl Backend for ModelBackend {
    fn model_version(&self) -> String {
        self.version.clone()
    }

    fn catalog_size(&self) -> usize {
        self.artifact.classifier.n_classes()
    }

    fn predict(&mut self, req: &PredictRequest, k: usize) -> Result<Scored, BackendError> {
        let ids = self.context_ids(req)?;
        let batch = TokenBatch::padded(&[&ids], 0).map_err(|e| BackendError::BadRequest(e.to_string()))?;
        let logits = self
            .artifact
            .classifier
            .forward_classify(&batch)
            .map_err(|e| BackendError::Model(e.to_string()))?;
        let row = logits.row(0);
        let probs = softmax(row);
        let ids = top_k(row, k);
        Ok(Scored {
            probabilities: ids.iter().map(|&i| probs[i]).collect(),
            template_ids: ids.into_iter().map(|i| i as u32).collect(),
        })
    }
}

/// Fixed service time per request; answers with the first `k` templates.
pub struct MockBackend {
    pub service_time: Duration,
    pub catalog_size: usize,
}

impl Backend for MockBackend {
    fn model_version(&self) -> String {
        format!("mock-{}ms", self.service_time.as_millis())
    }

    fn catalog_size(&self) -> usize {
        self.catalog_size
    }

    fn predict(&mut self, _req: &PredictRequest, k: usize) -> Result<Scored, BackendError> {
        std::thread::sleep(self.service_time);
        let z: f64 = (1..=self.catalog_size).map(|r| 1.0 / r as f64).sum();
        Ok(Scored {
            template_ids: (0..k as u32).collect(),
            probabilities: (1..=k).map(|r| 1.0 / r as f64 / z).collect(),
        })
    }
}
