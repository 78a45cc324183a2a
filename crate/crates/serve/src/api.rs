//! Wire types for the HTTP API.

use quicktext::abtest::Group;
use quicktext::corpus::{Role, Transcript};
use serde::{Deserialize, Serialize};

pub const DEFAULT_K: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextMessage {
    pub role: Role,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub case_id: String,
    /// Oldest first.
    pub messages: Vec<ContextMessage>,
    #[serde(default)]
    pub k: Option<usize>,
}

impl PredictRequest {
    /// The request a client would send just before the advocate writes
    /// message `reply_index` of `t`.
    pub fn from_transcript(t: &Transcript, reply_index: usize, k: Option<usize>) -> Self {
        Self {
            case_id: t.case_id.clone(),
            messages: t.messages[..reply_index.min(t.messages.len())]
                .iter()
                .map(|m| ContextMessage {
                    role: m.role,
                    text: m.text.clone(),
                })
                .collect(),
            k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub case_id: String,
    pub template_ids: Vec<u32>,
    pub probabilities: Vec<f64>,
    pub model_version: String,
    /// Whether the client should render the suggestions.
    pub group: Group,
    pub latency_ms: f64,
    pub model_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: Option<String>,
    pub catalog_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventsAccepted {
    pub accepted: usize,
}
