//! HTTP inference service for template suggestions, plus the open-loop
//! load generator used to characterize it.

pub mod api;
pub mod backend;
pub mod loadgen;
pub mod server;

pub use api::{ContextMessage, PredictRequest, PredictResponse};
pub use backend::{Backend, BackendError, MockBackend, ModelBackend};
pub use server::{AppState, ServeConfig};
