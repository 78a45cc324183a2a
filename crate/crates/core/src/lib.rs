//! Workbench for turning small decoder-only language models into template
//! classifiers: domain-adaptive pre-training, discriminative fine-tuning,
//! scaling measurements, latency reporting and online selection-time
//! analytics.

pub mod abtest;
pub mod checkpoint;
pub mod corpus;
pub mod hashing;
pub mod latency;
pub mod model;
pub mod nn;
pub mod plot;
pub mod scaling;
pub mod tokenizer;
pub mod train;
