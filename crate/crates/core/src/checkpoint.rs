//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `QTCKPT01`, a little-endian `u32` manifest
//! length, the JSON manifest, then every tensor listed in the manifest as
//! little-endian `f32` values in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;
use crate::model::{Classifier, ClassifierHead, DecoderModel, ModelConfig, ModelError, ParamSet};
use crate::nn::{AdamWState, Tensor};

const MAGIC: &[u8; 8] = b"QTCKPT01";
const FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("bad manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Backbone,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_peak: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub kind: ArtifactKind,
    pub config: ModelConfig,
    pub step: u64,
    pub tokens_seen: u64,
    pub vocab_hash: String,
    pub train_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub n_classes: Option<usize>,
    pub optimizer: Option<OptimizerMeta>,
    pub tensors: Vec<TensorMeta>,
}

/// A manifest plus its named tensors, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f32>>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.manifest.tensors.len() != self.tensors.len() {
            return Err(CheckpointError::Corrupt("manifest and tensor counts differ".into()));
        }
        for (m, t) in self.manifest.tensors.iter().zip(&self.tensors) {
            if m.shape != t.shape() {
                return Err(CheckpointError::Corrupt(format!("shape of {} differs from manifest", m.name)));
            }
        }
        let manifest = serde_json::to_vec(&self.manifest)?;
        let n: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(12 + manifest.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Corrupt("missing magic".into()));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < mlen {
            return Err(CheckpointError::Corrupt("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])?;
        if manifest.format != FORMAT {
            return Err(CheckpointError::Corrupt(format!("unsupported format {}", manifest.format)));
        }
        let mut data = &body[mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for m in &manifest.tensors {
            let n: usize = m.shape.iter().product();
            if data.len() < 4 * n {
                return Err(CheckpointError::Corrupt(format!("truncated tensor {}", m.name)));
            }
            let values = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            data = &data[4 * n..];
            let t = Tensor::new(&m.shape, values)
                .map_err(|e| CheckpointError::Corrupt(format!("tensor {}: {e}", m.name)))?;
            tensors.push(t);
        }
        if !data.is_empty() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", data.len())));
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn take_params(&self, prefix_filter: impl Fn(&str) -> bool) -> ParamSet<f32> {
        let mut p = ParamSet::new();
        for (m, t) in self.manifest.tensors.iter().zip(&self.tensors) {
            if prefix_filter(&m.name) {
                p.push(m.name.clone(), t.clone());
            }
        }
        p
    }

    fn find(&self, name: &str) -> Option<&Tensor<f32>> {
        self.manifest
            .tensors
            .iter()
            .position(|m| m.name == name)
            .map(|i| &self.tensors[i])
    }
}

fn is_backbone(name: &str) -> bool {
    !name.starts_with("cls.") && !name.starts_with("optim.")
}

/// Domain-adaptation checkpoint: backbone weights, optimizer state and
/// training counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: DecoderModel<f32>,
    pub optimizer: Option<AdamWState<f32>>,
    pub step: u64,
    pub tokens_seen: u64,
    pub vocab_hash: String,
    pub train_loss: Option<f64>,
    pub eval_loss: Option<f64>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut metas = Vec::new();
        let mut tensors = Vec::new();
        for (n, t) in self.model.params().iter() {
            metas.push(TensorMeta {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            });
            tensors.push(t.clone());
        }
        let optimizer = self.optimizer.as_ref().map(|o| {
            for (name, buf) in [("optim.m", &o.m), ("optim.v", &o.v)] {
                metas.push(TensorMeta {
                    name: name.into(),
                    shape: vec![buf.len()],
                });
                tensors.push(Tensor::new(&[buf.len()], buf.clone()).expect("flat buffer"));
            }
            OptimizerMeta {
                step: o.step,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                lr_peak: o.lr_peak,
            }
        });
        Container {
            manifest: Manifest {
                format: FORMAT,
                kind: ArtifactKind::Backbone,
                config: self.model.config().clone(),
                step: self.step,
                tokens_seen: self.tokens_seen,
                vocab_hash: self.vocab_hash.clone(),
                train_loss: self.train_loss,
                eval_loss: self.eval_loss,
                n_classes: None,
                optimizer,
                tensors: metas,
            },
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.manifest.kind != ArtifactKind::Backbone {
            return Err(CheckpointError::Corrupt("not a backbone checkpoint".into()));
        }
        let model = DecoderModel::from_params(c.manifest.config.clone(), c.take_params(is_backbone))?;
        let optimizer = match &c.manifest.optimizer {
            None => None,
            Some(o) => {
                let (Some(m), Some(v)) = (c.find("optim.m"), c.find("optim.v")) else {
                    return Err(CheckpointError::Corrupt("optimizer buffers missing".into()));
                };
                Some(AdamWState {
                    step: o.step,
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    weight_decay: o.weight_decay,
                    lr_peak: o.lr_peak,
                })
            }
        };
        Ok(Self {
            model,
            optimizer,
            step: c.manifest.step,
            tokens_seen: c.manifest.tokens_seen,
            vocab_hash: c.manifest.vocab_hash.clone(),
            train_loss: c.manifest.train_loss,
            eval_loss: c.manifest.eval_loss,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Fine-tuned classifier ready for serving.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierArtifact {
    pub classifier: Classifier<f32>,
    pub vocab_hash: String,
    pub step: u64,
    pub tokens_seen: u64,
}

impl ClassifierArtifact {
    pub fn to_container(&self) -> Container {
        let mut metas = Vec::new();
        let mut tensors = Vec::new();
        for (n, t) in self.classifier.model.params().iter().chain(self.classifier.head.params.iter()) {
            metas.push(TensorMeta {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            });
            tensors.push(t.clone());
        }
        Container {
            manifest: Manifest {
                format: FORMAT,
                kind: ArtifactKind::Classifier,
                config: self.classifier.model.config().clone(),
                step: self.step,
                tokens_seen: self.tokens_seen,
                vocab_hash: self.vocab_hash.clone(),
                train_loss: None,
                eval_loss: None,
                n_classes: Some(self.classifier.n_classes()),
                optimizer: None,
                tensors: metas,
            },
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.manifest.kind != ArtifactKind::Classifier {
            return Err(CheckpointError::Corrupt("not a classifier checkpoint".into()));
        }
        let model = DecoderModel::from_params(c.manifest.config.clone(), c.take_params(is_backbone))?;
        let head_params = c.take_params(|n| n.starts_with("cls."));
        let head = ClassifierHead { params: head_params };
        if Some(head.n_classes()) != c.manifest.n_classes || head.params.len() != 2 {
            return Err(CheckpointError::Corrupt("classifier head does not match manifest".into()));
        }
        Ok(Self {
            classifier: Classifier::new(model, head)?,
            vocab_hash: c.manifest.vocab_hash.clone(),
            step: c.manifest.step,
            tokens_seen: c.manifest.tokens_seen,
        })
    }

    /// Short content hash identifying this exact set of weights.
    pub fn version(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_container().to_bytes()?)[..12].to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    fn ckpt() -> Checkpoint {
        let cfg = Preset::Nano.config().with_vocab(300).with_context(32);
        let model = DecoderModel::init(cfg, 9).unwrap();
        let mut opt = AdamWState::new(model.num_params(), (0.9, 0.95), 0.01, 3e-3).unwrap();
        opt.step = 7;
        opt.m.iter_mut().enumerate().for_each(|(i, x)| *x = i as f32 * 1e-3);
        Checkpoint {
            model,
            optimizer: Some(opt),
            step: 7,
            tokens_seen: 7 * 256,
            vocab_hash: "abc".into(),
            train_loss: Some(5.123456789012345),
            eval_loss: Some(0.1 + 0.2),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = ckpt();
        let bytes = c.to_container().to_bytes().unwrap();
        let back = Checkpoint::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_container().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn classifier_round_trip() {
        let c = ckpt();
        let head = ClassifierHead::init(32, 10, 1).unwrap();
        let a = ClassifierArtifact {
            classifier: Classifier::new(c.model, head).unwrap(),
            vocab_hash: "abc".into(),
            step: 3,
            tokens_seen: 9,
        };
        let bytes = a.to_container().to_bytes().unwrap();
        let back = ClassifierArtifact::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.version().unwrap(), a.version().unwrap());
        assert!(Checkpoint::from_container(&Container::from_bytes(&bytes).unwrap()).is_err());
    }

    #[test]
    fn corruption_detected() {
        let bytes = ckpt().to_container().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
        assert!(Container::from_bytes(b"NOTACKPT0000").is_err());
    }
}
