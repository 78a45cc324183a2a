//! GPT-style decoder family with a language-model head, a bidirectional
//! variant for the masked-objective baseline, and a linear classification
//! head pooled from one token's final hidden state.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{AttentionSpec, Graph, NnError, Scalar, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionEncoding {
    #[default]
    Absolute,
    Rotary,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub causal: bool,
    #[serde(default)]
    pub position: PositionEncoding,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad(format!("zero-sized dimension in {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.position == PositionEncoding::Rotary && (self.d_model / self.n_heads) % 2 != 0 {
            return bad("rotary encoding needs an even head width".into());
        }
        if self.context_length == 0 || self.vocab_size == 0 {
            return bad("context length and vocab size must be positive".into());
        }
        Ok(())
    }

    pub fn with_vocab(mut self, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn with_context(mut self, context_length: usize) -> Self {
        self.context_length = context_length;
        self
    }

    /// Bidirectional copy for the masked-objective baseline.
    pub fn masked(mut self) -> Self {
        self.causal = false;
        self
    }
}

/// Closed-form parameter count: embeddings, blocks, final norm, LM head.
pub fn count_params(c: &ModelConfig) -> usize {
    let d = c.d_model;
    let pos = match c.position {
        PositionEncoding::Absolute => c.context_length * d,
        PositionEncoding::Rotary => 0,
    };
    let block = 2 * d // ln1
        + d * 3 * d + 3 * d // qkv
        + d * d + d // attention out
        + 2 * d // ln2
        + d * c.d_ff + c.d_ff // mlp in
        + c.d_ff * d + d; // mlp out
    c.vocab_size * d + pos + c.n_layers * block + 2 * d + d * c.vocab_size
}

/// Training compute, `6 * params * tokens`.
pub fn flops_for_tokens(c: &ModelConfig, n_tokens: u64) -> f64 {
    6.0 * count_params(c) as f64 * n_tokens as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Nano,
    Micro,
    Mini,
}

pub const DEFAULT_VOCAB: usize = 512;
pub const DEFAULT_CONTEXT: usize = 256;

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Nano, Preset::Micro, Preset::Mini];

    pub fn config(self) -> ModelConfig {
        let (n_layers, n_heads, d_model) = match self {
            Preset::Nano => (2, 2, 32),
            Preset::Micro => (3, 4, 64),
            Preset::Mini => (4, 4, 128),
        };
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            vocab_size: DEFAULT_VOCAB,
            context_length: DEFAULT_CONTEXT,
            causal: true,
            position: PositionEncoding::Absolute,
        }
    }

    /// Peak domain-adaptation learning rate; smaller models take larger steps.
    pub fn lr_peak(self) -> f64 {
        match self {
            Preset::Nano => 3e-3,
            Preset::Micro => 2e-3,
            Preset::Mini => 1.6e-3,
        }
    }
}

impl FromStr for Preset {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "nano" => Ok(Preset::Nano),
            "micro" => Ok(Preset::Micro),
            "mini" => Ok(Preset::Mini),
            other => Err(ModelError::Contract(format!(
                "unknown preset {other:?} (expected nano, micro or mini)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Nano => "nano",
            Preset::Micro => "micro",
            Preset::Mini => "mini",
        })
    }
}

pub fn family_preset(name: &str) -> Result<ModelConfig> {
    Ok(name.parse::<Preset>()?.config())
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) {
        let name = name.into();
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.push(n, t.cast());
        }
        out
    }

    /// Puts every tensor on the graph, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph handles for a bound [`ParamSet`], same order.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Rebinds `name` to another node.
    pub fn replace(&mut self, name: &str, var: Var) {
        let i = self.index[name];
        self.vars[i] = var;
    }
}

/// Right-padded token ids `[batch, seq]` with the true length of each row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Full-length rows, no padding.
    pub fn dense(rows: &[&[u32]]) -> Result<Self> {
        let seq = rows.first().map_or(0, |r| r.len());
        if seq == 0 || rows.iter().any(|r| r.len() != seq) {
            return Err(ModelError::Contract("dense batch rows must share a positive length".into()));
        }
        Ok(Self {
            ids: rows.concat(),
            batch: rows.len(),
            seq,
            lengths: vec![seq; rows.len()],
        })
    }

    /// Right-pads every row to the longest one with `pad`.
    pub fn padded(rows: &[&[u32]], pad: u32) -> Result<Self> {
        if rows.is_empty() {
            return Err(ModelError::Contract("empty batch".into()));
        }
        if rows.iter().any(|r| r.is_empty()) {
            return Err(ModelError::Contract("zero-length sequence in batch".into()));
        }
        let seq = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(std::iter::repeat_n(pad, seq - r.len()));
        }
        Ok(Self {
            ids,
            batch: rows.len(),
            seq,
            lengths: rows.iter().map(|r| r.len()).collect(),
        })
    }

    fn check(&self, c: &ModelConfig) -> Result<()> {
        if self.seq > c.context_length {
            return Err(ModelError::Contract(format!(
                "sequence length {} exceeds context length {}",
                self.seq, c.context_length
            )));
        }
        if self.ids.len() != self.batch * self.seq || self.lengths.len() != self.batch {
            return Err(ModelError::Contract("batch layout mismatch".into()));
        }
        if self.lengths.iter().any(|&l| l == 0 || l > self.seq) {
            return Err(ModelError::Contract(format!("bad sequence lengths {:?}", self.lengths)));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(ModelError::Contract(format!(
                "token id {id} outside vocabulary of {}",
                c.vocab_size
            )));
        }
        Ok(())
    }

    /// Row in the flattened `[batch * seq]` layout used for pooling.
    pub fn pool_rows(&self, causal: bool) -> Vec<usize> {
        (0..self.batch)
            .map(|b| b * self.seq + if causal { self.lengths[b] - 1 } else { 0 })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel<F> {
    config: ModelConfig,
    params: ParamSet<F>,
}

const INIT_STD: f64 = 0.02;

fn normal_tensor<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl<F: Scalar> DecoderModel<F> {
    /// Normal(0, 0.02) weights, residual projections scaled by
    /// `1/sqrt(2 * n_layers)`, zero biases, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut p = ParamSet::new();
        p.push("wte", normal_tensor(&mut rng, &[config.vocab_size, d], INIT_STD));
        if config.position == PositionEncoding::Absolute {
            p.push("wpe", normal_tensor(&mut rng, &[config.context_length, d], INIT_STD));
        }
        for l in 0..config.n_layers {
            p.push(format!("h.{l}.ln1.g"), Tensor::full(&[d], F::one()));
            p.push(format!("h.{l}.ln1.b"), Tensor::zeros(&[d]));
            p.push(format!("h.{l}.attn.qkv.w"), normal_tensor(&mut rng, &[d, 3 * d], INIT_STD));
            p.push(format!("h.{l}.attn.qkv.b"), Tensor::zeros(&[3 * d]));
            p.push(format!("h.{l}.attn.proj.w"), normal_tensor(&mut rng, &[d, d], resid_std));
            p.push(format!("h.{l}.attn.proj.b"), Tensor::zeros(&[d]));
            p.push(format!("h.{l}.ln2.g"), Tensor::full(&[d], F::one()));
            p.push(format!("h.{l}.ln2.b"), Tensor::zeros(&[d]));
            p.push(format!("h.{l}.mlp.fc.w"), normal_tensor(&mut rng, &[d, config.d_ff], INIT_STD));
            p.push(format!("h.{l}.mlp.fc.b"), Tensor::zeros(&[config.d_ff]));
            p.push(format!("h.{l}.mlp.proj.w"), normal_tensor(&mut rng, &[config.d_ff, d], resid_std));
            p.push(format!("h.{l}.mlp.proj.b"), Tensor::zeros(&[d]));
        }
        p.push("ln_f.g", Tensor::full(&[d], F::one()));
        p.push("ln_f.b", Tensor::zeros(&[d]));
        p.push("lm_head.w", normal_tensor(&mut rng, &[d, config.vocab_size], INIT_STD));
        Ok(Self { config, params: p })
    }

    /// Same layout as [`DecoderModel::init`] with every value zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::init(config, 0)?;
        for t in m.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
        Ok(m)
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<F>) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), 0)?;
        if reference.params.names() != params.names()
            || reference
                .params
                .tensors()
                .iter()
                .zip(params.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(ModelError::Contract("parameter layout does not match config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<G: Scalar>(&self) -> DecoderModel<G> {
        DecoderModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Final-norm hidden states `[batch * seq, d_model]`.
    pub fn trunk(&self, g: &mut Graph<F>, p: &BoundParams, batch: &TokenBatch) -> Result<Var> {
        batch.check(&self.config)?;
        let c = &self.config;
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let mut x = g.embedding(p.var("wte"), &ids)?;
        if c.position == PositionEncoding::Absolute {
            let pos: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
            let pe = g.embedding(p.var("wpe"), &pos)?;
            x = g.add(x, pe)?;
        }
        let spec = AttentionSpec {
            batch: batch.batch,
            seq: batch.seq,
            heads: c.n_heads,
            causal: c.causal,
            lengths: batch.lengths.clone(),
        };
        for l in 0..c.n_layers {
            let v = |s: &str| p.var(&format!("h.{l}.{s}"));
            let h = g.layer_norm(x, v("ln1.g"), v("ln1.b"))?;
            let mut qkv = g.linear(h, v("attn.qkv.w"), v("attn.qkv.b"))?;
            if c.position == PositionEncoding::Rotary {
                qkv = g.rotary(qkv, batch.seq, c.n_heads)?;
            }
            let a = g.attention(qkv, spec.clone())?;
            let a = g.linear(a, v("attn.proj.w"), v("attn.proj.b"))?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, v("ln2.g"), v("ln2.b"))?;
            let m = g.linear(h, v("mlp.fc.w"), v("mlp.fc.b"))?;
            let m = g.gelu(m)?;
            let m = g.linear(m, v("mlp.proj.w"), v("mlp.proj.b"))?;
            x = g.add(x, m)?;
        }
        Ok(g.layer_norm(x, p.var("ln_f.g"), p.var("ln_f.b"))?)
    }

    /// LM logits `[batch * seq, vocab]` on the graph.
    pub fn lm_logits(&self, g: &mut Graph<F>, p: &BoundParams, batch: &TokenBatch) -> Result<Var> {
        let h = self.trunk(g, p, batch)?;
        Ok(g.matmul(h, p.var("lm_head.w"))?)
    }

    /// Next-token loss on full-length rows: position `t` predicts `t + 1`.
    pub fn lm_loss(&self, g: &mut Graph<F>, p: &BoundParams, rows: &[&[u32]]) -> Result<Var> {
        let seq = rows.first().map_or(0, |r| r.len());
        if seq < 2 {
            return Err(ModelError::Contract("LM loss needs sequences of at least 2 tokens".into()));
        }
        let inputs: Vec<&[u32]> = rows.iter().map(|r| &r[..seq - 1]).collect();
        let batch = TokenBatch::dense(&inputs)?;
        let logits = self.lm_logits(g, p, &batch)?;
        let targets: Vec<usize> = rows
            .iter()
            .flat_map(|r| r[1..].iter().map(|&t| t as usize))
            .collect();
        Ok(g.cross_entropy(logits, &targets)?)
    }

    /// Masked-token loss for the bidirectional baseline: only the masked
    /// positions contribute.
    pub fn masked_lm_loss(
        &self,
        g: &mut Graph<F>,
        p: &BoundParams,
        batch: &TokenBatch,
        positions: &[usize],
        targets: &[u32],
    ) -> Result<Var> {
        let h = self.trunk(g, p, batch)?;
        let picked = g.gather_rows(h, positions)?;
        let logits = g.matmul(picked, p.var("lm_head.w"))?;
        let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        Ok(g.cross_entropy(logits, &t)?)
    }

    /// Inference-only LM logits, shape `[batch, seq, vocab]`.
    pub fn forward_lm(&self, batch: &TokenBatch) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let logits = self.lm_logits(&mut g, &p, batch)?;
        let t = g.value(logits).clone();
        Ok(t.reshape(&[batch.batch, batch.seq, self.config.vocab_size])?)
    }
}

/// Linear map from the pooled hidden state to template logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<F> {
    pub params: ParamSet<F>,
}

impl<F: Scalar> ClassifierHead<F> {
    /// Normal(0, 0.02) weights `[d_model, n_classes]`, zero bias.
    pub fn init(d_model: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes == 0 {
            return Err(ModelError::Contract("classifier needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.push("cls.w", normal_tensor(&mut rng, &[d_model, n_classes], INIT_STD));
        params.push("cls.b", Tensor::zeros(&[n_classes]));
        Ok(Self { params })
    }

    pub fn n_classes(&self) -> usize {
        self.params.get("cls.b").map_or(0, Tensor::len)
    }

    pub fn d_model(&self) -> usize {
        self.params.get("cls.w").map_or(0, |t| t.shape()[0])
    }
}

/// Backbone plus classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<F> {
    pub model: DecoderModel<F>,
    pub head: ClassifierHead<F>,
}

impl<F: Scalar> Classifier<F> {
    pub fn new(model: DecoderModel<F>, head: ClassifierHead<F>) -> Result<Self> {
        if head.d_model() != model.config().d_model {
            return Err(ModelError::Contract(format!(
                "head width {} does not match d_model {}",
                head.d_model(),
                model.config().d_model
            )));
        }
        Ok(Self { model, head })
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    /// Class logits `[batch, n_classes]` on the graph. Causal models pool
    /// the last real token; bidirectional ones pool the first.
    pub fn logits(
        &self,
        g: &mut Graph<F>,
        trunk_params: &BoundParams,
        head_params: &BoundParams,
        batch: &TokenBatch,
    ) -> Result<Var> {
        let h = self.model.trunk(g, trunk_params, batch)?;
        let pooled = g.gather_rows(h, &batch.pool_rows(self.model.config().causal))?;
        Ok(g.linear(pooled, head_params.var("cls.w"), head_params.var("cls.b"))?)
    }

    pub fn forward_classify(&self, batch: &TokenBatch) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let tp = self.model.params().bind(&mut g, false);
        let hp = self.head.params.bind(&mut g, false);
        let out = self.logits(&mut g, &tp, &hp, batch)?;
        Ok(g.value(out).clone())
    }
}
