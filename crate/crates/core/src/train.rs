//! Domain-adaptive pre-training and discriminative fine-tuning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::corpus::{mask_tokens, ClassificationExample, PretrainSequence};
use crate::model::{BoundParams, Classifier, ClassifierHead, DecoderModel, ModelError, ParamSet, TokenBatch};
use crate::nn::{self, clip_grad_norm, lr_at_step, AdamWState, DecayKind, Graph, NnError, ScheduleSpec, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error("non-finite loss {loss} at step {step} (lr {lr})")]
    NonFinite {
        step: u64,
        lr: f64,
        loss: f64,
        snapshot: Box<Checkpoint>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TrainError::Config(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Objective {
    /// Next-token prediction.
    Causal,
    /// Masked-token prediction for the bidirectional baseline.
    Masked { mask_rate: f64, mask_id: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub max_steps: u64,
    /// Packed sequences per step.
    pub batch_size: usize,
    /// Tokens per packed sequence.
    pub seq_len: usize,
    pub lr_peak: f64,
    pub decay: DecayKind,
    pub warmup_fraction: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eval_fraction: f64,
    pub save_fraction: f64,
    pub grad_clip: Option<f64>,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            max_steps: 14500,
            batch_size: 8,
            seq_len: 64,
            lr_peak: 3e-4,
            decay: DecayKind::Cosine,
            warmup_fraction: 0.01,
            betas: (0.9, 0.95),
            weight_decay: 0.01,
            eval_fraction: 0.1,
            save_fraction: 0.1,
            grad_clip: Some(1.0),
            objective: Objective::Causal,
            seed: 0,
        }
    }
}

/// Steps between events for a fraction of the run, at least 1.
fn cadence(fraction: f64, max_steps: u64) -> u64 {
    ((fraction * max_steps as f64).round() as u64).max(1)
}

impl AdaptConfig {
    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_size * self.seq_len) as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.batch_size == 0 {
            return config_err("max-steps and batch size must be positive");
        }
        if self.seq_len < 2 {
            return config_err("sequence length must be at least 2");
        }
        for (name, f) in [("eval-steps", self.eval_fraction), ("save-steps", self.save_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return config_err(format!("{name} fraction {f} outside (0, 1]"));
            }
        }
        if let Objective::Masked { mask_rate, .. } = self.objective {
            if !(mask_rate > 0.0 && mask_rate < 1.0) {
                return config_err(format!("mask rate {mask_rate} outside (0, 1)"));
            }
        }
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<ScheduleSpec> {
        Ok(ScheduleSpec::new(self.decay, self.warmup_fraction, self.max_steps, self.lr_peak)?)
    }

    /// Steps at which checkpoints are written: every `save_fraction` of the
    /// run, plus the final step.
    pub fn save_steps(&self) -> Vec<u64> {
        boundaries(cadence(self.save_fraction, self.max_steps), self.max_steps)
    }

    pub fn eval_steps(&self) -> Vec<u64> {
        boundaries(cadence(self.eval_fraction, self.max_steps), self.max_steps)
    }
}

fn boundaries(every: u64, max_steps: u64) -> Vec<u64> {
    let mut v: Vec<u64> = (1..=max_steps / every).map(|k| k * every).collect();
    if v.last() != Some(&max_steps) {
        v.push(max_steps);
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub tokens_seen: u64,
}

#[derive(Clone, Debug)]
pub struct AdaptRun {
    pub checkpoints: Vec<Checkpoint>,
    pub ledger: Vec<LedgerRow>,
}

/// Walks seeded permutations of `0..n`, reshuffling at each pass.
struct Sampler {
    perm: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            perm: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.perm.shuffle(&mut s.rng);
        s
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.perm.len() {
                self.perm.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Loss and gradients for every bound parameter set, in binding order.
fn loss_and_grads<Fun>(sets: &[&ParamSet<f32>], build: Fun) -> Result<(f64, Vec<Vec<f32>>)>
where
    Fun: FnOnce(&mut Graph<f32>, &[BoundParams]) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound: Vec<BoundParams> = sets.iter().map(|p| p.bind(&mut g, true)).collect();
    let loss = match build(&mut g, &bound) {
        Ok(l) => l,
        Err(TrainError::Model(ModelError::Nn(NnError::NonFinite(_))) | TrainError::Nn(NnError::NonFinite(_))) => {
            return Ok((f64::NAN, Vec::new()))
        }
        Err(e) => return Err(e),
    };
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let mut grads = Vec::new();
    for (set, b) in sets.iter().zip(&bound) {
        for (t, &v) in set.tensors().iter().zip(b.vars()) {
            grads.push(g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec));
        }
    }
    Ok((value, grads))
}

fn apply_update(
    sets: &mut [&mut ParamSet<f32>],
    mut grads: Vec<Vec<f32>>,
    opt: &mut AdamWState<f32>,
    lr: f64,
    clip: Option<f64>,
) -> Result<()> {
    if let Some(max) = clip {
        let mut views: Vec<&mut [f32]> = grads.iter_mut().map(Vec::as_mut_slice).collect();
        clip_grad_norm(&mut views, max);
    }
    let params = sets.iter_mut().flat_map(|s| s.tensors_mut().iter_mut().map(|t| t.data_mut()));
    opt.update(params.zip(grads.iter().map(Vec::as_slice)), lr)?;
    Ok(())
}

fn lm_batch_loss(
    model: &DecoderModel<f32>,
    g: &mut Graph<f32>,
    p: &BoundParams,
    rows: &[&[u32]],
    objective: Objective,
    mask_seed: u64,
) -> Result<Var> {
    match objective {
        Objective::Causal => Ok(model.lm_loss(g, p, rows)?),
        Objective::Masked { mask_rate, mask_id } => {
            let seq = rows[0].len();
            let mut ids = Vec::with_capacity(rows.len() * seq);
            let mut positions = Vec::new();
            let mut targets = Vec::new();
            for (r, row) in rows.iter().enumerate() {
                let m = mask_tokens(row, mask_rate, mask_seed.wrapping_add(r as u64), mask_id)
                    .map_err(|e| TrainError::Contract(e.to_string()))?;
                positions.extend(m.positions.iter().map(|&p| r * seq + p));
                targets.extend(m.targets);
                ids.extend(m.token_ids);
            }
            let batch = TokenBatch {
                ids,
                batch: rows.len(),
                seq,
                lengths: vec![seq; rows.len()],
            };
            Ok(model.masked_lm_loss(g, p, &batch, &positions, &targets)?)
        }
    }
}

/// Mean LM loss over `seqs`, evaluated in chunks of `batch_size`.
pub fn lm_eval_loss(
    model: &DecoderModel<f32>,
    seqs: &[PretrainSequence],
    batch_size: usize,
    objective: Objective,
    seed: u64,
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(TrainError::Contract("empty heldout set".into()));
    }
    let mut total = 0.0;
    for (c, chunk) in seqs.chunks(batch_size.max(1)).enumerate() {
        let rows: Vec<&[u32]> = chunk.iter().map(|s| s.token_ids.as_slice()).collect();
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let loss = lm_batch_loss(model, &mut g, &p, &rows, objective, seed ^ (c as u64) << 20)?;
        total += g.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(total / seqs.len() as f64)
}

/// Continued LM training on in-domain sequences. Emits a checkpoint at
/// every save boundary and measures heldout loss at every eval or save
/// boundary.
pub fn domain_adapt(
    init: DecoderModel<f32>,
    train: &[PretrainSequence],
    heldout: &[PretrainSequence],
    vocab_hash: &str,
    cfg: &AdaptConfig,
) -> Result<AdaptRun> {
    cfg.validate()?;
    if train.is_empty() || heldout.is_empty() {
        return Err(TrainError::Contract("train and heldout sequences must be non-empty".into()));
    }
    let mcfg = init.config().clone();
    for s in train.iter().chain(heldout) {
        if s.token_ids.len() != cfg.seq_len {
            return Err(TrainError::Contract(format!(
                "sequence of length {} but seq_len is {}",
                s.token_ids.len(),
                cfg.seq_len
            )));
        }
        if let Some(&id) = s.token_ids.iter().find(|&&t| t as usize >= mcfg.vocab_size) {
            return Err(TrainError::Contract(format!("token {id} outside model vocabulary")));
        }
    }
    let model_len = match cfg.objective {
        Objective::Causal => cfg.seq_len - 1,
        Objective::Masked { .. } => cfg.seq_len,
    };
    if model_len > mcfg.context_length {
        return Err(TrainError::Contract(format!(
            "seq_len {} does not fit context length {}",
            cfg.seq_len, mcfg.context_length
        )));
    }
    let sched = cfg.schedule()?;
    let mut model = init;
    let mut opt = AdamWState::new(model.num_params(), cfg.betas, cfg.weight_decay, cfg.lr_peak)?;
    let mut sampler = Sampler::new(train.len(), cfg.seed);
    let save = cfg.save_steps();
    let eval = cfg.eval_steps();
    let mut checkpoints = Vec::with_capacity(save.len());
    let mut ledger = Vec::with_capacity(cfg.max_steps as usize);
    let mut window = (0.0, 0u64);
    for step in 1..=cfg.max_steps {
        let lr = lr_at_step(&sched, step - 1)?;
        let rows: Vec<&[u32]> = sampler
            .take(cfg.batch_size)
            .into_iter()
            .map(|i| train[i].token_ids.as_slice())
            .collect();
        let mask_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step << 16);
        let (loss, grads) = loss_and_grads(&[model.params()], |g, b| {
            lm_batch_loss(&model, g, &b[0], &rows, cfg.objective, mask_seed)
        })?;
        if !loss.is_finite() {
            let snapshot = Checkpoint {
                model,
                optimizer: Some(opt),
                step: step - 1,
                tokens_seen: (step - 1) * cfg.tokens_per_step(),
                vocab_hash: vocab_hash.to_string(),
                train_loss: None,
                eval_loss: None,
            };
            return Err(TrainError::NonFinite {
                step,
                lr,
                loss,
                snapshot: Box::new(snapshot),
            });
        }
        apply_update(&mut [model.params_mut()], grads, &mut opt, lr, cfg.grad_clip)?;
        window.0 += loss;
        window.1 += 1;
        let tokens_seen = step * cfg.tokens_per_step();
        let saving = save.binary_search(&step).is_ok();
        let eval_loss = if saving || eval.binary_search(&step).is_ok() {
            Some(lm_eval_loss(&model, heldout, cfg.batch_size, cfg.objective, cfg.seed)?)
        } else {
            None
        };
        ledger.push(LedgerRow {
            step,
            lr,
            train_loss: loss,
            eval_loss,
            tokens_seen,
        });
        if saving {
            checkpoints.push(Checkpoint {
                model: model.clone(),
                optimizer: Some(opt.clone()),
                step,
                tokens_seen,
                vocab_hash: vocab_hash.to_string(),
                train_loss: Some(window.0 / window.1 as f64),
                eval_loss,
            });
            window = (0.0, 0);
        }
    }
    Ok(AdaptRun { checkpoints, ledger })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Report {
    /// Metrics after the last epoch.
    Final,
    /// Metrics of the epoch with the highest top-1 accuracy.
    BestEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub decay: DecayKind,
    pub warmup_fraction: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub grad_clip: Option<f64>,
    pub report: Report,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 1e-5,
            decay: DecayKind::Linear,
            warmup_fraction: 0.1,
            betas: (0.9, 0.99),
            weight_decay: 0.0,
            batch_size: 128,
            max_len: 512,
            grad_clip: Some(1.0),
            report: Report::Final,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    /// Defaults for the bidirectional baseline: ten epochs, best one reported.
    pub fn masked_baseline() -> Self {
        Self {
            epochs: 10,
            report: Report::BestEpoch,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return config_err("num-train-epochs must be at least 1");
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return config_err("batch size and max length must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(format!("learning rate {}", self.lr));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub cls_loss: f64,
    pub top_k_accuracy: BTreeMap<usize, f64>,
    pub n_examples: usize,
}

impl EvalMetrics {
    pub fn top(&self, k: usize) -> f64 {
        self.top_k_accuracy.get(&k).copied().unwrap_or(f64::NAN)
    }
}

pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];

/// Position of `label` in the descending order of `logits`, ties broken
/// toward the lower class index.
pub fn label_rank(logits: &[f32], label: usize) -> usize {
    let x = logits[label];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > x || (v == x && j < label))
        .count()
}

/// Indices of the `k` largest logits, descending, ties toward the lower
/// index.
pub fn top_k(logits: &[f32], k: usize) -> Vec<usize> {
    let k = k.min(logits.len());
    let mut best: Vec<usize> = Vec::with_capacity(k + 1);
    for (j, &v) in logits.iter().enumerate() {
        if best.len() == k && (k == 0 || logits[best[k - 1]] >= v) {
            continue;
        }
        let at = best.partition_point(|&b| logits[b] >= v);
        best.insert(at, j);
        best.truncate(k);
    }
    best
}

fn check_examples(examples: &[ClassificationExample], n_classes: usize, max_len: usize) -> Result<()> {
    for e in examples {
        if e.label as usize >= n_classes {
            return Err(TrainError::Contract(format!(
                "label {} of case {} outside catalog of {n_classes}",
                e.label, e.case_id
            )));
        }
        if e.token_ids.is_empty() || e.token_ids.len() > max_len {
            return Err(TrainError::Contract(format!(
                "example of case {} has {} tokens (max {max_len})",
                e.case_id,
                e.token_ids.len()
            )));
        }
    }
    Ok(())
}

fn padded_batch(examples: &[&ClassificationExample]) -> Result<TokenBatch> {
    let rows: Vec<&[u32]> = examples.iter().map(|e| e.token_ids.as_slice()).collect();
    // pad positions are never attended to or pooled
    Ok(TokenBatch::padded(&rows, 0)?)
}

/// Class logits for each example, one row per example in input order.
pub fn predict_logits(
    classifier: &Classifier<f32>,
    examples: &[ClassificationExample],
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&ClassificationExample> = chunk.iter().collect();
        let logits = classifier.forward_classify(&padded_batch(&refs)?)?;
        out.extend((0..chunk.len()).map(|r| logits.row(r).to_vec()));
    }
    Ok(out)
}

pub fn evaluate_classifier(
    classifier: &Classifier<f32>,
    test: &[ClassificationExample],
    ks: &[usize],
    batch_size: usize,
) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(TrainError::Contract("empty test set".into()));
    }
    let c = classifier.n_classes();
    check_examples(test, c, classifier.model.config().context_length)?;
    let logits = predict_logits(classifier, test, batch_size)?;
    let mut hits = vec![0usize; ks.len()];
    let mut loss = 0.0;
    for (row, e) in logits.iter().zip(test) {
        let label = e.label as usize;
        let t = nn::Tensor::new(&[1, c], row.clone())?;
        loss += nn::cross_entropy(&t, &[label])?;
        let rank = label_rank(row, label);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    let n = test.len();
    Ok(EvalMetrics {
        cls_loss: loss / n as f64,
        top_k_accuracy: ks.iter().zip(hits).map(|(&k, h)| (k, h as f64 / n as f64)).collect(),
        n_examples: n,
    })
}

#[derive(Clone, Debug)]
pub struct FineTuneOutcome {
    pub classifier: Classifier<f32>,
    /// Metrics selected by the config's report policy.
    pub metrics: EvalMetrics,
    pub epoch_metrics: Vec<EvalMetrics>,
    pub best_epoch: usize,
    pub train_losses: Vec<f64>,
}

/// End-to-end fine-tuning of the backbone plus a fresh linear head.
pub fn fine_tune(
    backbone: &DecoderModel<f32>,
    train: &[ClassificationExample],
    test: &[ClassificationExample],
    n_classes: usize,
    cfg: &FineTuneConfig,
) -> Result<FineTuneOutcome> {
    cfg.validate()?;
    let max_len = cfg.max_len.min(backbone.config().context_length);
    check_examples(train, n_classes, max_len)?;
    check_examples(test, n_classes, max_len)?;
    let steps_per_epoch = train.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        return Err(TrainError::Contract(format!(
            "{} training examples cannot fill a batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let total = (steps_per_epoch * cfg.epochs) as u64;
    let sched = ScheduleSpec::new(cfg.decay, cfg.warmup_fraction, total, cfg.lr)?;
    let head = ClassifierHead::init(backbone.config().d_model, n_classes, cfg.seed ^ 0x5eed_4ead)?;
    let mut clf = Classifier::new(backbone.clone(), head)?;
    let n_params = clf.model.num_params() + clf.head.params.numel();
    let mut opt = AdamWState::new(n_params, cfg.betas, cfg.weight_decay, cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    let mut epoch_metrics: Vec<EvalMetrics> = Vec::new();
    let mut train_losses = Vec::with_capacity(total as usize);
    let mut best: Option<(usize, Classifier<f32>)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for b in 0..steps_per_epoch {
            let refs: Vec<&ClassificationExample> = order[b * cfg.batch_size..(b + 1) * cfg.batch_size]
                .iter()
                .map(|&i| &train[i])
                .collect();
            let batch = padded_batch(&refs)?;
            let labels: Vec<usize> = refs.iter().map(|e| e.label as usize).collect();
            let lr = lr_at_step(&sched, step)?;
            let (loss, grads) = loss_and_grads(&[clf.model.params(), &clf.head.params], |g, p| {
                let logits = clf.logits(g, &p[0], &p[1], &batch)?;
                Ok(g.cross_entropy(logits, &labels)?)
            })?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    lr,
                    loss,
                    snapshot: Box::new(Checkpoint {
                        model: clf.model,
                        optimizer: None,
                        step,
                        tokens_seen: 0,
                        vocab_hash: String::new(),
                        train_loss: None,
                        eval_loss: None,
                    }),
                });
            }
            let Classifier { model, head } = &mut clf;
            apply_update(&mut [model.params_mut(), &mut head.params], grads, &mut opt, lr, cfg.grad_clip)?;
            train_losses.push(loss);
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        if cfg.report == Report::BestEpoch || last {
            let m = evaluate_classifier(&clf, test, &DEFAULT_KS, cfg.batch_size.max(32))?;
            let improved = best
                .as_ref()
                .is_none_or(|(i, _)| m.top(1) > epoch_metrics[*i].top(1));
            epoch_metrics.push(m);
            if improved && cfg.report == Report::BestEpoch {
                best = Some((epoch_metrics.len() - 1, clf.clone()));
            }
        }
    }
    let (best_epoch, classifier, metrics) = match (cfg.report, best) {
        (Report::BestEpoch, Some((i, c))) => (i, c, epoch_metrics[i].clone()),
        _ => {
            let i = epoch_metrics.len() - 1;
            (cfg.epochs - 1, clf, epoch_metrics[i].clone())
        }
    };
    Ok(FineTuneOutcome {
        classifier,
        metrics,
        epoch_metrics,
        best_epoch,
        train_losses,
    })
}
