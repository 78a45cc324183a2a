//! Finite-difference cases for every differentiable primitive and for
//! whole models, in 64-bit. Shared by the gradcheck tests and the
//! acceptance suite.

use quicktext::model::{Classifier, ClassifierHead, DecoderModel, ModelConfig, PositionEncoding, Preset, TokenBatch};
use quicktext::nn::{grad_check, AttentionSpec, Graph, Result, Tensor, Var};

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

/// Relative errors by case name; a failed check records infinity.
#[derive(Default)]
pub struct Checks {
    pub results: Vec<(String, f64)>,
}

impl Checks {
    pub fn check<F>(&mut self, name: &str, x: Tensor<f64>, f: F)
    where
        F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
    {
        let err = grad_check(f, &x, EPS).unwrap_or(f64::INFINITY);
        self.results.push((name.to_string(), err));
    }

    pub fn failures(&self) -> Vec<&(String, f64)> {
        self.results.iter().filter(|(_, e)| !(*e < TOL)).collect()
    }
}

pub type Group = fn(&mut Checks);

pub const PRIMITIVES: [(&str, Group); 8] = [
    ("matmul", matmul_both_operands),
    ("bias/add/mul/linear", bias_add_mul),
    ("layer norm", layer_norm_all_inputs),
    ("gelu/softmax/sum", pointwise_and_softmax),
    ("embedding/gather", embedding_and_gather),
    ("cross entropy", cross_entropy_logits),
    ("rotary", rotary_qkv),
    ("attention", attention_variants),
];

pub const MODELS: [(&str, Group); 3] = [
    ("nano lm loss", full_model_lm_loss),
    ("nano masked loss", full_model_masked_loss),
    ("nano classifier", full_classifier_with_padding),
];

fn tensor(shape: &[usize], seed: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f64 + 1.0) * seed).sin() * 0.9).collect();
    Tensor::new(shape, data).unwrap()
}

/// Scalarizes with fixed pseudo-random weights so no output is ignored.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(tensor(&shape, 0.731));
    let p = g.mul(y, w)?;
    g.sum(p)
}

pub fn matmul_both_operands(c: &mut Checks) {
    let b = tensor(&[4, 5], 0.37);
    c.check("matmul lhs", tensor(&[3, 4], 0.11), |g, x| {
        let bv = g.constant(b.clone());
        let y = g.matmul(x, bv)?;
        weighted_sum(g, y)
    });
    let a = tensor(&[3, 4], 0.11);
    c.check("matmul rhs", b.clone(), |g, x| {
        let av = g.constant(a.clone());
        let y = g.matmul(av, x)?;
        weighted_sum(g, y)
    });
}

pub fn bias_add_mul(c: &mut Checks) {
    let x0 = tensor(&[3, 4], 0.21);
    c.check("add_bias bias", tensor(&[4], 0.5), |g, b| {
        let x = g.constant(x0.clone());
        let y = g.add_bias(x, b)?;
        weighted_sum(g, y)
    });
    c.check("add_bias input", x0.clone(), |g, x| {
        let b = g.constant(tensor(&[4], 0.5));
        let y = g.add_bias(x, b)?;
        weighted_sum(g, y)
    });
    c.check("add", x0.clone(), |g, x| {
        let c = g.constant(tensor(&[3, 4], 0.9));
        let y = g.add(x, c)?;
        weighted_sum(g, y)
    });
    c.check("mul", x0.clone(), |g, x| {
        let c = g.constant(tensor(&[3, 4], 0.9));
        let y = g.mul(x, c)?;
        weighted_sum(g, y)
    });
    c.check("mul self", x0.clone(), |g, x| {
        let y = g.mul(x, x)?;
        weighted_sum(g, y)
    });
    c.check("linear", x0, |g, x| {
        let w = g.constant(tensor(&[4, 2], 0.3));
        let b = g.constant(tensor(&[2], 0.7));
        let y = g.linear(x, w, b)?;
        weighted_sum(g, y)
    });
}

pub fn layer_norm_all_inputs(c: &mut Checks) {
    let x0 = tensor(&[3, 6], 0.41);
    let gamma0 = tensor(&[6], 0.8);
    let beta0 = tensor(&[6], 0.2);
    c.check("layer_norm x", x0.clone(), |g, x| {
        let ga = g.constant(gamma0.clone());
        let be = g.constant(beta0.clone());
        let y = g.layer_norm(x, ga, be)?;
        weighted_sum(g, y)
    });
    c.check("layer_norm gamma", gamma0.clone(), |g, ga| {
        let x = g.constant(x0.clone());
        let be = g.constant(beta0.clone());
        let y = g.layer_norm(x, ga, be)?;
        weighted_sum(g, y)
    });
    c.check("layer_norm beta", beta0.clone(), |g, be| {
        let x = g.constant(x0.clone());
        let ga = g.constant(gamma0.clone());
        let y = g.layer_norm(x, ga, be)?;
        weighted_sum(g, y)
    });
}

pub fn pointwise_and_softmax(c: &mut Checks) {
    c.check("gelu", tensor(&[2, 5], 1.7), |g, x| {
        let y = g.gelu(x)?;
        weighted_sum(g, y)
    });
    c.check("softmax", tensor(&[3, 5], 0.63), |g, x| {
        let y = g.softmax(x)?;
        weighted_sum(g, y)
    });
    c.check("sum", tensor(&[7], 0.3), |g, x| g.sum(x));
}

pub fn embedding_and_gather(c: &mut Checks) {
    c.check("embedding", tensor(&[5, 3], 0.27), |g, t| {
        let y = g.embedding(t, &[4, 0, 4, 2])?;
        weighted_sum(g, y)
    });
    c.check("gather_rows", tensor(&[4, 3], 0.27), |g, x| {
        let y = g.gather_rows(x, &[3, 3, 1])?;
        weighted_sum(g, y)
    });
}

pub fn cross_entropy_logits(c: &mut Checks) {
    c.check("cross_entropy", tensor(&[4, 6], 1.1), |g, x| g.cross_entropy(x, &[0, 5, 2, 2]));
}

pub fn rotary_qkv(c: &mut Checks) {
    // batch 2, seq 3, 2 heads of width 4
    c.check("rotary", tensor(&[6, 24], 0.19), |g, x| {
        let y = g.rotary(x, 3, 2)?;
        weighted_sum(g, y)
    });
}

pub fn attention_variants(c: &mut Checks) {
    for (causal, lengths) in [(true, vec![4, 4]), (false, vec![4, 4]), (true, vec![4, 2]), (false, vec![3, 1])] {
        let spec = AttentionSpec {
            batch: 2,
            seq: 4,
            heads: 2,
            causal,
            lengths: lengths.clone(),
        };
        c.check(&format!("attention causal={causal} lengths={lengths:?}"), tensor(&[8, 12], 0.53), |g, x| {
            let y = g.attention(x, spec.clone())?;
            weighted_sum(g, y)
        });
    }
}

/// The nano preset's trunk with a small vocabulary and context.
fn nano_config(position: PositionEncoding, causal: bool) -> ModelConfig {
    ModelConfig {
        causal,
        position,
        ..Preset::Nano.config().with_vocab(11).with_context(6)
    }
}

/// Checks the gradient of `loss` with respect to every parameter tensor.
fn check_all_params<L>(c: &mut Checks, model: &DecoderModel<f64>, label: &str, loss: L)
where
    L: Fn(&mut Graph<f64>, &quicktext::model::BoundParams) -> Result<Var>,
{
    for name in model.params().names() {
        let x = model.params().get(name).unwrap().clone();
        c.check(&format!("{label} {name}"), x, |g, v| {
            let mut p = model.params().bind(g, false);
            p.replace(name, v);
            loss(g, &p)
        });
    }
}

fn model_err(e: quicktext::model::ModelError) -> quicktext::nn::NnError {
    quicktext::nn::NnError::Contract(e.to_string())
}

pub fn full_model_lm_loss(c: &mut Checks) {
    for position in [PositionEncoding::Absolute, PositionEncoding::Rotary] {
        let model = DecoderModel::<f64>::init(nano_config(position, true), 17).unwrap();
        let rows: [&[u32]; 2] = [&[1, 4, 2, 9, 3, 7, 5], &[10, 0, 6, 6, 2, 8, 1]];
        check_all_params(c, &model, &format!("{position:?} lm"), |g, p| {
            model.lm_loss(g, p, &rows).map_err(model_err)
        });
    }
}

pub fn full_model_masked_loss(c: &mut Checks) {
    let model = DecoderModel::<f64>::init(nano_config(PositionEncoding::Absolute, false), 5).unwrap();
    let batch = TokenBatch::dense(&[&[1, 4, 10, 9, 3], &[10, 0, 6, 10, 2]]).unwrap();
    check_all_params(c, &model, "masked", |g, p| {
        model
            .masked_lm_loss(g, p, &batch, &[2, 8], &[7, 6])
            .map_err(model_err)
    });
}

pub fn full_classifier_with_padding(c: &mut Checks) {
    let model = DecoderModel::<f64>::init(nano_config(PositionEncoding::Absolute, true), 23).unwrap();
    let head = ClassifierHead::<f64>::init(32, 5, 2).unwrap();
    let clf = Classifier::new(model, head).unwrap();
    let batch = TokenBatch::padded(&[&[3, 1, 4, 1, 5], &[9, 2], &[6, 5, 3]], 0).unwrap();
    let labels = [4, 0, 2];
    let loss = |g: &mut Graph<f64>, tp: &quicktext::model::BoundParams, hp: &quicktext::model::BoundParams| {
        let logits = clf.logits(g, tp, hp, &batch).map_err(model_err)?;
        g.cross_entropy(logits, &labels)
    };
    check_all_params(c, &clf.model, "classifier trunk", |g, tp| {
        let hp = clf.head.params.bind(g, false);
        loss(g, tp, &hp)
    });
    for name in clf.head.params.names() {
        let x = clf.head.params.get(name).unwrap().clone();
        c.check(&format!("classifier {name}"), x, |g, v| {
            let tp = clf.model.params().bind(g, false);
            let mut hp = clf.head.params.bind(g, false);
            hp.replace(name, v);
            loss(g, &tp, &hp)
        });
    }
}
