//! Python bindings: tokenizer, corpus generation, classifier inference and
//! the analysis statistics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use quicktext::abtest::{self, Direction};
use quicktext::checkpoint::ClassifierArtifact;
use quicktext::corpus::{self, Role, TemplateCatalog};
use quicktext::model::{self, Preset};
use quicktext::{latency, tokenizer, train};
use quicktext_serve::{Backend, ContextMessage, ModelBackend, PredictRequest};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

/// Byte-level BPE vocabulary.
#[pyclass(module = "quicktext_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Vocab {
    inner: tokenizer::Vocab,
}

#[pymethods]
impl Vocab {
    #[staticmethod]
    pub fn train(text: &str, vocab_size: usize) -> PyResult<Self> {
        let inner = tokenizer::train_bpe(text.as_bytes(), vocab_size).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    pub fn bytes_only() -> Self {
        Self {
            inner: tokenizer::Vocab::bytes_only(),
        }
    }

    #[staticmethod]
    pub fn load(path: PathBuf) -> PyResult<Self> {
        let inner = tokenizer::Vocab::load(&path).map_err(io_err)?;
        Ok(Self { inner })
    }

    pub fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(io_err)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text)
    }

    pub fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode_str(&ids).map_err(value_err)
    }

    #[getter]
    pub fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    pub fn end_of_text(&self) -> u32 {
        self.inner.end_of_text()
    }

    pub fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A fine-tuned classifier artifact bound to its vocabulary.
#[pyclass(module = "quicktext_py", unsendable)]
pub struct Classifier {
    backend: ModelBackend,
}

fn parse_role(role: &str) -> PyResult<Role> {
    serde_json::from_value(serde_json::Value::String(role.to_ascii_uppercase()))
        .map_err(|_| PyValueError::new_err(format!("unknown role {role:?}")))
}

#[pymethods]
impl Classifier {
    #[staticmethod]
    #[pyo3(signature = (checkpoint, vocab, max_len = None))]
    pub fn load(checkpoint: PathBuf, vocab: &Vocab, max_len: Option<usize>) -> PyResult<Self> {
        let artifact = ClassifierArtifact::load(&checkpoint).map_err(io_err)?;
        let backend = ModelBackend::new(artifact, vocab.inner.clone(), max_len.unwrap_or(usize::MAX)).map_err(value_err)?;
        Ok(Self { backend })
    }

    #[getter]
    pub fn version(&self) -> String {
        self.backend.model_version()
    }

    #[getter]
    pub fn n_classes(&self) -> usize {
        self.backend.catalog_size()
    }

    /// Top-k `(template_id, probability)` pairs for `(role, text)` messages,
    /// oldest first.
    #[pyo3(signature = (messages, k = 5))]
    pub fn predict(&mut self, messages: Vec<(String, String)>, k: usize) -> PyResult<Vec<(u32, f64)>> {
        if k == 0 || k > self.backend.catalog_size() {
            return Err(PyValueError::new_err(format!("k must be in 1..={}", self.backend.catalog_size())));
        }
        let messages = messages
            .into_iter()
            .map(|(role, text)| Ok(ContextMessage { role: parse_role(&role)?, text }))
            .collect::<PyResult<Vec<_>>>()?;
        let req = PredictRequest {
            case_id: String::new(),
            messages,
            k: Some(k),
        };
        let s = self.backend.predict(&req, k).map_err(value_err)?;
        Ok(s.template_ids.into_iter().zip(s.probabilities).collect())
    }
}

/// Synthetic support transcripts as JSON lines.
#[pyfunction]
#[pyo3(signature = (seed, n_cases, n_templates = 32, ambiguity = 0.0))]
pub fn generate_corpus(seed: u64, n_cases: usize, n_templates: usize, ambiguity: f64) -> PyResult<Vec<String>> {
    let catalog = TemplateCatalog::synthetic(n_templates).map_err(value_err)?;
    let ts = corpus::generate_corpus(seed, n_cases, &catalog, ambiguity).map_err(value_err)?;
    ts.iter().map(|t| serde_json::to_string(t).map_err(value_err)).collect()
}

/// Token ids of the newest messages that fit in `max_len`.
#[pyfunction]
pub fn truncate_context(texts: Vec<String>, max_len: usize, vocab: &Vocab) -> PyResult<Vec<u32>> {
    corpus::truncate_context(&texts, max_len, &vocab.inner).map_err(value_err)
}

fn preset_config(preset: &str, vocab_size: usize) -> PyResult<model::ModelConfig> {
    let p: Preset = preset.parse().map_err(value_err)?;
    Ok(p.config().with_vocab(vocab_size))
}

#[pyfunction]
pub fn count_params(preset: &str, vocab_size: usize) -> PyResult<usize> {
    Ok(model::count_params(&preset_config(preset, vocab_size)?))
}

/// Training FLOPs for `tokens` tokens at 6 FLOPs per parameter per token.
#[pyfunction]
pub fn flops_for_tokens(preset: &str, vocab_size: usize, tokens: u64) -> PyResult<f64> {
    Ok(model::flops_for_tokens(&preset_config(preset, vocab_size)?, tokens))
}

#[pyfunction]
pub fn top_k(logits: Vec<f32>, k: usize) -> Vec<usize> {
    train::top_k(&logits, k)
}

/// Interpolated percentile, `q` in [0, 1].
#[pyfunction]
pub fn percentile(values: Vec<f64>, q: f64) -> Option<f64> {
    latency::percentile(&values, q)
}

#[pyfunction]
pub fn open_loop_schedule(rate: f64, duration_sec: f64) -> Vec<f64> {
    latency::open_loop_schedule(rate, duration_sec)
}

#[pyfunction]
#[pyo3(signature = (case_id, holdout_fraction = 0.02, salt = "holdout-v1"))]
pub fn assign_group(case_id: &str, holdout_fraction: f64, salt: &str) -> &'static str {
    match abtest::assign_group(case_id, holdout_fraction, salt) {
        abtest::Group::Holdout => "holdout",
        abtest::Group::Treatment => "treatment",
    }
}

#[pyclass(module = "quicktext_py", frozen, get_all, skip_from_py_object)]
#[derive(Clone, Debug)]
pub struct Trend {
    pub s: i64,
    pub var_s: f64,
    pub z: f64,
    pub p_value: f64,
    pub direction: String,
}

#[pyfunction]
pub fn mann_kendall(x: Vec<f64>) -> PyResult<Trend> {
    let t = abtest::mann_kendall(&x).map_err(value_err)?;
    Ok(Trend {
        s: t.s,
        var_s: t.var_s,
        z: t.z,
        p_value: t.p_value,
        direction: match t.direction {
            Direction::Increasing => "increasing",
            Direction::Decreasing => "decreasing",
            Direction::None => "none",
        }
        .into(),
    })
}

#[pyclass(module = "quicktext_py", frozen, get_all, skip_from_py_object)]
#[derive(Clone, Debug)]
pub struct Welch {
    pub mean_a: f64,
    pub mean_b: f64,
    pub t_stat: f64,
    pub dof: f64,
    pub p_value: f64,
}

#[pyfunction]
pub fn welch_t_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<Welch> {
    let r = abtest::welch_t_test(&a, &b).map_err(value_err)?;
    Ok(Welch {
        mean_a: r.mean_a,
        mean_b: r.mean_b,
        t_stat: r.t_stat,
        dof: r.dof,
        p_value: r.p_value,
    })
}

#[pymodule]
fn quicktext_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocab>()?;
    m.add_class::<Classifier>()?;
    m.add_class::<Trend>()?;
    m.add_class::<Welch>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(truncate_context, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(flops_for_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add_function(wrap_pyfunction!(open_loop_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(assign_group, m)?)?;
    m.add_function(wrap_pyfunction!(mann_kendall, m)?)?;
    m.add_function(wrap_pyfunction!(welch_t_test, m)?)?;
    Ok(())
}
