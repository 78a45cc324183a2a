//! Run manifest: a sectioned `key = value` document.
//!
//! Optimizer and schedule keys follow the usual trainer config names
//! (`lr-decay-style`, `optimizer.params.betas`, `max-steps`, ...). Unknown
//! sections and keys are rejected with their line number.
//!
//! ```text
//! [run]
//! seed = 1
//! out = runs
//!
//! [adapt]
//! max-steps = 2000
//! save-steps = 0.1
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use quicktext::hashing::sha256_hex;
use quicktext::model::{PositionEncoding, Preset};
use quicktext::nn::DecayKind;
use quicktext::tokenizer::PAD_ID;
use quicktext::train::{AdaptConfig, FineTuneConfig, Objective, Report};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
    /// Defaults to a prefix of the manifest hash.
    pub run_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_cases: usize,
    pub n_templates: usize,
    pub ambiguity: f64,
    /// Share of cases used for adaptation; the rest feed fine-tuning.
    pub pretrain_fraction: f64,
    /// Share of fine-tuning cases held out for test metrics.
    pub test_fraction: f64,
    /// Requests written to the load-test pool.
    pub pool_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerSpec {
    pub vocab_size: usize,
    /// Pre-training documents the merges are learned from.
    pub sample_cases: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub presets: Vec<Preset>,
    pub position: PositionEncoding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptSpec {
    /// Everything except the learning rate, seed and per-preset step count.
    pub base: AdaptConfig,
    pub context_length: usize,
    pub lr_override: Option<f64>,
    pub max_steps_override: BTreeMap<Preset, u64>,
    pub heldout_fraction: f64,
}

impl AdaptSpec {
    pub fn config_for(&self, preset: Preset, seed: u64) -> AdaptConfig {
        AdaptConfig {
            max_steps: self.max_steps_override.get(&preset).copied().unwrap_or(self.base.max_steps),
            lr_peak: self.lr_override.unwrap_or(preset.lr_peak()),
            seq_len: self.context_length + 1,
            seed,
            ..self.base.clone()
        }
    }

    pub fn is_masked(&self) -> bool {
        matches!(self.base.objective, Objective::Masked { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub run: RunSection,
    pub corpus: CorpusSpec,
    pub tokenizer: TokenizerSpec,
    pub model: ModelSpec,
    pub adapt: AdaptSpec,
    pub finetune: FineTuneConfig,
    pub sweep: SweepSpec,
    /// Normalized `section.key=value` lines; the basis of the config hash.
    canonical: Vec<String>,
}

type Fields = BTreeMap<(String, String), (usize, String)>;

const KEYS: &[(&str, &[&str])] = &[
    ("run", &["seed", "out", "run-id"]),
    (
        "corpus",
        &["n-cases", "n-templates", "ambiguity", "pretrain-fraction", "test-fraction", "pool-size"],
    ),
    ("tokenizer", &["vocab-size", "sample-cases"]),
    ("model", &["presets", "position"]),
    (
        "adapt",
        &[
            "fp16.enabled",
            "lr-decay-style",
            "max-position-embeddings",
            "optimizer.params.betas",
            "optimizer.type",
            "warmup",
            "weight-decay",
            "max-steps",
            "eval-steps",
            "save-steps",
            "learning rate",
            "batch size",
            "clip-grad",
            "objective",
            "mask-rate",
            "heldout-fraction",
        ],
    ),
    (
        "finetune",
        &[
            "fp16.enabled",
            "lr-decay-style",
            "max-position-embeddings",
            "optimizer.params.betas",
            "optimizer.type",
            "warmup",
            "weight-decay",
            "learning rate",
            "batch size",
            "num-train-epochs",
            "clip-grad",
            "report",
        ],
    ),
    ("sweep", &["workers"]),
];

fn known(section: &str, key: &str) -> bool {
    if section == "adapt" {
        if let Some(preset) = key.strip_prefix("max-steps.") {
            return preset.parse::<Preset>().is_ok();
        }
    }
    KEYS.iter()
        .any(|(s, keys)| *s == section && keys.contains(&key))
}

fn parse_fields(text: &str) -> Result<Fields, CliError> {
    let mut fields = Fields::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !KEYS.iter().any(|(s, _)| *s == name) {
                return Err(CliError::config(format!("line {n}: unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::config(format!("line {n}: expected `key = value`")));
        };
        let Some(sec) = &section else {
            return Err(CliError::config(format!("line {n}: key outside a section")));
        };
        let key = k.split_whitespace().collect::<Vec<_>>().join(" ");
        if !known(sec, &key) {
            return Err(CliError::config(format!("line {n}: unknown key {sec}.{key}")));
        }
        if let Some((first, _)) = fields.insert((sec.clone(), key.clone()), (n, v.trim().to_string())) {
            return Err(CliError::config(format!("line {n}: {sec}.{key} already set on line {first}")));
        }
    }
    Ok(fields)
}

struct Reader {
    fields: Fields,
}

impl Reader {
    fn raw(&self, sec: &str, key: &str) -> Option<&(usize, String)> {
        self.fields.get(&(sec.to_string(), key.to_string()))
    }

    fn get<T: FromStr>(&self, sec: &str, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        match self.raw(sec, key) {
            None => Ok(default),
            Some((n, v)) => v
                .parse()
                .map_err(|e| CliError::config(format!("line {n}: {sec}.{key} = {v:?}: {e}"))),
        }
    }

    fn opt<T: FromStr>(&self, sec: &str, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        match self.raw(sec, key) {
            None => Ok(None),
            Some((n, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| CliError::config(format!("line {n}: {sec}.{key} = {v:?}: {e}"))),
        }
    }

    fn bool(&self, sec: &str, key: &str) -> Result<bool, CliError> {
        match self.raw(sec, key) {
            None => Ok(false),
            Some((n, v)) => match v.to_ascii_lowercase().as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(CliError::config(format!("line {n}: {sec}.{key} must be true or false"))),
            },
        }
    }

    fn betas(&self, sec: &str, default: (f64, f64)) -> Result<(f64, f64), CliError> {
        let Some((n, v)) = self.raw(sec, "optimizer.params.betas") else {
            return Ok(default);
        };
        let inner = v.trim().trim_start_matches('[').trim_end_matches(']');
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [a, b] => match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(a), Ok(b)) if (0.0..1.0).contains(&a) && (0.0..1.0).contains(&b) => Ok((a, b)),
                _ => Err(CliError::config(format!("line {n}: {sec}.optimizer.params.betas must be two numbers in [0, 1)"))),
            },
            _ => Err(CliError::config(format!("line {n}: {sec}.optimizer.params.betas expects [b1, b2]"))),
        }
    }

    fn optimizer(&self, sec: &str) -> Result<(), CliError> {
        if let Some((n, v)) = self.raw(sec, "optimizer.type") {
            if !v.eq_ignore_ascii_case("adamw") {
                return Err(CliError::config(format!("line {n}: {sec}.optimizer.type {v:?} unsupported (only AdamW)")));
            }
        }
        if self.bool(sec, "fp16.enabled")? {
            log::warn!("{sec}.fp16.enabled = true ignored; training runs in fp32");
        }
        Ok(())
    }

    fn clip(&self, sec: &str) -> Result<Option<f64>, CliError> {
        let c: f64 = self.get(sec, "clip-grad", 1.0)?;
        Ok((c > 0.0).then_some(c))
    }
}

fn err_at<T>(r: &Reader, sec: &str, key: &str, msg: impl fmt::Display) -> Result<T, CliError> {
    let line = r.raw(sec, key).map_or(String::new(), |(n, _)| format!("line {n}: "));
    Err(CliError::config(format!("{line}{sec}.{key}: {msg}")))
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let fields = parse_fields(text)?;
        let canonical = fields
            .iter()
            .map(|((s, k), (_, v))| format!("{s}.{k}={v}"))
            .collect();
        let r = Reader { fields };

        let run = RunSection {
            seed: r.get("run", "seed", 0)?,
            out: r.get("run", "out", PathBuf::from("runs"))?,
            run_id: r.raw("run", "run-id").map(|(_, v)| v.clone()),
        };
        if let Some(id) = &run.run_id {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || id.starts_with('.') {
                return err_at(&r, "run", "run-id", "use letters, digits, '-', '_' or '.'");
            }
        }

        let corpus = CorpusSpec {
            n_cases: r.get("corpus", "n-cases", 8000)?,
            n_templates: r.get("corpus", "n-templates", 32)?,
            ambiguity: r.get("corpus", "ambiguity", 0.0)?,
            pretrain_fraction: r.get("corpus", "pretrain-fraction", 0.5)?,
            test_fraction: r.get("corpus", "test-fraction", 0.5)?,
            pool_size: r.get("corpus", "pool-size", 10_000)?,
        };
        if corpus.n_cases < 4 {
            return err_at(&r, "corpus", "n-cases", "need at least 4 cases");
        }
        if corpus.n_templates < 2 {
            return err_at(&r, "corpus", "n-templates", "need at least 2 templates");
        }
        if !(0.0..=1.0).contains(&corpus.ambiguity) {
            return err_at(&r, "corpus", "ambiguity", "must be in [0, 1]");
        }
        for key in ["pretrain-fraction", "test-fraction"] {
            let f = if key == "pretrain-fraction" { corpus.pretrain_fraction } else { corpus.test_fraction };
            if !(f > 0.0 && f < 1.0) {
                return err_at(&r, "corpus", key, "must be in (0, 1)");
            }
        }

        let tokenizer = TokenizerSpec {
            vocab_size: r.get("tokenizer", "vocab-size", 512)?,
            sample_cases: r.get("tokenizer", "sample-cases", 1000)?,
        };
        if tokenizer.vocab_size < quicktext::tokenizer::MIN_VOCAB {
            return err_at(&r, "tokenizer", "vocab-size", format!("must be at least {}", quicktext::tokenizer::MIN_VOCAB));
        }
        if tokenizer.sample_cases == 0 {
            return err_at(&r, "tokenizer", "sample-cases", "must be positive");
        }

        let presets = match r.raw("model", "presets") {
            None => vec![Preset::Nano],
            Some((n, v)) => {
                let mut out = Vec::new();
                for name in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let p: Preset = name.parse().map_err(|e| CliError::config(format!("line {n}: model.presets: {e}")))?;
                    if out.contains(&p) {
                        return Err(CliError::config(format!("line {n}: model.presets lists {p} twice")));
                    }
                    out.push(p);
                }
                if out.is_empty() {
                    return Err(CliError::config(format!("line {n}: model.presets is empty")));
                }
                out
            }
        };
        let position = match r.raw("model", "position").map(|(_, v)| v.as_str()) {
            None | Some("absolute") => PositionEncoding::Absolute,
            Some("rotary") => PositionEncoding::Rotary,
            Some(other) => return err_at(&r, "model", "position", format!("{other:?} is not absolute or rotary")),
        };
        let model = ModelSpec { presets, position };

        r.optimizer("adapt")?;
        let objective = match r.raw("adapt", "objective").map(|(_, v)| v.as_str()) {
            None | Some("causal") => Objective::Causal,
            Some("masked") => Objective::Masked {
                mask_rate: r.get("adapt", "mask-rate", 0.15)?,
                mask_id: PAD_ID,
            },
            Some(other) => return err_at(&r, "adapt", "objective", format!("{other:?} is not causal or masked")),
        };
        let defaults = AdaptConfig::default();
        let base = AdaptConfig {
            max_steps: r.get("adapt", "max-steps", 2000)?,
            batch_size: r.get("adapt", "batch size", defaults.batch_size)?,
            decay: r.get("adapt", "lr-decay-style", DecayKind::Cosine)?,
            warmup_fraction: r.get("adapt", "warmup", defaults.warmup_fraction)?,
            betas: r.betas("adapt", defaults.betas)?,
            weight_decay: r.get("adapt", "weight-decay", defaults.weight_decay)?,
            eval_fraction: r.get("adapt", "eval-steps", defaults.eval_fraction)?,
            save_fraction: r.get("adapt", "save-steps", defaults.save_fraction)?,
            grad_clip: r.clip("adapt")?,
            objective,
            ..defaults
        };
        let mut max_steps_override = BTreeMap::new();
        for p in Preset::ALL {
            if let Some(steps) = r.opt::<u64>("adapt", &format!("max-steps.{p}"))? {
                max_steps_override.insert(p, steps);
            }
        }
        let adapt = AdaptSpec {
            base,
            context_length: r.get("adapt", "max-position-embeddings", 64)?,
            lr_override: r.opt("adapt", "learning rate")?,
            max_steps_override,
            heldout_fraction: r.get("adapt", "heldout-fraction", 0.02)?,
        };
        if adapt.context_length < 2 {
            return err_at(&r, "adapt", "max-position-embeddings", "must be at least 2");
        }
        if !(adapt.heldout_fraction > 0.0 && adapt.heldout_fraction < 1.0) {
            return err_at(&r, "adapt", "heldout-fraction", "must be in (0, 1)");
        }
        for p in &model.presets {
            adapt
                .config_for(*p, 0)
                .validate()
                .map_err(|e| CliError::config(format!("adapt ({p}): {e}")))?;
        }

        r.optimizer("finetune")?;
        let masked = adapt.is_masked();
        let ft_defaults = if masked { FineTuneConfig::masked_baseline() } else { FineTuneConfig::default() };
        let report = match r.raw("finetune", "report").map(|(_, v)| v.as_str()) {
            None => ft_defaults.report,
            Some("final") => Report::Final,
            Some("best-epoch") => Report::BestEpoch,
            Some(other) => return err_at(&r, "finetune", "report", format!("{other:?} is not final or best-epoch")),
        };
        let finetune = FineTuneConfig {
            epochs: r.get("finetune", "num-train-epochs", ft_defaults.epochs)?,
            lr: r.get("finetune", "learning rate", 3e-3)?,
            decay: r.get("finetune", "lr-decay-style", ft_defaults.decay)?,
            warmup_fraction: r.get("finetune", "warmup", ft_defaults.warmup_fraction)?,
            betas: r.betas("finetune", ft_defaults.betas)?,
            weight_decay: r.get("finetune", "weight-decay", ft_defaults.weight_decay)?,
            batch_size: r.get("finetune", "batch size", 16)?,
            max_len: r.get("finetune", "max-position-embeddings", adapt.context_length)?,
            grad_clip: r.clip("finetune")?,
            report,
            seed: 0,
        };
        finetune.validate().map_err(|e| CliError::config(format!("finetune: {e}")))?;
        if finetune.max_len > adapt.context_length {
            return err_at(
                &r,
                "finetune",
                "max-position-embeddings",
                format!("exceeds the backbone context {}", adapt.context_length),
            );
        }

        let sweep = SweepSpec {
            workers: r.get("sweep", "workers", 1)?,
        };
        if sweep.workers == 0 {
            return err_at(&r, "sweep", "workers", "must be positive");
        }

        Ok(Self {
            run,
            corpus,
            tokenizer,
            model,
            adapt,
            finetune,
            sweep,
            canonical,
        })
    }

    /// SHA-256 of the normalized key/value pairs; formatting and comments
    /// do not affect it.
    pub fn config_hash(&self) -> String {
        sha256_hex(self.canonical.join("\n").as_bytes())
    }

    pub fn run_id(&self) -> String {
        self.run.run_id.clone().unwrap_or_else(|| self.config_hash()[..12].to_string())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run.out.join(self.run_id())
    }

    /// Independent seed for a named pipeline stage.
    pub fn seed_for(&self, stage: &str) -> u64 {
        let h = sha256_hex(format!("{}/{stage}", self.run.seed).as_bytes());
        u64::from_str_radix(&h[..16], 16).unwrap_or(0)
    }

    pub fn canonical(&self) -> &[String] {
        &self.canonical
    }
}
