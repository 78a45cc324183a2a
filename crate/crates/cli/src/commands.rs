use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use quicktext::abtest::{
    accuracy_vs_savings, mann_kendall, savings_trend, selection_time_summary, simulate, welch_t_test, AbResult, Group,
    PredictionRecord, SelectionEvent, SimConfig, TemplateSavings, TrendResult,
};
use quicktext::checkpoint::{Checkpoint, ClassifierArtifact};
use quicktext::corpus::{read_ndjson, read_transcripts, write_ndjson, write_transcripts, TemplateCatalog, Transcript};
use quicktext::latency::DEFAULT_WINDOW_SEC;
use quicktext::model::Preset;
use quicktext::plot::{Axis, Chart, Series};
use quicktext::scaling::{self, read_points, ScalingPoint};
use quicktext::tokenizer::Vocab;
use quicktext::train::{EvalMetrics, FineTuneOutcome, LedgerRow};
use quicktext_serve::api::PredictRequest;
use quicktext_serve::backend::{Backend, BackendError, MockBackend, ModelBackend};
use quicktext_serve::loadgen::{run_load_test, write_report_csv, write_samples_csv, LoadTestPlan};
use quicktext_serve::server::{self, AppState, ServeConfig, DEFAULT_HOLDOUT_FRACTION, DEFAULT_QUEUE_DEPTH, DEFAULT_SALT};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::manifest::RunManifest;
use crate::pipeline::{self, Prepared};
use crate::stamp::Stamp;

#[derive(Debug, Parser)]
#[command(name = "quicktext", version, about = "Domain-adapted decoder classifiers for template suggestion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ManifestArg {
    /// Run manifest.
    #[arg(long, short)]
    pub manifest: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic transcripts, the template catalog and a request pool.
    GenCorpus(ManifestArg),
    /// Learn BPE merges from the adaptation split.
    TrainTokenizer(ManifestArg),
    /// Continue pre-training a preset on in-domain text.
    Adapt {
        #[command(flatten)]
        m: ManifestArg,
        /// Defaults to every preset in the manifest.
        #[arg(long)]
        preset: Option<Preset>,
    },
    /// Fine-tune a classifier from an adaptation checkpoint.
    Finetune {
        #[command(flatten)]
        m: ManifestArg,
        #[arg(long)]
        preset: Option<Preset>,
        /// Checkpoint step; defaults to the last one saved.
        #[arg(long, conflicts_with = "from_init")]
        step: Option<u64>,
        /// Start from the untrained initialization instead.
        #[arg(long)]
        from_init: bool,
    },
    /// Adapt every preset, fine-tune every checkpoint, write scaling points.
    Sweep {
        #[command(flatten)]
        m: ManifestArg,
        /// Overrides sweep.workers.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Fits and charts from a scaling points CSV.
    ScalingReport {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve top-k template predictions over HTTP.
    Serve(ServeArgs),
    /// Open-loop load test against a running service.
    Loadtest(LoadtestArgs),
    /// Selection-time analytics over event logs.
    Abtest {
        #[command(subcommand)]
        command: AbCommand,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Classifier checkpoint. Omit with --mock-ms.
    #[arg(long, required_unless_present = "mock_ms")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "mock_ms")]
    pub vocab: Option<PathBuf>,
    /// Template catalog CSV; its size must match the classifier head.
    #[arg(long, required_unless_present = "mock_ms")]
    pub catalog: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = DEFAULT_QUEUE_DEPTH)]
    pub queue_depth: usize,
    /// Context token budget; defaults to the model context.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_HOLDOUT_FRACTION)]
    pub holdout_fraction: f64,
    #[arg(long, default_value = DEFAULT_SALT)]
    pub salt: String,
    #[arg(long)]
    pub prediction_log: Option<PathBuf>,
    #[arg(long)]
    pub event_log: Option<PathBuf>,
    /// Serve a fixed-latency mock instead of a model.
    #[arg(long)]
    pub mock_ms: Option<u64>,
    /// Catalog size reported by the mock.
    #[arg(long, default_value_t = 640)]
    pub mock_catalog: usize,
}

#[derive(Debug, Args)]
pub struct LoadtestArgs {
    /// Comma-separated request rates per second.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    pub rps: Vec<f64>,
    #[arg(long, default_value_t = 300.0)]
    pub duration: f64,
    /// NDJSON of predict requests.
    #[arg(long)]
    pub pool: PathBuf,
    /// Report CSV; raw samples go next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub url: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_WINDOW_SEC)]
    pub window: f64,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120.0)]
    pub timeout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CompareBy {
    Group,
    ModelVersion,
}

#[derive(Debug, Subcommand)]
pub enum AbCommand {
    /// Weekly mean selection time per group.
    Summarize {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mann-Kendall trends of weekly savings and of savings against accuracy.
    Trend {
        #[arg(long)]
        events: PathBuf,
        /// Prediction log; enables the per-template accuracy analysis.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        top_n: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Welch's t-test on selection times.
    Compare {
        #[arg(long)]
        events: PathBuf,
        #[arg(long, value_enum, default_value_t = CompareBy::Group)]
        by: CompareBy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write synthetic event and prediction logs.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        sessions: usize,
        #[arg(long, default_value_t = DEFAULT_HOLDOUT_FRACTION)]
        holdout_fraction: f64,
        #[arg(long, default_value_t = 40)]
        templates: usize,
        #[arg(long, default_value_t = 8)]
        weeks: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(m) => gen_corpus(&RunManifest::load(&m.manifest)?).map(drop),
        Command::TrainTokenizer(m) => train_tokenizer(&RunManifest::load(&m.manifest)?).map(drop),
        Command::Adapt { m, preset } => adapt(&RunManifest::load(&m.manifest)?, preset),
        Command::Finetune {
            m,
            preset,
            step,
            from_init,
        } => finetune(&RunManifest::load(&m.manifest)?, preset, step, from_init).map(drop),
        Command::Sweep { m, workers } => {
            let mut man = RunManifest::load(&m.manifest)?;
            if let Some(w) = workers {
                if w == 0 {
                    return Err(CliError::config("--workers must be positive"));
                }
                man.sweep.workers = w;
            }
            sweep(&man).map(drop)
        }
        Command::ScalingReport { points, out } => scaling_report(&points, &out).map(drop),
        Command::Serve(a) => serve(a),
        Command::Loadtest(a) => loadtest(a),
        Command::Abtest { command } => abtest(command),
    }
}

/// Fixed artifact locations inside a run directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(m: &RunManifest) -> Self {
        Self { root: m.run_dir() }
    }
    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn transcripts(&self) -> PathBuf {
        self.corpus_dir().join("transcripts.ndjson")
    }
    pub fn catalog(&self) -> PathBuf {
        self.corpus_dir().join("catalog.csv")
    }
    pub fn pool(&self) -> PathBuf {
        self.corpus_dir().join("pool.ndjson")
    }
    pub fn tokenizer_dir(&self) -> PathBuf {
        self.root.join("tokenizer")
    }
    pub fn vocab(&self) -> PathBuf {
        self.tokenizer_dir().join("vocab.txt")
    }
    pub fn adapt_dir(&self, p: Preset) -> PathBuf {
        self.root.join("adapt").join(p.to_string())
    }
    pub fn checkpoint(&self, p: Preset, step: u64) -> PathBuf {
        self.adapt_dir(p).join(format!("step-{step:06}.qtc"))
    }
    pub fn ledger(&self, p: Preset) -> PathBuf {
        self.adapt_dir(p).join("ledger.ndjson")
    }
    pub fn finetune_dir(&self, p: Preset, step: Option<u64>) -> PathBuf {
        let name = match step {
            Some(s) => format!("{p}-step{s:06}"),
            None => format!("{p}-init"),
        };
        self.root.join("finetune").join(name)
    }
    pub fn scaling_dir(&self) -> PathBuf {
        self.root.join("scaling")
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::config(format!("{} not found; run `{hint}` first", path.display())))
    }
}

/// Request pool for load tests: one request per labeled reply in the
/// fine-tuning split, sampled without replacement.
pub fn request_pool(m: &RunManifest, finetune: &[Transcript]) -> Vec<PredictRequest> {
    let all: Vec<PredictRequest> = finetune
        .iter()
        .flat_map(|t| t.labeled_replies().map(move |i| PredictRequest::from_transcript(t, i, None)))
        .collect();
    let n = m.corpus.pool_size.min(all.len());
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed_for("pool"));
    let mut picks = index::sample(&mut rng, all.len(), n).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| all[i].clone()).collect()
}

fn write_corpus(m: &RunManifest, catalog: &TemplateCatalog, transcripts: &[Transcript]) -> Result<Vec<PathBuf>> {
    let l = Layout::new(m);
    std::fs::create_dir_all(l.corpus_dir())?;
    write_transcripts(&l.transcripts(), transcripts)?;
    catalog.write_csv(&l.catalog())?;
    let (_, finetune) = pipeline::split_cases(m, transcripts)?;
    write_ndjson(&l.pool(), &request_pool(m, &finetune))?;
    Ok(vec![l.transcripts(), l.catalog(), l.pool()])
}

fn manifest_stamp(m: &RunManifest, command: &str) -> Stamp {
    Stamp::new(command, Some(m.run.seed), m.config_hash())
}

pub fn gen_corpus(m: &RunManifest) -> Result<PathBuf> {
    let (catalog, transcripts) = pipeline::generate(m)?;
    let written = write_corpus(m, &catalog, &transcripts)?;
    let mut st = manifest_stamp(m, "gen-corpus");
    st.outputs(&written)?;
    let dir = Layout::new(m).corpus_dir();
    st.write(&dir)?;
    println!("{} transcripts, {} templates -> {}", transcripts.len(), catalog.len(), dir.display());
    Ok(dir)
}

fn load_corpus(m: &RunManifest) -> Result<(TemplateCatalog, Vec<Transcript>)> {
    let l = Layout::new(m);
    require(&l.transcripts(), "gen-corpus")?;
    Ok((TemplateCatalog::read_csv(&l.catalog())?, read_transcripts(&l.transcripts())?))
}

pub fn train_tokenizer(m: &RunManifest) -> Result<PathBuf> {
    let (_, transcripts) = load_corpus(m)?;
    let (pretrain, _) = pipeline::split_cases(m, &transcripts)?;
    let vocab = pipeline::train_tokenizer(m, &pretrain)?;
    let l = Layout::new(m);
    std::fs::create_dir_all(l.tokenizer_dir())?;
    vocab.save(&l.vocab())?;
    let mut st = manifest_stamp(m, "train-tokenizer");
    st.input(&l.transcripts())?;
    st.outputs(&[l.vocab()])?;
    st.write(&l.tokenizer_dir())?;
    println!("vocab {} tokens ({}) -> {}", vocab.len(), &vocab.hash()[..12], l.vocab().display());
    Ok(l.vocab())
}

/// Corpus and vocabulary from disk, with the derived datasets.
fn load_prepared(m: &RunManifest) -> Result<Prepared> {
    let (catalog, transcripts) = load_corpus(m)?;
    let l = Layout::new(m);
    require(&l.vocab(), "train-tokenizer")?;
    let vocab = Vocab::load(&l.vocab())?;
    let (pretrain, finetune) = pipeline::split_cases(m, &transcripts)?;
    let data = pipeline::datasets(m, &pretrain, &finetune, &vocab)?;
    Ok(Prepared {
        catalog,
        transcripts,
        vocab,
        data,
    })
}

fn write_adapt_outputs(m: &RunManifest, preset: Preset, checkpoints: &[Checkpoint], ledger: &[LedgerRow]) -> Result<Vec<PathBuf>> {
    let l = Layout::new(m);
    std::fs::create_dir_all(l.adapt_dir(preset))?;
    let mut written = Vec::new();
    for ck in checkpoints {
        let path = l.checkpoint(preset, ck.step);
        ck.save(&path)?;
        written.push(path);
    }
    write_ndjson(&l.ledger(preset), ledger)?;
    written.push(l.ledger(preset));
    Ok(written)
}

fn presets(m: &RunManifest, one: Option<Preset>) -> Vec<Preset> {
    one.map_or_else(|| m.model.presets.clone(), |p| vec![p])
}

pub fn adapt(m: &RunManifest, preset: Option<Preset>) -> Result<()> {
    let prep = load_prepared(m)?;
    let l = Layout::new(m);
    for p in presets(m, preset) {
        let run = pipeline::adapt(m, p, &prep.vocab, &prep.data)?;
        let written = write_adapt_outputs(m, p, &run.checkpoints, &run.ledger)?;
        let mut st = manifest_stamp(m, "adapt");
        st.input(&l.transcripts())?;
        st.input(&l.vocab())?;
        st.outputs(&written)?;
        st.write(&l.adapt_dir(p))?;
        for ck in &run.checkpoints {
            println!(
                "{p} step {} tokens {} eval loss {:.4}",
                ck.step,
                ck.tokens_seen,
                ck.eval_loss.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct FineTuneSummary<'a> {
    preset: String,
    step: Option<u64>,
    tokens_seen: u64,
    metrics: &'a EvalMetrics,
    epoch_metrics: &'a [EvalMetrics],
    best_epoch: usize,
    final_train_loss: Option<f64>,
}

fn write_finetune_outputs(
    dir: &Path,
    preset: Preset,
    step: Option<u64>,
    tokens_seen: u64,
    vocab: &Vocab,
    out: &FineTuneOutcome,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let art = ClassifierArtifact {
        classifier: out.classifier.clone(),
        vocab_hash: vocab.hash(),
        step: step.unwrap_or(0),
        tokens_seen,
    };
    let ck = dir.join("classifier.qtc");
    art.save(&ck)?;
    let summary = FineTuneSummary {
        preset: preset.to_string(),
        step,
        tokens_seen,
        metrics: &out.metrics,
        epoch_metrics: &out.epoch_metrics,
        best_epoch: out.best_epoch,
        final_train_loss: out.train_losses.last().copied(),
    };
    let metrics = dir.join("metrics.json");
    std::fs::write(&metrics, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(vec![ck, metrics])
}

fn latest_checkpoint(dir: &Path) -> Result<u64> {
    let mut steps = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(s) = name.strip_prefix("step-").and_then(|s| s.strip_suffix(".qtc")) {
            if let Ok(s) = s.parse::<u64>() {
                steps.push(s);
            }
        }
    }
    steps
        .into_iter()
        .max()
        .ok_or_else(|| CliError::config(format!("no checkpoints in {}", dir.display())))
}

pub fn finetune(m: &RunManifest, preset: Option<Preset>, step: Option<u64>, from_init: bool) -> Result<Vec<EvalMetrics>> {
    let prep = load_prepared(m)?;
    let l = Layout::new(m);
    let mut all = Vec::new();
    for p in presets(m, preset) {
        let mut st = manifest_stamp(m, "finetune");
        st.input(&l.transcripts())?;
        st.input(&l.vocab())?;
        let (backbone, used_step, tokens) = if from_init {
            (pipeline::init_model(m, p, &prep.vocab)?, None, 0)
        } else {
            require(&l.adapt_dir(p), "adapt")?;
            let s = match step {
                Some(s) => s,
                None => latest_checkpoint(&l.adapt_dir(p))?,
            };
            let path = l.checkpoint(p, s);
            require(&path, "adapt")?;
            let ck = Checkpoint::load(&path)?;
            if ck.vocab_hash != prep.vocab.hash() {
                return Err(CliError::config(format!("{} was trained with a different vocabulary", path.display())));
            }
            st.input(&path)?;
            (ck.model, Some(s), ck.tokens_seen)
        };
        let out = pipeline::finetune(m, &backbone, &prep.data, prep.catalog.len())?;
        let dir = l.finetune_dir(p, used_step);
        let written = write_finetune_outputs(&dir, p, used_step, tokens, &prep.vocab, &out)?;
        st.outputs(&written)?;
        st.write(&dir)?;
        println!(
            "{p} {}: cls loss {:.4} top1 {:.4} top3 {:.4} top5 {:.4} (n={})",
            used_step.map_or("init".to_string(), |s| format!("step {s}")),
            out.metrics.cls_loss,
            out.metrics.top(1),
            out.metrics.top(3),
            out.metrics.top(5),
            out.metrics.n_examples
        );
        all.push(out.metrics);
    }
    Ok(all)
}

/// Full sweep; writes every artifact and returns the scaling directory.
pub fn sweep(m: &RunManifest) -> Result<PathBuf> {
    let prep = pipeline::prepare(m)?;
    let l = Layout::new(m);
    let mut written = write_corpus(m, &prep.catalog, &prep.transcripts)?;
    std::fs::create_dir_all(l.tokenizer_dir())?;
    prep.vocab.save(&l.vocab())?;
    written.push(l.vocab());
    let result = pipeline::sweep(m, &prep, |run| {
        written.extend(write_adapt_outputs(m, run.preset, &run.checkpoints, &run.ledger)?);
        let last = run.checkpoints.last().map(|c| (c.step, c.tokens_seen)).unwrap_or_default();
        written.extend(write_finetune_outputs(
            &l.finetune_dir(run.preset, Some(last.0)),
            run.preset,
            Some(last.0),
            last.1,
            &prep.vocab,
            &run.final_outcome,
        )?);
        for f in &run.finetunes {
            println!(
                "{} step {}: cls loss {:.4} top1 {:.4} top5 {:.4}",
                f.model_name, f.step, f.cls_loss, f.top1, f.top5
            );
        }
        Ok(())
    })?;
    let dir = l.scaling_dir();
    written.extend(pipeline::write_report(&dir, &result)?);
    if !result.skipped.is_empty() {
        let p = dir.join("skipped.ndjson");
        write_ndjson(&p, &result.skipped)?;
        written.push(p);
    }
    let mut st = manifest_stamp(m, "sweep");
    st.outputs(&written)?;
    st.write(&l.root)?;
    print_fits(&result.fits);
    println!("{} scaling points -> {}", result.points.len(), dir.display());
    Ok(dir)
}

fn print_fits(fits: &[scaling::FitRow]) {
    for f in fits {
        println!(
            "fit {} {} vs {}: slope {:.5} intercept {:.4} r2 {:.4} (n={})",
            f.scope, f.y, f.x, f.slope, f.intercept, f.r_squared, f.n_points
        );
    }
}

pub fn scaling_report(points: &Path, out: &Path) -> Result<Vec<ScalingPoint>> {
    let pts = read_points(points)?;
    let fits = scaling::standard_fits(&pts);
    let written = scaling::emit_report(&pts, &fits, out)?;
    let mut st = Stamp::new("scaling-report", None, Stamp::args_hash(&BTreeMap::from([("points", points.display().to_string())])));
    st.input(points)?;
    st.outputs(&written)?;
    st.write(out)?;
    print_fits(&fits);
    Ok(pts)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn load_backend(a: &ServeArgs) -> std::result::Result<Box<dyn Backend>, BackendError> {
    let model_err = |e: &dyn std::fmt::Display| BackendError::Model(e.to_string());
    let (Some(ck), Some(vocab), Some(catalog)) = (&a.checkpoint, &a.vocab, &a.catalog) else {
        return Err(BackendError::Model("checkpoint, vocab and catalog are required".into()));
    };
    let art = ClassifierArtifact::load(ck).map_err(|e| model_err(&e))?;
    let vocab = Vocab::load(vocab).map_err(|e| model_err(&e))?;
    let catalog = TemplateCatalog::read_csv(catalog).map_err(|e| model_err(&e))?;
    if catalog.len() != art.classifier.n_classes() {
        return Err(BackendError::Model(format!(
            "catalog has {} templates but the classifier predicts {}",
            catalog.len(),
            art.classifier.n_classes()
        )));
    }
    let max_len = a.max_len.unwrap_or(usize::MAX);
    Ok(Box::new(ModelBackend::new(art, vocab, max_len)?))
}

pub fn serve(a: ServeArgs) -> Result<()> {
    if !(a.holdout_fraction >= 0.0 && a.holdout_fraction < 1.0) {
        return Err(CliError::config("--holdout-fraction must be in [0, 1)"));
    }
    for p in [&a.checkpoint, &a.vocab, &a.catalog].into_iter().flatten() {
        if a.mock_ms.is_none() && !p.exists() {
            return Err(CliError::config(format!("{} not found", p.display())));
        }
    }
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::config(format!("bad listen address: {e}")))?;
    let cfg = ServeConfig {
        queue_depth: a.queue_depth,
        holdout_fraction: a.holdout_fraction,
        salt: a.salt.clone(),
        prediction_log: a.prediction_log.clone(),
        event_log: a.event_log.clone(),
    };
    let state = match a.mock_ms {
        Some(ms) => {
            let catalog = a.mock_catalog;
            AppState::start(cfg, move || {
                Ok(Box::new(MockBackend {
                    service_time: Duration::from_millis(ms),
                    catalog_size: catalog,
                }) as Box<dyn Backend>)
            })?
        }
        None => AppState::start(cfg, move || load_backend(&a))?,
    };
    runtime()?.block_on(async move {
        let bound = server::spawn(addr, state).await?;
        println!("listening on http://{bound}");
        tokio::signal::ctrl_c().await?;
        Ok(())
    })
}

pub fn loadtest(a: LoadtestArgs) -> Result<()> {
    let pool: Vec<PredictRequest> = read_ndjson(&a.pool)?;
    let plan = LoadTestPlan {
        rates: a.rps.clone(),
        duration_sec: a.duration,
        pool,
        seed: a.seed,
        window_sec: a.window,
        request_timeout: Duration::try_from_secs_f64(a.timeout).map_err(|e| CliError::config(format!("--timeout: {e}")))?,
    };
    plan.validate()?;
    let runs = runtime()?.block_on(run_load_test(&plan, &a.url))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    write_report_csv(&a.out, &reports)?;
    let samples = a.out.with_extension("samples.csv");
    write_samples_csv(&samples, &runs)?;
    let args = BTreeMap::from([
        ("rps", format!("{:?}", a.rps)),
        ("duration", a.duration.to_string()),
        ("url", a.url.clone()),
        ("window", a.window.to_string()),
    ]);
    let mut st = Stamp::new("loadtest", Some(a.seed), Stamp::args_hash(&args));
    st.input(&a.pool)?;
    st.outputs(&[a.out.clone(), samples])?;
    st.write(a.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
    println!("rate\tavg_ms\tpeak_1min_avg_ms\tp99_ms\tmax_ms\terrors\tachieved_rps");
    for r in &reports {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.2}",
            r.rate,
            fmt(r.avg_ms),
            fmt(r.peak_window_avg_ms),
            fmt(r.p99_ms),
            fmt(r.max_ms),
            r.error_count,
            r.achieved_rps
        );
    }
    Ok(())
}

fn load_events(path: &Path) -> Result<Vec<SelectionEvent>> {
    let events: Vec<SelectionEvent> = read_ndjson(path)?;
    for (i, e) in events.iter().enumerate() {
        e.validate().map_err(|err| CliError::config(format!("{} line {}: {err}", path.display(), i + 1)))?;
    }
    if events.is_empty() {
        return Err(CliError::config(format!("{} holds no events", path.display())));
    }
    Ok(events)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(path.to_path_buf())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<PathBuf> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(path.to_path_buf())
}

fn write_svg(path: &Path, chart: Chart, series: &[Series]) -> Result<PathBuf> {
    std::fs::write(path, chart.render(series))?;
    Ok(path.to_path_buf())
}

fn stamp_abtest(command: &str, inputs: &[&Path], outputs: &[PathBuf], args: BTreeMap<&str, String>, dir: &Path) -> Result<()> {
    let mut st = Stamp::new(command, None, Stamp::args_hash(&args));
    for p in inputs {
        st.input(p)?;
    }
    st.outputs(outputs)?;
    st.write(dir)?;
    Ok(())
}

pub fn abtest(cmd: AbCommand) -> Result<()> {
    match cmd {
        AbCommand::Summarize { events, out } => {
            let ev = load_events(&events)?;
            std::fs::create_dir_all(&out)?;
            let weeks = selection_time_summary(&ev);
            let mut written = vec![write_csv(&out.join("weekly_selection_time.csv"), &weeks)?];
            let pick = |f: fn(&quicktext::abtest::WeekSummary) -> Option<f64>| -> Vec<(f64, f64)> {
                weeks.iter().enumerate().filter_map(|(i, w)| f(w).map(|v| (i as f64, v))).collect()
            };
            written.push(write_svg(
                &out.join("weekly_difference.svg"),
                Chart {
                    title: "Weekly selection-time difference (holdout - treatment)",
                    x_label: "Week",
                    y_label: "Seconds",
                    x_axis: Axis::Linear,
                    lines: true,
                },
                &[Series {
                    name: "difference".into(),
                    points: pick(|w| w.difference_sec),
                }],
            )?);
            written.push(write_svg(
                &out.join("weekly_group_means.svg"),
                Chart {
                    title: "Weekly mean selection time",
                    x_label: "Week",
                    y_label: "Seconds",
                    x_axis: Axis::Linear,
                    lines: true,
                },
                &[
                    Series {
                        name: "treatment".into(),
                        points: pick(|w| w.treatment_mean_sec),
                    },
                    Series {
                        name: "holdout".into(),
                        points: pick(|w| w.holdout_mean_sec),
                    },
                ],
            )?);
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
            println!("week_start\tn_treatment\tn_holdout\ttreatment_s\tholdout_s\tdifference_s");
            for w in &weeks {
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    w.week_start,
                    w.n_treatment,
                    w.n_holdout,
                    fmt(w.treatment_mean_sec),
                    fmt(w.holdout_mean_sec),
                    fmt(w.difference_sec)
                );
            }
            stamp_abtest("abtest-summarize", &[&events], &written, BTreeMap::new(), &out)
        }
        AbCommand::Trend {
            events,
            predictions,
            top_n,
            k,
            out,
        } => {
            let ev = load_events(&events)?;
            std::fs::create_dir_all(&out)?;
            let diffs: Vec<f64> = selection_time_summary(&ev).iter().filter_map(|w| w.difference_sec).collect();
            #[derive(Serialize)]
            struct TrendReport {
                weekly_difference: Option<TrendResult>,
                savings_vs_accuracy: Option<TrendResult>,
                n_templates: Option<usize>,
            }
            let mut report = TrendReport {
                weekly_difference: mann_kendall(&diffs).ok(),
                savings_vs_accuracy: None,
                n_templates: None,
            };
            let mut written = Vec::new();
            let mut inputs: Vec<&Path> = vec![&events];
            if let Some(pred_path) = &predictions {
                let preds: Vec<PredictionRecord> = read_ndjson(pred_path)?;
                inputs.push(pred_path);
                let rows: Vec<TemplateSavings> = accuracy_vs_savings(&ev, &preds, top_n, k);
                written.push(write_csv(&out.join("accuracy_vs_savings.csv"), &rows)?);
                written.push(write_svg(
                    &out.join("savings_vs_accuracy.svg"),
                    Chart {
                        title: "Selection time saved against holdout accuracy",
                        x_label: &format!("Top-{k} accuracy (holdout)"),
                        y_label: "Seconds saved",
                        x_axis: Axis::Linear,
                        lines: false,
                    },
                    &[Series {
                        name: "template".into(),
                        points: rows.iter().map(|r| (r.accuracy, r.savings_sec)).collect(),
                    }],
                )?);
                report.savings_vs_accuracy = savings_trend(&rows).ok();
                report.n_templates = Some(rows.len());
            }
            written.push(write_json(&out.join("trend.json"), &report)?);
            for (name, t) in [("weekly difference", &report.weekly_difference), ("savings vs accuracy", &report.savings_vs_accuracy)] {
                match t {
                    Some(t) => println!(
                        "{name}: S {} var {:.3} z {:.4} p {:.4} {:?}",
                        t.s, t.var_s, t.z, t.p_value, t.direction
                    ),
                    None => println!("{name}: not enough points"),
                }
            }
            let args = BTreeMap::from([("top_n", top_n.to_string()), ("k", k.to_string())]);
            stamp_abtest("abtest-trend", &inputs, &written, args, &out)
        }
        AbCommand::Compare { events, by, out } => {
            let ev = load_events(&events)?;
            std::fs::create_dir_all(&out)?;
            let (names, a, b) = match by {
                CompareBy::Group => {
                    let pick = |g: Group| ev.iter().filter(|e| e.group == g).map(|e| e.selection_time_sec).collect::<Vec<_>>();
                    (["holdout".to_string(), "treatment".to_string()], pick(Group::Holdout), pick(Group::Treatment))
                }
                CompareBy::ModelVersion => {
                    let mut versions: Vec<&str> = ev.iter().map(|e| e.model_version.as_str()).collect();
                    versions.sort_unstable();
                    versions.dedup();
                    if versions.len() != 2 {
                        return Err(CliError::config(format!(
                            "model-version comparison needs exactly 2 versions, found {}",
                            versions.len()
                        )));
                    }
                    let pick = |v: &str| {
                        ev.iter()
                            .filter(|e| e.model_version == v && e.group == Group::Treatment)
                            .map(|e| e.selection_time_sec)
                            .collect::<Vec<_>>()
                    };
                    ([versions[0].to_string(), versions[1].to_string()], pick(versions[0]), pick(versions[1]))
                }
            };
            let r: AbResult = welch_t_test(&a, &b)?;
            #[derive(Serialize)]
            struct Comparison {
                a: String,
                b: String,
                n_a: usize,
                n_b: usize,
                #[serde(flatten)]
                result: AbResult,
            }
            let cmp = Comparison {
                a: names[0].clone(),
                b: names[1].clone(),
                n_a: a.len(),
                n_b: b.len(),
                result: r,
            };
            let written = vec![write_json(&out.join("compare.json"), &cmp)?];
            println!(
                "{} (n={}) mean {:.3}s vs {} (n={}) mean {:.3}s: t {:.4} dof {:.1} p {:.3e}",
                cmp.a, cmp.n_a, cmp.result.mean_a, cmp.b, cmp.n_b, cmp.result.mean_b, cmp.result.t_stat, cmp.result.dof, cmp.result.p_value
            );
            let args = BTreeMap::from([("by", format!("{by:?}"))]);
            stamp_abtest("abtest-compare", &[&events], &written, args, &out)
        }
        AbCommand::Simulate {
            out,
            sessions,
            holdout_fraction,
            templates,
            weeks,
            seed,
        } => {
            let cfg = SimConfig {
                n_sessions: sessions,
                holdout_fraction,
                n_templates: templates,
                weeks,
                seed,
                ..SimConfig::default()
            };
            let sim = simulate(&cfg)?;
            std::fs::create_dir_all(&out)?;
            let (ev, pr) = (out.join("events.ndjson"), out.join("predictions.ndjson"));
            write_ndjson(&ev, &sim.events)?;
            write_ndjson(&pr, &sim.predictions)?;
            let holdout = sim.events.iter().filter(|e| e.group == Group::Holdout).count();
            println!(
                "{} events ({} holdout, {:.4}), {} predictions -> {}",
                sim.events.len(),
                holdout,
                holdout as f64 / sim.events.len().max(1) as f64,
                sim.predictions.len(),
                out.display()
            );
            let args = BTreeMap::from([("config", serde_json::to_string(&cfg)?)]);
            let mut st = Stamp::new("abtest-simulate", Some(seed), Stamp::args_hash(&args));
            st.outputs(&[ev, pr])?;
            st.write(&out)?;
            Ok(())
        }
    }
}
