//! In-memory pipeline stages shared by the subcommands.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use quicktext::checkpoint::Checkpoint;
use quicktext::corpus::{
    build_examples, format_pretraining, generate_corpus, pack_sequences, split_by_case, ClassificationExample,
    PretrainSequence, TemplateCatalog, Transcript,
};
use quicktext::model::{count_params, flops_for_tokens, DecoderModel, Preset};
use quicktext::scaling::{self, CheckpointRecord, FineTuneRecord, FitRow, ScalingPoint, SkippedCheckpoint};
use quicktext::tokenizer::{train_bpe, Vocab};
use quicktext::train::{domain_adapt, fine_tune, AdaptRun, FineTuneOutcome, LedgerRow};

use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

pub fn generate(m: &RunManifest) -> Result<(TemplateCatalog, Vec<Transcript>)> {
    let catalog = TemplateCatalog::synthetic(m.corpus.n_templates)?;
    let transcripts = generate_corpus(m.seed_for("corpus"), m.corpus.n_cases, &catalog, m.corpus.ambiguity)?;
    Ok((catalog, transcripts))
}

/// Case-level split into the adaptation and fine-tuning pools.
pub fn split_cases(m: &RunManifest, transcripts: &[Transcript]) -> Result<(Vec<Transcript>, Vec<Transcript>)> {
    Ok(split_by_case(transcripts, m.corpus.pretrain_fraction, m.seed_for("pretrain-split"))?)
}

pub fn train_tokenizer(m: &RunManifest, pretrain: &[Transcript]) -> Result<Vocab> {
    let text = pretrain
        .iter()
        .take(m.tokenizer.sample_cases)
        .map(format_pretraining)
        .collect::<Vec<_>>()
        .join("\n");
    Ok(train_bpe(text.as_bytes(), m.tokenizer.vocab_size)?)
}

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train_seqs: Vec<PretrainSequence>,
    pub heldout_seqs: Vec<PretrainSequence>,
    pub ft_train: Vec<ClassificationExample>,
    pub ft_test: Vec<ClassificationExample>,
}

fn pack(cases: &[Transcript], vocab: &Vocab, seq_len: usize) -> Result<Vec<PretrainSequence>> {
    let docs: Vec<Vec<u32>> = cases.iter().map(|t| vocab.encode(&format_pretraining(t))).collect();
    Ok(pack_sequences(&docs, seq_len, vocab.end_of_text())?)
}

pub fn datasets(m: &RunManifest, pretrain: &[Transcript], finetune: &[Transcript], vocab: &Vocab) -> Result<Datasets> {
    let seq_len = m.adapt.context_length + 1;
    let (train_cases, heldout_cases) =
        split_by_case(pretrain, 1.0 - m.adapt.heldout_fraction, m.seed_for("heldout-split"))?;
    let train_seqs = pack(&train_cases, vocab, seq_len)?;
    let heldout_seqs = pack(&heldout_cases, vocab, seq_len)?;
    if train_seqs.is_empty() || heldout_seqs.is_empty() {
        return Err(CliError::config(format!(
            "corpus too small: {} training and {} heldout sequences of {seq_len} tokens",
            train_seqs.len(),
            heldout_seqs.len()
        )));
    }
    let examples = build_examples(finetune, m.finetune.max_len, vocab)?;
    let (ft_train, ft_test) = split_by_case(&examples, 1.0 - m.corpus.test_fraction, m.seed_for("finetune-split"))?;
    if ft_train.is_empty() || ft_test.is_empty() {
        return Err(CliError::config("corpus too small: empty fine-tuning train or test split"));
    }
    Ok(Datasets {
        train_seqs,
        heldout_seqs,
        ft_train,
        ft_test,
    })
}

/// Everything up to, but not including, adaptation.
pub struct Prepared {
    pub catalog: TemplateCatalog,
    pub transcripts: Vec<Transcript>,
    pub vocab: Vocab,
    pub data: Datasets,
}

pub fn prepare(m: &RunManifest) -> Result<Prepared> {
    let (catalog, transcripts) = generate(m)?;
    let (pretrain, finetune) = split_cases(m, &transcripts)?;
    let vocab = train_tokenizer(m, &pretrain)?;
    let data = datasets(m, &pretrain, &finetune, &vocab)?;
    Ok(Prepared {
        catalog,
        transcripts,
        vocab,
        data,
    })
}

/// Freshly initialized backbone for `preset` sized to the vocabulary.
pub fn init_model(m: &RunManifest, preset: Preset, vocab: &Vocab) -> Result<DecoderModel<f32>> {
    let mut cfg = preset.config().with_vocab(vocab.len()).with_context(m.adapt.context_length);
    cfg.position = m.model.position;
    if m.adapt.is_masked() {
        cfg = cfg.masked();
    }
    Ok(DecoderModel::init(cfg, m.seed_for(&format!("init/{preset}")))?)
}

pub fn adapt(m: &RunManifest, preset: Preset, vocab: &Vocab, data: &Datasets) -> Result<AdaptRun> {
    let init = init_model(m, preset, vocab)?;
    let cfg = m.adapt.config_for(preset, m.seed_for(&format!("adapt/{preset}")));
    Ok(domain_adapt(init, &data.train_seqs, &data.heldout_seqs, &vocab.hash(), &cfg)?)
}

/// Fine-tunes `backbone`. Every backbone gets the same head seed and data
/// order, so differences come from the backbone alone.
pub fn finetune(m: &RunManifest, backbone: &DecoderModel<f32>, data: &Datasets, n_classes: usize) -> Result<FineTuneOutcome> {
    let cfg = quicktext::train::FineTuneConfig {
        seed: m.seed_for("finetune"),
        ..m.finetune.clone()
    };
    Ok(fine_tune(backbone, &data.ft_train, &data.ft_test, n_classes, &cfg)?)
}

/// Runs `f` over `items` on `workers` threads; results keep input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

pub struct PresetRun {
    pub preset: Preset,
    pub checkpoints: Vec<Checkpoint>,
    pub ledger: Vec<LedgerRow>,
    pub finetunes: Vec<FineTuneRecord>,
    /// Classifier fine-tuned from the final checkpoint.
    pub final_outcome: FineTuneOutcome,
}

pub struct SweepResult {
    pub runs: Vec<PresetRun>,
    pub points: Vec<ScalingPoint>,
    pub skipped: Vec<SkippedCheckpoint>,
    pub fits: Vec<FitRow>,
}

pub fn checkpoint_record(preset: Preset, ck: &Checkpoint) -> Option<CheckpointRecord> {
    let cfg = ck.model.config();
    Some(CheckpointRecord {
        model_name: preset.to_string(),
        n_params: count_params(cfg) as u64,
        step: ck.step,
        tokens_seen: ck.tokens_seen,
        flops: flops_for_tokens(cfg, ck.tokens_seen),
        lm_loss: ck.eval_loss?,
    })
}

/// Adapts every preset, fine-tunes every saved checkpoint and fits the
/// scaling relationships. `on_preset` sees each preset's run as soon as it
/// finishes.
pub fn sweep(
    m: &RunManifest,
    prepared: &Prepared,
    mut on_preset: impl FnMut(&PresetRun) -> Result<()>,
) -> Result<SweepResult> {
    let n_classes = prepared.catalog.len();
    let mut runs = Vec::new();
    let mut ck_records = Vec::new();
    let mut ft_records = Vec::new();
    for &preset in &m.model.presets {
        log::info!("adapting {preset}");
        let run = adapt(m, preset, &prepared.vocab, &prepared.data)?;
        log::info!("fine-tuning {} {preset} checkpoints", run.checkpoints.len());
        let outcomes = par_map(&run.checkpoints, m.sweep.workers, |ck| {
            finetune(m, &ck.model, &prepared.data, n_classes)
        });
        let mut finetunes = Vec::new();
        let mut final_outcome = None;
        for (ck, out) in run.checkpoints.iter().zip(outcomes) {
            let out = out.map_err(|e| e.context(format!("fine-tune {preset} step {}", ck.step)))?;
            finetunes.push(FineTuneRecord {
                model_name: preset.to_string(),
                step: ck.step,
                cls_loss: out.metrics.cls_loss,
                top1: out.metrics.top(1),
                top3: out.metrics.top(3),
                top5: out.metrics.top(5),
            });
            ck_records.extend(checkpoint_record(preset, ck));
            final_outcome = Some(out);
        }
        ft_records.extend(finetunes.iter().cloned());
        let pr = PresetRun {
            preset,
            checkpoints: run.checkpoints,
            ledger: run.ledger,
            finetunes,
            final_outcome: final_outcome.ok_or_else(|| CliError::numeric(format!("{preset} produced no checkpoints")))?,
        };
        on_preset(&pr)?;
        runs.push(pr);
    }
    let (points, skipped) = scaling::collect(&ck_records, &ft_records);
    let fits = scaling::standard_fits(&points);
    Ok(SweepResult {
        runs,
        points,
        skipped,
        fits,
    })
}

pub fn write_report(dir: &Path, sweep: &SweepResult) -> Result<Vec<std::path::PathBuf>> {
    Ok(scaling::emit_report(&sweep.points, &sweep.fits, dir)?)
}
