use quicktext::model::Preset;
use quicktext::nn::DecayKind;
use quicktext::train::{Objective, Report};
use quicktext_cli::{ExitKind, RunManifest};

const TABLE_KEYS: &str = "
[adapt]
fp16.enabled = false
lr-decay-style = cosine
max-position-embeddings = 128
optimizer.params.betas = [0.9, 0.95]
optimizer.type = AdamW
warmup = 0.01
weight-decay = 0.01
max-steps = 14500
eval-steps = 0.1
save-steps = 0.1
learning rate = 3e-4
batch size = 4

[finetune]
lr-decay-style = linear
max-position-embeddings = 96
optimizer.params.betas = [0.9, 0.99]
optimizer.type = AdamW
warmup = 0.1
weight-decay = 0.0
learning rate = 1e-5
batch size = 128
num-train-epochs = 1
";

fn err(text: &str) -> String {
    let e = RunManifest::parse(text).unwrap_err();
    assert_eq!(e.kind, ExitKind::Config);
    e.message
}

#[test]
fn trainer_key_names_are_honored() {
    let m = RunManifest::parse(TABLE_KEYS).unwrap();
    let a = m.adapt.config_for(Preset::Nano, 9);
    assert_eq!(a.max_steps, 14500);
    assert_eq!(a.save_fraction, 0.1);
    assert_eq!(a.eval_fraction, 0.1);
    assert_eq!(a.save_steps().len(), 10);
    assert_eq!(a.save_steps()[0], 1450);
    assert_eq!(a.decay, DecayKind::Cosine);
    assert_eq!(a.betas, (0.9, 0.95));
    assert_eq!(a.weight_decay, 0.01);
    assert_eq!(a.warmup_fraction, 0.01);
    assert_eq!(a.lr_peak, 3e-4);
    assert_eq!(a.batch_size, 4);
    assert_eq!(a.seq_len, 129);
    assert_eq!(a.seed, 9);

    let f = &m.finetune;
    assert_eq!(f.decay, DecayKind::Linear);
    assert_eq!(f.betas, (0.9, 0.99));
    assert_eq!(f.weight_decay, 0.0);
    assert_eq!(f.warmup_fraction, 0.1);
    assert_eq!(f.lr, 1e-5);
    assert_eq!(f.batch_size, 128);
    assert_eq!(f.max_len, 96);
    assert_eq!(f.epochs, 1);
}

#[test]
fn learning_rate_defaults_to_the_preset_table() {
    let m = RunManifest::parse("[model]\npresets = nano, micro, mini\n").unwrap();
    for p in Preset::ALL {
        assert_eq!(m.adapt.config_for(p, 0).lr_peak, p.lr_peak());
    }
    assert_eq!(m.model.presets, Preset::ALL);
}

#[test]
fn per_preset_step_overrides() {
    let m = RunManifest::parse("[adapt]\nmax-steps = 100\nmax-steps.mini = 70\n").unwrap();
    assert_eq!(m.adapt.config_for(Preset::Nano, 0).max_steps, 100);
    assert_eq!(m.adapt.config_for(Preset::Mini, 0).max_steps, 70);
    assert!(err("[adapt]\nmax-steps.huge = 70\n").contains("max-steps.huge"));
}

#[test]
fn masked_objective_switches_finetune_defaults() {
    let m = RunManifest::parse("[adapt]\nobjective = masked\nmask-rate = 0.2\n").unwrap();
    assert!(matches!(m.adapt.base.objective, Objective::Masked { mask_rate, .. } if mask_rate == 0.2));
    assert_eq!(m.finetune.epochs, 10);
    assert_eq!(m.finetune.report, Report::BestEpoch);
    let m = RunManifest::parse("[adapt]\nobjective = masked\n[finetune]\nnum-train-epochs = 2\nreport = final\n").unwrap();
    assert_eq!((m.finetune.epochs, m.finetune.report), (2, Report::Final));
}

#[test]
fn unknown_sections_and_keys_are_errors() {
    assert!(err("[adapt]\nsave_steps = 0.1\n").contains("line 2: unknown key adapt.save_steps"));
    assert!(err("[optimizer]\n").contains("line 1: unknown section [optimizer]"));
    assert!(err("seed = 3\n").contains("outside a section"));
    assert!(err("[run]\nseed\n").contains("line 2"));
}

#[test]
fn bad_values_name_the_field() {
    assert!(err("[run]\nseed = -1\n").contains("run.seed"));
    assert!(err("[adapt]\nsave-steps = 0\n").contains("save-steps"));
    assert!(err("[adapt]\nlr-decay-style = step\n").contains("adapt.lr-decay-style"));
    assert!(err("[adapt]\noptimizer.params.betas = [0.9]\n").contains("betas"));
    assert!(err("[adapt]\noptimizer.type = SGD\n").contains("AdamW"));
    assert!(err("[corpus]\nambiguity = 1.5\n").contains("corpus.ambiguity"));
    assert!(err("[model]\npresets = nano, giant\n").contains("giant"));
    assert!(err("[model]\npresets = nano, nano\n").contains("twice"));
    assert!(err("[finetune]\nnum-train-epochs = 0\n").contains("finetune"));
    assert!(err("[adapt]\nmax-position-embeddings = 32\n[finetune]\nmax-position-embeddings = 64\n").contains("backbone context"));
    assert!(err("[run]\nrun-id = ../x\n").contains("run-id"));
}

#[test]
fn duplicate_keys_are_errors() {
    assert!(err("[adapt]\nwarmup = 0.1\nwarmup = 0.2\n").contains("already set on line 2"));
}

#[test]
fn config_hash_ignores_layout_only() {
    let a = RunManifest::parse("[run]\nseed = 1\n[adapt]\nmax-steps = 10\n").unwrap();
    let b = RunManifest::parse("# comment\n[adapt]\n  max-steps=10   # inline\n\n[run]\nseed = 1\n").unwrap();
    let c = RunManifest::parse("[run]\nseed = 1\n[adapt]\nmax-steps = 11\n").unwrap();
    assert_eq!(a.config_hash(), b.config_hash());
    assert_ne!(a.config_hash(), c.config_hash());
    assert_eq!(a.run_id(), a.config_hash()[..12]);
    assert_eq!(a.seed_for("x"), b.seed_for("x"));
    assert_ne!(a.seed_for("x"), a.seed_for("y"));
}

#[test]
fn explicit_run_id_sets_the_run_dir() {
    let m = RunManifest::parse("[run]\nout = /tmp/o\nrun-id = demo-1\n").unwrap();
    assert_eq!(m.run_dir(), std::path::Path::new("/tmp/o/demo-1"));
}
