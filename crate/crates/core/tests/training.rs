//! Training loop: overfitting, clipping, determinism and resume.

mod common;

use candle_core::DType;
use vcaug::bottleneck::Quantizer;
use vcaug::model::{ModelConfig, VcModel};
use vcaug::nn::to_vec_f64;
use vcaug::training::{evaluate, fit, FitContext, TrainConfig, Trainer, LOG_FILE};

fn trainer(stack: &common::TinyStack, cfg: &TrainConfig) -> Trainer {
    let model = VcModel::new(&ModelConfig::tiny(stack.signal.n_mels, 7), DType::F32).unwrap();
    Trainer::new(model, cfg, stack.items.len()).unwrap()
}

fn params(model: &VcModel) -> Vec<(String, Vec<f64>)> {
    model
        .store
        .vars()
        .map(|(n, v)| (n.clone(), to_vec_f64(v.as_tensor()).unwrap()))
        .collect()
}

#[test]
fn overfits_a_handful_of_utterances() {
    let stack = common::tiny_stack(8, 4, 1);
    let cfg = TrainConfig {
        epochs: 100,
        ..TrainConfig::default()
    };
    let mut t = trainer(&stack, &cfg);
    let before = evaluate(&t.model, &stack.items, 100.0).unwrap();
    let reports = t.run(&stack.items, &[], None, None, None).unwrap();
    let after = evaluate(&t.model, &stack.items, 100.0).unwrap();
    eprintln!("reconstruction loss {:.3} -> {:.3}", before.total, after.total);
    assert!(after.total <= 0.5 * before.total, "{before:?} -> {after:?}");

    assert_eq!(reports.len(), 100);
    assert!(reports.iter().any(|r| r.grad_norm > 1.0), "clipping never engaged");
    for r in &reports {
        assert!(r.clipped_grad_norm <= 1.0 + 1e-6, "step {}: {}", r.step, r.clipped_grad_norm);
        assert!(r.total.is_finite());
    }
    let peak = t.schedule.peak_step();
    assert_eq!(reports[peak].lr, cfg.max_lr);
    assert!(reports.iter().all(|r| r.lr <= cfg.max_lr));
}

#[test]
fn same_seed_same_trajectory() {
    let stack = common::tiny_stack(6, 3, 2);
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let mut a = trainer(&stack, &cfg);
    let mut b = trainer(&stack, &cfg);
    let ra = a.run(&stack.items, &[], None, None, Some(3)).unwrap();
    let rb = b.run(&stack.items, &[], None, None, Some(3)).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(params(&a.model), params(&b.model));

    let mut c = trainer(&stack, &TrainConfig { seed: 99, ..cfg });
    let rc = c.run(&stack.items, &[], None, None, Some(3)).unwrap();
    assert_ne!(ra, rc);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let stack = common::tiny_stack(6, 3, 3);
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let mut straight = trainer(&stack, &cfg);
    let full = straight.run(&stack.items, &[], None, None, Some(10)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = trainer(&stack, &cfg);
    // Stop mid-epoch so the shuffle position has to be recovered too.
    let mut resumed = first.run(&stack.items, &[], Some(dir.path()), None, Some(4)).unwrap();
    drop(first);
    let model_cfg = ModelConfig::tiny(stack.signal.n_mels, 7);
    let mut second = Trainer::resume(dir.path(), &model_cfg, &cfg, stack.items.len()).unwrap();
    assert_eq!(second.state.step, 4);
    resumed.extend(second.run(&stack.items, &[], None, None, Some(6)).unwrap());

    assert_eq!(full, resumed);
    assert_eq!(params(&straight.model), params(&second.model));
}

#[test]
fn resume_rejects_a_different_schedule() {
    let stack = common::tiny_stack(4, 2, 4);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(&stack, &cfg);
    t.run(&stack.items, &[], Some(dir.path()), None, Some(1)).unwrap();
    let model_cfg = ModelConfig::tiny(stack.signal.n_mels, 7);
    let longer = TrainConfig { epochs: 3, ..cfg };
    assert!(matches!(
        Trainer::resume(dir.path(), &model_cfg, &longer, stack.items.len()),
        Err(vcaug::Error::Config(_))
    ));
}

#[test]
fn fit_leaves_the_quantizer_untouched() {
    let stack = common::tiny_stack(1, 1, 5);
    let corpus = tempfile::tempdir().unwrap();
    let manifest = vcaug::synth::write_corpus(corpus.path(), 6, 2, 2..=3, stack.signal.sample_rate, 11).unwrap();
    let (train, val) = manifest.records.split_at(4);
    let train = vcaug::manifest::Manifest {
        records: train.to_vec(),
        base_dir: manifest.base_dir.clone(),
    };
    let val = vcaug::manifest::Manifest {
        records: val.to_vec(),
        base_dir: manifest.base_dir.clone(),
    };

    let ckpt = tempfile::tempdir().unwrap();
    stack.quantizer.save(ckpt.path()).unwrap();
    let read = |name: &str| std::fs::read(ckpt.path().join(name)).unwrap();
    let (stats, codebook) = (read(Quantizer::STATS_FILE), read(Quantizer::CODEBOOK_FILE));

    let model_cfg = ModelConfig::tiny(stack.signal.n_mels, 7);
    let train_cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let ctx = FitContext {
        backend: &stack.backend,
        mel: &stack.mel,
        model: &model_cfg,
        train: &train_cfg,
    };
    let state = fit(&train, &val, &ctx, ckpt.path(), false, Some(3)).unwrap();
    assert_eq!(state.step, 3);
    let state = fit(&train, &val, &ctx, ckpt.path(), true, None).unwrap();
    assert_eq!(state.step, 4);
    assert!(state.best_val_loss.is_some());

    assert_eq!(read(Quantizer::STATS_FILE), stats);
    assert_eq!(read(Quantizer::CODEBOOK_FILE), codebook);
    assert!(ckpt.path().join("best").is_dir());
    let log = std::fs::read_to_string(ckpt.path().join(LOG_FILE)).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().filter(|l| l.get("lr").is_some()).count(), 4);
    assert_eq!(lines.iter().filter(|l| l.get("val_loss").is_some()).count(), 2);
}
