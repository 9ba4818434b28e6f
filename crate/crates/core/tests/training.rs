use mango::checkpoint::load_checkpoint;
use mango::data::{generate_meta_dataset, GenConfig, MetaDataset, Split, SpringWorld};
use mango::eval::{context_sweep, validation_mse};
use mango::model::{Conditioning, DecoderKind, Model};
use mango::train::{model_config_for, train, TrainConfig, TrainOutcome};

fn toy_dataset(trials: usize, seed: u64) -> MetaDataset {
    generate_meta_dataset(&GenConfig {
        train_tasks: 8,
        val_tasks: 2,
        test_tasks: 3,
        trials_per_task: trials,
        world: SpringWorld {
            grid: 5,
            spacing: 0.15,
            horizon: 12,
            ..SpringWorld::default()
        },
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}

fn toy_train(meta: &MetaDataset, conditioning: Conditioning, steps: usize, seed: u64) -> TrainOutcome {
    let mut config = model_config_for(meta, conditioning, DecoderKind::Mango).unwrap();
    config.set_width(16, 2);
    let cfg = TrainConfig {
        steps,
        lr: Some(1e-3),
        context_range: [1, 4],
        eval_every: 25,
        val_context: 4,
        val_targets: 4,
        seed,
        ..TrainConfig::default()
    };
    train(meta, Model::new(config, seed).unwrap(), &cfg, None).unwrap()
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn smoke_training_loss_is_finite_and_decreases() {
    let meta = toy_dataset(8, 0);
    let (mut first, mut early, mut late) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..3 {
        let out = toy_train(&meta, Conditioning::Meta, 200, seed);
        let losses: Vec<f64> = out.records.iter().map(|r| r.loss).collect();
        assert_eq!(losses.len(), 200);
        assert!(losses.iter().all(|l| l.is_finite()));
        first.push(losses[0]);
        early.push(losses[..25].iter().sum::<f64>() / 25.0);
        late.push(losses[175..].iter().sum::<f64>() / 25.0);
    }
    assert!(median(&first).is_finite());
    assert!(median(&late) < median(&early), "early {early:?} late {late:?}");
}

#[test]
fn zero_latent_ablation_is_worse_than_the_full_model() {
    let meta = toy_dataset(8, 1);
    let full = toy_train(&meta, Conditioning::Meta, 200, 0);
    let ablated = toy_train(&meta, Conditioning::None, 200, 0);
    let full_mse = validation_mse(&full.best, &meta, Split::Val, 4, 4).unwrap();
    let ablated_mse = validation_mse(&ablated.best, &meta, Split::Val, 4, 4).unwrap();
    assert!(full_mse < ablated_mse, "full {full_mse:.3e} vs zero latent {ablated_mse:.3e}");
}

#[test]
fn checkpoint_reload_reproduces_validation_mse_bit_exactly() {
    let meta = toy_dataset(8, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut config = model_config_for(&meta, Conditioning::Meta, DecoderKind::Mango).unwrap();
    config.set_width(8, 1);
    let cfg = TrainConfig {
        steps: 30,
        lr: Some(1e-3),
        context_range: [1, 4],
        eval_every: 10,
        ..TrainConfig::default()
    };
    let out = train(&meta, Model::new(config, 0).unwrap(), &cfg, Some(dir.path())).unwrap();
    let (best, info) = load_checkpoint(&dir.path().join("best.ckpt")).unwrap();
    let again = validation_mse(&best, &meta, Split::Val, cfg.val_context, cfg.val_targets).unwrap();
    assert_eq!(info.step, out.best_step);
    assert_eq!(again.to_bits(), out.best_val.to_bits());
    assert_eq!(info.val_mse.map(f64::to_bits), Some(out.best_val.to_bits()));
}

#[test]
fn training_is_bit_reproducible() {
    let meta = toy_dataset(6, 3);
    let mut config = model_config_for(&meta, Conditioning::TwoStage, DecoderKind::Mango).unwrap();
    config.set_width(8, 1);
    let cfg = TrainConfig {
        steps: 20,
        lr: Some(1e-3),
        context_range: [1, 3],
        eval_every: 10,
        val_context: 3,
        ..TrainConfig::default()
    };
    let a = train(&meta, Model::new(config.clone(), 5).unwrap(), &cfg, None).unwrap();
    let b = train(&meta, Model::new(config, 5).unwrap(), &cfg, None).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.last.params.values(), b.last.params.values());
}

#[test]
fn larger_contexts_help_a_trained_toy_model() {
    let meta = toy_dataset(16, 4);
    let model = toy_train(&meta, Conditioning::Meta, 1000, 0).best;
    let report = context_sweep(&model, &meta, Split::Test, &[1, 4], &[0, 1, 2, 3, 4], None).unwrap();
    let per_seed = |size: usize, seed: u64| -> f64 {
        report
            .rows
            .iter()
            .filter(|r| r.context_size == size && r.seed == seed)
            .map(|r| r.mse)
            .sum()
    };
    let pairs: Vec<(f64, f64)> = (0..5).map(|s| (per_seed(1, s), per_seed(4, s))).collect();
    let wins = pairs.iter().filter(|(one, four)| four <= one).count();
    assert!(wins >= 4, "size 4 beat size 1 in only {wins} of 5 seeds: {pairs:?}");
}
