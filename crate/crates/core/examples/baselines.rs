//! Trains every conditioning variant briefly on the same toy dataset and
//! compares their test MSE: oracle parameters, meta-learned context, the
//! two-stage pipeline, and no conditioning at all.

use mango::data::{generate_meta_dataset, GenConfig, Split, SpringWorld};
use mango::eval::validation_mse;
use mango::model::{Conditioning, DecoderKind, Model};
use mango::train::{model_config_for, train, TrainConfig};

fn main() -> mango::Result<()> {
    let meta = generate_meta_dataset(&GenConfig {
        train_tasks: 8,
        val_tasks: 2,
        test_tasks: 2,
        trials_per_task: 6,
        world: SpringWorld {
            grid: 5,
            spacing: 0.15,
            horizon: 12,
            ..SpringWorld::default()
        },
        ..GenConfig::default()
    })?;
    let cfg = TrainConfig {
        steps: 60,
        lr: Some(1e-3),
        context_range: [1, 4],
        eval_every: 20,
        val_context: 3,
        ..TrainConfig::default()
    };
    let variants = [
        (Conditioning::Oracle, DecoderKind::Mango),
        (Conditioning::Meta, DecoderKind::Mango),
        (Conditioning::TwoStage, DecoderKind::Mango),
        (Conditioning::None, DecoderKind::Mango),
        (Conditioning::Meta, DecoderKind::Autoregressive),
    ];
    for (conditioning, kind) in variants {
        let mut config = model_config_for(&meta, conditioning, kind)?;
        config.set_width(16, 2);
        let outcome = train(&meta, Model::new(config, 0)?, &cfg, None)?;
        let test = validation_mse(&outcome.best, &meta, Split::Test, 3, 2)?;
        println!("{:<22} test MSE {test:.3e}", outcome.best.config.kind_tag());
    }
    Ok(())
}
