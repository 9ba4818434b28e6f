//! Evaluates rollout error as a function of the number of context trials.

use mango::data::{generate_meta_dataset, GenConfig, Split, SpringWorld};
use mango::eval::context_sweep;
use mango::model::{Conditioning, DecoderKind, Model};
use mango::train::{model_config_for, train, TrainConfig};

fn main() -> mango::Result<()> {
    let meta = generate_meta_dataset(&GenConfig {
        train_tasks: 8,
        val_tasks: 2,
        test_tasks: 2,
        trials_per_task: 8,
        world: SpringWorld {
            grid: 5,
            spacing: 0.15,
            horizon: 12,
            ..SpringWorld::default()
        },
        ..GenConfig::default()
    })?;
    let mut config = model_config_for(&meta, Conditioning::Meta, DecoderKind::Mango)?;
    config.set_width(16, 2);
    let cfg = TrainConfig {
        steps: 80,
        lr: Some(1e-3),
        context_range: [1, 4],
        eval_every: 20,
        ..TrainConfig::default()
    };
    let model = train(&meta, Model::new(config, 0)?, &cfg, None)?.best;
    let report = context_sweep(&model, &meta, Split::Test, &[1, 2, 3, 4], &[0, 1, 2], None)?;
    println!("context  mean MSE   95% CI");
    for s in &report.summary {
        println!("{:>7}  {:.3e}  [{:.3e}, {:.3e}]", s.context_size, s.mean, s.ci_lo, s.ci_hi);
    }
    Ok(())
}
