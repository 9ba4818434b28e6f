//! Trains a small meta-learned model on a toy dataset, saves the best
//! checkpoint and reloads it.

use mango::checkpoint::load_checkpoint;
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
    let mut config = model_config_for(&meta, Conditioning::Meta, DecoderKind::Mango)?;
    config.set_width(16, 2);
    let model = Model::new(config, 0)?;
    let cfg = TrainConfig {
        steps: 120,
        lr: Some(1e-3),
        context_range: [1, 4],
        eval_every: 20,
        val_context: 3,
        ..TrainConfig::default()
    };
    let out = std::env::temp_dir().join("mango-example-train");
    let outcome = train(&meta, model, &cfg, Some(&out))?;
    for r in outcome.records.iter().filter(|r| r.val_mse.is_some()) {
        println!("step {:>4}  loss {:.4}  val MSE {:.3e}", r.step, r.loss, r.val_mse.unwrap_or(f64::NAN));
    }
    println!("best step {} with val MSE {:.3e}", outcome.best_step, outcome.best_val);

    let (reloaded, info) = load_checkpoint(&out.join("best.ckpt"))?;
    let again = validation_mse(&reloaded, &meta, Split::Val, cfg.val_context, cfg.val_targets)?;
    println!("reloaded checkpoint from step {}: val MSE {again:.3e}", info.step);
    println!("bit-exact: {}", again.to_bits() == outcome.best_val.to_bits());
    Ok(())
}
