//! Predicts a whole trajectory in one pass with the full-trajectory decoder
//! and compares it with a frame-by-frame autoregressive rollout.

use std::time::Instant;

use mango::data::{generate_meta_dataset, GenConfig};
use mango::eval::rollout_mse;
use mango::model::{Conditioning, DecoderKind, Model};
use mango::train::model_config_for;

fn main() -> mango::Result<()> {
    let meta = generate_meta_dataset(&GenConfig {
        train_tasks: 2,
        val_tasks: 1,
        test_tasks: 1,
        trials_per_task: 3,
        ..GenConfig::default()
    })?;
    let task = &meta.tasks[0];
    let (context, target) = (&task.trials[..2], &task.trials[2]);
    for kind in [DecoderKind::Mango, DecoderKind::Autoregressive] {
        let model = Model::<f32>::new(model_config_for(&meta, Conditioning::Meta, kind)?, 0)?;
        let start = Instant::now();
        let pred = model.predict(context, &target.x, Some(&task.rho), meta.topology())?;
        println!(
            "{:<16} output {:?} in {:>7.1} ms, untrained MSE {:.3e}",
            model.config.kind_tag(),
            pred.shape(),
            start.elapsed().as_secs_f64() * 1e3,
            rollout_mse(&pred, &target.y_p)?
        );
    }
    Ok(())
}
