//! Runs the permutation and translation checks on a randomly initialized
//! model and a simulated task.

use mango::data::{generate_meta_dataset, GenConfig};
use mango::diagnostics::symmetry_suite;
use mango::model::{Conditioning, DecoderKind, Model};
use mango::train::model_config_for;

fn main() -> mango::Result<()> {
    let meta = generate_meta_dataset(&GenConfig {
        train_tasks: 2,
        val_tasks: 1,
        test_tasks: 1,
        trials_per_task: 4,
        ..GenConfig::default()
    })?;
    let mut config = model_config_for(&meta, Conditioning::Meta, DecoderKind::Mango)?;
    config.set_width(16, 2);
    let model = Model::new(config, 0)?;
    let task = &meta.tasks[0];
    for check in symmetry_suite(&model, &task.trials, &task.rho, meta.topology(), 0)? {
        println!("{:<32} max |Δ| = {:.2e}", check.name, check.max_abs_error);
    }
    Ok(())
}
