//! Times one-pass trajectory decoding against an autoregressive rollout and
//! shows that the number of stored activations grows linearly with the
//! horizon.

use mango::data::{generate_meta_dataset, GenConfig};
use mango::eval::{activation_counts, linear_fit, timing_compare};
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
    let mango = Model::new(model_config_for(&meta, Conditioning::Oracle, DecoderKind::Mango)?, 0)?;
    let ar = Model::new(model_config_for(&meta, Conditioning::Oracle, DecoderKind::Autoregressive)?, 0)?;
    let task = &meta.tasks[0];
    let trial = &task.trials[0];
    let report = timing_compare(&mango, &ar, &[], &task.rho, &trial.x, meta.topology(), 5)?;
    println!(
        "T = {}: one-pass {:.1} ms, autoregressive {:.1} ms, speed-up {:.2}x",
        report.horizon, report.mango.median_ms, report.autoregressive.median_ms, report.speedup
    );

    let counts = activation_counts(&mango, trial, &task.rho, meta.topology(), &[5, 10, 20, 40])?;
    for (t, c) in &counts {
        println!("T = {t:>2}: {c} activations");
    }
    let xs: Vec<f64> = counts.iter().map(|c| c.0 as f64).collect();
    let ys: Vec<f64> = counts.iter().map(|c| c.1 as f64).collect();
    let (intercept, slope, r2) = linear_fit(&xs, &ys);
    println!("linear fit: {slope:.0} per frame + {intercept:.0}, R^2 = {r2:.6}");
    Ok(())
}
