//! Corrupts the context with noise and trial dropout and reports the error
//! relative to the oracle and no-context anchors.

use mango::data::{generate_meta_dataset, GenConfig, Split, SpringWorld};
use mango::model::{Conditioning, DecoderKind, Model};
use mango::eval::robustness_matrix;
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
    let fit = |conditioning, noise| -> mango::Result<Model> {
        let mut config = model_config_for(&meta, conditioning, DecoderKind::Mango)?;
        config.set_width(16, 2);
        let cfg = TrainConfig {
            steps: 60,
            lr: Some(1e-3),
            context_range: [1, 4],
            eval_every: 20,
            context_noise: noise,
            ..TrainConfig::default()
        };
        Ok(train(&meta, Model::new(config, 0)?, &cfg, None)?.best)
    };
    let robust = fit(Conditioning::Meta, 0.05)?;
    let oracle = fit(Conditioning::Oracle, 0.0)?;
    let none = fit(Conditioning::None, 0.0)?;
    let report = robustness_matrix(&robust, &oracle, &none, &meta, Split::Test, &[0.0, 0.1], &[0.0, 0.5], 4, 0, None)?;
    println!("oracle {:.3e}, no context {:.3e}", report.oracle_mse, report.no_context_mse);
    println!("sigma  dropout  MSE        normalized");
    for c in &report.cells {
        println!("{:>5}  {:>7}  {:.3e}  {:>10.3}", c.sigma, c.dropout, c.mse, c.normalized);
    }
    Ok(())
}
