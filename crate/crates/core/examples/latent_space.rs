//! Trains a model with a two-dimensional latent and checks how well each
//! coordinate tracks the hidden stiffness.

use mango::data::{generate_meta_dataset, GenConfig, Split, SpringWorld};
use mango::eval::{latent_dump, spearman};
use mango::model::{Conditioning, DecoderKind, Model};
use mango::train::{model_config_for, train, TrainConfig};

fn main() -> mango::Result<()> {
    let meta = generate_meta_dataset(&GenConfig {
        train_tasks: 8,
        val_tasks: 2,
        test_tasks: 6,
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
    config.encoder.latent_dim = 2;
    let cfg = TrainConfig {
        steps: 80,
        lr: Some(1e-3),
        context_range: [1, 4],
        eval_every: 20,
        val_context: 3,
        ..TrainConfig::default()
    };
    let model = train(&meta, Model::new(config, 0)?, &cfg, None)?.best;
    let rows = latent_dump(&model, &meta, Split::Test, 3)?;
    for row in &rows {
        println!("task {:>2}  stiffness {:>7.1}  r = ({:+.4}, {:+.4})", row.task, row.rho[0], row.r[0], row.r[1]);
    }
    let rho: Vec<f64> = rows.iter().map(|r| r.rho[0]).collect();
    for k in 0..2 {
        let coord: Vec<f64> = rows.iter().map(|r| r.r[k]).collect();
        println!("Spearman(r_{}, stiffness) = {:+.3}", k + 1, spearman(&coord, &rho));
    }
    Ok(())
}
