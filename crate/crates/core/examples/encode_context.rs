//! Encodes a context set into a latent and shows that the result does not
//! depend on the order of the trials, the order of the nodes, or a global
//! translation.

use mango::data::{generate_meta_dataset, GenConfig};
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
    let model = Model::<f32>::new(model_config_for(&meta, Conditioning::Meta, DecoderKind::Mango)?, 0)?;
    let context = &meta.tasks[0].trials[..3];
    let r = model.latent(context)?;
    println!("latent size {}, first entries {:?}", r.len(), &r[..4]);

    let reversed: Vec<_> = context.iter().rev().cloned().collect();
    let shifted: Vec<_> = context.iter().map(|t| t.translated(&[0.3, -0.2])).collect();
    let n = context[0].x.p0.shape()[0];
    let perm: Vec<usize> = (0..n).rev().collect();
    let ext: Vec<usize> = (0..context[0].x.p_ext.shape()[1]).collect();
    let permuted = context.iter().map(|t| t.permuted(&perm, &ext)).collect::<mango::Result<Vec<_>>>()?;
    let diff = |other: &[f64]| r.iter().zip(other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("reordered trials: max |Δr| = {:.2e}", diff(&model.latent(&reversed)?));
    println!("translated:       max |Δr| = {:.2e}", diff(&model.latent(&shifted)?));
    println!("permuted nodes:   max |Δr| = {:.2e}", diff(&model.latent(&permuted)?));
    println!("predicted stiffness (untrained head): {:?}", model.predict_rho(context)?);
    Ok(())
}
