//! Generates a small meta-dataset, writes it to disk, reads it back and
//! compares digests.

use mango::data::io::{in_memory_digest, read_manifest};
use mango::data::{dataset_digest, generate_meta_dataset, read_dataset, write_dataset, GenConfig};

fn main() -> mango::Result<()> {
    let cfg = GenConfig {
        train_tasks: 6,
        val_tasks: 1,
        test_tasks: 1,
        trials_per_task: 4,
        seed: 7,
        ..GenConfig::default()
    };
    let meta = generate_meta_dataset(&cfg)?;
    let dir = std::env::temp_dir().join("mango-example-dataset");
    write_dataset(&meta, &dir)?;
    let manifest = read_manifest(&dir)?;
    println!(
        "{} tasks, {} trials each, horizon {}, {} + {} nodes, {} directed edges",
        manifest.tasks,
        manifest.trials_per_task,
        manifest.horizon,
        manifest.n,
        manifest.n_ext,
        manifest.topology.num_edges()
    );
    let back = read_dataset(&dir)?;
    println!("bit-exact round trip: {}", back.tasks == meta.tasks);
    println!("on-disk digest   {}", dataset_digest(&dir)?);
    println!("in-memory digest {}", in_memory_digest(&meta)?);
    for (i, task) in meta.tasks.iter().enumerate() {
        println!("task {i}: stiffness {:.1}", task.rho[0]);
    }
    Ok(())
}
