//! Meta-datasets: tasks that share a hidden parameter, each holding several
//! trials with different initial conditions.

pub mod io;
pub mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::trial::Trial;

pub use io::{dataset_digest, read_dataset, write_dataset};
pub use synth::{SpringWorld, TrialSetup};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Task indices of each split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub tasks: usize,
    pub trials_per_task: usize,
    pub horizon: usize,
    pub n: usize,
    pub n_ext: usize,
    pub d: usize,
    pub d_h: usize,
    /// Names of the hidden parameters, in order.
    pub rho_names: Vec<String>,
    pub frame_dt: f64,
    pub seed: u64,
    pub splits: Splits,
    pub topology: Topology,
    /// Generator settings (stiffness field holds the range midpoint).
    pub world: SpringWorld,
    pub stiffness_range: [f64; 2],
}

impl DatasetManifest {
    pub fn rho_dim(&self) -> usize {
        self.rho_names.len()
    }

    pub fn task_file(index: usize) -> String {
        format!("task_{index:04}.bin")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub rho: Vec<f64>,
    pub trials: Vec<Trial<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaDataset {
    pub manifest: DatasetManifest,
    pub tasks: Vec<TaskData>,
}

impl MetaDataset {
    pub fn topology(&self) -> &Topology {
        &self.manifest.topology
    }

    pub fn split(&self, split: Split) -> Vec<&TaskData> {
        self.manifest.splits.get(split).iter().map(|&i| &self.tasks[i]).collect()
    }

    /// Checks every trial against the manifest.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if self.tasks.len() != m.tasks {
            return Err(Error::Config(format!("manifest lists {} tasks, found {}", m.tasks, self.tasks.len())));
        }
        for (i, task) in self.tasks.iter().enumerate() {
            if task.rho.len() != m.rho_dim() || task.trials.len() != m.trials_per_task {
                return Err(Error::Config(format!("task {i} disagrees with manifest counts")));
            }
            for trial in &task.trials {
                let dims = trial.dims()?;
                if (dims.n, dims.n_ext, dims.d, dims.d_h, dims.horizon) != (m.n, m.n_ext, m.d, m.d_h, m.horizon) {
                    return Err(Error::Config(format!("task {i} has trial dims {dims:?}")));
                }
            }
        }
        let mut seen = vec![false; m.tasks];
        for &i in m.splits.train.iter().chain(&m.splits.val).chain(&m.splits.test) {
            if i >= m.tasks || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Config(format!("task {i} is out of range or in two splits")));
            }
        }
        Ok(())
    }
}

/// Generation settings for [`generate_meta_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub train_tasks: usize,
    pub val_tasks: usize,
    pub test_tasks: usize,
    pub trials_per_task: usize,
    pub stiffness_range: [f64; 2],
    pub world: SpringWorld,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            train_tasks: 64,
            val_tasks: 8,
            test_tasks: 8,
            trials_per_task: 16,
            stiffness_range: [200.0, 2000.0],
            world: SpringWorld::default(),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn total_tasks(&self) -> usize {
        self.train_tasks + self.val_tasks + self.test_tasks
    }
}

/// Generator for stream `(task, trial)`; `trial = u32::MAX` is the task's
/// own stream. ChaCha streams are counter based, so every stream is
/// reproducible independently of generation order.
pub fn stream_rng(seed: u64, task: usize, trial: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((task as u64) << 32) | trial as u64);
    rng
}

/// Log-uniform draw from `[lo, hi]`.
pub fn sample_log_uniform(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    let (a, b) = (range[0].ln(), range[1].ln());
    rng.gen_range(a..=b).exp()
}

pub fn generate_meta_dataset(cfg: &GenConfig) -> Result<MetaDataset> {
    let total = cfg.total_tasks();
    if total == 0 || cfg.trials_per_task == 0 {
        return Err(Error::Config("need at least one task and one trial per task".into()));
    }
    let [lo, hi] = cfg.stiffness_range;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::Config(format!("invalid stiffness range {:?}", cfg.stiffness_range)));
    }
    let mut world = cfg.world.clone();
    world.stiffness = (lo * hi).sqrt();
    let topology = world.topology()?;
    let mut tasks = Vec::with_capacity(total);
    for task in 0..total {
        let k = sample_log_uniform(&mut stream_rng(cfg.seed, task, u32::MAX), cfg.stiffness_range);
        let w = SpringWorld { stiffness: k, ..world.clone() };
        let trials = (0..cfg.trials_per_task)
            .map(|trial| {
                let setup = w.sample_setup(&mut stream_rng(cfg.seed, task, trial as u32));
                w.simulate_setup(&setup)
            })
            .collect::<Result<Vec<_>>>()?;
        tasks.push(TaskData { rho: vec![k], trials });
    }
    let splits = Splits {
        train: (0..cfg.train_tasks).collect(),
        val: (cfg.train_tasks..cfg.train_tasks + cfg.val_tasks).collect(),
        test: (cfg.train_tasks + cfg.val_tasks..total).collect(),
    };
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        tasks: total,
        trials_per_task: cfg.trials_per_task,
        horizon: world.horizon,
        n: world.num_deformable(),
        n_ext: world.collider.nodes,
        d: 2,
        d_h: synth::NODE_FEATURES,
        rho_names: vec!["stiffness".into()],
        frame_dt: world.frame_dt,
        seed: cfg.seed,
        splits,
        topology,
        world,
        stiffness_range: cfg.stiffness_range,
    };
    let meta = MetaDataset { manifest, tasks };
    meta.validate()?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config(seed: u64) -> GenConfig {
        GenConfig {
            train_tasks: 2,
            val_tasks: 1,
            test_tasks: 1,
            trials_per_task: 3,
            world: SpringWorld {
                horizon: 6,
                ..SpringWorld::default()
            },
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn tasks_share_rho_and_splits_are_disjoint() {
        let meta = generate_meta_dataset(&small_config(3)).unwrap();
        assert_eq!(meta.tasks.len(), 4);
        for task in &meta.tasks {
            assert_eq!(task.rho.len(), 1);
            assert_eq!(task.trials.len(), 3);
            assert!((200.0..=2000.0).contains(&task.rho[0]));
        }
        let s = &meta.manifest.splits;
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2, 1, 1));
        assert!(s.train.iter().all(|i| !s.val.contains(i) && !s.test.contains(i)));
        assert!(s.val.iter().all(|i| !s.test.contains(i)));
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_meta_dataset(&small_config(5)).unwrap();
        let b = generate_meta_dataset(&small_config(5)).unwrap();
        assert_eq!(a, b);
        let c = generate_meta_dataset(&small_config(6)).unwrap();
        assert_ne!(a.tasks[0].rho, c.tasks[0].rho);
    }

    #[test]
    fn trials_within_a_task_differ() {
        let meta = generate_meta_dataset(&small_config(7)).unwrap();
        let t = &meta.tasks[0].trials;
        assert_ne!(t[0].x.p_ext, t[1].x.p_ext);
    }

    /// Asymptotic Kolmogorov tail probability with Stephens' correction.
    fn ks_p_value(d: f64, n: usize) -> f64 {
        let sn = (n as f64).sqrt();
        let lambda = (sn + 0.12 + 0.11 / sn) * d;
        let p: f64 = (1..=100)
            .map(|j| {
                let j = j as f64;
                2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp()
            })
            .sum();
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn stiffness_is_log_uniform() {
        let range: [f64; 2] = [200.0, 2000.0];
        let (a, b) = (range[0].ln(), range[1].ln());
        let mut u: Vec<f64> = (0..100)
            .map(|task| (sample_log_uniform(&mut stream_rng(11, task, u32::MAX), range).ln() - a) / (b - a))
            .collect();
        u.sort_by(f64::total_cmp);
        let n = u.len() as f64;
        let d = u
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
            .fold(0.0, f64::max);
        let p = ks_p_value(d, u.len());
        assert!(p > 0.01, "KS statistic {d}, p = {p}");
    }

    #[test]
    fn ks_p_value_matches_known_quantiles() {
        // lambda = 1.358 is the 5% critical value, 1.628 the 1% value
        let n = 10_000;
        let corr = |lambda: f64| lambda / ((n as f64).sqrt() + 0.12 + 0.11 / (n as f64).sqrt());
        assert!((ks_p_value(corr(1.358), n) - 0.05).abs() < 1e-3);
        assert!((ks_p_value(corr(1.628), n) - 0.01).abs() < 1e-3);
    }

    #[test]
    fn streams_are_independent_of_order() {
        let a: f64 = stream_rng(1, 3, 2).gen();
        let _ = stream_rng(1, 0, 0).gen::<f64>();
        let b: f64 = stream_rng(1, 3, 2).gen();
        assert_eq!(a, b);
        assert_ne!(a, stream_rng(1, 3, 1).gen::<f64>());
    }
}
