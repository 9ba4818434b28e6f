//! Dataset directory format.
//!
//! ```text
//! <dir>/manifest.json      DatasetManifest as JSON
//! <dir>/task_0000.bin      one file per task
//! ```
//!
//! Task files are little-endian:
//!
//! ```text
//! magic "MNGOTASK" | u32 version
//! u32 rho_dim | f64 × rho_dim
//! u32 trials | u32 horizon | u32 n | u32 n_ext | u32 d | u32 d_h
//! per trial, arrays p0, v0, p_ext, v_ext, h, y_p, y_v, each as
//!   u32 name_len | name | u32 ndim | u32 × ndim | f32 × numel (row-major)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{DatasetManifest, MetaDataset, TaskData, SCHEMA_VERSION};
use crate::binio::{put_tensor, put_u32, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trial::{Trial, TrialInputs};

pub const TASK_MAGIC: &[u8; 8] = b"MNGOTASK";
pub const TASK_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const ARRAYS: [&str; 7] = ["p0", "v0", "p_ext", "v_ext", "h", "y_p", "y_v"];

fn expected_shapes(m: &DatasetManifest) -> [Vec<usize>; 7] {
    let (t, n, e, d) = (m.horizon, m.n, m.n_ext, m.d);
    [
        vec![n, d],
        vec![n, d],
        vec![t + 1, e, d],
        vec![t + 1, e, d],
        vec![n + e, m.d_h],
        vec![t, n, d],
        vec![t, n, d],
    ]
}

pub fn write_dataset(meta: &MetaDataset, dir: &Path) -> Result<()> {
    meta.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&meta.manifest)?)?;
    for (i, task) in meta.tasks.iter().enumerate() {
        let file = fs::File::create(dir.join(DatasetManifest::task_file(i)))?;
        let mut w = BufWriter::new(file);
        write_task(&mut w, &meta.manifest, task)?;
        w.flush()?;
    }
    Ok(())
}

fn write_task(w: &mut impl Write, m: &DatasetManifest, task: &TaskData) -> Result<()> {
    w.write_all(TASK_MAGIC)?;
    w.write_all(&TASK_VERSION.to_le_bytes())?;
    put_u32(w, task.rho.len())?;
    for r in &task.rho {
        w.write_all(&r.to_le_bytes())?;
    }
    for v in [task.trials.len(), m.horizon, m.n, m.n_ext, m.d, m.d_h] {
        put_u32(w, v)?;
    }
    for trial in &task.trials {
        let x = &trial.x;
        let arrays = [&x.p0, &x.v0, &x.p_ext, &x.v_ext, &x.h, &trial.y_p, &trial.y_v];
        for (name, t) in ARRAYS.iter().zip(arrays) {
            put_tensor(w, name, t)?;
        }
    }
    Ok(())
}

fn read_task(path: &Path, m: &DatasetManifest) -> Result<TaskData> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, path);
    if r.take(TASK_MAGIC.len(), "magic")? != TASK_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let version = r.u32("version")? as u32;
    if version != TASK_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: TASK_VERSION,
        });
    }
    let rho_dim = r.u32("rho_dim")?;
    if rho_dim != m.rho_dim() {
        return Err(r.mismatch(format!("rho_dim {rho_dim}, manifest {}", m.rho_dim())));
    }
    let rho = (0..rho_dim).map(|_| r.f64("rho")).collect::<Result<Vec<_>>>()?;
    let header = [m.trials_per_task, m.horizon, m.n, m.n_ext, m.d, m.d_h];
    let names = ["trials", "horizon", "n", "n_ext", "d", "d_h"];
    for (want, name) in header.iter().zip(names) {
        let got = r.u32(name)?;
        if got != *want {
            return Err(r.mismatch(format!("{name} = {got}, manifest says {want}")));
        }
    }
    let shapes = expected_shapes(m);
    let mut trials = Vec::with_capacity(m.trials_per_task);
    for trial in 0..m.trials_per_task {
        let mut arrays = Vec::with_capacity(ARRAYS.len());
        for (name, want) in ARRAYS.iter().zip(&shapes) {
            let len = r.u32("name length")?;
            if len != name.len() {
                return Err(r.mismatch(format!("trial {trial}: array name length {len}, expected {name}")));
            }
            let got_name = r.take(len, "name")?;
            if got_name != name.as_bytes() {
                return Err(r.mismatch(format!(
                    "trial {trial}: array {:?}, expected {name}",
                    String::from_utf8_lossy(got_name)
                )));
            }
            let ndim = r.u32("ndim")?;
            if ndim != want.len() {
                return Err(r.mismatch(format!("trial {trial}: {name} has {ndim} dims, expected {}", want.len())));
            }
            let shape = (0..ndim).map(|_| r.u32("dim")).collect::<Result<Vec<_>>>()?;
            if &shape != want {
                return Err(r.mismatch(format!("trial {trial}: {name} has shape {shape:?}, expected {want:?}")));
            }
            let numel: usize = shape.iter().product();
            arrays.push(Tensor::new(shape, r.f32s(numel, name)?)?);
        }
        let mut it = arrays.into_iter();
        let mut next = || it.next().expect("seven arrays");
        trials.push(Trial {
            x: TrialInputs {
                p0: next(),
                v0: next(),
                p_ext: next(),
                v_ext: next(),
                h: next(),
            },
            y_p: next(),
            y_v: next(),
        });
    }
    if !r.at_end() {
        return Err(r.mismatch(format!("{} trailing bytes", r.remaining())));
    }
    Ok(TaskData { rho, trials })
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let value: serde_json::Value = serde_json::from_slice(&fs::read(&path)?)?;
    let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != SCHEMA_VERSION {
        return Err(Error::Version {
            path,
            found,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

pub fn read_dataset(dir: &Path) -> Result<MetaDataset> {
    let manifest = read_manifest(dir)?;
    let tasks = (0..manifest.tasks)
        .map(|i| read_task(&dir.join(DatasetManifest::task_file(i)), &manifest))
        .collect::<Result<Vec<_>>>()?;
    let meta = MetaDataset { manifest, tasks };
    meta.validate()?;
    Ok(meta)
}

fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = read_manifest(dir)?;
    let mut files = vec![dir.join(MANIFEST_FILE)];
    files.extend((0..manifest.tasks).map(|i| dir.join(DatasetManifest::task_file(i))));
    Ok(files)
}

/// SHA-256 over the manifest and all task files, hex encoded.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in dataset_files(dir)? {
        h.update(fs::read(f)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Same digest as [`dataset_digest`] of the directory `meta` would be
/// written to, computed without touching the disk.
pub fn in_memory_digest(meta: &MetaDataset) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec_pretty(&meta.manifest)?);
    for task in &meta.tasks {
        let mut buf = Vec::new();
        write_task(&mut buf, &meta.manifest, task)?;
        h.update(&buf);
    }
    Ok(hex::encode(h.finalize()))
}
