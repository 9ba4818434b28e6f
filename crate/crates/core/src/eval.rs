//! Evaluation: rollout error, context sweeps, robustness grids, latent
//! dumps, timing and summary statistics.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, MetaDataset, Split, TaskData};
use crate::encoder::corrupt_context;
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::model::{Conditioning, Model};
use crate::tensor::{Scalar, Tape};
use crate::trial::{Trial, TrialInputs};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

/// Mean over `(t, node, dim)` of the squared position error.
pub fn rollout_mse<T: Scalar>(pred: &crate::tensor::Tensor<T>, truth: &crate::tensor::Tensor<T>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("rollout_mse", format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    if pred.numel() == 0 {
        return Err(Error::InvalidArgument("rollout_mse of an empty trajectory".into()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Deterministic held-out split of a task's trials: the first half is the
/// context pool, the rest the target pool.
pub fn trial_pools(trials: usize) -> (Vec<usize>, Vec<usize>) {
    let half = trials / 2;
    ((0..half).collect(), (half..trials).collect())
}

/// Mean rollout MSE over `targets`, conditioned on `context`.
pub fn task_mse(model: &Model<f32>, task: &TaskData, topo: &Topology, context: &[Trial<f32>], targets: &[usize]) -> Result<f64> {
    let r = model.condition_vector(context, Some(&task.rho))?;
    let mut total = 0.0;
    for &i in targets {
        let trial = &task.trials[i];
        let pred = model.decode_with(&r, &trial.x, topo)?;
        total += rollout_mse(&pred, &trial.y_p)?;
    }
    Ok(total / targets.len().max(1) as f64)
}

fn pooled_context(task: &TaskData, size: usize) -> Result<Vec<Trial<f32>>> {
    let (pool, _) = trial_pools(task.trials.len());
    if size > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "context size {size} exceeds the pool of {} trials",
            pool.len()
        )));
    }
    Ok(pool[..size].iter().map(|&i| task.trials[i].clone()).collect())
}

fn target_subset(task: &TaskData, max_targets: Option<usize>) -> Vec<usize> {
    let (_, targets) = trial_pools(task.trials.len());
    let n = max_targets.unwrap_or(targets.len()).min(targets.len());
    targets[..n].to_vec()
}

/// Mean over the tasks of `split` of the rollout MSE on the first
/// `max_targets` target-pool trials, using the first `context_size` trials
/// of the context pool.
pub fn validation_mse(model: &Model<f32>, meta: &MetaDataset, split: Split, context_size: usize, max_targets: usize) -> Result<f64> {
    let tasks = meta.split(split);
    if tasks.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split:?} is empty")));
    }
    let mut total = 0.0;
    for task in &tasks {
        let context = if model.config.conditioning.uses_encoder() {
            pooled_context(task, context_size)?
        } else {
            Vec::new()
        };
        total += task_mse(model, task, meta.topology(), &context, &target_subset(task, Some(max_targets)))?;
    }
    Ok(total / tasks.len() as f64)
}

/// Provenance attached to every report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub schema_version: u32,
    pub model_kind: String,
    pub config_digest: String,
    pub checkpoint_digest: Option<String>,
    pub dataset_digest: Option<String>,
    pub seed: u64,
}

impl ReportMeta {
    pub fn for_model(model: &Model<f32>, seed: u64) -> Result<Self> {
        Ok(ReportMeta {
            schema_version: REPORT_SCHEMA_VERSION,
            model_kind: model.config.kind_tag(),
            config_digest: model.config.digest()?,
            checkpoint_digest: None,
            dataset_digest: None,
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: usize,
    pub rho: Vec<f64>,
    pub context_size: usize,
    pub seed: u64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub context_size: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub meta: ReportMeta,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

/// Rollout MSE for every `(task, context size, seed)`. Each seed picks a
/// different context subset from the task's context pool; targets are the
/// task's target pool.
pub fn context_sweep(
    model: &Model<f32>,
    meta: &MetaDataset,
    split: Split,
    sizes: &[usize],
    seeds: &[u64],
    max_targets: Option<usize>,
) -> Result<SweepReport> {
    if sizes.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("context sweep needs at least one size and one seed".into()));
    }
    let mut rows = Vec::new();
    for &task_id in meta.manifest.splits.get(split) {
        let task = &meta.tasks[task_id];
        let (pool, _) = trial_pools(task.trials.len());
        let targets = target_subset(task, max_targets);
        for &size in sizes {
            if size == 0 || size > pool.len() {
                return Err(Error::InvalidArgument(format!(
                    "context size {size} not in [1, {}] for task {task_id}",
                    pool.len()
                )));
            }
            for &seed in seeds {
                let mut rng = stream_rng(seed, task_id, size as u32);
                let mut pick = sample(&mut rng, pool.len(), size).into_vec();
                pick.sort_unstable();
                let context: Vec<Trial<f32>> = pick.iter().map(|&i| task.trials[pool[i]].clone()).collect();
                let mse = task_mse(model, task, meta.topology(), &context, &targets)?;
                rows.push(SweepRow {
                    task: task_id,
                    rho: task.rho.clone(),
                    context_size: size,
                    seed,
                    mse,
                });
            }
        }
    }
    let summary = sizes
        .iter()
        .enumerate()
        .map(|(k, &size)| {
            let values: Vec<f64> = rows.iter().filter(|r| r.context_size == size).map(|r| r.mse).collect();
            let (ci_lo, ci_hi) = bootstrap_ci(&values, BOOTSTRAP_RESAMPLES, 0.95, k as u64)?;
            Ok(SweepSummary {
                context_size: size,
                mean: mean(&values),
                ci_lo,
                ci_hi,
                count: values.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        meta: ReportMeta::for_model(model, seeds[0])?,
        rows,
        summary,
    })
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "task,rho,context_size,seed,mse")?;
    for r in rows {
        let rho: Vec<String> = r.rho.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{},{},{}", r.task, rho.join(";"), r.context_size, r.seed, r.mse)?;
    }
    w.flush()?;
    Ok(())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Value at quantile `q` of sorted data, by linear interpolation between
/// order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Percentile bootstrap confidence interval of the mean.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::InvalidArgument("bootstrap needs data and at least one resample".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok((quantile_sorted(&means, alpha / 2.0), quantile_sorted(&means, 1.0 - alpha / 2.0)))
}

/// Coefficient of determination of `pred` against `truth`.
pub fn r_squared(truth: &[f64], pred: &[f64]) -> f64 {
    let m = mean(truth);
    let ss_tot: f64 = truth.iter().map(|y| (y - m).powi(2)).sum();
    let ss_res: f64 = truth.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Least-squares line `y = a + b·x` and its R².
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let pred: Vec<f64> = x.iter().map(|a| intercept + slope * a).collect();
    (intercept, slope, r_squared(y, &pred))
}

/// Ranks starting at 1, ties get their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustCell {
    pub sigma: f64,
    pub dropout: f64,
    pub mse: f64,
    /// `(mse - oracle) / (no_context - oracle)`.
    pub normalized: f64,
    /// Set when the corrupted context is worse than no context at all.
    pub exceeds_no_context: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub meta: ReportMeta,
    pub oracle_mse: f64,
    pub no_context_mse: f64,
    pub context_size: usize,
    pub cells: Vec<RobustCell>,
}

impl RobustnessReport {
    pub fn cell(&self, sigma: f64, dropout: f64) -> Option<&RobustCell> {
        self.cells.iter().find(|c| c.sigma == sigma && c.dropout == dropout)
    }
}

/// Mean rollout MSE over the tasks of `split` with the encoder's context
/// corrupted by `corrupt_context`; targets stay clean.
#[allow(clippy::too_many_arguments)]
fn corrupted_split_mse(
    model: &Model<f32>,
    meta: &MetaDataset,
    split: Split,
    context_size: usize,
    sigma: f64,
    dropout: f64,
    seed: u64,
    max_targets: Option<usize>,
) -> Result<f64> {
    let mut total = 0.0;
    let ids = meta.manifest.splits.get(split);
    for &task_id in ids {
        let task = &meta.tasks[task_id];
        let context = if model.config.conditioning.uses_encoder() {
            let clean = pooled_context(task, context_size)?;
            corrupt_context(&clean, sigma, dropout, &mut stream_rng(seed, task_id, 0))?
        } else {
            Vec::new()
        };
        total += task_mse(model, task, meta.topology(), &context, &target_subset(task, max_targets))?;
    }
    Ok(total / ids.len().max(1) as f64)
}

/// Normalized MSE of `meta_model` under every `(sigma, dropout)` context
/// corruption; 0 is the oracle's MSE and 1 the no-context model's.
#[allow(clippy::too_many_arguments)]
pub fn robustness_matrix(
    meta_model: &Model<f32>,
    oracle: &Model<f32>,
    no_context: &Model<f32>,
    meta: &MetaDataset,
    split: Split,
    sigmas: &[f64],
    dropouts: &[f64],
    context_size: usize,
    seed: u64,
    max_targets: Option<usize>,
) -> Result<RobustnessReport> {
    if oracle.config.conditioning != Conditioning::Oracle || no_context.config.conditioning != Conditioning::None {
        return Err(Error::InvalidArgument(
            "robustness anchors must be an oracle model and a no-context model".into(),
        ));
    }
    if !meta_model.config.conditioning.uses_encoder() {
        return Err(Error::InvalidArgument("robustness grid needs a model with an encoder".into()));
    }
    let oracle_mse = corrupted_split_mse(oracle, meta, split, context_size, 0.0, 0.0, seed, max_targets)?;
    let no_context_mse = corrupted_split_mse(no_context, meta, split, context_size, 0.0, 0.0, seed, max_targets)?;
    let span = no_context_mse - oracle_mse;
    if !(span > 0.0) {
        log::warn!("no-context MSE {no_context_mse:.3e} is not above oracle MSE {oracle_mse:.3e}");
    }
    let mut cells = Vec::with_capacity(sigmas.len() * dropouts.len());
    for &sigma in sigmas {
        for &dropout in dropouts {
            let mse = corrupted_split_mse(meta_model, meta, split, context_size, sigma, dropout, seed, max_targets)?;
            let normalized = (mse - oracle_mse) / span;
            cells.push(RobustCell {
                sigma,
                dropout,
                mse,
                normalized,
                exceeds_no_context: normalized > 1.0,
            });
        }
    }
    Ok(RobustnessReport {
        meta: ReportMeta::for_model(meta_model, seed)?,
        oracle_mse,
        no_context_mse,
        context_size,
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub task: usize,
    pub r: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Encoder latent of each task in `split` from its first `context_size`
/// context-pool trials. Requires a 2-dimensional latent.
pub fn latent_dump(model: &Model<f32>, meta: &MetaDataset, split: Split, context_size: usize) -> Result<Vec<LatentRow>> {
    if model.config.latent_dim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "latent dump needs d_r = 2, model has {}",
            model.config.latent_dim()
        )));
    }
    meta.manifest
        .splits
        .get(split)
        .iter()
        .map(|&task_id| {
            let task = &meta.tasks[task_id];
            Ok(LatentRow {
                task: task_id,
                r: model.latent(&pooled_context(task, context_size)?)?,
                rho: task.rho.clone(),
            })
        })
        .collect()
}

pub fn write_latent_csv(path: &Path, rows: &[LatentRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "task,r_1,r_2,rho")?;
    for row in rows {
        writeln!(w, "{},{},{},{}", row.task, row.r[0], row.r[1], row.rho[0])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub median_ms: f64,
    pub q1_ms: f64,
    pub q3_ms: f64,
    pub iqr_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl TimingStats {
    pub fn from_samples(mut samples_ms: Vec<f64>) -> Self {
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile_sorted(&sorted, 0.25), quantile_sorted(&sorted, 0.75));
        samples_ms.shrink_to_fit();
        TimingStats {
            median_ms: quantile_sorted(&sorted, 0.5),
            q1_ms: q1,
            q3_ms: q3,
            iqr_ms: q3 - q1,
            samples_ms,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub horizon: usize,
    pub repeats: usize,
    pub mango: TimingStats,
    pub autoregressive: TimingStats,
    /// Median autoregressive time over median full-trajectory time.
    pub speedup: f64,
}

fn time_decode(model: &Model<f32>, r: &crate::tensor::Tensor<f32>, x: &TrialInputs<f32>, topo: &Topology, repeats: usize) -> Result<TimingStats> {
    for _ in 0..2 {
        model.decode_with(r, x, topo)?;
    }
    let samples = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            model.decode_with(r, x, topo)?;
            Ok(start.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TimingStats::from_samples(samples))
}

/// Wall-clock of a full-trajectory decode against an autoregressive rollout
/// of the same horizon, after two warm-up runs each. Conditioning vectors
/// are computed once beforehand and not timed.
pub fn timing_compare(
    mango: &Model<f32>,
    autoregressive: &Model<f32>,
    context: &[Trial<f32>],
    rho: &[f64],
    x: &TrialInputs<f32>,
    topo: &Topology,
    repeats: usize,
) -> Result<TimingReport> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("timing needs at least one repeat".into()));
    }
    let horizon = x.dims()?.horizon;
    let r_m = mango.condition_vector(context, Some(rho))?;
    let r_a = autoregressive.condition_vector(context, Some(rho))?;
    let m = time_decode(mango, &r_m, x, topo, repeats)?;
    let a = time_decode(autoregressive, &r_a, x, topo, repeats)?;
    Ok(TimingReport {
        horizon,
        repeats,
        speedup: a.median_ms / m.median_ms,
        mango: m,
        autoregressive: a,
    })
}

/// Scalars recorded on the tape by one differentiable decode, for each
/// horizon. Parameter and conditioning nodes are excluded.
pub fn activation_counts(model: &Model<f32>, trial: &Trial<f32>, rho: &[f64], topo: &Topology, horizons: &[usize]) -> Result<Vec<(usize, usize)>> {
    horizons
        .iter()
        .map(|&h| {
            let t = trial.truncated(h)?;
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let cond = model.condition(&mut tape, &p, std::slice::from_ref(&t), Some(rho))?;
            let before = tape.activation_count();
            model.decode(&mut tape, &p, &t.x, cond.r, topo)?;
            Ok((h, tape.activation_count() - before))
        })
        .collect()
}
