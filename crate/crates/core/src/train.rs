//! Meta-training: context sampling, losses, AdamW and the training loop.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::{MetaDataset, Split};
use crate::decoder::FeatureScales;
use crate::encoder::corrupt_context;
use crate::error::{Error, Result};
use crate::eval::validation_mse;
use crate::graph::Topology;
use crate::model::{Conditioning, DecoderKind, Model, ModelConfig, RhoNormalizer, TrajectoryDecoder, ENCODER, RHO_HEAD};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::trial::Trial;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_AR_LR: f64 = 5e-4;

/// One context/target draw from a task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextDraw {
    pub context: Vec<usize>,
    pub target: usize,
    /// Whether the target is also part of the context.
    pub overlap: bool,
}

/// Draws `S ~ U{lo..=hi}` distinct context trials and one target trial from
/// all `trials`; the target may coincide with a context trial.
pub fn sample_context_and_target(trials: usize, range: [usize; 2], rng: &mut impl Rng) -> Result<ContextDraw> {
    let [lo, hi] = range;
    if trials < 2 {
        return Err(Error::InvalidArgument(format!("a task needs at least 2 trials, got {trials}")));
    }
    if lo == 0 || hi < lo || hi > trials - 1 {
        return Err(Error::Config(format!(
            "context range [{lo}, {hi}] must lie within [1, {}]",
            trials - 1
        )));
    }
    let size = rng.gen_range(lo..=hi);
    let context = sample(rng, trials, size).into_vec();
    let target = rng.gen_range(0..trials);
    let overlap = context.contains(&target);
    Ok(ContextDraw { context, target, overlap })
}

/// Gaussian negative log-likelihood with unit variance, without the
/// constant: `0.5 · mean((ŷ - y)²)`.
pub fn trajectory_nll<T: Scalar>(tape: &mut Tape<T>, y_hat: Var, y: Var) -> Result<Var> {
    if tape.shape(y_hat) != tape.shape(y) {
        return Err(Error::shape(
            "trajectory_nll",
            format!("{:?} vs {:?}", tape.shape(y_hat), tape.shape(y)),
        ));
    }
    tape.half_mse(y_hat, y)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub trajectory: Option<Var>,
    pub rho: Option<Var>,
}

/// `trajectory_nll + weight · 0.5 · mean((ρ̂ - ρ)²)`, with ρ normalized.
pub fn joint_loss<T: Scalar>(
    tape: &mut Tape<T>,
    y_hat: Var,
    y: Var,
    rho_hat: Var,
    rho: Var,
    weight: f64,
) -> Result<LossTerms> {
    let traj = trajectory_nll(tape, y_hat, y)?;
    let rho_term = tape.half_mse(rho_hat, rho)?;
    let weighted = tape.scale(rho_term, weight);
    let total = tape.add(traj, weighted)?;
    Ok(LossTerms {
        total,
        trajectory: Some(traj),
        rho: Some(rho_term),
    })
}

/// What a training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    /// Trajectory term plus the weighted ρ term when the model has a head.
    Joint { rho_weight: f64 },
    /// Only the ρ regression (first stage of the two-stage baseline).
    RhoOnly,
    /// Only the trajectory term.
    TrajectoryOnly,
}

/// Builds the loss of one context/target pair on `tape`. `noise` feeds the
/// autoregressive decoder's input-noise injection.
#[allow(clippy::too_many_arguments)]
pub fn model_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    p: &Bound,
    context: &[Trial<T>],
    target: &Trial<T>,
    rho: &[f64],
    topo: &Topology,
    objective: Objective,
    noise: Option<&mut dyn RngCore>,
) -> Result<LossTerms> {
    let cond = model.condition(tape, p, context, Some(rho))?;
    let rho_target = |tape: &mut Tape<T>| -> Result<Var> {
        let z = model.config.rho_norm.normalize(rho)?;
        Ok(tape.constant(Tensor::from_f64(vec![z.len()], &z)?))
    };
    if objective == Objective::RhoOnly {
        let rho_hat = cond
            .rho_hat
            .ok_or_else(|| Error::InvalidArgument("ρ-only objective needs a parameter head".into()))?;
        let z = rho_target(tape)?;
        let term = tape.half_mse(rho_hat, z)?;
        return Ok(LossTerms {
            total: term,
            trajectory: None,
            rho: Some(term),
        });
    }
    let traj = match &model.arch.decoder {
        TrajectoryDecoder::Mango(dec) => {
            let y_hat = dec.decode(tape, p, &target.x, cond.r, topo)?;
            let y = tape.constant(target.y_p.clone());
            trajectory_nll(tape, y_hat, y)?
        }
        TrajectoryDecoder::Autoregressive(dec) => dec.teacher_forced_loss(tape, p, cond.r, target, topo, noise)?,
    };
    match (objective, cond.rho_hat) {
        (Objective::Joint { rho_weight }, Some(rho_hat)) if rho_weight > 0.0 => {
            let z = rho_target(tape)?;
            let term = tape.half_mse(rho_hat, z)?;
            let weighted = tape.scale(term, rho_weight);
            let total = tape.add(traj, weighted)?;
            Ok(LossTerms {
                total,
                trajectory: Some(traj),
                rho: Some(term),
            })
        }
        _ => Ok(LossTerms {
            total: traj,
            trajectory: Some(traj),
            rho: None,
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay. Moments and step counts are kept per
/// parameter so tensors frozen for a while resume with correct bias
/// correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new<T: Scalar>(params: &ParamStore<T>, lr: f64, config: AdamWConfig) -> Self {
        AdamW {
            config,
            lr,
            m: params.values().iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.values().iter().map(|t| vec![0.0; t.numel()]).collect(),
            t: vec![0; params.len()],
        }
    }

    /// Updates every parameter that has a gradient; the rest are untouched.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adamw_step", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (i, (value, grad)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if grad.shape() != value.shape() {
                return Err(Error::shape("adamw_step", format!("gradient {:?} for parameter {:?}", grad.shape(), value.shape())));
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = g.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mut x = w.as_f64() * (1.0 - self.lr * weight_decay);
                x -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *w = T::from_f64_lossy(x);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Defaults to 1e-4, or 5e-4 for the autoregressive decoder.
    pub lr: Option<f64>,
    pub adam: AdamWConfig,
    pub context_range: [usize; 2],
    pub seed: u64,
    /// Std of the noise added to the encoder's copy of the context.
    pub context_noise: f64,
    pub rho_weight: f64,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Context size and target trials per task for validation.
    pub val_context: usize,
    pub val_targets: usize,
    /// Share of the steps spent on ρ regression for the two-stage baseline.
    pub stage1_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            lr: None,
            adam: AdamWConfig::default(),
            context_range: [1, 8],
            seed: 0,
            context_noise: 0.0,
            rho_weight: 1.0,
            eval_every: 50,
            patience: 20,
            val_context: 4,
            val_targets: 2,
            stage1_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self, kind: DecoderKind) -> f64 {
        self.lr.unwrap_or(match kind {
            DecoderKind::Mango => DEFAULT_LR,
            DecoderKind::Autoregressive => DEFAULT_AR_LR,
        })
    }

    pub fn validate(&self, trials_per_task: usize) -> Result<()> {
        let [lo, hi] = self.context_range;
        if lo == 0 || hi < lo || hi + 1 > trials_per_task {
            return Err(Error::Config(format!(
                "context range [{lo}, {hi}] must lie within [1, {}]",
                trials_per_task.saturating_sub(1)
            )));
        }
        if self.val_context > trials_per_task / 2 || self.val_targets == 0 {
            return Err(Error::Config(format!(
                "validation needs 1 or more targets and a context of at most {} trials",
                trials_per_task / 2
            )));
        }
        if self.steps == 0 || self.eval_every == 0 {
            return Err(Error::Config("steps and eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.stage1_fraction) {
            return Err(Error::Config("stage1_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Root-mean-square magnitudes of the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataScales {
    /// Edge rest length.
    pub length: f64,
    /// Position about the initial centroid.
    pub position: f64,
    pub velocity: f64,
    /// `p_t - p_0` over all frames.
    pub displacement: f64,
    /// `p_{t+1} - p_t`.
    pub step: f64,
}

fn rms(sum_sq: f64, count: usize) -> f64 {
    let v = (sum_sq / count.max(1) as f64).sqrt();
    if v > 0.0 && v.is_finite() {
        v
    } else {
        1.0
    }
}

pub fn fit_data_scales(meta: &MetaDataset) -> Result<DataScales> {
    let train = meta.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("cannot fit scales on an empty training split".into()));
    }
    let lengths = meta.topology().rest_lengths();
    let length = rms(lengths.iter().map(|l| l * l).sum(), lengths.len());
    let mut acc = [(0.0f64, 0usize); 4];
    let mut add = |slot: usize, v: f64| {
        acc[slot].0 += v * v;
        acc[slot].1 += 1;
    };
    for task in &train {
        for trial in &task.trials {
            let dims = trial.dims()?;
            let (n, d) = (dims.n, dims.d);
            let p0 = trial.x.p0.data();
            let ext0 = &trial.x.p_ext.data()[..dims.n_ext * d];
            let nt = dims.n_total() as f64;
            let centroid: Vec<f64> = (0..d)
                .map(|k| {
                    let s: f64 = p0.iter().chain(ext0).skip(k).step_by(d).map(|&v| v as f64).sum();
                    s / nt
                })
                .collect();
            for (i, &v) in p0.iter().chain(ext0).enumerate() {
                add(0, v as f64 - centroid[i % d]);
            }
            for &v in trial.y_v.data().iter().chain(trial.x.v_ext.data()).chain(trial.x.v0.data()) {
                add(1, v as f64);
            }
            let y = trial.y_p.data();
            for t in 0..dims.horizon {
                let frame = &y[t * n * d..(t + 1) * n * d];
                let prev = if t == 0 { p0 } else { &y[(t - 1) * n * d..t * n * d] };
                for ((&a, &b), &c) in frame.iter().zip(p0).zip(prev) {
                    add(2, (a - b) as f64);
                    add(3, (a - c) as f64);
                }
            }
        }
    }
    Ok(DataScales {
        length,
        position: rms(acc[0].0, acc[0].1),
        velocity: rms(acc[1].0, acc[1].1),
        displacement: rms(acc[2].0, acc[2].1),
        step: rms(acc[3].0, acc[3].1),
    })
}

/// Model configuration matched to a dataset: dimensions, frame spacing,
/// feature scales and a log-space ρ normalizer fitted on the training tasks.
pub fn model_config_for(meta: &MetaDataset, conditioning: Conditioning, kind: DecoderKind) -> Result<ModelConfig> {
    let m = &meta.manifest;
    let train = meta.split(Split::Train);
    let positive = train.iter().all(|t| t.rho.iter().all(|&v| v > 0.0));
    let norm = RhoNormalizer::fit(train.iter().map(|t| t.rho.as_slice()), positive)?;
    let mut config = ModelConfig::desk(conditioning, kind, m.d, m.d_h, norm);
    let s = fit_data_scales(meta)?;
    config.autoregressive.frame_dt = m.frame_dt;
    config.encoder.input_scales = [s.position, s.velocity];
    config.decoder.scales = FeatureScales {
        length: s.length,
        velocity: s.velocity,
        output: s.displacement,
    };
    config.autoregressive.scales = FeatureScales {
        length: s.length,
        velocity: s.velocity,
        output: s.step,
    };
    Ok(config)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub trajectory: Option<f64>,
    pub rho: Option<f64>,
    pub context_size: usize,
    pub overlap: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation MSE.
    pub best: Model<f32>,
    pub best_step: usize,
    pub best_val: f64,
    pub last: Model<f32>,
    pub records: Vec<LogRecord>,
    pub stopped_early: bool,
    pub overlap_fraction: f64,
}

struct Output {
    dir: PathBuf,
    log: BufWriter<fs::File>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let log = BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?);
        Ok(Output { dir: dir.to_path_buf(), log })
    }

    fn record(&mut self, r: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.log, r)?;
        self.log.write_all(b"\n")?;
        Ok(())
    }
}

fn trainable(conditioning: Conditioning, stage: u8) -> impl Fn(&str) -> bool {
    move |name: &str| {
        if conditioning != Conditioning::TwoStage {
            return true;
        }
        let first = name.starts_with(&format!("{ENCODER}.")) || name.starts_with(&format!("{RHO_HEAD}."));
        (stage == 1) == first
    }
}

/// Trains `model` on the training split, validating on the validation split.
/// With `out`, writes `train_log.jsonl`, `best.ckpt` and `last.ckpt` there.
pub fn train(meta: &MetaDataset, mut model: Model<f32>, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    meta.validate()?;
    cfg.validate(meta.manifest.trials_per_task)?;
    let train_tasks = meta.split(Split::Train);
    if train_tasks.is_empty() || meta.split(Split::Val).is_empty() {
        return Err(Error::Config("training needs non-empty train and validation splits".into()));
    }
    let topo = meta.topology();
    let conditioning = model.config.conditioning;
    let lr = cfg.learning_rate(model.config.decoder_kind);
    let mut opt = AdamW::new(&model.params, lr, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut out = out.map(Output::new).transpose()?;
    let dataset_digest = out
        .as_ref()
        .and_then(|_| crate::data::io::in_memory_digest(meta).ok());

    let stage1_steps = if conditioning == Conditioning::TwoStage {
        ((cfg.steps as f64) * cfg.stage1_fraction).round() as usize
    } else {
        0
    };
    let mut best: Option<(Model<f32>, usize, f64)> = None;
    let mut since_best = 0usize;
    let mut records = Vec::with_capacity(cfg.steps);
    let mut overlaps = 0usize;
    let mut stopped_early = false;

    for step in 0..cfg.steps {
        let stage: u8 = if step < stage1_steps { 1 } else { 2 };
        let objective = match (conditioning, stage) {
            (Conditioning::TwoStage, 1) => Objective::RhoOnly,
            (Conditioning::TwoStage, _) => Objective::TrajectoryOnly,
            _ => Objective::Joint {
                rho_weight: cfg.rho_weight,
            },
        };
        let task = train_tasks[rng.gen_range(0..train_tasks.len())];
        let draw = sample_context_and_target(task.trials.len(), cfg.context_range, &mut rng)?;
        overlaps += draw.overlap as usize;
        let mut context: Vec<Trial<f32>> = draw.context.iter().map(|&i| task.trials[i].clone()).collect();
        if cfg.context_noise > 0.0 && conditioning.uses_encoder() {
            context = corrupt_context(&context, cfg.context_noise, 0.0, &mut rng)?;
        }
        let target = &task.trials[draw.target];

        let mut tape = Tape::new();
        let p = model.params.bind_where(&mut tape, trainable(conditioning, stage));
        let terms = model_loss(
            &model,
            &mut tape,
            &p,
            &context,
            target,
            &task.rho,
            topo,
            objective,
            Some(&mut rng as &mut dyn RngCore),
        )?;
        let loss = tape.value(terms.total).data()[0] as f64;
        let scalar = |v: Option<Var>| v.map(|v| tape.value(v).data()[0] as f64);
        let mut record = LogRecord {
            step,
            stage,
            loss,
            trajectory: scalar(terms.trajectory),
            rho: scalar(terms.rho),
            context_size: draw.context.len(),
            overlap: draw.overlap,
            val_mse: None,
        };
        if !loss.is_finite() {
            if let Some(o) = &mut out {
                o.record(&record)?;
                let good = best.as_ref().map(|b| &b.0).unwrap_or(&model);
                save_checkpoint(&o.dir.join("last_good.ckpt"), good, &CheckpointMeta::default())?;
                o.log.flush()?;
            }
            return Err(Error::NonFinite(format!("loss became {loss} at step {step}")));
        }
        let mut grads = tape.backward(terms.total)?;
        let grads: Vec<Option<Tensor<f32>>> = p.vars().iter().map(|&v| grads.take(v)).collect();
        drop(tape);
        opt.step(&mut model.params, &grads)?;

        let last_step = step + 1 == cfg.steps;
        if stage == 2 && ((step + 1) % cfg.eval_every == 0 || last_step) {
            let val = validation_mse(&model, meta, Split::Val, cfg.val_context, cfg.val_targets)?;
            let val = if val.is_nan() { f64::INFINITY } else { val };
            record.val_mse = Some(val);
            log::info!("step {} loss {:.6e} val {:.6e}", step + 1, loss, val);
            if best.as_ref().map_or(true, |b| val < b.2) {
                best = Some((model.clone(), step + 1, val));
                since_best = 0;
                if let Some(o) = &out {
                    let meta_info = CheckpointMeta {
                        step: step + 1,
                        val_mse: Some(val),
                        seed: cfg.seed,
                        dataset_digest: dataset_digest.clone(),
                    };
                    save_checkpoint(&o.dir.join("best.ckpt"), &model, &meta_info)?;
                }
            } else {
                since_best += 1;
            }
        }
        if let Some(o) = &mut out {
            o.record(&record)?;
        }
        records.push(record);
        if since_best >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let (best_model, best_step, best_val) = best.ok_or_else(|| Error::Config("no validation run happened".into()))?;
    if let Some(o) = &mut out {
        o.log.flush()?;
        let meta_info = CheckpointMeta {
            step: records.len(),
            val_mse: records.iter().rev().find_map(|r| r.val_mse),
            seed: cfg.seed,
            dataset_digest,
        };
        save_checkpoint(&o.dir.join("last.ckpt"), &model, &meta_info)?;
    }
    let overlap_fraction = overlaps as f64 / records.len().max(1) as f64;
    log::info!("context/target overlap in {:.1}% of steps", 100.0 * overlap_fraction);
    Ok(TrainOutcome {
        best: best_model,
        best_step,
        best_val,
        last: model,
        records,
        stopped_early,
        overlap_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ring_topology;
    use crate::model::ModelConfig;
    use crate::nn::TimeEmbedding;
    use crate::trial::random_trial;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn context_sizes_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = [0usize; 8];
        let draws = 100_000;
        for _ in 0..draws {
            let d = sample_context_and_target(16, [1, 8], &mut rng).unwrap();
            counts[d.context.len() - 1] += 1;
        }
        let expected = draws as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(7.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 = {chi2}, p = {p}");
    }

    #[test]
    fn context_trials_are_distinct_and_draws_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_context_and_target(16, [1, 8], &mut rng).unwrap()).collect::<Vec<_>>()
        };
        let a = draw(3);
        for d in &a {
            let mut c = d.context.clone();
            c.sort_unstable();
            c.dedup();
            assert_eq!(c.len(), d.context.len());
            assert_eq!(d.overlap, d.context.contains(&d.target));
        }
        assert_eq!(a, draw(3));
        assert!(sample_context_and_target(1, [1, 1], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(sample_context_and_target(4, [1, 4], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn nll_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let y = tape.constant(Tensor::from_fn(vec![3, 4, 2], |i| i as f64 * 0.1));
        let zero = trajectory_nll(&mut tape, y, y).unwrap();
        assert_eq!(tape.value(zero).data()[0], 0.0);
        let shifted = tape.constant(Tensor::from_fn(vec![3, 4, 2], |i| i as f64 * 0.1 + 1.0));
        let half = trajectory_nll(&mut tape, shifted, y).unwrap();
        assert!((tape.value(half).data()[0] - 0.5).abs() < 1e-12);
        let other = tape.constant(Tensor::zeros(vec![3, 4, 1]));
        assert!(trajectory_nll(&mut tape, other, y).is_err());
    }

    #[test]
    fn nll_matches_gaussian_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f64>::from_fn(vec![5, 6, 2], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn(vec![5, 6, 2], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let nll = trajectory_nll(&mut tape, va, vb).unwrap();
        let log_norm = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let brute: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, mu)| {
                let log_pdf = -0.5 * (x - mu).powi(2) - log_norm;
                -log_pdf - log_norm
            })
            .sum::<f64>()
            / a.numel() as f64;
        assert!((tape.value(nll).data()[0] - brute).abs() < 1e-6);
    }

    #[test]
    fn joint_loss_reduces_to_nll() {
        let mut tape = Tape::<f64>::new();
        let y_hat = tape.constant(Tensor::full(vec![2, 3, 2], 1.0));
        let y = tape.constant(Tensor::zeros(vec![2, 3, 2]));
        let rho_hat = tape.constant(Tensor::from_f64(vec![1], &[0.3]).unwrap());
        let rho = tape.constant(Tensor::from_f64(vec![1], &[0.1]).unwrap());
        let unweighted = joint_loss(&mut tape, y_hat, y, rho_hat, rho, 0.0).unwrap();
        assert!((tape.value(unweighted.total).data()[0] - 0.5).abs() < 1e-12);
        let exact = joint_loss(&mut tape, y_hat, y, rho, rho, 1.0).unwrap();
        assert_eq!(tape.value(exact.rho.unwrap()).data()[0], 0.0);
        let full = joint_loss(&mut tape, y_hat, y, rho_hat, rho, 2.0).unwrap();
        let expected = 0.5 + 2.0 * 0.5 * 0.04;
        assert!((tape.value(full.total).data()[0] - expected).abs() < 1e-12);
    }

    fn toy_model(cond: Conditioning, kind: DecoderKind) -> Model<f64> {
        let norm = RhoNormalizer::fit([&[1.0][..], &[10.0][..]], true).unwrap();
        let mut c = ModelConfig::full(cond, kind, 2, 2, norm);
        c.set_width(8, 2);
        c.decoder.conv_kernel = 3;
        c.decoder.time_embedding = TimeEmbedding::new(4).unwrap();
        Model::new(c, 2).unwrap()
    }

    #[test]
    fn rho_term_reaches_the_encoder() {
        let model = toy_model(Conditioning::Meta, DecoderKind::Mango);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ctx: Vec<Trial<f64>> = (0..2).map(|_| random_trial(&mut rng, 5, 2, 2, 3)).collect();
        let topo = ring_topology(5, 2).unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let terms = model_loss(&model, &mut tape, &p, &ctx, &ctx[0], &[3.0], &topo, Objective::RhoOnly, None).unwrap();
        let grads = tape.backward(terms.total).unwrap();
        let enc_norm: f64 = model
            .params
            .ids()
            .filter(|&id| model.params.name(id).starts_with("enc."))
            .filter_map(|id| grads.get(p[id]))
            .map(|g| g.max_abs())
            .fold(0.0, f64::max);
        assert!(enc_norm > 0.0);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let model = toy_model(Conditioning::TwoStage, DecoderKind::Mango);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ctx: Vec<Trial<f64>> = (0..2).map(|_| random_trial(&mut rng, 5, 2, 2, 3)).collect();
        let topo = ring_topology(5, 2).unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind_where(&mut tape, trainable(Conditioning::TwoStage, 2));
        let terms = model_loss(&model, &mut tape, &p, &ctx, &ctx[1], &[3.0], &topo, Objective::TrajectoryOnly, None).unwrap();
        let grads = tape.backward(terms.total).unwrap();
        let y = model.predict(&ctx, &ctx[1].x, Some(&[3.0]), &topo).unwrap();
        assert_eq!(y.shape(), ctx[1].y_p.shape());
        for id in model.params.ids() {
            let name = model.params.name(id);
            let g = grads.get(p[id]);
            if name.starts_with("enc.") || name.starts_with("rho_head.") {
                assert!(g.map_or(true, |g| g.max_abs() == 0.0), "{name}");
            } else if name.starts_with("dec.") {
                assert!(g.is_some(), "{name}");
            }
        }
    }

    #[test]
    fn adamw_closed_forms() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(vec![1], &[2.0]).unwrap());
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&store, 0.1, cfg);
        opt.step(&mut store, &[Some(Tensor::zeros(vec![1]))]).unwrap();
        assert_eq!(store.values()[0].data()[0], 2.0);

        // one step from fresh state: update is lr · g / (|g| + eps)
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(vec![1], &[2.0]).unwrap());
        let mut opt = AdamW::new(&store, 0.1, AdamWConfig::default());
        opt.step(&mut store, &[Some(Tensor::from_f64(vec![1], &[0.5]).unwrap())]).unwrap();
        let expected = 2.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((store.values()[0].data()[0] - expected).abs() < 1e-12);

        // second step with a known moment state
        opt.step(&mut store, &[Some(Tensor::from_f64(vec![1], &[-1.0]).unwrap())]).unwrap();
        let m = 0.9 * 0.05 + 0.1 * -1.0;
        let v = 0.999 * 0.00025 + 0.001 * 1.0;
        let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
        let expected = expected * (1.0 - 0.001) - 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((store.values()[0].data()[0] - expected).abs() < 1e-12);

        // weight decay alone shrinks by (1 - lr · wd) per step
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_f64(vec![2], &[1.0, -3.0]).unwrap());
        let mut opt = AdamW::new(&store, 0.5, AdamWConfig::default());
        opt.step(&mut store, &[Some(Tensor::zeros(vec![2]))]).unwrap();
        assert_eq!(store.values()[0].data(), &[1.0 * 0.995, -3.0 * 0.995]);
    }
}
