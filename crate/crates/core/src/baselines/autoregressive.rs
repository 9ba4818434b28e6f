//! Next-step graph simulator rolled out frame by frame.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decoder::{frame_positions, project_conditioned, FeatureScales};
use crate::error::{Error, Result};
use crate::graph::{relative_edge_positions, GraphState, MessagePassing, Topology, EDGE_STATIC_DIM};
use crate::nn::{Bound, Linear, Mlp, MlpConfig, ParamStore};
use crate::tensor::{ReduceMode, Scalar, Tape, Tensor, Var};
use crate::trial::{Trial, TrialInputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArConfig {
    pub width: usize,
    pub hidden: usize,
    /// Message-passing layers per step.
    pub layers: usize,
    pub layer_norm: bool,
    pub aggregation: ReduceMode,
    /// Std of the Gaussian noise added to input positions during training.
    pub noise_sigma: f64,
    /// Time between frames; turns position differences into velocities.
    pub frame_dt: f64,
    #[serde(default)]
    pub scales: FeatureScales,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            width: 128,
            hidden: 128,
            layers: 15,
            layer_norm: true,
            aggregation: ReduceMode::Mean,
            noise_sigma: 7.0e-4,
            frame_dt: 0.02,
            scales: FeatureScales::default(),
        }
    }
}

/// Adds i.i.d. `N(0, sigma²)` noise to every entry. Training only.
pub fn train_noise_inject<T: Scalar>(positions: &Tensor<T>, sigma: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(positions.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid normal");
    let mut out = positions.clone();
    for v in out.data_mut() {
        *v += T::from_f64_lossy(normal.sample(rng));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AutoregressiveDecoder {
    pub config: ArConfig,
    pub cond_dim: usize,
    pub d: usize,
    pub d_h: usize,
    pub node_in: Linear,
    pub edge_in: Linear,
    pub layers: Vec<MessagePassing>,
    pub head: Mlp,
}

/// Per-frame inputs of the step model for a batch of frames.
struct StepBatch<T: Scalar> {
    /// `[B, N_total, d]`
    positions: Tensor<T>,
    /// `[B, N_total, d]`
    velocities: Tensor<T>,
}

impl AutoregressiveDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        config: ArConfig,
        cond_dim: usize,
        d: usize,
        d_h: usize,
    ) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config("step model needs at least one layer".into()));
        }
        if !(config.frame_dt > 0.0) {
            return Err(Error::Config("frame_dt must be positive".into()));
        }
        let c = config.width;
        let node_in = Linear::new(store, rng, &format!("{name}.node_in"), cond_dim + d_h + d, c, true);
        let edge_in = Linear::new(store, rng, &format!("{name}.edge_in"), EDGE_STATIC_DIM + d, c, true);
        let layers = (0..config.layers)
            .map(|k| {
                MessagePassing::new(
                    store,
                    rng,
                    &format!("{name}.mp{k}"),
                    c,
                    config.hidden,
                    config.layer_norm,
                    config.aggregation,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Mlp::new(store, rng, &format!("{name}.head"), MlpConfig::new([c, config.hidden, d]))?;
        Ok(AutoregressiveDecoder {
            config,
            cond_dim,
            d,
            d_h,
            node_in,
            edge_in,
            layers,
            head,
        })
    }

    /// Displacement of every deformable node for each of `B` independent
    /// states. Returns `[B, N, d]`.
    fn step_batch<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        r: Var,
        batch: &StepBatch<T>,
        h: &Tensor<T>,
        topo: &Topology,
    ) -> Result<Var> {
        let (b, nt, d) = (batch.positions.shape()[0], topo.num_nodes(), self.d);
        let (n, e) = (topo.num_deformable(), topo.num_edges());
        let d_h = self.d_h;
        let mut node_feats = Vec::with_capacity(b * nt * (d_h + d));
        let mut edge_feats = Vec::with_capacity(b * e * (EDGE_STATIC_DIM + d));
        let scales = &self.config.scales;
        let stat = scales.edge_features::<T>(topo);
        let inv_v: T = scales.velocity_factor();
        for k in 0..b {
            let vel = &batch.velocities.data()[k * nt * d..(k + 1) * nt * d];
            for v in 0..nt {
                node_feats.extend_from_slice(&h.data()[v * d_h..(v + 1) * d_h]);
                node_feats.extend(vel[v * d..(v + 1) * d].iter().map(|&c| c * inv_v));
            }
            let pos = Tensor::new(vec![nt, d], batch.positions.data()[k * nt * d..(k + 1) * nt * d].to_vec())?;
            let mut rel = relative_edge_positions(&pos, topo)?;
            scales.scale_lengths(&mut rel);
            for j in 0..e {
                edge_feats.extend_from_slice(&stat.data()[j * EDGE_STATIC_DIM..(j + 1) * EDGE_STATIC_DIM]);
                edge_feats.extend_from_slice(&rel.data()[j * d..(j + 1) * d]);
            }
        }
        let node_feats = tape.constant(Tensor::new(vec![b * nt, d_h + d], node_feats)?);
        let edge_feats = tape.constant(Tensor::new(vec![b * e, EDGE_STATIC_DIM + d], edge_feats)?);
        let nodes = project_conditioned(tape, p, &self.node_in, r, node_feats)?;
        let edges = self.edge_in.forward(tape, p, edge_feats)?;
        let index = topo.batched(b);
        let mut state = GraphState { nodes, edges };
        for layer in &self.layers {
            state = layer.step(tape, p, state, &index)?;
        }
        let seq = tape.reshape(state.nodes, vec![b, nt, self.config.width])?;
        let deformable = tape.narrow(seq, 1, 0, n)?;
        let out = self.head.forward(tape, p, deformable)?;
        Ok(self.config.scales.scale_output(tape, out))
    }

    /// One application of the step model to a single state. `[N, d]`
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        r: Var,
        positions: &Tensor<T>,
        velocities: &Tensor<T>,
        h: &Tensor<T>,
        topo: &Topology,
    ) -> Result<Var> {
        let shape = [1, topo.num_nodes(), self.d];
        let batch = StepBatch {
            positions: positions.clone().reshape(shape.to_vec())?,
            velocities: velocities.clone().reshape(shape.to_vec())?,
        };
        let out = self.step_batch(tape, p, r, &batch, h, topo)?;
        tape.reshape(out, vec![topo.num_deformable(), self.d])
    }

    /// Teacher-forced one-step loss over all `T` transitions of a trial:
    /// `0.5 · mean((Δ̂ - (p_{t+1} - p̃_t))²)` with `p̃_t` the (optionally
    /// noised) input positions.
    pub fn teacher_forced_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        r: Var,
        trial: &Trial<T>,
        topo: &Topology,
        noise: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var> {
        let dims = trial.dims()?;
        let (n, nt, d, horizon) = (dims.n, dims.n_total(), dims.d, dims.horizon);
        let dt = T::from_f64_lossy(self.config.frame_dt);
        // clean deformable positions for frames 0..=T
        let mut clean = Vec::with_capacity((horizon + 1) * n * d);
        clean.extend_from_slice(trial.x.p0.data());
        clean.extend_from_slice(trial.y_p.data());
        let clean = Tensor::new(vec![horizon + 1, n, d], clean)?;
        let inputs = clean.narrow_rows(0, horizon)?;
        let noisy = match noise {
            Some(mut rng) => train_noise_inject(&inputs, self.config.noise_sigma, &mut rng)?,
            None => inputs.clone(),
        };
        let mut positions = Vec::with_capacity(horizon * nt * d);
        let mut velocities = Vec::with_capacity(horizon * nt * d);
        for t in 0..horizon {
            let cur = &noisy.data()[t * n * d..(t + 1) * n * d];
            positions.extend_from_slice(cur);
            positions.extend_from_slice(&trial.x.p_ext.data()[t * dims.n_ext * d..(t + 1) * dims.n_ext * d]);
            if t == 0 {
                velocities.extend_from_slice(trial.x.v0.data());
            } else {
                let prev = &clean.data()[(t - 1) * n * d..t * n * d];
                velocities.extend(cur.iter().zip(prev).map(|(&a, &b)| (a - b) / dt));
            }
            velocities.extend_from_slice(&trial.x.v_ext.data()[t * dims.n_ext * d..(t + 1) * dims.n_ext * d]);
        }
        let batch = StepBatch {
            positions: Tensor::new(vec![horizon, nt, d], positions)?,
            velocities: Tensor::new(vec![horizon, nt, d], velocities)?,
        };
        let pred = self.step_batch(tape, p, r, &batch, &trial.x.h, topo)?;
        let targets: Vec<T> = trial.y_p.data().iter().zip(noisy.data()).map(|(&y, &x)| y - x).collect();
        let target = tape.constant(Tensor::new(vec![horizon, n, d], targets)?);
        tape.half_mse(pred, target)
    }

    /// Rolls the step model out for the full horizon of `x`. External nodes
    /// follow their given trajectory. Returns `[T, N, d]`.
    pub fn rollout<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        r: Var,
        x: &TrialInputs<T>,
        topo: &Topology,
    ) -> Result<Tensor<T>> {
        let dims = x.dims()?;
        let (n, d) = (dims.n, dims.d);
        let dt = T::from_f64_lossy(self.config.frame_dt);
        let mut prev: Option<Tensor<T>> = None;
        let mut cur = x.p0.clone();
        let mut out = Vec::with_capacity(dims.horizon * n * d);
        for t in 0..dims.horizon {
            let mut frame = frame_positions(x, t)?;
            frame.data_mut()[..n * d].copy_from_slice(cur.data());
            let mut vel = Tensor::concat(
                &[
                    x.v0.clone(),
                    x.v_ext.narrow_rows(t, 1)?.reshape(vec![dims.n_ext, d])?,
                ],
                0,
            )?;
            if let Some(prev) = &prev {
                for (v, (&a, &b)) in vel.data_mut()[..n * d].iter_mut().zip(cur.data().iter().zip(prev.data())) {
                    *v = (a - b) / dt;
                }
            }
            let delta = self.step(tape, p, r, &frame, &vel, &x.h, topo)?;
            let mut next = cur.clone();
            for (a, &b) in next.data_mut().iter_mut().zip(tape.value(delta).data()) {
                *a += b;
            }
            if !next.is_finite() {
                return Err(Error::NonFinite(format!("autoregressive rollout diverged at step {}", t + 1)));
            }
            out.extend_from_slice(next.data());
            prev = Some(std::mem::replace(&mut cur, next));
        }
        Tensor::new(vec![dims.horizon, n, d], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ring_topology;

    fn toy_topology(n: usize, n_ext: usize) -> Topology {
        ring_topology(n, n_ext).unwrap()
    }
    use crate::trial::random_trial;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64) -> (ParamStore<f64>, AutoregressiveDecoder) {
        let mut store = ParamStore::new();
        let cfg = ArConfig {
            width: 8,
            hidden: 8,
            layers: 2,
            noise_sigma: 0.01,
            frame_dt: 0.1,
            ..ArConfig::default()
        };
        let dec = AutoregressiveDecoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), "ar", cfg, 3, 2, 2).unwrap();
        (store, dec)
    }

    #[test]
    fn zero_step_model_freezes_trajectory() {
        let (mut store, dec) = toy(1);
        store.zero_prefix("ar.head");
        let topo = toy_topology(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = random_trial::<f64>(&mut rng, 6, 2, 2, 5);
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let r = tape.constant(Tensor::zeros(vec![3]));
        let y = dec.rollout(&mut tape, &p, r, &tr.x, &topo).unwrap();
        for t in 0..5 {
            assert_eq!(y.narrow_rows(t, 1).unwrap().data(), tr.x.p0.data());
        }
    }

    #[test]
    fn one_step_rollout_is_one_step_model_call() {
        let (store, dec) = toy(2);
        let topo = toy_topology(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tr = random_trial::<f64>(&mut rng, 6, 2, 2, 1);
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let r = tape.constant(Tensor::from_fn(vec![3], |i| i as f64));
        let y = dec.rollout(&mut tape, &p, r, &tr.x, &topo).unwrap();
        let frame = frame_positions(&tr.x, 0).unwrap();
        let vel = Tensor::concat(&[tr.x.v0.clone(), tr.x.v_ext.narrow_rows(0, 1).unwrap().reshape(vec![2, 2]).unwrap()], 0)
            .unwrap();
        let delta = dec.step(&mut tape, &p, r, &frame, &vel, &tr.x.h, &topo).unwrap();
        let want: Vec<f64> = tr.x.p0.data().iter().zip(tape.value(delta).data()).map(|(a, b)| a + b).collect();
        assert_eq!(y.data(), want.as_slice());
    }

    #[test]
    fn batched_step_matches_single_steps() {
        let (store, dec) = toy(3);
        let topo = toy_topology(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tr = random_trial::<f64>(&mut rng, 6, 2, 2, 3);
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let r = tape.constant(Tensor::from_fn(vec![3], |i| 0.1 * i as f64));
        // teacher-forced loss without noise equals the mean of per-step losses
        let loss = dec.teacher_forced_loss(&mut tape, &p, r, &tr, &topo, None).unwrap();
        let mut total = 0.0;
        for t in 0..3 {
            let mut frame = frame_positions(&tr.x, t).unwrap();
            let cur = if t == 0 { tr.x.p0.clone() } else { tr.y_p.narrow_rows(t - 1, 1).unwrap().reshape(vec![6, 2]).unwrap() };
            frame.data_mut()[..12].copy_from_slice(cur.data());
            let mut vel = Tensor::concat(
                &[tr.x.v0.clone(), tr.x.v_ext.narrow_rows(t, 1).unwrap().reshape(vec![2, 2]).unwrap()],
                0,
            )
            .unwrap();
            if t > 0 {
                let prev = if t == 1 { tr.x.p0.clone() } else { tr.y_p.narrow_rows(t - 2, 1).unwrap().reshape(vec![6, 2]).unwrap() };
                for i in 0..12 {
                    vel.data_mut()[i] = (cur.data()[i] - prev.data()[i]) / 0.1;
                }
            }
            let delta = dec.step(&mut tape, &p, r, &frame, &vel, &tr.x.h, &topo).unwrap();
            let next = tr.y_p.narrow_rows(t, 1).unwrap();
            for i in 0..12 {
                let e = tape.value(delta).data()[i] - (next.data()[i] - cur.data()[i]);
                total += e * e;
            }
        }
        let want = 0.5 * total / 36.0;
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn noise_injection_statistics() {
        let zeros = Tensor::<f64>::zeros(vec![100_000]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(train_noise_inject(&zeros, 0.0, &mut rng).unwrap(), zeros);
        let sigma = 7.0e-4;
        let noisy = train_noise_inject(&zeros, sigma, &mut rng).unwrap();
        let n = noisy.numel() as f64;
        let mean = noisy.data().iter().sum::<f64>() / n;
        let std = (noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std / sigma - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn divergence_is_reported() {
        let (mut store, dec) = toy(5);
        let topo = toy_topology(6, 2);
        let bias = store.find("ar.head.l1.b").unwrap();
        *store.get_mut(bias) = Tensor::full(vec![2], f64::INFINITY);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tr = random_trial::<f64>(&mut rng, 6, 2, 2, 3);
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let r = tape.constant(Tensor::zeros(vec![3]));
        assert!(matches!(dec.rollout(&mut tape, &p, r, &tr.x, &topo), Err(Error::NonFinite(_))));
    }
}
