//! Context encoder: per-trial temporal CNN, deep-set pooling over nodes, and
//! a permutation-invariant aggregation over trials.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform_fan_in, Bound, Mlp, MlpConfig, ParamId, ParamStore, LEAKY_SLOPE};
use crate::tensor::{ReduceMode, Scalar, Tape, Tensor, Var};
use crate::trial::{select_axis, Trial};

/// Channels per node and time step: position, velocity, static features,
/// and a node-kind flag (1 for external nodes).
pub fn trial_channels(d: usize, d_h: usize) -> usize {
    2 * d + d_h + 1
}

/// Stacks a trial into `[N_total, C_z, T+1]`.
///
/// Deformable nodes carry `(p_t, v_t)` from the initial state and targets,
/// external nodes their given trajectory; `h` and the kind flag repeat over
/// time.
pub fn assemble_trial_tensor<T: Scalar>(trial: &Trial<T>) -> Result<Tensor<T>> {
    assemble_time_major(trial)?.transpose(0, 1)?.transpose(1, 2)
}

/// Same content as [`assemble_trial_tensor`] laid out as `[T+1, N_total, C_z]`.
pub fn assemble_time_major<T: Scalar>(trial: &Trial<T>) -> Result<Tensor<T>> {
    let dims = trial.dims()?;
    let (n, n_ext, d, d_h) = (dims.n, dims.n_ext, dims.d, dims.d_h);
    let nt = dims.n_total();
    let c = trial_channels(d, d_h);
    let steps = dims.horizon + 1;
    let x = &trial.x;
    let mut out = vec![T::zero(); steps * nt * c];
    for t in 0..steps {
        for node in 0..nt {
            let row = &mut out[(t * nt + node) * c..(t * nt + node + 1) * c];
            let (p, v) = if node < n {
                if t == 0 {
                    (&x.p0.data()[node * d..][..d], &x.v0.data()[node * d..][..d])
                } else {
                    let off = ((t - 1) * n + node) * d;
                    (&trial.y_p.data()[off..off + d], &trial.y_v.data()[off..off + d])
                }
            } else {
                let off = (t * n_ext + node - n) * d;
                (&x.p_ext.data()[off..off + d], &x.v_ext.data()[off..off + d])
            };
            row[..d].copy_from_slice(p);
            row[d..2 * d].copy_from_slice(v);
            row[2 * d..2 * d + d_h].copy_from_slice(&x.h.data()[node * d_h..(node + 1) * d_h]);
            row[c - 1] = if node < n { T::zero() } else { T::one() };
        }
    }
    Tensor::new(vec![steps, nt, c], out)
}

/// Subtracts the mean `t = 0` position over all nodes from every position
/// channel of `z[N_total, C_z, T+1]`; the first `d` channels are positions.
pub fn center_positions<T: Scalar>(z: &mut Tensor<T>, d: usize) -> Result<()> {
    if z.ndim() != 3 || z.shape()[1] < d || z.shape()[0] == 0 {
        return Err(Error::shape("center_positions", format!("{:?} with d = {d}", z.shape())));
    }
    let (nt, c, steps) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let mean = position_mean(|node, k| z.data()[(node * c + k) * steps], nt, d);
    for node in 0..nt {
        for (k, &m) in mean.iter().enumerate() {
            let base = (node * c + k) * steps;
            for v in &mut z.data_mut()[base..base + steps] {
                *v -= m;
            }
        }
    }
    Ok(())
}

fn position_mean<T: Scalar>(at: impl Fn(usize, usize) -> T, nt: usize, d: usize) -> Vec<T> {
    let count = T::from_usize(nt).unwrap();
    (0..d).map(|k| (0..nt).map(|node| at(node, k)).sum::<T>() / count).collect()
}

/// Centered time-major encoder input for one trial.
pub fn encoder_view<T: Scalar>(trial: &Trial<T>) -> Result<Tensor<T>> {
    let d = trial.x.p0.last_dim();
    let mut z = assemble_time_major(trial)?;
    let (nt, c) = (z.shape()[1], z.shape()[2]);
    let mean = position_mean(|node, k| z.data()[node * c + k], nt, d);
    for row in z.data_mut().chunks_exact_mut(c) {
        for (v, &m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Ok(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channels of every temporal conv layer.
    pub conv_channels: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    /// Hidden width of the deep-set MLPs.
    pub hidden: usize,
    pub latent_dim: usize,
    /// Aggregation of per-trial latents.
    pub aggregation: ReduceMode,
    /// Divisors of the position and velocity channels.
    #[serde(default = "unit_scales")]
    pub input_scales: [f64; 2],
}

fn unit_scales() -> [f64; 2] {
    [1.0, 1.0]
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            conv_channels: 128,
            conv_layers: 2,
            kernel: 3,
            hidden: 128,
            latent_dim: 128,
            aggregation: ReduceMode::Max,
            input_scales: unit_scales(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub in_channels: usize,
    pub convs: Vec<ConvLayer>,
    pub inner: Mlp,
    pub outer: Mlp,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        config: EncoderConfig,
        in_channels: usize,
    ) -> Result<Self> {
        if config.kernel % 2 == 0 {
            return Err(Error::Config(format!("encoder kernel must be odd, got {}", config.kernel)));
        }
        if config.conv_layers == 0 || config.latent_dim == 0 {
            return Err(Error::Config("encoder needs at least one conv layer and a latent".into()));
        }
        let mut convs = Vec::with_capacity(config.conv_layers);
        let mut cin = in_channels;
        for i in 0..config.conv_layers {
            let fan_in = cin * config.kernel;
            let cout = config.conv_channels;
            let w = store.add(
                format!("{name}.conv{i}.w"),
                uniform_fan_in(vec![cout, cin, config.kernel], fan_in, rng),
            );
            let b = store.add(format!("{name}.conv{i}.b"), uniform_fan_in(vec![cout], fan_in, rng));
            convs.push(ConvLayer { w, b });
            cin = cout;
        }
        let inner = Mlp::new(
            store,
            rng,
            &format!("{name}.inner"),
            MlpConfig::new([cin, config.hidden, config.hidden]),
        )?;
        let outer = Mlp::new(
            store,
            rng,
            &format!("{name}.outer"),
            MlpConfig::new([config.hidden, config.hidden, config.latent_dim]),
        )?;
        Ok(Encoder {
            config,
            in_channels,
            convs,
            inner,
            outer,
        })
    }

    /// Conv stack on `z[T+1, M, C_z]`, before pooling over time.
    pub fn temporal_features<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        let mut x = z;
        for layer in &self.convs {
            let y = tape.temporal_conv(x, p[layer.w], Some(p[layer.b]))?;
            x = tape.leaky_relu(y, LEAKY_SLOPE);
        }
        Ok(x)
    }

    /// One vector per node: conv stack then mean over time. `[M, C']`
    pub fn temporal_encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        let x = self.temporal_features(tape, p, z)?;
        tape.reduce(x, 0, ReduceMode::Mean)
    }

    /// Deep set over groups of nodes: `f_outer(mean_{n ∈ group} f_inner(ẑ_n))`.
    /// `group[m]` names the group of row `m`; returns `[groups, d_r]`.
    pub fn spatial_encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        z_hat: Var,
        group: &Arc<[usize]>,
        groups: usize,
    ) -> Result<Var> {
        if tape.shape(z_hat)[0] == 0 {
            return Err(Error::InvalidArgument("deep set over an empty node set".into()));
        }
        let inner = self.inner.forward(tape, p, z_hat)?;
        let pooled = tape.scatter_rows(inner, group, groups, ReduceMode::Mean)?;
        self.outer.forward(tape, p, pooled)
    }

    /// Per-trial latents `r_i`, `[S, d_r]`. All trials must share a horizon.
    pub fn trial_latents<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, trials: &[Trial<T>]) -> Result<Var> {
        if trials.is_empty() {
            return Err(Error::InvalidArgument("context set is empty".into()));
        }
        let mut views = trials.iter().map(encoder_view).collect::<Result<Vec<_>>>()?;
        if self.config.input_scales != unit_scales() {
            let d = trials[0].x.p0.last_dim();
            let inv: Vec<T> = self.config.input_scales.iter().map(|s| T::from_f64_lossy(1.0 / s)).collect();
            for v in &mut views {
                let c = v.last_dim();
                for row in v.data_mut().chunks_exact_mut(c) {
                    for (k, x) in row[..2 * d].iter_mut().enumerate() {
                        *x *= inv[k / d];
                    }
                }
            }
        }
        for v in &views {
            if v.shape()[0] != views[0].shape()[0] || v.shape()[2] != self.in_channels {
                return Err(Error::shape(
                    "encode_context",
                    format!("trial view {:?} vs {:?}, expected {} channels", v.shape(), views[0].shape(), self.in_channels),
                ));
            }
        }
        let group: Arc<[usize]> = views
            .iter()
            .enumerate()
            .flat_map(|(i, v)| std::iter::repeat(i).take(v.shape()[1]))
            .collect::<Vec<_>>()
            .into();
        let z = tape.constant(Tensor::concat(&views, 1)?);
        let z_hat = self.temporal_encode(tape, p, z)?;
        self.spatial_encode(tape, p, z_hat, &group, trials.len())
    }

    /// Aggregated latent `r[d_r]` for a context set.
    pub fn encode_context<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, trials: &[Trial<T>]) -> Result<Var> {
        let r_i = self.trial_latents(tape, p, trials)?;
        tape.reduce(r_i, 0, self.config.aggregation)
    }
}

/// Adds Gaussian noise to the observed deformable positions and removes
/// `round(dropout_frac · N)` deformable nodes from each trial. Only meant for
/// the encoder's copy of the context.
pub fn corrupt_context<T: Scalar>(
    trials: &[Trial<T>],
    noise_sigma: f64,
    dropout_frac: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Trial<T>>> {
    if !(0.0..1.0).contains(&dropout_frac) {
        return Err(Error::InvalidArgument(format!("dropout fraction {dropout_frac} outside [0, 1)")));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma {noise_sigma} must be >= 0")));
    }
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid normal");
    trials
        .iter()
        .map(|trial| {
            let dims = trial.dims()?;
            let mut out = trial.clone();
            if noise_sigma > 0.0 {
                for v in out.x.p0.data_mut().iter_mut().chain(out.y_p.data_mut().iter_mut()) {
                    *v += T::from_f64_lossy(normal.sample(rng));
                }
            }
            let drop = (dropout_frac * dims.n as f64).round() as usize;
            if drop >= dims.n {
                return Err(Error::InvalidArgument(format!(
                    "dropout {dropout_frac} removes all {} deformable nodes",
                    dims.n
                )));
            }
            if drop > 0 {
                let mut keep = sample(rng, dims.n, dims.n - drop).into_vec();
                keep.sort_unstable();
                let mut keep_all = keep.clone();
                keep_all.extend(dims.n..dims.n_total());
                out.x.p0 = select_axis(&out.x.p0, 0, &keep);
                out.x.v0 = select_axis(&out.x.v0, 0, &keep);
                out.x.h = select_axis(&out.x.h, 0, &keep_all);
                out.y_p = select_axis(&out.y_p, 1, &keep);
                out.y_v = select_axis(&out.y_v, 1, &keep);
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use crate::trial::random_trial;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_encoder<T: Scalar>(seed: u64, d: usize, d_h: usize) -> (ParamStore<T>, Encoder) {
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            conv_channels: 6,
            conv_layers: 2,
            kernel: 3,
            hidden: 8,
            latent_dim: 4,
            aggregation: ReduceMode::Max,
            input_scales: [1.0, 1.0],
        };
        let enc = Encoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), "enc", cfg, trial_channels(d, d_h))
            .unwrap();
        (store, enc)
    }

    fn encode(store: &ParamStore<f64>, enc: &Encoder, trials: &[Trial<f64>]) -> Vec<f64> {
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let r = enc.encode_context(&mut tape, &p, trials).unwrap();
        tape.value(r).to_f64_vec()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn assembly_matches_direct_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr: Trial<f64> = random_trial(&mut rng, 3, 2, 2, 4);
        let z = assemble_trial_tensor(&tr).unwrap();
        assert_eq!(z.shape(), &[5, 7, 5]);
        for t in 0..5 {
            for k in 0..2 {
                assert_eq!(z.get(&[1, k, t]), if t == 0 { tr.x.p0.get(&[1, k]) } else { tr.y_p.get(&[t - 1, 1, k]) });
                assert_eq!(z.get(&[1, 2 + k, t]), if t == 0 { tr.x.v0.get(&[1, k]) } else { tr.y_v.get(&[t - 1, 1, k]) });
                assert_eq!(z.get(&[4, k, t]), tr.x.p_ext.get(&[t, 1, k]));
                assert_eq!(z.get(&[4, 2 + k, t]), tr.x.v_ext.get(&[t, 1, k]));
            }
            assert_eq!(z.get(&[0, 4, t]), tr.x.h.get(&[0, 0]));
            assert_eq!(z.get(&[3, 5, t]), tr.x.h.get(&[3, 1]));
            assert_eq!(z.get(&[0, 6, t]), 0.0);
            assert_eq!(z.get(&[3, 6, t]), 1.0);
        }
    }

    #[test]
    fn zero_horizon_is_initial_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tr: Trial<f64> = random_trial(&mut rng, 2, 1, 2, 0);
        let z = assemble_trial_tensor(&tr).unwrap();
        assert_eq!(z.shape(), &[3, 7, 1]);
        assert_eq!(z.get(&[1, 0, 0]), tr.x.p0.get(&[1, 0]));
    }

    #[test]
    fn static_trial_gives_time_constant_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tr: Trial<f64> = random_trial(&mut rng, 3, 1, 2, 5);
        tr.x.v0 = Tensor::zeros(vec![3, 2]);
        tr.y_v = Tensor::zeros(vec![5, 3, 2]);
        tr.x.v_ext = Tensor::zeros(vec![6, 1, 2]);
        tr.y_p = Tensor::stack(&vec![tr.x.p0.clone(); 5]).unwrap();
        tr.x.p_ext = Tensor::stack(&vec![tr.x.p_ext.narrow_rows(0, 1).unwrap().reshape(vec![1, 2]).unwrap(); 6]).unwrap();
        let z = assemble_trial_tensor(&tr).unwrap();
        for row in z.data().chunks_exact(6) {
            assert!(row.iter().all(|v| *v == row[0]));
        }
    }

    #[test]
    fn centering_zeroes_initial_mean_and_ignores_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tr: Trial<f64> = random_trial(&mut rng, 4, 2, 2, 3);
        let mut z = assemble_trial_tensor(&tr).unwrap();
        center_positions(&mut z, 2).unwrap();
        for k in 0..2 {
            let m: f64 = (0..6).map(|n| z.get(&[n, k, 0])).sum::<f64>() / 6.0;
            assert!(m.abs() < 1e-12);
        }
        let before = z.clone();
        center_positions(&mut z, 2).unwrap();
        assert!(max_diff(&z.to_f64_vec(), &before.to_f64_vec()) < 1e-12);

        let mut zt = assemble_trial_tensor(&tr.translated(&[0.3, -1.7])).unwrap();
        center_positions(&mut zt, 2).unwrap();
        assert!(max_diff(&zt.to_f64_vec(), &before.to_f64_vec()) < 1e-12);
        // velocities untouched
        assert_eq!(zt.get(&[0, 2, 1]), tr.y_v.get(&[0, 0, 0]));
    }

    #[test]
    fn encoder_view_is_centered_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tr: Trial<f64> = random_trial(&mut rng, 3, 1, 2, 2);
        let mut z = assemble_trial_tensor(&tr).unwrap();
        center_positions(&mut z, 2).unwrap();
        let v = encoder_view(&tr).unwrap();
        assert_eq!(v, z.transpose(0, 2).unwrap().transpose(1, 2).unwrap());
    }

    #[test]
    fn constant_input_interior_response_is_horizon_independent() {
        let (store, enc) = small_encoder::<f64>(6, 2, 2);
        let c = enc.in_channels;
        let interior = |steps: usize| {
            let mut tape = Tape::inference();
            let p = store.bind(&mut tape);
            let z = tape.constant(Tensor::from_fn(vec![steps, 1, c], |i| 0.1 * (i % c) as f64));
            let f = enc.temporal_features(&mut tape, &p, z).unwrap();
            tape.value(f).narrow_rows(steps / 2, 1).unwrap().to_f64_vec()
        };
        assert!(max_diff(&interior(9), &interior(17)) < 1e-12);
    }

    #[test]
    fn zero_input_gives_bias_only_response() {
        let (mut store, enc) = small_encoder::<f64>(7, 2, 2);
        let c = enc.in_channels;
        for layer in &enc.convs {
            *store.get_mut(layer.w) = Tensor::zeros(store.get(layer.w).shape().to_vec());
        }
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let z = tape.constant(Tensor::zeros(vec![4, 2, c]));
        let out = enc.temporal_encode(&mut tape, &p, z).unwrap();
        let b = store.get(enc.convs[1].b).data().to_vec();
        for row in tape.value(out).data().chunks_exact(b.len()) {
            for (x, bb) in row.iter().zip(&b) {
                let want = if *bb > 0.0 { *bb } else { bb * LEAKY_SLOPE };
                assert!((x - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_encode_gradients_match_finite_differences() {
        let (store, enc) = small_encoder::<f64>(8, 2, 2);
        let c = enc.in_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z0 = Tensor::from_fn(vec![5, 2, c], |_| rng.gen_range(-1.0..1.0));
        let mut params = store.values().to_vec();
        params.push(z0);
        let report = grad_check(
            |tape, v| {
                let p = Bound::from_vars(v[..v.len() - 1].to_vec());
                let out = enc.temporal_encode(tape, &p, v[v.len() - 1])?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum_all(sq))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn single_node_deep_set_is_composition() {
        let (store, enc) = small_encoder::<f64>(9, 2, 2);
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let z = tape.constant(Tensor::from_fn(vec![1, 6], |i| i as f64 * 0.1));
        let group: Arc<[usize]> = vec![0].into();
        let r = enc.spatial_encode(&mut tape, &p, z, &group, 1).unwrap();
        let a = enc.inner.forward(&mut tape, &p, z).unwrap();
        let b = enc.outer.forward(&mut tape, &p, a).unwrap();
        assert_eq!(tape.value(r), tape.value(b));
    }

    #[test]
    fn context_invariances() {
        let (store, enc) = small_encoder::<f64>(10, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let trials: Vec<Trial<f64>> = (0..3).map(|_| random_trial(&mut rng, 5, 2, 2, 6)).collect();
        let base = encode(&store, &enc, &trials);
        assert!(base.iter().all(|v| v.is_finite()));

        let reordered = vec![trials[2].clone(), trials[0].clone(), trials[1].clone()];
        assert_eq!(encode(&store, &enc, &reordered), base);

        let duplicated = vec![trials[0].clone(), trials[1].clone(), trials[2].clone(), trials[1].clone()];
        assert_eq!(encode(&store, &enc, &duplicated), base);

        let permuted: Vec<_> = trials.iter().map(|t| t.permuted(&[4, 2, 0, 1, 3], &[1, 0]).unwrap()).collect();
        assert!(max_diff(&encode(&store, &enc, &permuted), &base) < 1e-12);

        let shifted: Vec<_> = trials.iter().map(|t| t.translated(&[2.5, -0.75])).collect();
        assert!(max_diff(&encode(&store, &enc, &shifted), &base) < 1e-12);
    }

    #[test]
    fn single_trial_context_equals_its_latent() {
        let (store, enc) = small_encoder::<f64>(11, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tr: Trial<f64> = random_trial(&mut rng, 4, 1, 2, 3);
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let ri = enc.trial_latents(&mut tape, &p, std::slice::from_ref(&tr)).unwrap();
        assert_eq!(tape.value(ri).data(), encode(&store, &enc, &[tr]).as_slice());
    }

    #[test]
    fn empty_context_is_an_error() {
        let (store, enc) = small_encoder::<f64>(12, 2, 2);
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        assert!(enc.encode_context(&mut tape, &p, &[]).is_err());
    }

    #[test]
    fn corruption_identity_count_and_reproducibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let trials: Vec<Trial<f64>> = (0..2).map(|_| random_trial(&mut rng, 80, 3, 2, 2)).collect();
        let same = corrupt_context(&trials, 0.0, 0.0, &mut rng).unwrap();
        assert_eq!(same, trials);

        let dropped = corrupt_context(&trials, 0.0, 0.5, &mut rng).unwrap();
        for t in &dropped {
            let dims = t.dims().unwrap();
            assert_eq!((dims.n, dims.n_ext), (40, 3));
        }
        let a = corrupt_context(&trials, 0.05, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = corrupt_context(&trials, 0.05, 0.3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(corrupt_context(&trials, 0.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn noise_only_touches_deformable_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let trials: Vec<Trial<f64>> = vec![random_trial(&mut rng, 6, 2, 2, 3)];
        let noisy = corrupt_context(&trials, 0.1, 0.0, &mut rng).unwrap();
        assert_ne!(noisy[0].x.p0, trials[0].x.p0);
        assert_ne!(noisy[0].y_p, trials[0].y_p);
        assert_eq!(noisy[0].x.p_ext, trials[0].x.p_ext);
        assert_eq!(noisy[0].y_v, trials[0].y_v);
    }

    #[test]
    fn dropout_that_removes_everything_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let trials: Vec<Trial<f64>> = vec![random_trial(&mut rng, 1, 1, 2, 2)];
        assert!(corrupt_context(&trials, 0.0, 0.9, &mut rng).is_err());
    }

    #[test]
    fn heavy_dropout_and_large_contexts_stay_finite() {
        let (store, enc) = small_encoder::<f64>(16, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let trials: Vec<Trial<f64>> = (0..16).map(|_| random_trial(&mut rng, 20, 2, 2, 4)).collect();
        let dropped = corrupt_context(&trials, 0.1, 0.9, &mut rng).unwrap();
        assert_eq!(dropped[0].dims().unwrap().n, 2);
        assert!(encode(&store, &enc, &dropped).iter().all(|v| v.is_finite()));
    }
}
