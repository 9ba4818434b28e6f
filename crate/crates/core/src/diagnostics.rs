//! Numerical self-checks: gradient verification per layer and end to end,
//! and the symmetry properties the encoder and decoder must satisfy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ring_topology, GraphState, MessagePassing, Topology};
use crate::model::{Conditioning, DecoderKind, Model, ModelConfig, RhoNormalizer, TrajectoryDecoder};
use crate::nn::{Bound, LayerNorm, Linear, Mlp, MlpConfig, ParamStore, ResidualConv1d};
use crate::tensor::{grad_check_sampled, numerical_gradients, relative_error, sample_coords, ReduceMode, Tape, Tensor, Var};
use crate::train::{model_loss, Objective};
use crate::trial::{random_trial, Trial};

/// Finite-difference step for f64 checks.
pub const FD_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub checked_entries: usize,
}

fn squared_mean(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let sq = tape.mul(y, y)?;
    tape.mean_all(sq)
}

fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn check<F>(name: &str, params: &[Tensor<f64>], per_param: usize, seed: u64, f: F) -> Result<GradCheckRow>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = grad_check_sampled(f, params, FD_EPS, per_param, seed)?;
    Ok(GradCheckRow {
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        checked_entries: report.checked_entries,
    })
}

fn toy_model(conditioning: Conditioning, kind: DecoderKind, width: usize, blocks: usize, seed: u64) -> Result<Model<f64>> {
    let mut c = ModelConfig::full(conditioning, kind, 2, 2, RhoNormalizer::identity(1));
    c.set_width(width, blocks);
    c.autoregressive.noise_sigma = 0.0;
    Model::new(c, seed)
}

/// Checks every layer type, each encoder and decoder stage, the parameter
/// head and the joint loss against central differences in f64.
pub fn layer_grad_suite(seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let per = 12;

    {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, &mut rng, "lin", 4, 3, true);
        let mut params = store.values().to_vec();
        params.push(random_tensor(&mut rng, vec![5, 4]));
        let n = store.len();
        rows.push(check("linear", &params, per, seed, |tape, v| {
            let y = lin.forward(tape, &Bound::from_vars(v[..n].to_vec()), v[n])?;
            squared_mean(tape, y)
        })?);
    }
    {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut store, "ln", 5);
        for t in store.values_mut() {
            *t = random_tensor(&mut rng, t.shape().to_vec());
        }
        let mut params = store.values().to_vec();
        params.push(random_tensor(&mut rng, vec![4, 5]));
        let n = store.len();
        let w = random_tensor(&mut rng, vec![4, 5]);
        rows.push(check("layer_norm", &params, per, seed, |tape, v| {
            let y = ln.forward(tape, &Bound::from_vars(v[..n].to_vec()), v[n])?;
            let w = tape.constant(w.clone());
            let yw = tape.mul(y, w)?;
            Ok(tape.sum_all(yw))
        })?);
    }
    {
        let mut store = ParamStore::<f64>::new();
        let cfg = MlpConfig::new([3, 6, 6, 3]).with_layer_norm(true).with_residual(true);
        let mlp = Mlp::new(&mut store, &mut rng, "mlp", cfg)?;
        let mut params = store.values().to_vec();
        params.push(random_tensor(&mut rng, vec![5, 3]));
        let n = store.len();
        rows.push(check("mlp", &params, per, seed, |tape, v| {
            let y = mlp.forward(tape, &Bound::from_vars(v[..n].to_vec()), v[n])?;
            squared_mean(tape, y)
        })?);
    }
    {
        let mut store = ParamStore::<f64>::new();
        let conv = ResidualConv1d::new(&mut store, &mut rng, "conv", 3, 5)?;
        let mut params = store.values().to_vec();
        params.push(random_tensor(&mut rng, vec![6, 2, 3]));
        let n = store.len();
        rows.push(check("residual_conv1d", &params, per, seed, |tape, v| {
            let y = conv.forward(tape, &Bound::from_vars(v[..n].to_vec()), v[n])?;
            squared_mean(tape, y)
        })?);
    }
    {
        let mut store = ParamStore::<f64>::new();
        let mp = MessagePassing::new(&mut store, &mut rng, "mp", 4, 6, true, ReduceMode::Mean)?;
        let topo = ring_topology(5, 1)?;
        let index = topo.batched(2);
        let mut params = store.values().to_vec();
        params.push(random_tensor(&mut rng, vec![2 * topo.num_nodes(), 4]));
        params.push(random_tensor(&mut rng, vec![2 * topo.num_edges(), 4]));
        let n = store.len();
        rows.push(check("message_passing", &params, per, seed, |tape, v| {
            let state = GraphState {
                nodes: v[n],
                edges: v[n + 1],
            };
            let out = mp.step(tape, &Bound::from_vars(v[..n].to_vec()), state, &index)?;
            let a = squared_mean(tape, out.nodes)?;
            let b = squared_mean(tape, out.edges)?;
            tape.add(a, b)
        })?);
    }

    let topo = ring_topology(5, 1)?;
    let trials: Vec<Trial<f64>> = (0..3).map(|_| random_trial(&mut rng, 5, 1, 2, 4)).collect();
    let rho = [0.4];

    let meta = toy_model(Conditioning::Meta, DecoderKind::Mango, 6, 2, seed)?;
    let n = meta.params.len();
    let params = meta.params.values().to_vec();
    let enc = meta.encoder()?;
    rows.push(check("encoder.context", &params, per, seed, |tape, v| {
        let r = enc.encode_context(tape, &Bound::from_vars(v[..n].to_vec()), &trials[..2])?;
        squared_mean(tape, r)
    })?);
    {
        let mut with_r = params.clone();
        with_r.push(random_tensor(&mut rng, vec![meta.config.latent_dim()]));
        rows.push(check("rho_head", &with_r, per, seed, |tape, v| {
            let out = meta.predict_parameters(tape, &Bound::from_vars(v[..n].to_vec()), v[n])?;
            squared_mean(tape, out)
        })?);
        rows.push(check("decoder", &with_r, per, seed, |tape, v| {
            let y = meta.decode(tape, &Bound::from_vars(v[..n].to_vec()), &trials[2].x, v[n], &topo)?;
            squared_mean(tape, y)
        })?);
    }
    rows.push(check("loss.meta_mango", &params, per, seed, |tape, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        let terms = model_loss(&meta, tape, &p, &trials[..2], &trials[2], &rho, &topo, Objective::Joint { rho_weight: 1.0 }, None)?;
        Ok(terms.total)
    })?);

    let oracle = toy_model(Conditioning::Oracle, DecoderKind::Mango, 6, 1, seed)?;
    let n = oracle.params.len();
    rows.push(check("loss.oracle_mango", oracle.params.values(), per, seed, |tape, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        let terms = model_loss(&oracle, tape, &p, &[], &trials[2], &rho, &topo, Objective::Joint { rho_weight: 1.0 }, None)?;
        Ok(terms.total)
    })?);

    let ar = toy_model(Conditioning::Meta, DecoderKind::Autoregressive, 6, 2, seed)?;
    let n = ar.params.len();
    rows.push(check("loss.meta_autoregressive", ar.params.values(), per, seed, |tape, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        let terms = model_loss(&ar, tape, &p, &trials[..2], &trials[2], &rho, &topo, Objective::Joint { rho_weight: 1.0 }, None)?;
        Ok(terms.total)
    })?);
    if let TrajectoryDecoder::Autoregressive(dec) = &ar.arch.decoder {
        let mut with_r = ar.params.values().to_vec();
        with_r.push(random_tensor(&mut rng, vec![ar.config.latent_dim()]));
        let tr = &trials[0];
        rows.push(check("autoregressive.step", &with_r, per, seed, |tape, v| {
            let y = dec.step(
                tape,
                &Bound::from_vars(v[..n].to_vec()),
                v[n],
                &crate::decoder::frame_positions(&tr.x, 0)?,
                &Tensor::concat(&[tr.x.v0.clone(), tr.x.v_ext.narrow_rows(0, 1)?.reshape(vec![1, 2])?], 0)?,
                &tr.x.h,
                &topo,
            )?;
            squared_mean(tape, y)
        })?);
    }
    Ok(rows)
}

/// Shape of the end-to-end check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndToEndSetup {
    pub n: usize,
    pub n_ext: usize,
    pub horizon: usize,
    pub blocks: usize,
    pub width: usize,
    pub context: usize,
    pub per_param: usize,
}

impl Default for EndToEndSetup {
    fn default() -> Self {
        EndToEndSetup {
            n: 6,
            n_ext: 2,
            horizon: 4,
            blocks: 2,
            width: 16,
            context: 2,
            per_param: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndToEndReport {
    pub kind: String,
    pub loss: f64,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked_entries: usize,
}

/// Compares f32 reverse-mode gradients of the full joint loss against f64
/// central differences of the same network at the same point.
pub fn end_to_end_grad_check(conditioning: Conditioning, kind: DecoderKind, setup: &EndToEndSetup, seed: u64) -> Result<EndToEndReport> {
    let mut cfg = ModelConfig::full(conditioning, kind, 2, 2, RhoNormalizer::identity(1));
    cfg.set_width(setup.width, setup.blocks);
    cfg.autoregressive.noise_sigma = 0.0;
    let model = Model::<f32>::new(cfg, seed)?;
    let topo = ring_topology(setup.n, setup.n_ext)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let context: Vec<Trial<f32>> = (0..setup.context)
        .map(|_| random_trial(&mut rng, setup.n, setup.n_ext, 2, setup.horizon))
        .collect();
    let target: Trial<f32> = random_trial(&mut rng, setup.n, setup.n_ext, 2, setup.horizon);
    let rho = [rng.gen_range(-1.0..1.0)];
    let ctx = if conditioning.uses_encoder() { &context[..] } else { &[] };
    let objective = Objective::Joint { rho_weight: 1.0 };

    let mut tape = Tape::<f32>::new();
    let p = model.params.bind(&mut tape);
    let terms = model_loss(&model, &mut tape, &p, ctx, &target, &rho, &topo, objective, None)?;
    let loss = tape.value(terms.total).data()[0] as f64;
    let mut grads = tape.backward(terms.total)?;
    let analytic: Vec<Tensor<f64>> = p
        .vars()
        .iter()
        .zip(model.params.values())
        .map(|(&v, t)| grads.take(v).map(|g| g.cast()).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let model64 = model.cast::<f64>();
    let context64: Vec<Trial<f64>> = ctx.iter().map(|t| t.cast()).collect();
    let target64 = target.cast::<f64>();
    let n = model64.params.len();
    let f = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let p = Bound::from_vars(v[..n].to_vec());
        Ok(model_loss(&model64, tape, &p, &context64, &target64, &rho, &topo, objective, None)?.total)
    };
    let params = model64.params.values().to_vec();
    let coords = sample_coords(&params, setup.per_param, seed);
    let numeric = numerical_gradients(&f, &params, &coords, FD_EPS)?;
    let names: Vec<&str> = model.params.iter().map(|(name, _)| name).collect();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (i, (c, num)) in coords.iter().zip(&numeric).enumerate() {
        checked += c.len();
        let e = relative_error(&analytic[i], c, num);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, names[i].to_string());
        }
    }
    Ok(EndToEndReport {
        kind: model.config.kind_tag(),
        loss,
        max_rel_error: worst.0,
        worst_param: worst.1,
        checked_entries: checked,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryCheck {
    pub name: String,
    pub max_abs_error: f64,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Measures how far `model` is from the exact symmetries: the encoder must
/// be invariant to context order, node order and translation; the decoder
/// must commute with translation and node relabelling.
pub fn symmetry_suite(model: &Model<f32>, trials: &[Trial<f32>], rho: &[f64], topo: &Topology, seed: u64) -> Result<Vec<SymmetryCheck>> {
    if trials.len() < 2 {
        return Err(Error::InvalidArgument("symmetry suite needs at least two trials".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = trials[0].dims()?;
    let offset: Vec<f64> = (0..dims.d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut perm_def: Vec<usize> = (0..dims.n).collect();
    perm_def.shuffle(&mut rng);
    let mut perm_ext: Vec<usize> = (0..dims.n_ext).collect();
    perm_ext.shuffle(&mut rng);
    let mut checks = Vec::new();

    let context = &trials[..trials.len() - 1];
    let target = &trials[trials.len() - 1];
    if model.config.conditioning.uses_encoder() {
        let base = model.latent(context)?;
        let mut reordered = context.to_vec();
        reordered.reverse();
        reordered.shuffle(&mut rng);
        checks.push(SymmetryCheck {
            name: "encoder.context_permutation".into(),
            max_abs_error: max_abs_diff(&base, &model.latent(&reordered)?),
        });
        let permuted = context
            .iter()
            .map(|t| t.permuted(&perm_def, &perm_ext))
            .collect::<Result<Vec<_>>>()?;
        checks.push(SymmetryCheck {
            name: "encoder.node_permutation".into(),
            max_abs_error: max_abs_diff(&base, &model.latent(&permuted)?),
        });
        let shifted: Vec<Trial<f32>> = context.iter().map(|t| t.translated(&offset)).collect();
        checks.push(SymmetryCheck {
            name: "encoder.translation".into(),
            max_abs_error: max_abs_diff(&base, &model.latent(&shifted)?),
        });
    }

    let r = model.condition_vector(context, Some(rho))?;
    let base = model.decode_with(&r, &target.x, topo)?;
    let shifted = model.decode_with(&r, &target.x.translated(&offset), topo)?;
    let err = base
        .data()
        .iter()
        .zip(shifted.data())
        .enumerate()
        .map(|(i, (&a, &b))| (a as f64 + offset[i % dims.d] - b as f64).abs())
        .fold(0.0, f64::max);
    checks.push(SymmetryCheck {
        name: "decoder.translation".into(),
        max_abs_error: err,
    });

    let mut perm_all = perm_def.clone();
    perm_all.extend(perm_ext.iter().map(|j| j + dims.n));
    let topo_p = topo.permuted(&perm_all)?;
    let permuted = model.decode_with(&r, &target.permuted(&perm_def, &perm_ext)?.x, &topo_p)?;
    let mut err = 0.0f64;
    for t in 0..dims.horizon {
        for (i, &pi) in perm_def.iter().enumerate() {
            for k in 0..dims.d {
                err = err.max((base.get(&[t, i, k]) as f64 - permuted.get(&[t, pi, k]) as f64).abs());
            }
        }
    }
    checks.push(SymmetryCheck {
        name: "decoder.node_permutation".into(),
        max_abs_error: err,
    });
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes_in_f64() {
        let rows = layer_grad_suite(1).unwrap();
        assert!(rows.len() >= 12);
        for row in rows {
            assert!(row.checked_entries > 0);
            assert!(row.max_rel_error < 1e-6, "{row:?}");
        }
    }

    #[test]
    fn end_to_end_f32_agrees_with_f64() {
        let setup = EndToEndSetup {
            width: 8,
            per_param: 2,
            ..EndToEndSetup::default()
        };
        let report = end_to_end_grad_check(Conditioning::Meta, DecoderKind::Mango, &setup, 2).unwrap();
        assert!(report.loss.is_finite());
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn symmetries_hold_for_random_weights() {
        let mut cfg = ModelConfig::full(Conditioning::Meta, DecoderKind::Mango, 2, 2, RhoNormalizer::identity(1));
        cfg.set_width(8, 2);
        let model = Model::<f32>::new(cfg, 3).unwrap();
        let topo = ring_topology(6, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials: Vec<Trial<f32>> = (0..4).map(|_| random_trial(&mut rng, 6, 2, 2, 5)).collect();
        let checks = symmetry_suite(&model, &trials, &[0.2], &topo, 3).unwrap();
        assert_eq!(checks.len(), 5);
        for c in checks {
            assert!(c.max_abs_error <= 1e-5, "{c:?}");
        }
    }
}
