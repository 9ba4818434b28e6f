use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing autodiff gradients with central differences.
///
/// The error for one parameter tensor is `max_i |a_i - n_i| / s`, where `s`
/// is the larger of the analytic and numeric infinity norms; the report keeps
/// the per-tensor values and their maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: Vec<f64>,
    pub checked_entries: usize,
}

/// Checks every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    let coords: Vec<Vec<usize>> = params.iter().map(|p| (0..p.numel()).collect()).collect();
    compare(&f, params, &analytic, &coords, eps)
}

/// Like [`grad_check`] but probes at most `per_param` coordinates of each
/// tensor, chosen by a seeded generator.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    per_param: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, params)?;
    let coords = sample_coords(params, per_param, seed);
    compare(&f, params, &analytic, &coords, eps)
}

pub fn sample_coords(params: &[Tensor<f64>], per_param: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params
        .iter()
        .map(|p| {
            if p.numel() <= per_param {
                (0..p.numel()).collect()
            } else {
                let mut v = sample(&mut rng, p.numel(), per_param).into_vec();
                v.sort_unstable();
                v
            }
        })
        .collect()
}

fn analytic_gradients<F>(f: &F, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect())
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Central-difference derivative of `f` at the listed coordinates.
pub fn numerical_gradients<F>(f: &F, params: &[Tensor<f64>], coords: &[Vec<usize>], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for (pi, idxs) in coords.iter().enumerate() {
        let mut g = Vec::with_capacity(idxs.len());
        for &i in idxs {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let plus = eval(f, &work)?;
            work[pi].data_mut()[i] = orig - eps;
            let minus = eval(f, &work)?;
            work[pi].data_mut()[i] = orig;
            g.push((plus - minus) / (2.0 * eps));
        }
        out.push(g);
    }
    Ok(out)
}

/// Relative error between analytic values and numeric estimates at `coords`.
pub fn relative_error(analytic: &Tensor<f64>, coords: &[usize], numeric: &[f64]) -> f64 {
    let a = analytic.data();
    let scale = numeric
        .iter()
        .fold(analytic.max_abs(), |m, v| m.max(v.abs()))
        .max(1e-12);
    coords
        .iter()
        .zip(numeric)
        .map(|(&i, &n)| (a[i] - n).abs() / scale)
        .fold(0.0, f64::max)
}

fn compare<F>(
    f: &F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    coords: &[Vec<usize>],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let numeric = numerical_gradients(f, params, coords, eps)?;
    let per_param: Vec<f64> = analytic
        .iter()
        .zip(coords)
        .zip(&numeric)
        .map(|((a, c), n)| relative_error(a, c, n))
        .collect();
    Ok(GradCheckReport {
        max_rel_error: per_param.iter().copied().fold(0.0, f64::max),
        checked_entries: coords.iter().map(Vec::len).sum(),
        per_param,
    })
}
