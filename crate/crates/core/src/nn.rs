//! Learnable building blocks.
//!
//! Layers only hold [`ParamId`]s and their configuration; the weights live in a
//! [`ParamStore`]. A forward pass first binds the store onto a tape
//! ([`ParamStore::bind`]) and then threads the resulting [`Bound`] handles
//! through the layers. Casting the store switches the whole model between
//! 32-bit and 64-bit without touching the layer definitions.

use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.values.iter().map(|v| tape.param(v.clone())).collect())
    }

    /// Records every parameter as a constant (no gradient).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }

    /// Binds parameters for which `trainable(name)` holds as trainable leaves
    /// and the rest as constants.
    pub fn bind_where(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        Bound(
            self.names
                .iter()
                .zip(&self.values)
                .map(|(n, v)| tape.leaf(v.clone(), trainable(n)))
                .collect(),
        )
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (n, v) in self.names.iter().zip(self.values.iter_mut()) {
            if n.starts_with(prefix) {
                v.data_mut().iter_mut().for_each(|e| *e = T::zero());
            }
        }
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn uniform_fan_in<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_fan_in(vec![in_dim, out_dim], in_dim, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), uniform_fan_in(vec![out_dim], in_dim, rng)));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], self.b.map(|b| p[b]))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(vec![width])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![width])),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.bias])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    pub layer_norm: bool,
    pub residual: bool,
}

impl MlpConfig {
    pub fn new(widths: impl Into<Vec<usize>>) -> Self {
        MlpConfig {
            widths: widths.into(),
            layer_norm: false,
            residual: false,
        }
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.layer_norm = on;
        self
    }

    pub fn with_residual(mut self, on: bool) -> Self {
        self.residual = on;
        self
    }
}

/// Linear layers with leaky-ReLU in between, an optional output layer norm
/// and an optional identity skip.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub config: MlpConfig,
    pub layers: Vec<Linear>,
    pub norm: Option<LayerNorm>,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, config: MlpConfig) -> Result<Self> {
        let w = &config.widths;
        if w.len() < 2 || w.contains(&0) {
            return Err(Error::Config(format!("mlp {name}: need at least two positive widths, got {w:?}")));
        }
        if config.residual && w[0] != w[w.len() - 1] {
            return Err(Error::Config(format!(
                "mlp {name}: residual requires equal in/out widths, got {} and {}",
                w[0],
                w[w.len() - 1]
            )));
        }
        let layers = w
            .windows(2)
            .enumerate()
            .map(|(i, pair)| Linear::new(store, rng, &format!("{name}.l{i}"), pair[0], pair[1], true))
            .collect();
        let norm = config
            .layer_norm
            .then(|| LayerNorm::new(store, &format!("{name}.ln"), w[w.len() - 1]));
        Ok(Mlp { config, layers, norm })
    }

    pub fn in_dim(&self) -> usize {
        self.config.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.config.widths.last().unwrap()
    }

    pub fn first_layer(&self) -> &Linear {
        &self.layers[0]
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        if tape.value(x).last_dim() != self.in_dim() {
            return Err(Error::shape(
                "mlp",
                format!("input {:?} for width {}", tape.shape(x), self.in_dim()),
            ));
        }
        let pre = self.layers[0].forward(tape, p, x)?;
        let out = self.forward_tail(tape, p, pre)?;
        if self.config.residual {
            tape.add(out, x)
        } else {
            Ok(out)
        }
    }

    /// Continues the forward pass from the first layer's pre-activation.
    /// The residual skip, if configured, is left to the caller.
    pub fn forward_tail<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, pre: Var) -> Result<Var> {
        let mut h = pre;
        for layer in &self.layers[1..] {
            h = tape.leaky_relu(h, LEAKY_SLOPE);
            h = layer.forward(tape, p, h)?;
        }
        match &self.norm {
            Some(norm) => norm.forward(tape, p, h),
            None => Ok(h),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .layers
            .iter()
            .flat_map(|l| std::iter::once(l.w).chain(l.b))
            .collect();
        if let Some(n) = &self.norm {
            ids.extend([n.gain, n.bias]);
        }
        ids
    }
}

/// Per-sequence temporal convolution with an identity skip:
/// `y = conv(x) + x`, applied independently to each column of a time-major
/// `[T, M, C]` tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualConv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl ResidualConv1d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("{name}: kernel size must be odd, got {kernel}")));
        }
        let fan_in = channels * kernel;
        let w = store.add(format!("{name}.w"), uniform_fan_in(vec![channels, channels, kernel], fan_in, rng));
        let b = store.add(format!("{name}.b"), uniform_fan_in(vec![channels], fan_in, rng));
        Ok(ResidualConv1d { w, b, channels, kernel })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.temporal_conv(x, p[self.w], Some(p[self.b]))?;
        tape.add(y, x)
    }
}

/// Parameter-free sinusoidal embedding of normalized time `t / horizon`.
///
/// The first half of the output holds `sin(ω_i τ)`, the second half
/// `cos(ω_i τ)`, with `ω_i = base · 2^i`. With `base ≤ π` the cosine of the
/// lowest frequency is strictly monotone on `τ ∈ [0, 1]`, so distinct steps
/// always map to distinct embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub base_frequency: f64,
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        TimeEmbedding {
            dim: 16,
            base_frequency: std::f64::consts::FRAC_PI_2,
        }
    }
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!("time embedding dim must be even and positive, got {dim}")));
        }
        Ok(TimeEmbedding { dim, ..Default::default() })
    }

    pub fn embed_f64(&self, t: usize, horizon: usize) -> Result<Vec<f64>> {
        if t > horizon {
            return Err(Error::InvalidArgument(format!("time step {t} outside [0, {horizon}]")));
        }
        let tau = if horizon == 0 { 0.0 } else { t as f64 / horizon as f64 };
        let half = self.dim / 2;
        let mut out = vec![0.0; self.dim];
        for i in 0..half {
            let w = self.base_frequency * f64::powi(2.0, i as i32);
            out[i] = (w * tau).sin();
            out[half + i] = (w * tau).cos();
        }
        Ok(out)
    }

    pub fn embed<T: Scalar>(&self, t: usize, horizon: usize) -> Result<Tensor<T>> {
        Tensor::from_f64(vec![self.dim], &self.embed_f64(t, horizon)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn residual_requires_matching_widths() {
        let mut store = ParamStore::<f32>::new();
        let err = Mlp::new(&mut store, &mut rng(), "m", MlpConfig::new([3, 4, 5]).with_residual(true));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn zero_weight_residual_mlp_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(
            &mut store,
            &mut rng(),
            "m",
            MlpConfig::new([4, 8, 4]).with_residual(true).with_layer_norm(true),
        )
        .unwrap();
        for id in mlp.param_ids() {
            if !store.name(id).ends_with(".gain") {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.3 - 1.0);
        let xv = tape.constant(x.clone());
        let y = mlp.forward(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn single_layer_mlp_equals_matmul_plus_bias() {
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, &mut rng(), "m", MlpConfig::new([3, 2])).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn(vec![4, 3], |i| (i as f64).cos()));
        let y = mlp.forward(&mut tape, &p, x).unwrap();
        let l = &mlp.layers[0];
        let mm = tape.matmul(x, p[l.w]).unwrap();
        let expect = tape.add_row(mm, p[l.b.unwrap()]).unwrap();
        assert_eq!(tape.value(y), tape.value(expect));
    }

    #[test]
    fn mlp_preserves_leading_axes() {
        let mut store = ParamStore::<f32>::new();
        let mlp = Mlp::new(&mut store, &mut rng(), "m", MlpConfig::new([3, 5, 2])).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![2, 7, 3]));
        let y = mlp.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 7, 2]);
    }

    #[test]
    fn mlp_rejects_wrong_input_width() {
        let mut store = ParamStore::<f32>::new();
        let mlp = Mlp::new(&mut store, &mut rng(), "m", MlpConfig::new([3, 2])).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![2, 4]));
        assert!(mlp.forward(&mut tape, &p, x).is_err());
    }

    #[test]
    fn mlp_gradient_check() {
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(
            &mut store,
            &mut rng(),
            "m",
            MlpConfig::new([3, 6, 3]).with_layer_norm(true).with_residual(true),
        )
        .unwrap();
        let x = Tensor::<f64>::from_fn(vec![5, 3], |i| ((i * 7) as f64).sin());
        let mut params = store.values().to_vec();
        params.push(x);
        let n = store.len();
        let report = grad_check(
            |tape, vars| {
                let bound = Bound(vars[..n].to_vec());
                let y = mlp.forward(tape, &bound, vars[n])?;
                let sq = tape.mul(y, y)?;
                tape.mean_all(sq)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn zero_conv_is_exact_identity() {
        let mut store = ParamStore::<f32>::new();
        let conv = ResidualConv1d::new(&mut store, &mut rng(), "c", 3, 7).unwrap();
        store.zero_prefix("c.");
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = Tensor::from_fn(vec![5, 2, 3], |i| (i as f32 * 0.77).sin());
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn single_step_conv_uses_center_tap_only() {
        let mut store = ParamStore::<f64>::new();
        let conv = ResidualConv1d::new(&mut store, &mut rng(), "c", 2, 7).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = Tensor::new(vec![1, 1, 2], vec![0.5, -1.5]).unwrap();
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, &p, xv).unwrap();
        let w = store.get(conv.w);
        let b = store.get(conv.b);
        for o in 0..2 {
            let expect = b.data()[o] + (0..2).map(|i| w.get(&[o, i, 3]) * x.data()[i]).sum::<f64>() + x.data()[o];
            assert!((tape.value(y).data()[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_conv_gradient_check() {
        let mut store = ParamStore::<f64>::new();
        let conv = ResidualConv1d::new(&mut store, &mut rng(), "c", 2, 3).unwrap();
        let x = Tensor::<f64>::from_fn(vec![4, 3, 2], |i| ((i * 5) as f64).cos());
        let mut params = store.values().to_vec();
        params.push(x);
        let report = grad_check(
            |tape, vars| {
                let bound = Bound(vars[..2].to_vec());
                let y = conv.forward(tape, &bound, vars[2])?;
                let sq = tape.mul(y, y)?;
                tape.mean_all(sq)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn time_embedding_at_zero() {
        let te = TimeEmbedding::default();
        let e = te.embed_f64(0, 50).unwrap();
        assert!(e[..8].iter().all(|&v| v == 0.0));
        assert!(e[8..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn time_embedding_is_injective_on_grid() {
        let te = TimeEmbedding::default();
        for horizon in [1usize, 4, 50, 100] {
            let embs: Vec<Vec<f64>> = (0..=horizon).map(|t| te.embed_f64(t, horizon).unwrap()).collect();
            for a in 0..embs.len() {
                assert!(embs[a].iter().all(|v| (-1.0..=1.0).contains(v)));
                for b in a + 1..embs.len() {
                    let d: f64 = embs[a].iter().zip(&embs[b]).map(|(x, y)| (x - y).abs()).sum();
                    assert!(d > 1e-9, "steps {a} and {b} collide at horizon {horizon}");
                }
            }
        }
    }

    #[test]
    fn time_embedding_rejects_out_of_range() {
        assert!(TimeEmbedding::default().embed_f64(6, 5).is_err());
        assert!(TimeEmbedding::new(7).is_err());
    }
}
