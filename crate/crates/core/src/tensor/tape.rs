use std::sync::Arc;

use super::{axis_split, gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceMode {
    Sum,
    Mean,
    Max,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    AddRow { x: Var, row: Var },
    ScaleRows { x: Var, s: Var },
    TileRows { row: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    LeakyRelu { x: Var, slope: T },
    LayerNorm { gain: Var, bias: Var, x: Var, xhat: Vec<T>, rstd: Vec<T> },
    Reduce { x: Var, axis: usize, mode: ReduceMode, argmax: Vec<usize> },
    SumAll { x: Var },
    MeanAll { x: Var },
    GatherRows { x: Var, idx: Arc<[usize]> },
    ScatterRows { x: Var, idx: Arc<[usize]>, mode: ReduceMode, aux: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Option<Var> },
    TemporalConv { x: Var, w: Var, b: Option<Var> },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
            Linear { x, w, b } | Conv1d { x, w, b } | TemporalConv { x, w, b } => {
                let mut p = vec![*x, *w];
                p.extend(b.iter().copied());
                p
            }
            Scale { x, .. }
            | Narrow { x, .. }
            | Reshape { x }
            | LeakyRelu { x, .. }
            | Reduce { x, .. }
            | SumAll { x }
            | MeanAll { x }
            | GatherRows { x, .. }
            | ScatterRows { x, .. } => vec![*x],
            AddRow { x, row } => vec![*x, *row],
            ScaleRows { x, s } => vec![*x, *s],
            TileRows { row } => vec![*row],
            Concat { parts, .. } => parts.clone(),
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eager reverse-mode tape.
///
/// Operations append nodes in execution order, so parents always precede
/// children and a single reverse sweep visits every node once. A tape is
/// confined to one thread; independent computations use independent tapes.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that evaluates values only; `backward` yields no gradients.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Total number of scalars held by recorded values; a proxy for
    /// activation memory.
    pub fn activation_count(&self) -> usize {
        self.nodes.iter().map(|n| n.value.numel()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.record;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let parents = op.parents();
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        #[cfg(debug_assertions)]
        if parents.iter().all(|p| self.nodes[p.0].value.is_finite()) {
            debug_assert!(value.is_finite(), "non-finite output from finite inputs");
        }
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            // interior gradients are not retained
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(n.value.shape().to_vec()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let gm = MatRef::row_major(gd, m, n);
                acc(*a, &mut |ga| gemm(gm, MatRef::row_major(bv.data(), k, n).t(), ga, true));
                acc(*b, &mut |gb| gemm(MatRef::row_major(av.data(), m, k).t(), gm, gb, true));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (inp, out) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / inp.max(1);
                let gm = MatRef::row_major(gd, rows, out);
                acc(*x, &mut |gx| gemm(gm, MatRef::row_major(wv.data(), inp, out).t(), gx, true));
                acc(*w, &mut |gw| gemm(MatRef::row_major(xv.data(), rows, inp).t(), gm, gw, true));
                if let Some(b) = b {
                    acc(*b, &mut |gb| col_sum_into(gd, out, gb));
                }
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| add_into(gb, gd));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| gb.iter_mut().zip(gd).for_each(|(o, &g)| *o -= g));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for ((o, &g), &y) in ga.iter_mut().zip(gd).zip(bv) {
                        *o += g * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &g), &y) in gb.iter_mut().zip(gd).zip(av) {
                        *o += g * y;
                    }
                });
            }
            Op::Scale { x, s } => {
                acc(*x, &mut |gx| gx.iter_mut().zip(gd).for_each(|(o, &g)| *o += g * *s));
            }
            Op::AddRow { x, row } => {
                let c = val(*row).numel();
                acc(*x, &mut |gx| add_into(gx, gd));
                acc(*row, &mut |gr| col_sum_into(gd, c, gr));
            }
            Op::ScaleRows { x, s } => {
                let (xv, sv) = (val(*x).data(), val(*s).data());
                let c = xv.len() / sv.len().max(1);
                acc(*x, &mut |gx| {
                    for (r, &sr) in sv.iter().enumerate() {
                        for j in r * c..(r + 1) * c {
                            gx[j] += gd[j] * sr;
                        }
                    }
                });
                acc(*s, &mut |gs| {
                    for (r, o) in gs.iter_mut().enumerate() {
                        let mut sum = T::zero();
                        for j in r * c..(r + 1) * c {
                            sum += gd[j] * xv[j];
                        }
                        *o += sum;
                    }
                });
            }
            Op::TileRows { row } => {
                let c = val(*row).numel();
                acc(*row, &mut |gr| col_sum_into(gd, c, gr));
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, _, inner) = axis_split(out_shape, *axis);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let width = val(*p).shape()[*axis] * inner;
                    acc(*p, &mut |gp| {
                        for o in 0..outer {
                            let src = &gd[o * total + offset..o * total + offset + width];
                            add_into(&mut gp[o * width..(o + 1) * width], src);
                        }
                    });
                    offset += width;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = val(*x).shape();
                let (outer, dim, inner) = axis_split(in_shape, *axis);
                let len = node.value.shape()[*axis];
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        add_into(&mut gx[dst..dst + len * inner], &gd[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Reshape { x } => acc(*x, &mut |gx| add_into(gx, gd)),
            Op::LeakyRelu { x, slope } => {
                let xv = val(*x).data();
                acc(*x, &mut |gx| {
                    for ((o, &g), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        *o += if v > T::zero() { g } else { g * *slope };
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gainv = val(*gain).data();
                let c = gainv.len();
                let rows = rstd.len();
                acc(*gain, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += gd[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| col_sum_into(gd, c, gb));
                let cn = T::from_usize(c).unwrap();
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let base = r * c;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let d = gd[base + j] * gainv[j];
                            mean_d += d;
                            mean_dx += d * xhat[base + j];
                        }
                        mean_d = mean_d / cn;
                        mean_dx = mean_dx / cn;
                        for j in 0..c {
                            let d = gd[base + j] * gainv[j];
                            gx[base + j] += rstd[r] * (d - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                });
            }
            Op::Reduce { x, axis, mode, argmax } => {
                let (outer, dim, inner) = axis_split(val(*x).shape(), *axis);
                let scale = match mode {
                    ReduceMode::Mean => T::one() / T::from_usize(dim).unwrap(),
                    _ => T::one(),
                };
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let g = gd[o * inner + k];
                            match mode {
                                ReduceMode::Max => {
                                    let d = argmax[o * inner + k];
                                    gx[(o * dim + d) * inner + k] += g;
                                }
                                _ => {
                                    for d in 0..dim {
                                        gx[(o * dim + d) * inner + k] += g * scale;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let g = gd[0];
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g));
            }
            Op::MeanAll { x } => {
                let n = val(*x).numel();
                let g = gd[0] / T::from_usize(n).unwrap();
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g));
            }
            Op::GatherRows { x, idx } => {
                let c = val(*x).numel() / val(*x).shape()[0].max(1);
                acc(*x, &mut |gx| {
                    for (j, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * c..(src + 1) * c], &gd[j * c..(j + 1) * c]);
                    }
                });
            }
            Op::ScatterRows { x, idx, mode, aux } => {
                let xv = val(*x);
                let c = xv.numel() / xv.shape()[0].max(1);
                acc(*x, &mut |gx| match mode {
                    ReduceMode::Sum => {
                        for (j, &dst) in idx.iter().enumerate() {
                            add_into(&mut gx[j * c..(j + 1) * c], &gd[dst * c..(dst + 1) * c]);
                        }
                    }
                    ReduceMode::Mean => {
                        for (j, &dst) in idx.iter().enumerate() {
                            let inv = T::one() / T::from_usize(aux[dst]).unwrap();
                            for k in 0..c {
                                gx[j * c + k] += gd[dst * c + k] * inv;
                            }
                        }
                    }
                    ReduceMode::Max => {
                        for (pos, &src) in aux.iter().enumerate() {
                            if src != usize::MAX {
                                let k = pos % c;
                                gx[src * c + k] += gd[pos];
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, t) = (xv.shape()[0], xv.shape()[1]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let pad = k / 2;
                let (xd, wd) = (xv.data(), wv.data());
                acc(*x, &mut |gx| {
                    for o in 0..cout {
                        for i in 0..cin {
                            for kk in 0..k {
                                let wgt = wd[(o * cin + i) * k + kk];
                                for tt in 0..t {
                                    let src = tt as isize + kk as isize - pad as isize;
                                    if src >= 0 && (src as usize) < t {
                                        gx[i * t + src as usize] += wgt * gd[o * t + tt];
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for o in 0..cout {
                        for i in 0..cin {
                            for kk in 0..k {
                                let mut s = T::zero();
                                for tt in 0..t {
                                    let src = tt as isize + kk as isize - pad as isize;
                                    if src >= 0 && (src as usize) < t {
                                        s += gd[o * t + tt] * xd[i * t + src as usize];
                                    }
                                }
                                gw[(o * cin + i) * k + kk] += s;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for o in 0..cout {
                            gb[o] += gd[o * t..(o + 1) * t].iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::TemporalConv { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (t, m, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let (xd, wd) = (xv.data(), wv.data());
                acc(*x, &mut |gx| {
                    for kk in 0..k {
                        let Some((t0, t1, s)) = tap_range(t, k, kk) else { continue };
                        let rows = (t1 - t0) * m;
                        let gy = MatRef::row_major(&gd[t0 * m * cout..t1 * m * cout], rows, cout);
                        // W_kᵀ viewed as [cout, cin]
                        let wt = MatRef {
                            data: &wd[kk..],
                            rows: cout,
                            cols: cin,
                            rs: cin * k,
                            cs: k,
                        };
                        let src0 = (t0 as isize + s) as usize;
                        gemm(gy, wt, &mut gx[src0 * m * cin..(src0 + t1 - t0) * m * cin], true);
                    }
                });
                acc(*w, &mut |gw| {
                    let mut tmp = vec![T::zero(); cin * cout];
                    for kk in 0..k {
                        let Some((t0, t1, s)) = tap_range(t, k, kk) else { continue };
                        let rows = (t1 - t0) * m;
                        let src0 = (t0 as isize + s) as usize;
                        let xs = MatRef::row_major(&xd[src0 * m * cin..(src0 + t1 - t0) * m * cin], rows, cin);
                        let gy = MatRef::row_major(&gd[t0 * m * cout..t1 * m * cout], rows, cout);
                        gemm(xs.t(), gy, &mut tmp, false);
                        for i in 0..cin {
                            for o in 0..cout {
                                gw[(o * cin + i) * k + kk] += tmp[i * cout + o];
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| col_sum_into(gd, cout, gb));
                }
            }
        }
    }
}

/// Valid output time range `[t0, t1)` and input shift for tap `kk` of a
/// centered kernel of size `k` with zero padding.
pub(crate) fn tap_range(t: usize, k: usize, kk: usize) -> Option<(usize, usize, isize)> {
    let s = kk as isize - (k / 2) as isize;
    let t0 = (-s).max(0) as usize;
    let t1 = (t as isize - s).min(t as isize);
    if t1 <= t0 as isize {
        return None;
    }
    Some((t0, t1 as usize, s))
}

pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub(crate) fn col_sum_into<T: Scalar>(src: &[T], cols: usize, dst: &mut [T]) {
    for row in src.chunks_exact(cols) {
        add_into(dst, row);
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
