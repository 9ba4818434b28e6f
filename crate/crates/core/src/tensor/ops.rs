use std::sync::Arc;

use super::tape::{tap_range, Op, ReduceMode, Tape, Var};
use super::{axis_split, gemm, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::row_major(av.data(), m, k),
            MatRef::row_major(bv.data(), k, n),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// Affine map over the last axis: `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.ndim() != 2 || xv.ndim() == 0 || xv.last_dim() != wv.shape()[0] {
            return Err(Error::shape(
                "linear",
                format!("input {:?} with weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (inp, out) = (wv.shape()[0], wv.shape()[1]);
        let rows = xv.rows();
        let mut data = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != out {
                return Err(Error::shape("linear", format!("bias {:?} for width {out}", bv.shape())));
            }
            for row in data.chunks_exact_mut(out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            MatRef::row_major(xv.data(), rows, inp),
            MatRef::row_major(wv.data(), inp, out),
            &mut data,
            b.is_some(),
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale { x, s })
    }

    /// Adds `row[C]` to every row of `x[..., C]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = rv.numel();
        if xv.last_dim() != c {
            return Err(Error::shape("add_row", format!("{:?} + row {:?}", xv.shape(), rv.shape())));
        }
        let mut v = xv.clone();
        for chunk in v.data_mut().chunks_exact_mut(c) {
            chunk.iter_mut().zip(rv.data()).for_each(|(a, &b)| *a += b);
        }
        Ok(self.push(v, Op::AddRow { x, row }))
    }

    /// Multiplies row `i` of `x[M, ...]` by the scalar `s[i]` (`s` holds M values).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let m = sv.numel();
        if xv.ndim() == 0 || xv.shape()[0] != m {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} scaled by {:?}", xv.shape(), sv.shape()),
            ));
        }
        let c = xv.numel() / m.max(1);
        let mut v = xv.clone();
        for (chunk, &f) in v.data_mut().chunks_exact_mut(c.max(1)).zip(sv.data()) {
            chunk.iter_mut().for_each(|a| *a *= f);
        }
        Ok(self.push(v, Op::ScaleRows { x, s }))
    }

    /// Repeats `row[C]` into an `[n, C]` matrix.
    pub fn tile_rows(&mut self, row: Var, n: usize) -> Var {
        let rv = self.value(row);
        let c = rv.numel();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(rv.data());
        }
        let v = Tensor::new(vec![n, c], data).expect("tile shape");
        self.push(v, Op::TileRows { row })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", s, base)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let w = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("{start}..{} on axis {axis} of {:?}", start + len, shape),
            ));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(v, Op::Narrow { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape { x }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64_lossy(slope);
        let v = self.value(x).map(|e| if e > T::zero() { e } else { e * s });
        self.push(v, Op::LeakyRelu { x, slope: s })
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("width {c} with gain {:?}", self.shape(gain)),
            ));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let cn = T::from_usize(c).unwrap();
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        for (r, row) in xv.data().chunks_exact(c).enumerate() {
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (j, &e) in row.iter().enumerate() {
                xhat[r * c + j] = (e - mean) * rs;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let data = xhat
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Reduces `axis` by sum, mean or max. Max routes gradient to the first
    /// maximal entry.
    pub fn reduce(&mut self, x: Var, axis: usize, mode: ReduceMode) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::shape("reduce", format!("axis {axis} of {:?}", xv.shape())));
        }
        let (outer, dim, inner) = axis_split(xv.shape(), axis);
        if dim == 0 {
            return Err(Error::shape("reduce", "empty reduction axis"));
        }
        let d = xv.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        if mode == ReduceMode::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for k in 0..inner {
                let at = |i: usize| d[(o * dim + i) * inner + k];
                let slot = o * inner + k;
                out[slot] = match mode {
                    ReduceMode::Sum => (0..dim).map(at).sum(),
                    ReduceMode::Mean => (0..dim).map(at).sum::<T>() / T::from_usize(dim).unwrap(),
                    ReduceMode::Max => {
                        let mut best = 0;
                        for i in 1..dim {
                            if at(i) > at(best) {
                                best = i;
                            }
                        }
                        argmax[slot] = best;
                        at(best)
                    }
                };
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Reduce { x, axis, mode, argmax }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let s = xv.data().iter().copied().sum::<T>() / T::from_usize(xv.numel()).unwrap();
        Ok(self.push(Tensor::scalar(s), Op::MeanAll { x }))
    }

    /// Selects rows `idx` of `x[M, ...]`.
    pub fn gather_rows(&mut self, x: Var, idx: &Arc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        let m = *xv.shape().first().ok_or_else(|| Error::shape("gather_rows", "scalar input"))?;
        let c = xv.numel() / m.max(1);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= m {
                return Err(Error::shape("gather_rows", format!("row {i} out of {m}")));
            }
            data.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::GatherRows { x, idx: Arc::clone(idx) }))
    }

    /// Aggregates rows of `x[E, C]` into `n_out` buckets given by `idx[E]`.
    /// Empty buckets yield zero rows.
    pub fn scatter_rows(&mut self, x: Var, idx: &Arc<[usize]>, n_out: usize, mode: ReduceMode) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || xv.shape()[0] != idx.len() {
            return Err(Error::shape(
                "scatter_rows",
                format!("{:?} with {} indices", xv.shape(), idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::shape("scatter_rows", format!("bucket {bad} out of {n_out}")));
        }
        let c = xv.shape()[1];
        let d = xv.data();
        let mut out = vec![T::zero(); n_out * c];
        let aux = match mode {
            ReduceMode::Sum | ReduceMode::Mean => {
                let mut counts = vec![0usize; n_out];
                for (j, &dst) in idx.iter().enumerate() {
                    counts[dst] += 1;
                    for k in 0..c {
                        out[dst * c + k] += d[j * c + k];
                    }
                }
                if mode == ReduceMode::Mean {
                    for (dst, &n) in counts.iter().enumerate() {
                        if n > 1 {
                            let inv = T::one() / T::from_usize(n).unwrap();
                            out[dst * c..(dst + 1) * c].iter_mut().for_each(|v| *v *= inv);
                        }
                    }
                }
                counts
            }
            ReduceMode::Max => {
                let mut arg = vec![usize::MAX; n_out * c];
                for (j, &dst) in idx.iter().enumerate() {
                    for k in 0..c {
                        let pos = dst * c + k;
                        if arg[pos] == usize::MAX || d[j * c + k] > out[pos] {
                            out[pos] = d[j * c + k];
                            arg[pos] = j;
                        }
                    }
                }
                arg
            }
        };
        let v = Tensor::new(vec![n_out, c], out)?;
        Ok(self.push(v, Op::ScatterRows { x, idx: Arc::clone(idx), mode, aux }))
    }

    /// Cross-correlation of `x[C_in, T]` with `w[C_out, C_in, K]` (odd `K`),
    /// zero-padded so the output keeps length `T`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 2 || wv.ndim() != 3 || wv.shape()[1] != xv.shape()[0] {
            return Err(Error::shape("conv1d", format!("input {:?}, kernel {:?}", xv.shape(), wv.shape())));
        }
        let (cin, t) = (xv.shape()[0], xv.shape()[1]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        let pad = k / 2;
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![T::zero(); cout * t];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != cout {
                return Err(Error::shape("conv1d", format!("bias {:?} for {cout} channels", bv.shape())));
            }
            for o in 0..cout {
                out[o * t..(o + 1) * t].iter_mut().for_each(|v| *v = bv.data()[o]);
            }
        }
        for o in 0..cout {
            for i in 0..cin {
                for kk in 0..k {
                    let wgt = wd[(o * cin + i) * k + kk];
                    for tt in 0..t {
                        let src = tt as isize + kk as isize - pad as isize;
                        if src >= 0 && (src as usize) < t {
                            out[o * t + tt] += wgt * xd[i * t + src as usize];
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![cout, t], out)?;
        Ok(self.push(v, Op::Conv1d { x, w, b }))
    }

    /// Time-major batched form of [`Tape::conv1d`]: convolves every column
    /// sequence of `x[T, M, C_in]` along the leading axis with the same
    /// `w[C_out, C_in, K]`, giving `[T, M, C_out]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 3 || wv.ndim() != 3 || wv.shape()[1] != xv.shape()[2] {
            return Err(Error::shape(
                "temporal_conv",
                format!("input {:?}, kernel {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (t, m, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        let mut out = vec![T::zero(); t * m * cout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != cout {
                return Err(Error::shape("temporal_conv", format!("bias {:?}", bv.shape())));
            }
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bv.data());
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        for kk in 0..k {
            let Some((t0, t1, s)) = tap_range(t, k, kk) else { continue };
            let rows = (t1 - t0) * m;
            let src0 = (t0 as isize + s) as usize;
            let xs = MatRef::row_major(&xd[src0 * m * cin..(src0 + t1 - t0) * m * cin], rows, cin);
            // W_k viewed as [cin, cout]: element (i, o) = w[o, i, kk]
            let wk = MatRef {
                data: &wd[kk..],
                rows: cin,
                cols: cout,
                rs: k,
                cs: cin * k,
            };
            gemm(xs, wk, &mut out[t0 * m * cout..t1 * m * cout], true);
        }
        let v = Tensor::new(vec![t, m, cout], out)?;
        Ok(self.push(v, Op::TemporalConv { x, w, b }))
    }

    /// `0.5 · mean((a - b)²)` composed from primitive ops.
    pub fn half_mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let m = self.mean_all(sq)?;
        Ok(self.scale(m, 0.5))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let a = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![rand_tensor(&[4, 3], &mut rng), rand_tensor(&[3, 2], &mut rng)];
        let weights = rand_tensor(&[4, 2], &mut rng);
        let report = grad_check(
            |tape, p| {
                let c = tape.matmul(p[0], p[1])?;
                let w = tape.constant(weights.clone());
                let prod = tape.mul(c, w)?;
                Ok(tape.sum_all(prod))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn conv1d_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 9], &mut rng);
        let mut w = Tensor::<f64>::zeros(vec![2, 2, 3]);
        w.set(&[0, 0, 1], 1.0);
        w.set(&[1, 1, 1], 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w);
        let y = tape.conv1d(xv, wv, None).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv1d_constant_input_with_averaging_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![1, 6], 3.0));
        let w = tape.constant(Tensor::full(vec![1, 1, 3], 1.0 / 3.0));
        let y = tape.conv1d(x, w, None).unwrap();
        let out = tape.value(y).data();
        for &v in &out[1..5] {
            assert!((v - 3.0).abs() < 1e-12);
        }
        assert!((out[0] - 2.0).abs() < 1e-12);
        assert!((out[5] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 5]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 4]));
        assert!(matches!(tape.conv1d(x, w, None), Err(Error::Config(_))));
    }

    #[test]
    fn conv1d_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![
            rand_tensor(&[2, 9], &mut rng),
            rand_tensor(&[3, 2, 3], &mut rng),
            rand_tensor(&[3], &mut rng),
        ];
        let weights = rand_tensor(&[3, 9], &mut rng);
        let report = grad_check(
            |tape, p| {
                let y = tape.conv1d(p[0], p[1], Some(p[2]))?;
                let w = tape.constant(weights.clone());
                let prod = tape.mul(y, w)?;
                Ok(tape.sum_all(prod))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn temporal_conv_matches_per_column_conv1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t, m, cin, cout, k) = (6, 3, 2, 4, 5);
        let x = rand_tensor(&[t, m, cin], &mut rng);
        let w = rand_tensor(&[cout, cin, k], &mut rng);
        let b = rand_tensor(&[cout], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w), tape.constant(b));
        let y = tape.temporal_conv(xv, wv, Some(bv)).unwrap();
        for col in 0..m {
            let seq = Tensor::from_fn(vec![cin, t], |f| x.get(&[f % t, col, f / t]));
            let s = tape.constant(seq);
            let ys = tape.conv1d(s, wv, Some(bv)).unwrap();
            for o in 0..cout {
                for tt in 0..t {
                    let a = tape.value(ys).get(&[o, tt]);
                    let bb = tape.value(y).get(&[tt, col, o]);
                    assert!((a - bb).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn temporal_conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![
            rand_tensor(&[5, 3, 2], &mut rng),
            rand_tensor(&[2, 2, 3], &mut rng),
            rand_tensor(&[2], &mut rng),
        ];
        let weights = rand_tensor(&[5, 3, 2], &mut rng);
        let report = grad_check(
            |tape, p| {
                let y = tape.temporal_conv(p[0], p[1], Some(p[2]))?;
                let w = tape.constant(weights.clone());
                let prod = tape.mul(y, w)?;
                Ok(tape.sum_all(prod))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn reduce_max_routes_gradient_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, 5.0, 3.0]).unwrap());
        let m = tape.reduce(x, 0, ReduceMode::Max).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0]);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn reduce_max_ties_go_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![3], vec![2.0, 2.0, 1.0]).unwrap());
        let m = tape.reduce(x, 0, ReduceMode::Max).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn reduce_mean_over_unit_axis_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let m = tape.reduce(x, 1, ReduceMode::Mean).unwrap();
        assert_eq!(tape.value(m).data(), tape.value(x).data());
        assert_eq!(tape.shape(m), &[2, 3]);
    }

    #[test]
    fn reduce_rejects_empty_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 0]));
        assert!(tape.reduce(x, 1, ReduceMode::Sum).is_err());
    }

    #[test]
    fn reductions_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = vec![rand_tensor(&[3, 4, 2], &mut rng)];
        let weights = rand_tensor(&[3, 2], &mut rng);
        for mode in [ReduceMode::Sum, ReduceMode::Mean, ReduceMode::Max] {
            let report = grad_check(
                |tape, p| {
                    let r = tape.reduce(p[0], 1, mode)?;
                    let w = tape.constant(weights.clone());
                    let prod = tape.mul(r, w)?;
                    Ok(tape.sum_all(prod))
                },
                &params,
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn leaky_relu_of_zero_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0, -2.0, 3.0]).unwrap());
        let y = tape.leaky_relu(x, 0.01);
        assert_eq!(tape.value(y).data(), &[0.0, -0.02, 3.0]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(vec![2, 4], 7.5));
        let g = tape.constant(Tensor::ones(vec![4]));
        let b = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_and_shape_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = vec![
            rand_tensor(&[4, 3], &mut rng),
            rand_tensor(&[4, 3], &mut rng),
            rand_tensor(&[3], &mut rng),
            rand_tensor(&[3], &mut rng),
            rand_tensor(&[4], &mut rng),
        ];
        let idx: Arc<[usize]> = Arc::from(vec![0usize, 2, 2, 3, 1]);
        let report = grad_check(
            |tape, p| {
                let a = tape.add(p[0], p[1])?;
                let s = tape.sub(a, p[1])?;
                let m = tape.mul(s, p[1])?;
                let r = tape.add_row(m, p[2])?;
                let l = tape.leaky_relu(r, 0.1);
                let ln = tape.layer_norm(l, p[2], p[3])?;
                let sr = tape.scale_rows(ln, p[4])?;
                let c = tape.concat(&[sr, p[0]], 1)?;
                let n = tape.narrow(c, 1, 2, 3)?;
                let g = tape.gather_rows(n, &idx)?;
                let sc = tape.scatter_rows(g, &idx, 4, ReduceMode::Mean)?;
                let t = tape.tile_rows(p[3], 4);
                let tt = tape.mul(sc, t)?;
                let rs = tape.reshape(tt, vec![12])?;
                let q = tape.mul(rs, rs)?;
                let out = tape.mean_all(q)?;
                Ok(tape.scale(out, 3.0))
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn scatter_modes_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = vec![rand_tensor(&[5, 2], &mut rng)];
        let idx: Arc<[usize]> = Arc::from(vec![1usize, 0, 1, 3, 1]);
        let weights = rand_tensor(&[4, 2], &mut rng);
        for mode in [ReduceMode::Sum, ReduceMode::Mean, ReduceMode::Max] {
            let report = grad_check(
                |tape, p| {
                    let s = tape.scatter_rows(p[0], &idx, 4, mode)?;
                    let w = tape.constant(weights.clone());
                    let prod = tape.mul(s, w)?;
                    Ok(tape.sum_all(prod))
                },
                &params,
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn scatter_leaves_empty_buckets_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 5.0]).unwrap());
        let idx: Arc<[usize]> = Arc::from(vec![0usize, 0]);
        for mode in [ReduceMode::Sum, ReduceMode::Mean, ReduceMode::Max] {
            let y = tape.scatter_rows(x, &idx, 2, mode).unwrap();
            assert_eq!(tape.value(y).data()[1], 0.0);
        }
    }

    #[test]
    fn backward_of_sum_is_ones_and_of_zero_scaled_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = tape.sum_all(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let sq = tape.mul(x, x).unwrap();
        let f = tape.sum_all(sq);
        let z = tape.scale(f, 0.0);
        let g = tape.backward(z).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.param(Tensor::ones(vec![2]));
        let s = tape.sum_all(x);
        assert!(!tape.requires_grad(s));
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
    }
}
