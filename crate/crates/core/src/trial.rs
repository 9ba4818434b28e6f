//! One simulation input/output pair.

use crate::error::{Error, Result};
use rand::Rng;

use crate::tensor::{Scalar, Tensor};

/// Everything the decoder may see: initial state of the deformable body,
/// the full trajectory of external objects, and static node features.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialInputs<T: Scalar = f32> {
    /// `[N, d]`
    pub p0: Tensor<T>,
    /// `[N, d]`
    pub v0: Tensor<T>,
    /// `[T+1, N_ext, d]`
    pub p_ext: Tensor<T>,
    /// `[T+1, N_ext, d]`
    pub v_ext: Tensor<T>,
    /// `[N + N_ext, d_h]`
    pub h: Tensor<T>,
}

/// Inputs plus the target trajectory of the deformable nodes for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial<T: Scalar = f32> {
    pub x: TrialInputs<T>,
    /// `[T, N, d]`
    pub y_p: Tensor<T>,
    /// `[T, N, d]`
    pub y_v: Tensor<T>,
}

/// Sizes shared by all arrays of a trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrialDims {
    pub n: usize,
    pub n_ext: usize,
    pub d: usize,
    pub d_h: usize,
    pub horizon: usize,
}

impl TrialDims {
    pub fn n_total(&self) -> usize {
        self.n + self.n_ext
    }
}

fn expect(name: &str, t: &[usize], want: &[usize]) -> Result<()> {
    if t != want {
        return Err(Error::shape("trial", format!("{name} has shape {t:?}, expected {want:?}")));
    }
    Ok(())
}

impl<T: Scalar> TrialInputs<T> {
    /// Infers and checks the dimensions of all arrays.
    pub fn dims(&self) -> Result<TrialDims> {
        if self.p0.ndim() != 2 || self.p_ext.ndim() != 3 || self.h.ndim() != 2 {
            return Err(Error::shape(
                "trial",
                format!("ranks p0 {:?}, p_ext {:?}, h {:?}", self.p0.shape(), self.p_ext.shape(), self.h.shape()),
            ));
        }
        let (n, d) = (self.p0.shape()[0], self.p0.shape()[1]);
        let (t1, n_ext) = (self.p_ext.shape()[0], self.p_ext.shape()[1]);
        if t1 == 0 {
            return Err(Error::shape("trial", "external trajectory has no frames"));
        }
        let d_h = self.h.shape()[1];
        expect("v0", self.v0.shape(), &[n, d])?;
        expect("p_ext", self.p_ext.shape(), &[t1, n_ext, d])?;
        expect("v_ext", self.v_ext.shape(), &[t1, n_ext, d])?;
        expect("h", self.h.shape(), &[n + n_ext, d_h])?;
        Ok(TrialDims {
            n,
            n_ext,
            d,
            d_h,
            horizon: t1 - 1,
        })
    }

    pub fn cast<U: Scalar>(&self) -> TrialInputs<U> {
        TrialInputs {
            p0: self.p0.cast(),
            v0: self.v0.cast(),
            p_ext: self.p_ext.cast(),
            v_ext: self.v_ext.cast(),
            h: self.h.cast(),
        }
    }

    /// Adds `offset[d]` to every position (deformable and external).
    pub fn translated(&self, offset: &[f64]) -> Self {
        let shift = |t: &Tensor<T>| {
            let d = t.last_dim();
            let mut out = t.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += T::from_f64_lossy(offset[i % d]);
            }
            out
        };
        TrialInputs {
            p0: shift(&self.p0),
            p_ext: shift(&self.p_ext),
            ..self.clone()
        }
    }
}

impl<T: Scalar> Trial<T> {
    pub fn dims(&self) -> Result<TrialDims> {
        let dims = self.x.dims()?;
        let want = [dims.horizon, dims.n, dims.d];
        expect("y_p", self.y_p.shape(), &want)?;
        expect("y_v", self.y_v.shape(), &want)?;
        Ok(dims)
    }

    pub fn horizon(&self) -> usize {
        self.y_p.shape().first().copied().unwrap_or(0)
    }

    pub fn cast<U: Scalar>(&self) -> Trial<U> {
        Trial {
            x: self.x.cast(),
            y_p: self.y_p.cast(),
            y_v: self.y_v.cast(),
        }
    }

    pub fn translated(&self, offset: &[f64]) -> Self {
        let d = self.y_p.last_dim();
        let mut y_p = self.y_p.clone();
        for (i, v) in y_p.data_mut().iter_mut().enumerate() {
            *v += T::from_f64_lossy(offset[i % d]);
        }
        Trial {
            x: self.x.translated(offset),
            y_p,
            y_v: self.y_v.clone(),
        }
    }

    /// Keeps the first `horizon` target frames.
    pub fn truncated(&self, horizon: usize) -> Result<Self> {
        let dims = self.dims()?;
        if horizon > dims.horizon {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate horizon {} to {horizon}",
                dims.horizon
            )));
        }
        Ok(Trial {
            x: TrialInputs {
                p_ext: self.x.p_ext.narrow_rows(0, horizon + 1)?,
                v_ext: self.x.v_ext.narrow_rows(0, horizon + 1)?,
                ..self.x.clone()
            },
            y_p: self.y_p.narrow_rows(0, horizon)?,
            y_v: self.y_v.narrow_rows(0, horizon)?,
        })
    }

    /// Reorders nodes: deformable node `i` moves to `perm_def[i]`, external
    /// node `j` to `perm_ext[j]` (both within their own block).
    pub fn permuted(&self, perm_def: &[usize], perm_ext: &[usize]) -> Result<Self> {
        let dims = self.dims()?;
        if perm_def.len() != dims.n || perm_ext.len() != dims.n_ext {
            return Err(Error::InvalidArgument("permutation length".into()));
        }
        let mut perm_all: Vec<usize> = perm_def.to_vec();
        perm_all.extend(perm_ext.iter().map(|j| j + dims.n));
        Ok(Trial {
            x: TrialInputs {
                p0: permute_axis(&self.x.p0, 0, perm_def),
                v0: permute_axis(&self.x.v0, 0, perm_def),
                p_ext: permute_axis(&self.x.p_ext, 1, perm_ext),
                v_ext: permute_axis(&self.x.v_ext, 1, perm_ext),
                h: permute_axis(&self.x.h, 0, &perm_all),
            },
            y_p: permute_axis(&self.y_p, 1, perm_def),
            y_v: permute_axis(&self.y_v, 1, perm_def),
        })
    }
}

/// Moves index `i` of `axis` to `perm[i]`.
pub fn permute_axis<T: Scalar>(t: &Tensor<T>, axis: usize, perm: &[usize]) -> Tensor<T> {
    let (outer, dim, inner) = crate::tensor::axis_split(t.shape(), axis);
    let mut out = t.clone();
    let (src, dst) = (t.data(), out.data_mut());
    for o in 0..outer {
        for (i, &p) in perm.iter().enumerate().take(dim) {
            let s = (o * dim + i) * inner;
            let d = (o * dim + p) * inner;
            dst[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    out
}

/// Keeps the listed indices of `axis`, in order.
pub fn select_axis<T: Scalar>(t: &Tensor<T>, axis: usize, keep: &[usize]) -> Tensor<T> {
    let (outer, dim, inner) = crate::tensor::axis_split(t.shape(), axis);
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &i in keep {
            let s = (o * dim + i) * inner;
            data.extend_from_slice(&t.data()[s..s + inner]);
        }
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = keep.len();
    Tensor::new(shape, data).expect("select shape")
}

/// Random trial with a one-hot kind feature `[deformable, external]` and
/// every other entry uniform in `[0, 1)`.
pub fn random_trial<T: Scalar>(rng: &mut impl Rng, n: usize, n_ext: usize, d: usize, horizon: usize) -> Trial<T> {
    let mut r = |shape: Vec<usize>| Tensor::<T>::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(0.0..1.0)));
    let p0 = r(vec![n, d]);
    let v0 = r(vec![n, d]);
    let p_ext = r(vec![horizon + 1, n_ext, d]);
    let v_ext = r(vec![horizon + 1, n_ext, d]);
    let y_p = r(vec![horizon, n, d]);
    let y_v = r(vec![horizon, n, d]);
    let h = Tensor::from_fn(vec![n + n_ext, 2], |i| {
        let (node, c) = (i / 2, i % 2);
        T::from_f64_lossy(((node >= n) as usize == c) as u8 as f64)
    });
    Trial {
        x: TrialInputs { p0, v0, p_ext, v_ext, h },
        y_p,
        y_v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dims_are_inferred_and_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t: Trial<f32> = random_trial(&mut rng, 5, 2, 2, 4);
        let dims = t.dims().unwrap();
        assert_eq!((dims.n, dims.n_ext, dims.d, dims.d_h, dims.horizon), (5, 2, 2, 2, 4));
        t.y_v = Tensor::zeros(vec![3, 5, 2]);
        assert!(t.dims().is_err());
    }

    #[test]
    fn permutation_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t: Trial<f32> = random_trial(&mut rng, 4, 2, 2, 3);
        let p = t.permuted(&[2, 0, 3, 1], &[1, 0]).unwrap();
        let inv = p.permuted(&[1, 3, 0, 2], &[1, 0]).unwrap();
        assert_eq!(inv, t);
        assert_eq!(p.x.p0.get(&[2, 1]), t.x.p0.get(&[0, 1]));
        assert_eq!(p.y_p.get(&[1, 3, 0]), t.y_p.get(&[1, 2, 0]));
    }

    #[test]
    fn truncation_keeps_leading_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Trial<f32> = random_trial(&mut rng, 3, 1, 2, 6);
        let s = t.truncated(2).unwrap();
        assert_eq!(s.dims().unwrap().horizon, 2);
        assert_eq!(s.y_p.data(), &t.y_p.data()[..2 * 3 * 2]);
        assert!(t.truncated(7).is_err());
    }

    #[test]
    fn select_keeps_rows_in_order() {
        let t = Tensor::<f32>::from_fn(vec![2, 3, 1], |i| i as f32);
        let s = select_axis(&t, 1, &[2, 0]);
        assert_eq!(s.data(), &[2.0, 0.0, 5.0, 3.0]);
    }
}
