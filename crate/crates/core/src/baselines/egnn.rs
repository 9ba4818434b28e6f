//! Minimal E(n)-equivariant graph layer and an empirical check that stacks of
//! such layers keep planar point sets planar.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoder::{DecoderConfig, MangoDecoder};
use crate::error::{Error, Result};
use crate::graph::{EdgeKind, NodeKind, Topology};
use crate::nn::{Bound, Mlp, MlpConfig, ParamStore, TimeEmbedding};
use crate::tensor::{ReduceMode, Tape, Tensor, Var};
use crate::trial::TrialInputs;

/// Residual threshold below which a point set counts as planar.
pub const PLANAR_TOLERANCE: f64 = 1e-5;

/// One EGNN layer:
/// `m_vw = φ_e(h_v, h_w, |p_v - p_w|²)`,
/// `p_v ← p_v + C Σ_w (p_v - p_w) φ_x(m_vw)` with `C = 1/|N(v)|`,
/// `h_v ← h_v + φ_h(h_v, Σ_w m_vw)`.
#[derive(Clone, Debug)]
pub struct EgnnLayer {
    pub phi_e: Mlp,
    pub phi_x: Mlp,
    pub phi_h: Mlp,
}

impl EgnnLayer {
    pub fn new(
        store: &mut ParamStore<f64>,
        rng: &mut impl Rng,
        name: &str,
        feat_dim: usize,
        msg_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(EgnnLayer {
            phi_e: Mlp::new(
                store,
                rng,
                &format!("{name}.phi_e"),
                MlpConfig::new([2 * feat_dim + 1, hidden, msg_dim]),
            )?,
            phi_x: Mlp::new(store, rng, &format!("{name}.phi_x"), MlpConfig::new([msg_dim, hidden, 1]))?,
            phi_h: Mlp::new(
                store,
                rng,
                &format!("{name}.phi_h"),
                MlpConfig::new([feat_dim + msg_dim, hidden, feat_dim]),
            )?,
        })
    }

    /// Applies the layer to positions `p[N, 3]` and features `h[N, F]`.
    pub fn forward(&self, tape: &mut Tape<f64>, p: &Bound, pos: Var, feats: Var, topo: &Topology) -> Result<(Var, Var)> {
        if tape.shape(pos).len() != 2 || tape.shape(pos)[1] != 3 {
            return Err(Error::shape("egnn_step", format!("positions {:?}, expected [N, 3]", tape.shape(pos))));
        }
        let n = topo.num_nodes();
        let e = topo.num_edges();
        let (send, recv) = (topo.senders(), topo.receivers());
        let p_r = tape.gather_rows(pos, recv)?;
        let p_s = tape.gather_rows(pos, send)?;
        let diff = tape.sub(p_r, p_s)?;
        let sq = tape.mul(diff, diff)?;
        let dist2 = tape.reduce(sq, 1, ReduceMode::Sum)?;
        let dist2 = tape.reshape(dist2, vec![e, 1])?;
        let h_r = tape.gather_rows(feats, recv)?;
        let h_s = tape.gather_rows(feats, send)?;
        let msg_in = tape.concat(&[h_r, h_s, dist2], 1)?;
        let m = self.phi_e.forward(tape, p, msg_in)?;
        let gate = self.phi_x.forward(tape, p, m)?;
        let gate = tape.reshape(gate, vec![e])?;
        let upd = tape.scale_rows(diff, gate)?;
        let agg = tape.scatter_rows(upd, recv, n, ReduceMode::Mean)?;
        let pos = tape.add(pos, agg)?;
        let m_sum = tape.scatter_rows(m, recv, n, ReduceMode::Sum)?;
        let h_in = tape.concat(&[feats, m_sum], 1)?;
        let dh = self.phi_h.forward(tape, p, h_in)?;
        let feats = tape.add(feats, dh)?;
        Ok((pos, feats))
    }
}

/// Runs a stack of layers on `p[N, 3]` and `h[N, F]`; returns new positions.
pub fn egnn_forward(
    layers: &[EgnnLayer],
    store: &ParamStore<f64>,
    pos: &Tensor<f64>,
    feats: &Tensor<f64>,
    topo: &Topology,
) -> Result<Tensor<f64>> {
    let mut tape = Tape::inference();
    let p = store.bind(&mut tape);
    let mut x = tape.constant(pos.clone());
    let mut h = tape.constant(feats.clone());
    for layer in layers {
        (x, h) = layer.forward(&mut tape, &p, x, h, topo)?;
    }
    Ok(tape.value(x).clone())
}

/// A plane through `point` with normal `normal` (need not be unit length).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Plane {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

impl Plane {
    pub fn xy() -> Self {
        Plane {
            point: [0.0; 3],
            normal: [0.0, 0.0, 1.0],
        }
    }

    /// Orthonormal in-plane basis `(u, v)`.
    pub fn basis(&self) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let n = Vector3::from(self.normal);
        let norm = n.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidArgument("plane normal must be non-zero".into()));
        }
        let n = n / norm;
        let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let u = (helper - n * n.dot(&helper)).normalize();
        let v = n.cross(&u);
        Ok((u, v))
    }

    /// `count` random points of the plane within `[-1, 1]²` in plane
    /// coordinates, `[count, 3]`.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Tensor<f64>> {
        let (u, v) = self.basis()?;
        let origin = Vector3::from(self.point);
        let mut data = Vec::with_capacity(count * 3);
        for _ in 0..count {
            let (a, b): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let q = origin + u * a + v * b;
            data.extend_from_slice(q.as_slice());
        }
        Tensor::new(vec![count, 3], data)
    }
}

/// Largest distance of any point to the least-squares plane through
/// `points[M, 3]`. Errors on degenerate (collinear or coincident) sets.
pub fn plane_residual(points: &Tensor<f64>) -> Result<f64> {
    if points.ndim() != 2 || points.shape()[1] != 3 || points.shape()[0] < 3 {
        return Err(Error::shape("plane_residual", format!("{:?}, need at least 3 points in 3D", points.shape())));
    }
    let rows: Vec<Vector3<f64>> = points.data().chunks_exact(3).map(Vector3::from_column_slice).collect();
    let centroid = rows.iter().sum::<Vector3<f64>>() / rows.len() as f64;
    let cov: Matrix3<f64> = rows.iter().map(|r| (r - centroid) * (r - centroid).transpose()).sum();
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (smallest, middle, largest) = (order[0], order[1], order[2]);
    let top = eig.eigenvalues[largest];
    if !(top.is_finite()) || eig.eigenvalues[middle] <= 1e-12 * top.max(f64::MIN_POSITIVE) {
        return Err(Error::InvalidArgument("points are collinear or coincident; plane undefined".into()));
    }
    let normal = eig.eigenvectors.column(smallest).into_owned();
    Ok(rows.iter().map(|r| (r - centroid).dot(&normal).abs()).fold(0.0, f64::max))
}

#[derive(Clone, Debug, Serialize)]
pub struct PlanarityReport {
    pub depth: usize,
    pub plane: Plane,
    /// Output residual per random initialization.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    pub passed: bool,
}

/// Ring of `n` nodes with chords to the node three steps ahead.
pub fn planarity_graph(n: usize) -> Result<Topology> {
    let mut edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, EdgeKind::Mesh, 1.0)).collect();
    if n > 6 {
        edges.extend((0..n).map(|i| (i, (i + 3) % n, EdgeKind::Mesh, 1.0)));
    }
    Topology::new(vec![NodeKind::Deformable; n], &edges)
}

/// Runs `inits` randomly initialized EGNN stacks of the given depth on random
/// planar inputs and records the coplanarity residual of every output.
pub fn planarity_check(depth: usize, inits: usize, plane: Plane, seed: u64) -> Result<PlanarityReport> {
    const NODES: usize = 12;
    const FEATS: usize = 4;
    let topo = planarity_graph(NODES)?;
    let mut residuals = Vec::with_capacity(inits);
    for i in 0..inits {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let mut store = ParamStore::new();
        let layers = (0..depth)
            .map(|k| EgnnLayer::new(&mut store, &mut rng, &format!("egnn{k}"), FEATS, 8, 16))
            .collect::<Result<Vec<_>>>()?;
        let pos = plane.sample(NODES, &mut rng)?;
        plane_residual(&pos)?;
        let feats = Tensor::from_fn(vec![NODES, FEATS], |_| rng.gen_range(-1.0..1.0));
        let out = egnn_forward(&layers, &store, &pos, &feats, &topo)?;
        residuals.push(plane_residual(&out)?);
    }
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    Ok(PlanarityReport {
        depth,
        plane,
        passed: max_residual < PLANAR_TOLERANCE && !residuals.is_empty(),
        residuals,
        max_residual,
    })
}

/// The same experiment for a randomly initialized two-block full-trajectory
/// decoder in 3D. Returns the largest residual over predicted frames.
pub fn mango_planarity_control(plane: Plane, seed: u64) -> Result<f64> {
    const NODES: usize = 12;
    const HORIZON: usize = 4;
    let topo = planarity_graph(NODES)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let cfg = DecoderConfig {
        width: 16,
        hidden: 16,
        blocks: 2,
        conv_kernel: 3,
        time_embedding: TimeEmbedding::new(4)?,
        ..DecoderConfig::default()
    };
    let dec = MangoDecoder::new(&mut store, &mut rng, "dec", cfg, 2, 3, 1)?;
    let p0 = plane.sample(NODES, &mut rng)?;
    let (u, _) = plane.basis()?;
    let v0 = Tensor::from_fn(vec![NODES, 3], |i| u[i % 3] * 0.1);
    let x = TrialInputs {
        p0,
        v0,
        p_ext: Tensor::zeros(vec![HORIZON + 1, 0, 3]),
        v_ext: Tensor::zeros(vec![HORIZON + 1, 0, 3]),
        h: Tensor::ones(vec![NODES, 1]),
    };
    let mut tape = Tape::inference();
    let p = store.bind(&mut tape);
    let r = tape.constant(Tensor::from_fn(vec![2], |_| rng.gen_range(-1.0..1.0)));
    let y = dec.decode(&mut tape, &p, &x, r, &topo)?;
    let y = tape.value(y).clone();
    (0..HORIZON)
        .map(|t| plane_residual(&y.narrow_rows(t, 1)?.reshape(vec![NODES, 3])?))
        .try_fold(0.0, |m, r| r.map(|r| f64::max(m, r)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tilted() -> Plane {
        Plane {
            point: [0.3, -1.2, 0.7],
            normal: [0.4, -0.8, 1.1],
        }
    }

    fn single_layer(seed: u64) -> (ParamStore<f64>, Vec<EgnnLayer>) {
        let mut store = ParamStore::new();
        let layer = EgnnLayer::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), "l", 4, 8, 16).unwrap();
        (store, vec![layer])
    }

    #[test]
    fn coincident_nodes_do_not_move() {
        let (store, layers) = single_layer(1);
        let topo = planarity_graph(8).unwrap();
        let pos = Tensor::from_fn(vec![8, 3], |i| [0.5, -0.25, 2.0][i % 3]);
        let feats = Tensor::from_fn(vec![8, 4], |i| (i as f64).sin());
        let out = egnn_forward(&layers, &store, &pos, &feats, &topo).unwrap();
        assert_eq!(out, pos);
    }

    #[test]
    fn xy_plane_maps_to_itself_exactly() {
        let (store, layers) = single_layer(2);
        let topo = planarity_graph(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pos = Plane::xy().sample(10, &mut rng).unwrap();
        let feats = Tensor::from_fn(vec![10, 4], |_| rng.gen_range(-1.0..1.0));
        let out = egnn_forward(&layers, &store, &pos, &feats, &topo).unwrap();
        assert!(out.data().chunks_exact(3).all(|r| r[2] == 0.0));
        assert_ne!(out, pos);
    }

    #[test]
    fn isolated_node_is_unchanged() {
        let (store, layers) = single_layer(3);
        let topo = Topology::new(vec![NodeKind::Deformable], &[]).unwrap();
        let pos = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let feats = Tensor::ones(vec![1, 4]);
        assert_eq!(egnn_forward(&layers, &store, &pos, &feats, &topo).unwrap(), pos);
    }

    #[test]
    fn rotating_inputs_rotates_outputs() {
        let (store, layers) = single_layer(4);
        let topo = planarity_graph(9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pos = Tensor::from_fn(vec![9, 3], |_| rng.gen_range(-1.0..1.0));
        let feats = Tensor::from_fn(vec![9, 4], |_| rng.gen_range(-1.0..1.0));
        let rot = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let apply = |t: &Tensor<f64>| {
            let data: Vec<f64> = t
                .data()
                .chunks_exact(3)
                .flat_map(|r| (rot * Vector3::from_column_slice(r)).as_slice().to_vec())
                .collect();
            Tensor::new(vec![9, 3], data).unwrap()
        };
        let a = apply(&egnn_forward(&layers, &store, &pos, &feats, &topo).unwrap());
        let b = egnn_forward(&layers, &store, &apply(&pos), &feats, &topo).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_fit_recovers_known_offsets() {
        let pts = Tensor::new(
            vec![4, 3],
            vec![0.0, 0.0, 0.1, 1.0, 0.0, -0.1, 0.0, 1.0, -0.1, 1.0, 1.0, 0.1],
        )
        .unwrap();
        assert!((plane_residual(&pts).unwrap() - 0.1).abs() < 1e-12);
        let line = Tensor::from_fn(vec![5, 3], |i| (i / 3) as f64);
        assert!(plane_residual(&line).is_err());
    }

    #[test]
    fn xy_plane_check_passes_tightly() {
        for depth in 1..=3 {
            let report = planarity_check(depth, 5, Plane::xy(), 10).unwrap();
            assert!(report.max_residual < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn tilted_plane_check_passes() {
        let report = planarity_check(3, 5, tilted(), 20).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn decoder_control_leaves_the_plane() {
        let r = mango_planarity_control(tilted(), 5).unwrap();
        assert!(r > 1e-3, "residual {r}");
    }
}
