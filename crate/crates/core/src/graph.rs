//! Fixed-topology graphs and the message-passing step.
//!
//! Node ids `0..N` are deformable (predicted) nodes and `N..N+N_ext` are
//! external nodes whose trajectories are given. Every undirected edge is
//! stored as two directed edges `(sender, receiver)`; messages are aggregated
//! at the receiver.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Mlp, MlpConfig, ParamStore};
use crate::tensor::{ReduceMode, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Deformable,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    /// Edge between nodes of the same object.
    Mesh,
    /// Edge linking an external object to the deformable body.
    World,
}

impl EdgeKind {
    pub const COUNT: usize = 2;

    fn one_hot(self) -> [f64; 2] {
        match self {
            EdgeKind::Mesh => [1.0, 0.0],
            EdgeKind::World => [0.0, 1.0],
        }
    }
}

/// Width of the static per-edge features: rest length plus edge-kind one-hot.
pub const EDGE_STATIC_DIM: usize = 1 + EdgeKind::COUNT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    node_kinds: Vec<NodeKind>,
    senders: Arc<[usize]>,
    receivers: Arc<[usize]>,
    edge_kinds: Vec<EdgeKind>,
    rest_lengths: Vec<f64>,
}

impl Topology {
    /// Builds a topology from undirected edges `(a, b, kind, rest_length)`.
    /// Deformable nodes must precede external ones.
    pub fn new(node_kinds: Vec<NodeKind>, undirected: &[(usize, usize, EdgeKind, f64)]) -> Result<Self> {
        let n = node_kinds.len();
        let first_ext = node_kinds
            .iter()
            .position(|k| *k == NodeKind::External)
            .unwrap_or(n);
        if node_kinds[first_ext..].iter().any(|k| *k != NodeKind::External) {
            return Err(Error::Config("deformable nodes must precede external nodes".into()));
        }
        let mut senders = Vec::with_capacity(2 * undirected.len());
        let mut receivers = Vec::with_capacity(2 * undirected.len());
        let mut edge_kinds = Vec::with_capacity(2 * undirected.len());
        let mut rest_lengths = Vec::with_capacity(2 * undirected.len());
        for &(a, b, kind, rest) in undirected {
            if a >= n || b >= n || a == b {
                return Err(Error::Config(format!("invalid edge ({a}, {b}) for {n} nodes")));
            }
            for (s, r) in [(a, b), (b, a)] {
                senders.push(s);
                receivers.push(r);
                edge_kinds.push(kind);
                rest_lengths.push(rest);
            }
        }
        let topo = Topology {
            node_kinds,
            senders: senders.into(),
            receivers: receivers.into(),
            edge_kinds,
            rest_lengths,
        };
        let isolated = topo.isolated_nodes();
        if !isolated.is_empty() {
            log::warn!("topology has {} isolated nodes: {:?}", isolated.len(), isolated);
        }
        Ok(topo)
    }

    pub fn num_nodes(&self) -> usize {
        self.node_kinds.len()
    }

    pub fn num_deformable(&self) -> usize {
        self.node_kinds.iter().filter(|k| **k == NodeKind::Deformable).count()
    }

    pub fn num_external(&self) -> usize {
        self.num_nodes() - self.num_deformable()
    }

    pub fn num_edges(&self) -> usize {
        self.senders.len()
    }

    pub fn node_kinds(&self) -> &[NodeKind] {
        &self.node_kinds
    }

    pub fn senders(&self) -> &Arc<[usize]> {
        &self.senders
    }

    pub fn receivers(&self) -> &Arc<[usize]> {
        &self.receivers
    }

    pub fn edge_kinds(&self) -> &[EdgeKind] {
        &self.edge_kinds
    }

    pub fn rest_lengths(&self) -> &[f64] {
        &self.rest_lengths
    }

    /// Index of the reverse of each directed edge.
    pub fn reverse_edges(&self) -> Vec<usize> {
        // edges are pushed in (a→b, b→a) pairs
        (0..self.num_edges()).map(|e| e ^ 1).collect()
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_nodes()];
        for &r in self.receivers.iter() {
            d[r] += 1;
        }
        d
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        self.in_degrees()
            .iter()
            .enumerate()
            .filter(|(_, d)| **d == 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Static features `[rest_length, one-hot kind]` per directed edge.
    pub fn edge_features<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<f64> = self
            .rest_lengths
            .iter()
            .zip(&self.edge_kinds)
            .flat_map(|(&l, k)| {
                let h = k.one_hot();
                [l, h[0], h[1]]
            })
            .collect();
        Tensor::from_f64(vec![self.num_edges(), EDGE_STATIC_DIM], &data).expect("edge feature shape")
    }

    /// Edge index for `copies` disjoint replicas of this graph, laid out
    /// replica-major (replica `c` owns nodes `c*N..(c+1)*N`).
    pub fn batched(&self, copies: usize) -> EdgeIndex {
        let n = self.num_nodes();
        let shift = |idx: &[usize]| -> Arc<[usize]> {
            (0..copies)
                .flat_map(|c| idx.iter().map(move |&i| c * n + i))
                .collect::<Vec<_>>()
                .into()
        };
        EdgeIndex {
            senders: shift(&self.senders),
            receivers: shift(&self.receivers),
            num_nodes: n * copies,
        }
    }

    /// Relabels nodes: node `i` becomes `perm[i]`. Edge order is kept.
    /// Used to test permutation equivariance; `perm` must keep deformable
    /// nodes ahead of external ones.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        if perm.len() != n {
            return Err(Error::InvalidArgument("permutation length".into()));
        }
        let mut kinds = vec![NodeKind::Deformable; n];
        for (i, &p) in perm.iter().enumerate() {
            kinds[p] = self.node_kinds[i];
        }
        if kinds != self.node_kinds {
            return Err(Error::InvalidArgument("permutation must preserve node-kind blocks".into()));
        }
        Ok(Topology {
            node_kinds: kinds,
            senders: self.senders.iter().map(|&s| perm[s]).collect::<Vec<_>>().into(),
            receivers: self.receivers.iter().map(|&r| perm[r]).collect::<Vec<_>>().into(),
            edge_kinds: self.edge_kinds.clone(),
            rest_lengths: self.rest_lengths.clone(),
        })
    }
}

/// Flat sender/receiver indices for (possibly replicated) message passing.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub senders: Arc<[usize]>,
    pub receivers: Arc<[usize]>,
    pub num_nodes: usize,
}

impl From<&Topology> for EdgeIndex {
    fn from(t: &Topology) -> Self {
        t.batched(1)
    }
}

/// Ring of `n` deformable mesh nodes plus `n_ext` external nodes, each
/// linked by world edges to two deformable nodes. Used for toy-size checks.
pub fn ring_topology(n: usize, n_ext: usize) -> Result<Topology> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("a ring needs at least 3 nodes, got {n}")));
    }
    let mut kinds = vec![NodeKind::Deformable; n];
    kinds.extend(vec![NodeKind::External; n_ext]);
    let mut edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, EdgeKind::Mesh, 0.1)).collect();
    for j in 0..n_ext {
        edges.push((n + j, j % n, EdgeKind::World, 0.2));
        edges.push((n + j, (j + 2) % n, EdgeKind::World, 0.2));
    }
    Topology::new(kinds, &edges)
}

/// `p[w] - p[v]` for every directed edge `(v, w)` of `p[N_total, d]`.
pub fn relative_edge_positions<T: Scalar>(p: &Tensor<T>, topo: &Topology) -> Result<Tensor<T>> {
    if p.ndim() != 2 || p.shape()[0] != topo.num_nodes() {
        return Err(Error::shape(
            "relative_edge_positions",
            format!("positions {:?} for {} nodes", p.shape(), topo.num_nodes()),
        ));
    }
    let d = p.shape()[1];
    let pd = p.data();
    let mut out = Vec::with_capacity(topo.num_edges() * d);
    for (&s, &r) in topo.senders.iter().zip(topo.receivers.iter()) {
        for k in 0..d {
            out.push(pd[r * d + k] - pd[s * d + k]);
        }
    }
    Tensor::new(vec![topo.num_edges(), d], out)
}

/// Latent node and edge features, flattened over any leading replica axis.
#[derive(Clone, Copy, Debug)]
pub struct GraphState {
    /// `[num_nodes, width]`
    pub nodes: Var,
    /// `[num_edges, width]`
    pub edges: Var,
}

/// One message-passing step with residual edge and node updates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MessagePassing {
    pub edge_mlp: Mlp,
    pub node_mlp: Mlp,
    pub aggregation: ReduceMode,
    pub width: usize,
}

impl MessagePassing {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        width: usize,
        hidden: usize,
        layer_norm: bool,
        aggregation: ReduceMode,
    ) -> Result<Self> {
        let edge_mlp = Mlp::new(
            store,
            rng,
            &format!("{name}.edge"),
            MlpConfig::new([3 * width, hidden, width]).with_layer_norm(layer_norm),
        )?;
        let node_mlp = Mlp::new(
            store,
            rng,
            &format!("{name}.node"),
            MlpConfig::new([2 * width, hidden, width]).with_layer_norm(layer_norm),
        )?;
        Ok(MessagePassing {
            edge_mlp,
            node_mlp,
            aggregation,
            width,
        })
    }

    /// Applies
    /// `m_e ← m_e + f_E(m_e, m_v, m_w)` for `e = (v, w)`, then
    /// `m_w ← m_w + f_V(m_w, ⊕ incoming m_e)`.
    ///
    /// The first edge-MLP layer is evaluated as
    /// `m_e·W_e + (m·W_s)[v] + (m·W_r)[w]`, which equals the layer applied to
    /// the concatenation but projects nodes before gathering.
    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, state: GraphState, index: &EdgeIndex) -> Result<GraphState> {
        let c = self.width;
        let (nodes_shape, edges_shape) = (tape.shape(state.nodes).to_vec(), tape.shape(state.edges).to_vec());
        if nodes_shape != [index.num_nodes, c] || edges_shape != [index.senders.len(), c] {
            return Err(Error::shape(
                "message_passing",
                format!("nodes {nodes_shape:?}, edges {edges_shape:?} for width {c}"),
            ));
        }
        let first = self.edge_mlp.first_layer();
        let w = p[first.w];
        let w_edge = tape.narrow(w, 0, 0, c)?;
        let w_send = tape.narrow(w, 0, c, c)?;
        let w_recv = tape.narrow(w, 0, 2 * c, c)?;
        let from_edge = tape.linear(state.edges, w_edge, first.b.map(|b| p[b]))?;
        let sent = tape.linear(state.nodes, w_send, None)?;
        let recv = tape.linear(state.nodes, w_recv, None)?;
        let sent = tape.gather_rows(sent, &index.senders)?;
        let recv = tape.gather_rows(recv, &index.receivers)?;
        let pre = tape.add(from_edge, sent)?;
        let pre = tape.add(pre, recv)?;
        let edge_delta = self.edge_mlp.forward_tail(tape, p, pre)?;
        let edges = tape.add(state.edges, edge_delta)?;

        let agg = tape.scatter_rows(edges, &index.receivers, index.num_nodes, self.aggregation)?;
        let node_in = tape.concat(&[state.nodes, agg], 1)?;
        let node_delta = self.node_mlp.forward(tape, p, node_in)?;
        let nodes = tape.add(state.nodes, node_delta)?;
        Ok(GraphState { nodes, edges })
    }
}
