//! Full-trajectory decoder: every predicted frame is a copy of the graph,
//! message passing runs on all copies at once with shared weights, and a
//! residual temporal convolution mixes each node's features across frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeIndex, GraphState, MessagePassing, Topology, EDGE_STATIC_DIM};
use crate::nn::{Bound, Linear, Mlp, MlpConfig, ParamStore, ResidualConv1d, TimeEmbedding};
use crate::tensor::{ReduceMode, Scalar, Tape, Tensor, Var};
use crate::trial::{TrialDims, TrialInputs};

/// Fixed multipliers that bring raw features and outputs to unit order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureScales {
    /// Divides rest lengths and relative edge positions.
    pub length: f64,
    /// Divides velocities.
    pub velocity: f64,
    /// Multiplies the displacement head's output.
    pub output: f64,
}

impl Default for FeatureScales {
    fn default() -> Self {
        FeatureScales {
            length: 1.0,
            velocity: 1.0,
            output: 1.0,
        }
    }
}

impl FeatureScales {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("length", self.length), ("velocity", self.velocity), ("output", self.output)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} scale must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Static edge features with the rest-length column scaled.
    pub(crate) fn edge_features<T: Scalar>(&self, topo: &Topology) -> Tensor<T> {
        let mut stat = topo.edge_features::<T>();
        if self.length != 1.0 {
            let inv = T::from_f64_lossy(1.0 / self.length);
            for row in stat.data_mut().chunks_exact_mut(EDGE_STATIC_DIM) {
                row[0] *= inv;
            }
        }
        stat
    }

    /// Divides relative positions by the length scale in place.
    pub(crate) fn scale_lengths<T: Scalar>(&self, rel: &mut Tensor<T>) {
        if self.length != 1.0 {
            let inv = T::from_f64_lossy(1.0 / self.length);
            for v in rel.data_mut() {
                *v *= inv;
            }
        }
    }

    pub(crate) fn velocity_factor<T: Scalar>(&self) -> T {
        T::from_f64_lossy(1.0 / self.velocity)
    }

    /// Multiplies a head output by the output scale.
    pub(crate) fn scale_output<T: Scalar>(&self, tape: &mut Tape<T>, y: Var) -> Var {
        if self.output == 1.0 {
            y
        } else {
            tape.scale(y, self.output)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub width: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub conv_kernel: usize,
    pub time_embedding: TimeEmbedding,
    pub layer_norm: bool,
    pub aggregation: ReduceMode,
    #[serde(default)]
    pub scales: FeatureScales,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            width: 128,
            hidden: 128,
            blocks: 15,
            conv_kernel: 7,
            time_embedding: TimeEmbedding::default(),
            layer_norm: true,
            aggregation: ReduceMode::Mean,
            scales: FeatureScales::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MangoBlock {
    pub mp: MessagePassing,
    pub conv: ResidualConv1d,
}

/// Latent features of all frames, flattened frame-major:
/// row `t·N_total + v` holds node `v` at frame `t + 1`.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub graph: GraphState,
    pub horizon: usize,
    pub n_total: usize,
    pub index: EdgeIndex,
}

/// Pre-projection inputs for frames `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderFeatures<T: Scalar> {
    /// `[T, N_total, d_h + d + d_te]`: `[h, v_t, TE(t)]`
    pub nodes: Tensor<T>,
    /// `[T, E, 3 + d + d_te]`: `[rest length, kind one-hot, p_rel, TE(t)]`
    pub edges: Tensor<T>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MangoDecoder {
    pub config: DecoderConfig,
    pub cond_dim: usize,
    pub d: usize,
    pub d_h: usize,
    pub node_in: Linear,
    pub edge_in: Linear,
    pub blocks: Vec<MangoBlock>,
    pub head: Mlp,
}

fn check_topology(dims: &TrialDims, topo: &Topology) -> Result<()> {
    if dims.n != topo.num_deformable() || dims.n_ext != topo.num_external() {
        return Err(Error::shape(
            "decoder",
            format!(
                "trial has {}+{} nodes, topology {}+{}",
                dims.n,
                dims.n_ext,
                topo.num_deformable(),
                topo.num_external()
            ),
        ));
    }
    Ok(())
}

/// Node positions at frame `t` as the decoder sees them: deformable nodes
/// keep `p0`, external nodes follow `p_ext[t]`. `[N_total, d]`
pub fn frame_positions<T: Scalar>(x: &TrialInputs<T>, t: usize) -> Result<Tensor<T>> {
    let ext = x.p_ext.narrow_rows(t, 1)?;
    let n_ext = ext.shape()[1];
    let ext = ext.reshape(vec![n_ext, x.p0.last_dim()])?;
    Tensor::concat(&[x.p0.clone(), ext], 0)
}

/// Builds the un-projected node and edge features for every frame.
pub fn decoder_features<T: Scalar>(
    x: &TrialInputs<T>,
    topo: &Topology,
    te: &TimeEmbedding,
    scales: &FeatureScales,
) -> Result<DecoderFeatures<T>> {
    let dims = x.dims()?;
    check_topology(&dims, topo)?;
    let (n, d, d_h, horizon) = (dims.n, dims.d, dims.d_h, dims.horizon);
    let nt = dims.n_total();
    let e = topo.num_edges();
    let node_w = d_h + d + te.dim;
    let edge_w = EDGE_STATIC_DIM + d + te.dim;
    let mut nodes = Vec::with_capacity(horizon * nt * node_w);
    let mut edges = Vec::with_capacity(horizon * e * edge_w);
    let stat = scales.edge_features::<T>(topo);
    let inv_v: T = scales.velocity_factor();
    for t in 1..=horizon {
        let emb: Vec<T> = te.embed_f64(t, horizon)?.into_iter().map(T::from_f64_lossy).collect();
        for v in 0..nt {
            nodes.extend_from_slice(&x.h.data()[v * d_h..(v + 1) * d_h]);
            let vel = if v < n {
                &x.v0.data()[v * d..(v + 1) * d]
            } else {
                let off = (t * dims.n_ext + v - n) * d;
                &x.v_ext.data()[off..off + d]
            };
            nodes.extend(vel.iter().map(|&c| c * inv_v));
            nodes.extend_from_slice(&emb);
        }
        let pos = frame_positions(x, t)?;
        let mut rel = crate::graph::relative_edge_positions(&pos, topo)?;
        scales.scale_lengths(&mut rel);
        for k in 0..e {
            edges.extend_from_slice(&stat.data()[k * EDGE_STATIC_DIM..(k + 1) * EDGE_STATIC_DIM]);
            edges.extend_from_slice(&rel.data()[k * d..(k + 1) * d]);
            edges.extend_from_slice(&emb);
        }
    }
    Ok(DecoderFeatures {
        nodes: Tensor::new(vec![horizon, nt, node_w], nodes)?,
        edges: Tensor::new(vec![horizon, e, edge_w], edges)?,
    })
}

/// `lin([r, f])` for a vector `r` shared by every row of `f`, computed as
/// `r·W_r + f·W_f + b` so `r` is never tiled.
pub(crate) fn project_conditioned<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    lin: &Linear,
    r: Var,
    feats: Var,
) -> Result<Var> {
    let cond = tape.shape(r).iter().product::<usize>();
    let f_w = tape.shape(feats).last().copied().unwrap_or(0);
    if cond + f_w != lin.in_dim {
        return Err(Error::shape(
            "project_conditioned",
            format!("{cond} + {f_w} inputs for a layer of width {}", lin.in_dim),
        ));
    }
    let w = p[lin.w];
    let w_r = tape.narrow(w, 0, 0, cond)?;
    let w_f = tape.narrow(w, 0, cond, f_w)?;
    let r_row = tape.reshape(r, vec![1, cond])?;
    let r_proj = tape.matmul(r_row, w_r)?;
    let r_proj = tape.reshape(r_proj, vec![lin.out_dim])?;
    let out = tape.linear(feats, w_f, lin.b.map(|b| p[b]))?;
    tape.add_row(out, r_proj)
}

impl MangoDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        config: DecoderConfig,
        cond_dim: usize,
        d: usize,
        d_h: usize,
    ) -> Result<Self> {
        if config.blocks == 0 {
            return Err(Error::Config("decoder needs at least one block".into()));
        }
        let c = config.width;
        let te = config.time_embedding.dim;
        let node_in = Linear::new(store, rng, &format!("{name}.node_in"), cond_dim + d_h + d + te, c, true);
        let edge_in = Linear::new(store, rng, &format!("{name}.edge_in"), EDGE_STATIC_DIM + d + te, c, true);
        let blocks = (0..config.blocks)
            .map(|k| {
                Ok(MangoBlock {
                    mp: MessagePassing::new(
                        store,
                        rng,
                        &format!("{name}.block{k}.mp"),
                        c,
                        config.hidden,
                        config.layer_norm,
                        config.aggregation,
                    )?,
                    conv: ResidualConv1d::new(store, rng, &format!("{name}.block{k}.conv"), c, config.conv_kernel)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Mlp::new(store, rng, &format!("{name}.head"), MlpConfig::new([c, config.hidden, d]))?;
        Ok(MangoDecoder {
            config,
            cond_dim,
            d,
            d_h,
            node_in,
            edge_in,
            blocks,
            head,
        })
    }

    /// Projects `[r, h, v_t, TE(t)]` and `[e_e, p_rel, TE(t)]` to the latent
    /// width. `r` is `[cond_dim]` and shared by every node and frame.
    pub fn build_inputs<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: &TrialInputs<T>,
        r: Var,
        topo: &Topology,
    ) -> Result<DecoderState> {
        if tape.shape(r).iter().product::<usize>() != self.cond_dim {
            return Err(Error::shape(
                "build_decoder_inputs",
                format!("conditioning {:?}, expected {}", tape.shape(r), self.cond_dim),
            ));
        }
        let feats = decoder_features(x, topo, &self.config.time_embedding, &self.config.scales)?;
        let (horizon, nt) = (feats.nodes.shape()[0], feats.nodes.shape()[1]);
        if horizon == 0 {
            return Err(Error::InvalidArgument("decoder horizon must be at least 1".into()));
        }
        let node_w = feats.nodes.shape()[2];
        let edge_w = feats.edges.shape()[2];
        let e = feats.edges.shape()[1];
        let node_feats = tape.constant(feats.nodes.reshape(vec![horizon * nt, node_w])?);
        let edge_feats = tape.constant(feats.edges.reshape(vec![horizon * e, edge_w])?);

        let nodes = project_conditioned(tape, p, &self.node_in, r, node_feats)?;
        let edges = self.edge_in.forward(tape, p, edge_feats)?;
        Ok(DecoderState {
            graph: GraphState { nodes, edges },
            horizon,
            n_total: nt,
            index: topo.batched(horizon),
        })
    }

    /// Message passing on every frame, then a residual temporal conv per node.
    pub fn block<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, k: usize, state: DecoderState) -> Result<DecoderState> {
        let block = &self.blocks[k];
        let graph = block.mp.step(tape, p, state.graph, &state.index)?;
        let c = self.config.width;
        let seq = tape.reshape(graph.nodes, vec![state.horizon, state.n_total, c])?;
        let seq = block.conv.forward(tape, p, seq)?;
        let nodes = tape.reshape(seq, vec![state.horizon * state.n_total, c])?;
        Ok(DecoderState {
            graph: GraphState { nodes, edges: graph.edges },
            ..state
        })
    }

    /// `p0 + f(m_v)` for the deformable nodes of every frame. `[T, N, d]`
    pub fn displacement_head<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        state: &DecoderState,
        p0: &Tensor<T>,
    ) -> Result<Var> {
        let n = p0.shape()[0];
        let seq = tape.reshape(state.graph.nodes, vec![state.horizon, state.n_total, self.config.width])?;
        let deformable = tape.narrow(seq, 1, 0, n)?;
        let disp = self.head.forward(tape, p, deformable)?;
        let disp = self.config.scales.scale_output(tape, disp);
        let base = Tensor::stack(&vec![p0.clone(); state.horizon])?;
        let base = tape.constant(base);
        tape.add(disp, base)
    }

    /// Predicts positions of all deformable nodes for `t = 1..=T` in one pass.
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: &TrialInputs<T>,
        r: Var,
        topo: &Topology,
    ) -> Result<Var> {
        let mut state = self.build_inputs(tape, p, x, r, topo)?;
        for k in 0..self.blocks.len() {
            state = self.block(tape, p, k, state)?;
        }
        self.displacement_head(tape, p, &state, &x.p0)
    }
}
