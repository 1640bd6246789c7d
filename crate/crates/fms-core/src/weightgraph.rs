//! Neuron-level graph encoding of weight checkpoints and the
//! permutation-invariant graph-metanetwork (GMN) that turns a graph into a
//! fixed-size feature vector.
//!
//! A checkpoint becomes a directed graph with one node per input feature,
//! hidden neuron/channel, and output unit. Node features are
//! `[bias, normalized depth, kind one-hot]`; each dense weight contributes a
//! directed edge whose feature is the weight value, while conv kernels are
//! compressed to one `(in-channel, out-channel)` edge carrying the kernel
//! mean. Relabeling hidden units consistently therefore yields an isomorphic
//! graph, and the mean readout over nodes makes the encoding invariant to
//! those relabelings.
//!
//! Encoding runs over stacked node matrices ([`GraphBatch`]) so that many
//! graphs share one pass of dense linear algebra; a single graph is just a
//! batch of one.

use std::sync::Arc;

use rand::Rng;

use crate::checkpoint::{CheckpointedWeights, LayerKind};
use crate::error::{FmsError, Result};
use crate::tape::{EdgeSet, Tape, Var};
use crate::tensor::Tensor;

/// Negative slope of every leaky rectifier in the surrogate stack.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Raw node feature width: bias, normalized layer depth, kind one-hot.
pub const NODE_FEATURE_DIM: usize = 5;

/// Message-passing widths: embedding output, then the three layer outputs.
pub const GMN_WIDTHS: [usize; 4] = [64, 64, 128, 256];

/// Length of the encoded feature vector ξ.
pub const GMN_OUTPUT_DIM: usize = GMN_WIDTHS[3];

/// Neuron-level graph of one checkpoint.
#[derive(Debug, Clone)]
pub struct WeightGraph {
    pub n_nodes: usize,
    /// `[n_nodes × NODE_FEATURE_DIM]`, row-major.
    pub node_features: Vec<f64>,
    pub edges: EdgeSet,
}

/// Convert a checkpoint into its neuron-level graph.
pub fn build_graph(ckpt: &CheckpointedWeights) -> Result<WeightGraph> {
    ckpt.validate()?;
    let arch = &ckpt.arch;
    let levels = arch.layers.len() + 1;
    let mut level_offsets = Vec::with_capacity(levels);
    let mut n_nodes = 0usize;
    level_offsets.push(0);
    n_nodes += arch.layers[0].input_groups();
    for spec in &arch.layers {
        level_offsets.push(n_nodes);
        n_nodes += spec.fan_out;
    }

    let mut features = vec![0.0; n_nodes * NODE_FEATURE_DIM];
    let depth_denom = (levels - 1).max(1) as f64;
    let mut set_node = |idx: usize, bias: f64, level: usize| {
        let kind = if level == 0 {
            0 // input
        } else if level == levels - 1 {
            2 // output
        } else {
            1 // hidden
        };
        let row = &mut features[idx * NODE_FEATURE_DIM..(idx + 1) * NODE_FEATURE_DIM];
        row[0] = bias;
        row[1] = level as f64 / depth_denom;
        row[2 + kind] = 1.0;
    };

    for i in 0..arch.layers[0].input_groups() {
        set_node(i, 0.0, 0);
    }
    for (l, (spec, lw)) in arch.layers.iter().zip(&ckpt.layers).enumerate() {
        let offset = level_offsets[l + 1];
        for u in 0..spec.fan_out {
            set_node(offset + u, lw.bias[u] as f64, l + 1);
        }
    }

    let mut edges = EdgeSet::default();
    for (l, (spec, lw)) in arch.layers.iter().zip(&ckpt.layers).enumerate() {
        let src_base = level_offsets[l] as u32;
        let dst_base = level_offsets[l + 1] as u32;
        let groups = spec.input_groups();
        match spec.kind {
            LayerKind::Dense => {
                let group_size = spec.fan_in / groups;
                for out in 0..spec.fan_out {
                    let row = &lw.weights[out * spec.fan_in..(out + 1) * spec.fan_in];
                    for g in 0..groups {
                        let chunk = &row[g * group_size..(g + 1) * group_size];
                        let mean =
                            chunk.iter().map(|&v| v as f64).sum::<f64>() / group_size as f64;
                        edges.src.push(src_base + g as u32);
                        edges.dst.push(dst_base + out as u32);
                        edges.weight.push(mean);
                    }
                }
            }
            LayerKind::Conv2d => {
                let k = spec.kernel.unwrap();
                let ksq = k * k;
                for out in 0..spec.fan_out {
                    for cin in 0..spec.fan_in {
                        let base = (out * spec.fan_in + cin) * ksq;
                        let mean = lw.weights[base..base + ksq]
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>()
                            / ksq as f64;
                        edges.src.push(src_base + cin as u32);
                        edges.dst.push(dst_base + out as u32);
                        edges.weight.push(mean);
                    }
                }
            }
        }
    }

    Ok(WeightGraph {
        n_nodes,
        node_features: features,
        edges,
    })
}

/// One message-passing layer: two parallel transform kernels — one applied
/// to the node's own state, one to the edge-gated neighbor aggregate — plus
/// a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GmnLayer {
    pub w_self: Tensor,
    pub w_neighbor: Tensor,
    pub bias: Tensor,
}

/// Parameters of the graph metanetwork.
#[derive(Debug, Clone, PartialEq)]
pub struct GmnParams {
    /// Input embedding `[NODE_FEATURE_DIM, 64]`.
    pub embed: Tensor,
    pub layers: Vec<GmnLayer>,
}

fn uniform_fan_in(rng: &mut impl Rng, fan_in: usize, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data)
}

impl GmnParams {
    pub fn init(rng: &mut impl Rng) -> Self {
        let embed = uniform_fan_in(rng, NODE_FEATURE_DIM, NODE_FEATURE_DIM, GMN_WIDTHS[0]);
        let layers = (0..3)
            .map(|l| {
                let w_in = GMN_WIDTHS[l];
                let w_out = GMN_WIDTHS[l + 1];
                GmnLayer {
                    w_self: uniform_fan_in(rng, 2 * w_in, w_in, w_out),
                    w_neighbor: uniform_fan_in(rng, 2 * w_in, w_in, w_out),
                    bias: Tensor::zeros(vec![w_out]),
                }
            })
            .collect();
        GmnParams { embed, layers }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed];
        for l in &self.layers {
            out.push(&l.w_self);
            out.push(&l.w_neighbor);
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.push(&mut l.w_self);
            out.push(&mut l.w_neighbor);
            out.push(&mut l.bias);
        }
        out
    }

    /// Rebuild from a flat tensor list in [`tensors`](Self::tensors) order.
    pub fn from_tensors(tensors: &[Tensor]) -> Self {
        assert_eq!(tensors.len(), 10, "expected embed + 3 x (w_self, w_neighbor, bias)");
        GmnParams {
            embed: tensors[0].clone(),
            layers: (0..3)
                .map(|l| GmnLayer {
                    w_self: tensors[1 + 3 * l].clone(),
                    w_neighbor: tensors[2 + 3 * l].clone(),
                    bias: tensors[3 + 3 * l].clone(),
                })
                .collect(),
        }
    }

    pub fn tensor_names() -> Vec<String> {
        let mut out = vec!["gmn.embed".to_string()];
        for l in 0..3 {
            out.push(format!("gmn.layer{l}.w_self"));
            out.push(format!("gmn.layer{l}.w_neighbor"));
            out.push(format!("gmn.layer{l}.bias"));
        }
        out
    }
}

/// Several graphs stacked into one node matrix with global edge ids and
/// per-graph row segments.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub node_features: Tensor,
    pub edges: Arc<EdgeSet>,
    pub segments: Arc<Vec<(usize, usize)>>,
}

impl GraphBatch {
    pub fn from_graphs<'a>(graphs: impl IntoIterator<Item = &'a WeightGraph>) -> Result<Self> {
        let mut features = Vec::new();
        let mut edges = EdgeSet::default();
        let mut segments = Vec::new();
        let mut offset = 0usize;
        for g in graphs {
            if g.n_nodes == 0 {
                return Err(FmsError::InvalidArgument(
                    "cannot encode a graph with zero nodes".into(),
                ));
            }
            features.extend_from_slice(&g.node_features);
            for e in 0..g.edges.len() {
                edges.src.push(g.edges.src[e] + offset as u32);
                edges.dst.push(g.edges.dst[e] + offset as u32);
                edges.weight.push(g.edges.weight[e]);
            }
            segments.push((offset, offset + g.n_nodes));
            offset += g.n_nodes;
        }
        if segments.is_empty() {
            return Err(FmsError::InvalidArgument("empty graph batch".into()));
        }
        Ok(GraphBatch {
            node_features: Tensor::matrix(offset, NODE_FEATURE_DIM, features),
            edges: Arc::new(edges),
            segments: Arc::new(segments),
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Tape handles for registered GMN parameters.
pub struct GmnVars {
    pub embed: Var,
    pub layers: Vec<(Var, Var, Var)>,
}

/// Register the parameters on a tape, differentiably or as constants.
pub fn register_gmn(tape: &mut Tape, params: &GmnParams, trainable: bool) -> GmnVars {
    let mut reg = |t: &Tensor| {
        if trainable {
            tape.param(t.clone())
        } else {
            tape.leaf(t.clone())
        }
    };
    GmnVars {
        embed: reg(&params.embed),
        layers: params
            .layers
            .iter()
            .map(|l| (reg(&l.w_self), reg(&l.w_neighbor), reg(&l.bias)))
            .collect(),
    }
}

/// Run the message-passing stack over a batch: embed, three rounds of
/// `σ(W_self·h_v + W_nbr·(Σ_{u→v} w_e·h_u) + b)`, then the per-graph mean
/// readout. Returns a `[n_graphs, 256]` variable.
pub fn gmn_batch_forward(tape: &mut Tape, vars: &GmnVars, batch: &GraphBatch) -> Result<Var> {
    let feats = tape.leaf(batch.node_features.clone());
    let mut h = tape.matmul(feats, vars.embed)?;
    for (w_self, w_nbr, b) in &vars.layers {
        let msg = tape.edge_gather(h, Arc::clone(&batch.edges))?;
        let pre = tape.dual_matmul(h, *w_self, msg, *w_nbr)?;
        let pre = tape.affine(pre, *b)?;
        h = tape.leaky_relu(pre, LEAKY_SLOPE);
    }
    tape.segment_mean(h, Arc::clone(&batch.segments))
}

/// Encode one graph into its 256-dimensional feature vector ξ.
pub fn gmn_encode(graph: &WeightGraph, params: &GmnParams) -> Result<Vec<f64>> {
    let batch = GraphBatch::from_graphs([graph])?;
    let mut tape = Tape::new();
    let vars = register_gmn(&mut tape, params, false);
    let out = gmn_batch_forward(&mut tape, &vars, &batch)?;
    Ok(tape.value(out).data().to_vec())
}

/// Consistently relabel the hidden units at the output of `boundary_layer`:
/// rows of that layer's weights and bias, and the matching input side of the
/// next layer. `perm[i]` is the old index of new unit `i`.
pub fn permute_hidden(
    ckpt: &CheckpointedWeights,
    boundary_layer: usize,
    perm: &[usize],
) -> Result<CheckpointedWeights> {
    if boundary_layer + 1 >= ckpt.arch.layers.len() {
        return Err(FmsError::InvalidArgument(
            "can only permute hidden boundaries, not the output layer".into(),
        ));
    }
    let spec = &ckpt.arch.layers[boundary_layer];
    if perm.len() != spec.fan_out {
        return Err(FmsError::InvalidArgument(format!(
            "permutation length {} vs layer fan-out {}",
            perm.len(),
            spec.fan_out
        )));
    }
    let mut out = ckpt.clone();

    // Output side of the boundary layer: move whole output-unit blocks.
    {
        let lw = &ckpt.layers[boundary_layer];
        let block = lw.weights.len() / spec.fan_out;
        let dst = &mut out.layers[boundary_layer];
        for (new_i, &old_i) in perm.iter().enumerate() {
            dst.weights[new_i * block..(new_i + 1) * block]
                .copy_from_slice(&lw.weights[old_i * block..(old_i + 1) * block]);
            dst.bias[new_i] = lw.bias[old_i];
        }
    }

    // Input side of the next layer.
    let next_spec = &ckpt.arch.layers[boundary_layer + 1];
    let next = &ckpt.layers[boundary_layer + 1];
    let dst = &mut out.layers[boundary_layer + 1];
    match next_spec.kind {
        LayerKind::Dense => {
            let groups = next_spec.input_groups();
            let group_size = next_spec.fan_in / groups;
            for o in 0..next_spec.fan_out {
                let row_base = o * next_spec.fan_in;
                for (new_g, &old_g) in perm.iter().enumerate() {
                    dst.weights
                        [row_base + new_g * group_size..row_base + (new_g + 1) * group_size]
                        .copy_from_slice(
                            &next.weights
                                [row_base + old_g * group_size..row_base + (old_g + 1) * group_size],
                        );
                }
            }
        }
        LayerKind::Conv2d => {
            let k = next_spec.kernel.unwrap();
            let ksq = k * k;
            for o in 0..next_spec.fan_out {
                for (new_c, &old_c) in perm.iter().enumerate() {
                    let dbase = (o * next_spec.fan_in + new_c) * ksq;
                    let sbase = (o * next_spec.fan_in + old_c) * ksq;
                    dst.weights[dbase..dbase + ksq]
                        .copy_from_slice(&next.weights[sbase..sbase + ksq]);
                }
            }
        }
    }
    Ok(out)
}
