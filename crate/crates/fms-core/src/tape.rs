//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Operations are recorded eagerly on a [`Tape`]: each builder computes its
//! forward value immediately and appends a node, so the recorded order is a
//! topological order by construction and all intermediates stay available for
//! the backward sweep. Values are immutable once recorded; a tape is
//! single-writer and cheap to throw away after one use.
//!
//! Besides the usual dense primitives (matmul, elementwise arithmetic, bias
//! add, leaky rectifier, 1-D convolution, reductions, concatenation, pairwise
//! squared distances, exp/log) the tape has a few batched graph primitives
//! ([`Tape::edge_gather`], [`Tape::segment_mean`], [`Tape::row_scatter`]) used
//! by the weight-graph encoder, and [`Tape::gp_nlml`], the Gaussian-process
//! negative log marginal likelihood with its analytic backward rule.

use std::sync::Arc;

use crate::error::{FmsError, Result};
use crate::linalg;
use crate::tensor::{gemm_acc, sqdist, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Directed weighted edges over a batch of stacked graphs, in global node ids.
#[derive(Debug, Clone, Default)]
pub struct EdgeSet {
    pub src: Vec<u32>,
    pub dst: Vec<u32>,
    pub weight: Vec<f64>,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

struct NlmlAux {
    factor: Vec<f64>,
    alpha: Vec<f64>,
    #[allow(dead_code)]
    jitter: f64,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    DualMatMul { a: Var, wa: Var, b: Var, wb: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, bias: Var },
    BroadcastRow { v: Var },
    LeakyRelu { x: Var, slope: f64 },
    Conv1d { x: Var, kernel: Var },
    ChannelBias { x: Var, bias: Var },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    SumAll { x: Var },
    MeanAll { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    SqDist { a: Var, b: Var },
    Exp { x: Var },
    Log { x: Var },
    Scale { x: Var, c: f64 },
    MulScalar { x: Var, s: Var },
    AddDiag { x: Var, s: Var },
    EdgeGather { x: Var, edges: Arc<EdgeSet> },
    SegmentMean { x: Var, segments: Arc<Vec<(usize, usize)>> },
    RowScatter {
        src: Var,
        default: Var,
        mapping: Arc<Vec<Option<usize>>>,
    },
    GpNlml { k: Var, y: Var, aux: NlmlAux },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation: values plus enough structure to run backward once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-variable gradients produced by a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, if any path from the loss reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient data for `v`, zeros when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

fn shape_err(op: &'static str, details: String) -> FmsError {
    FmsError::ShapeMismatch { op, details }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a differentiable input (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, ka, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul { a, b }, req))
    }

    /// Fused pair of matrix products into one output: `a·wa + b·wb`.
    /// Equivalent to two matmuls plus an add, without the intermediate
    /// buffers; the batched graph layers lean on this.
    pub fn dual_matmul(&mut self, a: Var, wa: Var, b: Var, wb: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kwa, n) = self.value(wa).dims2()?;
        let (mb, kb) = self.value(b).dims2()?;
        let (kwb, nb) = self.value(wb).dims2()?;
        if ka != kwa || kb != kwb || m != mb || n != nb {
            return Err(shape_err(
                "dual_matmul",
                format!(
                    "{:?}x{:?} + {:?}x{:?}",
                    self.value(a).shape(),
                    self.value(wa).shape(),
                    self.value(b).shape(),
                    self.value(wb).shape()
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, ka, n, self.value(a).data(), false, self.value(wa).data(), false, &mut out);
        gemm_acc(m, kb, n, self.value(b).data(), false, self.value(wb).data(), false, &mut out);
        let req = self.requires(a) || self.requires(wa) || self.requires(b) || self.requires(wb);
        Ok(self.push(
            Tensor::matrix(m, n, out),
            Op::DualMatMul { a, wa, b, wb },
            req,
        ))
    }

    fn elementwise_pair(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data), Op::Add { a, b }, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, data), Op::Mul { a, b }, req))
    }

    /// Bias add: `[n, m] + [m]`, the bias broadcast over rows.
    pub fn affine(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(bias).shape() != [m] {
            return Err(shape_err(
                "affine",
                format!("matrix {:?} with bias {:?}", self.value(x).shape(), self.value(bias).shape()),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for row in data.chunks_mut(m) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(Tensor::matrix(n, m, data), Op::Affine { x, bias }, req))
    }

    /// Repeat a vector `[m]` as each of `rows` rows.
    pub fn broadcast_row(&mut self, v: Var, rows: usize) -> Result<Var> {
        let m = match self.value(v).shape() {
            [m] => *m,
            other => {
                return Err(shape_err(
                    "broadcast_row",
                    format!("expected vector, got {other:?}"),
                ))
            }
        };
        let src = self.value(v).data();
        let mut data = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let req = self.requires(v);
        Ok(self.push(Tensor::matrix(rows, m, data), Op::BroadcastRow { v }, req))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(x);
        self.push(Tensor::new(shape, data), Op::LeakyRelu { x, slope }, req)
    }

    /// Valid-padding stride-1 1-D convolution (cross-correlation).
    ///
    /// `x` is `[batch, c_in, len]`, `kernel` is `[c_out, c_in, k]`; rank-1
    /// arguments are accepted as `[1, 1, len]` / `[1, 1, k]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let (batch, c_in, len) = match xs[..] {
            [b, c, l] => (b, c, l),
            [l] => (1, 1, l),
            _ => return Err(shape_err("conv1d", format!("input shape {xs:?}"))),
        };
        let (c_out, kc_in, k) = match ks[..] {
            [co, ci, kw] => (co, ci, kw),
            [kw] => (1, 1, kw),
            _ => return Err(shape_err("conv1d", format!("kernel shape {ks:?}"))),
        };
        if kc_in != c_in {
            return Err(shape_err(
                "conv1d",
                format!("input channels {c_in} vs kernel channels {kc_in}"),
            ));
        }
        if k > len {
            return Err(shape_err(
                "conv1d",
                format!("kernel size {k} exceeds input length {len}"),
            ));
        }
        let out_len = len - k + 1;
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![0.0; batch * c_out * out_len];
        for b in 0..batch {
            for co in 0..c_out {
                let obase = (b * c_out + co) * out_len;
                for ci in 0..c_in {
                    let xbase = (b * c_in + ci) * len;
                    let kbase = (co * c_in + ci) * k;
                    for p in 0..out_len {
                        let mut s = 0.0;
                        for t in 0..k {
                            s += xd[xbase + p + t] * kd[kbase + t];
                        }
                        out[obase + p] += s;
                    }
                }
            }
        }
        let req = self.requires(x) || self.requires(kernel);
        Ok(self.push(
            Tensor::new(vec![batch, c_out, out_len], out),
            Op::Conv1d { x, kernel },
            req,
        ))
    }

    /// Per-channel bias add: `[batch, c, l] + [c]`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (batch, c, l) = match self.value(x).shape() {
            [b, c, l] => (*b, *c, *l),
            other => {
                return Err(shape_err(
                    "channel_bias",
                    format!("expected rank-3 input, got {other:?}"),
                ))
            }
        };
        if self.value(bias).shape() != [c] {
            return Err(shape_err(
                "channel_bias",
                format!("bias {:?} for {c} channels", self.value(bias).shape()),
            ));
        }
        let bd = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for b in 0..batch {
            for (ch, bv) in bd.iter().enumerate() {
                let base = (b * c + ch) * l;
                for v in &mut data[base..base + l] {
                    *v += bv;
                }
            }
        }
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(
            Tensor::new(vec![batch, c, l], data),
            Op::ChannelBias { x, bias },
            req,
        ))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err(
                if mean { "mean_axis" } else { "sum_axis" },
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += xd[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / dim as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let req = self.requires(x);
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        Ok(self.push(Tensor::new(out_shape, out), op, req))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, req)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s: f64 = self.value(x).data().iter().sum::<f64>() / n as f64;
        let req = self.requires(x);
        self.push(Tensor::scalar(s), Op::MeanAll { x }, req)
    }

    /// Concatenate rank-1 tensors (axis 0) or rank-2 tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no parts".into()));
        }
        let rank = self.value(parts[0]).shape().len();
        if rank == 1 && axis == 0 {
            let mut data = Vec::new();
            for &p in parts {
                if self.value(p).shape().len() != 1 {
                    return Err(shape_err("concat", "mixed ranks".into()));
                }
                data.extend_from_slice(self.value(p).data());
            }
            let req = parts.iter().any(|&p| self.requires(p));
            let parts = parts.to_vec();
            return Ok(self.push(Tensor::vector(data), Op::Concat { parts, axis }, req));
        }
        if rank != 2 || axis > 1 {
            return Err(shape_err(
                "concat",
                format!("unsupported rank {rank} axis {axis}"),
            ));
        }
        let (r0, c0) = self.value(parts[0]).dims2()?;
        if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let (r, c) = self.value(p).dims2()?;
                if c != c0 {
                    return Err(shape_err("concat", format!("column mismatch {c} vs {c0}")));
                }
                rows += r;
                data.extend_from_slice(self.value(p).data());
            }
            let req = parts.iter().any(|&p| self.requires(p));
            let parts = parts.to_vec();
            Ok(self.push(Tensor::matrix(rows, c0, data), Op::Concat { parts, axis }, req))
        } else {
            let mut widths = Vec::with_capacity(parts.len());
            for &p in parts {
                let (r, c) = self.value(p).dims2()?;
                if r != r0 {
                    return Err(shape_err("concat", format!("row mismatch {r} vs {r0}")));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; r0 * total];
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let pd = self.value(p).data();
                for r in 0..r0 {
                    data[r * total + offset..r * total + offset + w]
                        .copy_from_slice(&pd[r * w..(r + 1) * w]);
                }
                offset += w;
            }
            let req = parts.iter().any(|&p| self.requires(p));
            let parts = parts.to_vec();
            Ok(self.push(Tensor::matrix(r0, total, data), Op::Concat { parts, axis }, req))
        }
    }

    /// Pairwise squared Euclidean distances between row sets:
    /// `[m, d]` × `[n, d]` → `[m, n]`.
    pub fn sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, da) = self.value(a).dims2()?;
        let (n, db) = self.value(b).dims2()?;
        if da != db {
            return Err(shape_err(
                "sqdist",
                format!("feature dims differ: {da} vs {db}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        sqdist(m, n, da, self.value(a).data(), self.value(b).data(), &mut out);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::SqDist { a, b }, req))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.exp()).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(x);
        self.push(Tensor::new(shape, data), Op::Exp { x }, req)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v.ln()).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(x);
        self.push(Tensor::new(shape, data), Op::Log { x }, req)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(x);
        self.push(Tensor::new(shape, data), Op::Scale { x, c }, req)
    }

    /// Multiply every element of `x` by a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(shape_err(
                "mul_scalar",
                format!("scalar operand has shape {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).item();
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        let req = self.requires(x) || self.requires(s);
        Ok(self.push(Tensor::new(shape, data), Op::MulScalar { x, s }, req))
    }

    /// `x + s·I` for square `x` and one-element `s`.
    pub fn add_diag(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if n != m {
            return Err(shape_err("add_diag", format!("matrix {n}x{m} not square")));
        }
        if self.value(s).numel() != 1 {
            return Err(shape_err(
                "add_diag",
                format!("scalar operand has shape {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).item();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            data[i * n + i] += sv;
        }
        let req = self.requires(x) || self.requires(s);
        Ok(self.push(Tensor::matrix(n, n, data), Op::AddDiag { x, s }, req))
    }

    /// Weighted in-neighbor sum over a fixed edge set:
    /// `out[v, :] = Σ_{(u→v)} w_e · x[u, :]`.
    pub fn edge_gather(&mut self, x: Var, edges: Arc<EdgeSet>) -> Result<Var> {
        let (n, w) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * w];
        for e in 0..edges.len() {
            let (src, dst, ew) = (edges.src[e] as usize, edges.dst[e] as usize, edges.weight[e]);
            debug_assert!(src < n && dst < n);
            let srow = &xd[src * w..(src + 1) * w];
            let drow = &mut out[dst * w..(dst + 1) * w];
            for (o, s) in drow.iter_mut().zip(srow) {
                *o += ew * s;
            }
        }
        let req = self.requires(x);
        Ok(self.push(Tensor::matrix(n, w, out), Op::EdgeGather { x, edges }, req))
    }

    /// Mean of each contiguous row segment: `[N, w]` → `[G, w]`.
    pub fn segment_mean(&mut self, x: Var, segments: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let (n, w) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let g = segments.len();
        let mut out = vec![0.0; g * w];
        for (gi, &(start, end)) in segments.iter().enumerate() {
            if start >= end || end > n {
                return Err(shape_err(
                    "segment_mean",
                    format!("segment {gi} = [{start}, {end}) invalid for {n} rows"),
                ));
            }
            let orow = &mut out[gi * w..(gi + 1) * w];
            for r in start..end {
                for (o, v) in orow.iter_mut().zip(&xd[r * w..(r + 1) * w]) {
                    *o += v;
                }
            }
            let inv = 1.0 / (end - start) as f64;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let req = self.requires(x);
        Ok(self.push(Tensor::matrix(g, w, out), Op::SegmentMean { x, segments }, req))
    }

    /// Assemble `[n, m]` rows from `src` rows (per `mapping`) or the
    /// `default` vector where the mapping is absent.
    pub fn row_scatter(
        &mut self,
        src: Var,
        default: Var,
        mapping: Arc<Vec<Option<usize>>>,
    ) -> Result<Var> {
        let (g, m) = self.value(src).dims2()?;
        if self.value(default).shape() != [m] {
            return Err(shape_err(
                "row_scatter",
                format!(
                    "default {:?} does not match row width {m}",
                    self.value(default).shape()
                ),
            ));
        }
        let n = mapping.len();
        let sd = self.value(src).data();
        let dd = self.value(default).data();
        let mut out = vec![0.0; n * m];
        for (i, slot) in mapping.iter().enumerate() {
            let row = &mut out[i * m..(i + 1) * m];
            match slot {
                Some(gi) => {
                    if *gi >= g {
                        return Err(shape_err(
                            "row_scatter",
                            format!("mapping row {i} references source row {gi} of {g}"),
                        ));
                    }
                    row.copy_from_slice(&sd[gi * m..(gi + 1) * m]);
                }
                None => row.copy_from_slice(dd),
            }
        }
        let req = self.requires(src) || self.requires(default);
        Ok(self.push(
            Tensor::matrix(n, m, out),
            Op::RowScatter { src, default, mapping },
            req,
        ))
    }

    /// GP negative log marginal likelihood
    /// `½·yᵀK⁻¹y + ½·log|K| + (n/2)·log 2π`, solved via Cholesky with the
    /// escalating-jitter policy. Backward w.r.t. `K` is `½(K⁻¹ − ααᵀ)` with
    /// `α = K⁻¹y`; w.r.t. `y` it is `α`.
    pub fn gp_nlml(&mut self, k: Var, y: Var) -> Result<Var> {
        let (n, m) = self.value(k).dims2()?;
        if n != m {
            return Err(shape_err("gp_nlml", format!("K is {n}x{m}, not square")));
        }
        if self.value(y).shape() != [n] {
            return Err(shape_err(
                "gp_nlml",
                format!("y shape {:?} with K {n}x{n}", self.value(y).shape()),
            ));
        }
        let chol = linalg::cholesky_with_jitter(n, self.value(k).data())?;
        let alpha = linalg::cholesky_solve(n, &chol.factor, self.value(y).data());
        let data_fit: f64 = 0.5
            * self
                .value(y)
                .data()
                .iter()
                .zip(&alpha)
                .map(|(yv, av)| yv * av)
                .sum::<f64>();
        let log_det = 0.5 * linalg::log_det_from_factor(n, &chol.factor);
        let value = data_fit + log_det + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        let req = self.requires(k) || self.requires(y);
        Ok(self.push(
            Tensor::scalar(value),
            Op::GpNlml {
                k,
                y,
                aux: NlmlAux {
                    factor: chol.factor,
                    alpha,
                    jitter: chol.jitter,
                },
            },
            req,
        ))
    }

    /// Backward from a scalar output seeded with 1.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("default seed needs scalar output, got {:?}", self.value(out).shape()),
            ));
        }
        self.backward_seeded(out, Tensor::scalar(1.0))
    }

    /// Backward with an explicit seed gradient for `out`.
    pub fn backward_seeded(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if out.0 >= self.nodes.len() {
            return Err(FmsError::BackwardBeforeForward);
        }
        if seed.shape() != self.value(out).shape() {
            return Err(shape_err(
                "backward",
                format!(
                    "seed shape {:?} vs output shape {:?}",
                    seed.shape(),
                    self.value(out).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backward_op(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: &[f64]) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => {
                grads[v.0] = Some(Tensor::new(self.value(v).shape().to_vec(), delta.to_vec()));
            }
        }
    }

    fn accumulate_with<F>(&self, grads: &mut [Option<Tensor>], v: Var, fill: F)
    where
        F: FnOnce(&mut [f64]),
    {
        if !self.requires(v) {
            return;
        }
        if grads[v.0].is_none() {
            grads[v.0] = Some(Tensor::zeros(self.value(v).shape().to_vec()));
        }
        fill(grads[v.0].as_mut().unwrap().data_mut());
    }

    fn backward_op(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if self.requires(*a) {
                    // dA = g · Bᵀ
                    self.accumulate_with(grads, *a, |da| {
                        gemm_acc(m, n, k, g.data(), false, self.value(*b).data(), true, da);
                    });
                }
                if self.requires(*b) {
                    // dB = Aᵀ · g
                    self.accumulate_with(grads, *b, |db| {
                        gemm_acc(k, m, n, self.value(*a).data(), true, g.data(), false, db);
                    });
                }
            }
            Op::DualMatMul { a, wa, b, wb } => {
                let (m, ka) = self.value(*a).dims2().unwrap();
                let kb = self.value(*b).dims2().unwrap().1;
                let n = self.value(*wa).dims2().unwrap().1;
                if self.requires(*a) {
                    self.accumulate_with(grads, *a, |da| {
                        gemm_acc(m, n, ka, g.data(), false, self.value(*wa).data(), true, da);
                    });
                }
                if self.requires(*wa) {
                    self.accumulate_with(grads, *wa, |dw| {
                        gemm_acc(ka, m, n, self.value(*a).data(), true, g.data(), false, dw);
                    });
                }
                if self.requires(*b) {
                    self.accumulate_with(grads, *b, |db| {
                        gemm_acc(m, n, kb, g.data(), false, self.value(*wb).data(), true, db);
                    });
                }
                if self.requires(*wb) {
                    self.accumulate_with(grads, *wb, |dw| {
                        gemm_acc(kb, m, n, self.value(*b).data(), true, g.data(), false, dw);
                    });
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.data());
                self.accumulate(grads, *b, g.data());
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let delta: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    self.accumulate(grads, *a, &delta);
                }
                if self.requires(*b) {
                    let delta: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.accumulate(grads, *b, &delta);
                }
            }
            Op::Affine { x, bias } => {
                self.accumulate(grads, *x, g.data());
                if self.requires(*bias) {
                    let m = self.value(*bias).numel();
                    self.accumulate_with(grads, *bias, |db| {
                        for row in g.data().chunks(m) {
                            for (d, gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            Op::BroadcastRow { v } => {
                let m = self.value(*v).numel();
                self.accumulate_with(grads, *v, |dv| {
                    for row in g.data().chunks(m) {
                        for (d, gv) in dv.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let delta: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { gv * slope })
                    .collect();
                self.accumulate(grads, *x, &delta);
            }
            Op::Conv1d { x, kernel } => {
                let xs = self.value(*x).shape();
                let ks = self.value(*kernel).shape();
                let (batch, c_in, len) = match xs {
                    [b, c, l] => (*b, *c, *l),
                    [l] => (1, 1, *l),
                    _ => unreachable!(),
                };
                let (c_out, _, k) = match ks {
                    [co, ci, kw] => (*co, *ci, *kw),
                    [kw] => (1, 1, *kw),
                    _ => unreachable!(),
                };
                let out_len = len - k + 1;
                let xd = self.value(*x).data();
                let kd = self.value(*kernel).data();
                if self.requires(*x) {
                    self.accumulate_with(grads, *x, |dx| {
                        for b in 0..batch {
                            for co in 0..c_out {
                                let obase = (b * c_out + co) * out_len;
                                for ci in 0..c_in {
                                    let xbase = (b * c_in + ci) * len;
                                    let kbase = (co * c_in + ci) * k;
                                    for p in 0..out_len {
                                        let gv = g.data()[obase + p];
                                        for t in 0..k {
                                            dx[xbase + p + t] += gv * kd[kbase + t];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if self.requires(*kernel) {
                    self.accumulate_with(grads, *kernel, |dk| {
                        for b in 0..batch {
                            for co in 0..c_out {
                                let obase = (b * c_out + co) * out_len;
                                for ci in 0..c_in {
                                    let xbase = (b * c_in + ci) * len;
                                    let kbase = (co * c_in + ci) * k;
                                    for p in 0..out_len {
                                        let gv = g.data()[obase + p];
                                        for t in 0..k {
                                            dk[kbase + t] += gv * xd[xbase + p + t];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::ChannelBias { x, bias } => {
                self.accumulate(grads, *x, g.data());
                if self.requires(*bias) {
                    let shape = self.value(*x).shape();
                    let (batch, c, l) = (shape[0], shape[1], shape[2]);
                    self.accumulate_with(grads, *bias, |db| {
                        for b in 0..batch {
                            for (ch, d) in db.iter_mut().enumerate() {
                                let base = (b * c + ch) * l;
                                for gv in &g.data()[base..base + l] {
                                    *d += gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let shape = self.value(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let dim = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / dim as f64
                } else {
                    1.0
                };
                self.accumulate_with(grads, *x, |dx| {
                    for o in 0..outer {
                        for d in 0..dim {
                            let base = (o * dim + d) * inner;
                            let gbase = o * inner;
                            for i in 0..inner {
                                dx[base + i] += g.data()[gbase + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::SumAll { x } | Op::MeanAll { x } => {
                let n = self.value(*x).numel();
                let scale = if matches!(node.op, Op::MeanAll { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                let gv = g.item() * scale;
                self.accumulate_with(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let rank = self.value(parts[0]).shape().len();
                if rank == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        self.accumulate(grads, p, &g.data()[offset..offset + n]);
                        offset += n;
                    }
                } else {
                    let rows = self.value(parts[0]).dims2().unwrap().0;
                    let total = g.numel() / rows;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).dims2().unwrap().1;
                        if self.requires(p) {
                            self.accumulate_with(grads, p, |dp| {
                                for r in 0..rows {
                                    for c in 0..w {
                                        dp[r * w + c] += g.data()[r * total + offset + c];
                                    }
                                }
                            });
                        }
                        offset += w;
                    }
                }
            }
            Op::SqDist { a, b } => {
                let (m, d) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().0;
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.requires(*a) {
                    self.accumulate_with(grads, *a, |da| {
                        for i in 0..m {
                            for j in 0..n {
                                let gv = 2.0 * g.data()[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for t in 0..d {
                                    da[i * d + t] += gv * (ad[i * d + t] - bd[j * d + t]);
                                }
                            }
                        }
                    });
                }
                if self.requires(*b) {
                    self.accumulate_with(grads, *b, |db| {
                        for i in 0..m {
                            for j in 0..n {
                                let gv = 2.0 * g.data()[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for t in 0..d {
                                    db[j * d + t] -= gv * (ad[i * d + t] - bd[j * d + t]);
                                }
                            }
                        }
                    });
                }
            }
            Op::Exp { x } => {
                let delta: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, ov)| gv * ov)
                    .collect();
                self.accumulate(grads, *x, &delta);
            }
            Op::Log { x } => {
                let delta: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, xv)| gv / xv)
                    .collect();
                self.accumulate(grads, *x, &delta);
            }
            Op::Scale { x, c } => {
                let delta: Vec<f64> = g.data().iter().map(|gv| gv * c).collect();
                self.accumulate(grads, *x, &delta);
            }
            Op::MulScalar { x, s } => {
                if self.requires(*x) {
                    let sv = self.value(*s).item();
                    let delta: Vec<f64> = g.data().iter().map(|gv| gv * sv).collect();
                    self.accumulate(grads, *x, &delta);
                }
                if self.requires(*s) {
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, xv)| gv * xv)
                        .sum();
                    self.accumulate(grads, *s, &[ds]);
                }
            }
            Op::AddDiag { x, s } => {
                self.accumulate(grads, *x, g.data());
                if self.requires(*s) {
                    let n = self.value(*x).dims2().unwrap().0;
                    let tr: f64 = (0..n).map(|i| g.data()[i * n + i]).sum();
                    self.accumulate(grads, *s, &[tr]);
                }
            }
            Op::EdgeGather { x, edges } => {
                let w = self.value(*x).dims2().unwrap().1;
                self.accumulate_with(grads, *x, |dx| {
                    for e in 0..edges.len() {
                        let (src, dst, ew) =
                            (edges.src[e] as usize, edges.dst[e] as usize, edges.weight[e]);
                        let grow = &g.data()[dst * w..(dst + 1) * w];
                        let drow = &mut dx[src * w..(src + 1) * w];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += ew * gv;
                        }
                    }
                });
            }
            Op::SegmentMean { x, segments } => {
                let w = self.value(*x).dims2().unwrap().1;
                self.accumulate_with(grads, *x, |dx| {
                    for (gi, &(start, end)) in segments.iter().enumerate() {
                        let inv = 1.0 / (end - start) as f64;
                        let grow = &g.data()[gi * w..(gi + 1) * w];
                        for r in start..end {
                            let drow = &mut dx[r * w..(r + 1) * w];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::RowScatter { src, default, mapping } => {
                let m = self.value(*default).numel();
                if self.requires(*src) {
                    self.accumulate_with(grads, *src, |ds| {
                        for (i, slot) in mapping.iter().enumerate() {
                            if let Some(gi) = slot {
                                let grow = &g.data()[i * m..(i + 1) * m];
                                let drow = &mut ds[gi * m..(gi + 1) * m];
                                for (d, gv) in drow.iter_mut().zip(grow) {
                                    *d += gv;
                                }
                            }
                        }
                    });
                }
                if self.requires(*default) {
                    self.accumulate_with(grads, *default, |dd| {
                        for (i, slot) in mapping.iter().enumerate() {
                            if slot.is_none() {
                                let grow = &g.data()[i * m..(i + 1) * m];
                                for (d, gv) in dd.iter_mut().zip(grow) {
                                    *d += gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::GpNlml { k, y, aux } => {
                let n = self.value(*y).numel();
                let gv = g.item();
                if self.requires(*k) {
                    let kinv = linalg::cholesky_inverse(n, &aux.factor);
                    self.accumulate_with(grads, *k, |dk| {
                        for i in 0..n {
                            for j in 0..n {
                                dk[i * n + j] +=
                                    gv * 0.5 * (kinv[i * n + j] - aux.alpha[i] * aux.alpha[j]);
                            }
                        }
                    });
                }
                if self.requires(*y) {
                    let delta: Vec<f64> = aux.alpha.iter().map(|a| gv * a).collect();
                    self.accumulate(grads, *y, &delta);
                }
            }
        }
    }
}
