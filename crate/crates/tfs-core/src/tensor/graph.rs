//! Reverse-mode autodiff on a creation-ordered tape.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Operations
//! append nodes that record their input node ids; [`Graph::backward`] seeds
//! d(loss)/d(loss) = 1 and walks the tape once in reverse creation order,
//! accumulating gradients additively into each input, so fan-out (a node
//! consumed by several ops) just works. Gradients are only materialized for
//! nodes on a path to a leaf created with `requires_grad`.
//!
//! Every operation validates its input shapes and errors out if the result
//! contains NaN or infinity; a finished node always holds finite data.

use super::linalg;
use super::Tensor;
use crate::error::{Result, TfsError};

/// Handle to a node on a [`Graph`]'s tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive mask value that underflows to an exactly-zero attention weight.
pub const NEG_MASK: f64 = -1e9;

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    /// Batched matmul over the leading dim; `rhs_t` multiplies by the
    /// transpose of each right-hand group.
    Bmm { a: NodeId, b: NodeId, rhs_t: bool },
    /// y = x . w^T + bias with w stored [out, in].
    Linear { x: NodeId, w: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Gelu { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Softmax { x: NodeId, axis: usize },
    LogSoftmax { x: NodeId, axis: usize },
    GatherRows { x: NodeId, idx: Vec<usize> },
    PickPerRow { x: NodeId, idx: Vec<usize> },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    /// Mean over rows of sum_k p*(ln p - log_q); p is a constant, so no
    /// gradient ever flows toward the reference distribution.
    KlRows { log_q: NodeId, p: Vec<f64> },
    /// Mean elementwise stable binary cross-entropy against constant targets.
    BceMean { z: NodeId, targets: Vec<f64> },
    SplitHeads { x: NodeId, heads: usize },
    MergeHeads { x: NodeId, heads: usize },
    Reshape { x: NodeId },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Autodiff tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn ensure_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TfsError::Numeric(format!("{what} produced NaN/inf")))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TfsError::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes on the tape.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached
    /// this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op, what: &str) -> Result<NodeId> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        ensure_finite(&data, what)?;
        self.nodes.push(Node { data, shape, grad: None, requires_grad, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// New leaf holding `data`; gradients flow to it iff `requires_grad`.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TfsError::Dimension(format!("leaf shape {shape:?} has no elements")));
        }
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(TfsError::Dimension(format!(
                "leaf shape {shape:?} wants {expect} values, got {}",
                data.len()
            )));
        }
        self.push(data, shape, requires_grad, Op::Leaf, "leaf")
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        self.leaf(shape, data, false)
    }

    pub fn from_tensor(&mut self, t: &Tensor, requires_grad: bool) -> Result<NodeId> {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), requires_grad)
    }

    /// `a[n,k] . b[k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TfsError::Dimension(format!(
                "matmul shapes {sa:?} x {sb:?} are incompatible"
            )));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        linalg::mm_nn(self.value(a), self.value(b), n, k, m, &mut out);
        let rg = self.requires(a) || self.requires(b);
        self.push(out, vec![n, m], rg, Op::Matmul { a, b }, "matmul")
    }

    fn bmm_impl(&mut self, a: NodeId, b: NodeId, rhs_t: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = if rhs_t { "bmm_nt" } else { "bmm" };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(TfsError::Dimension(format!(
                "{name} shapes {sa:?} x {sb:?} are incompatible"
            )));
        }
        let g = sa[0];
        let (n, k) = (sa[1], sa[2]);
        let m = if rhs_t {
            if sb[2] != k {
                return Err(TfsError::Dimension(format!(
                    "{name} shapes {sa:?} x {sb:?} are incompatible"
                )));
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(TfsError::Dimension(format!(
                    "{name} shapes {sa:?} x {sb:?} are incompatible"
                )));
            }
            sb[2]
        };
        let mut out = vec![0.0; g * n * m];
        {
            let (da, db) = (self.value(a), self.value(b));
            let (ga, gb) = (n * k, if rhs_t { m * k } else { k * m });
            for gi in 0..g {
                let ao = &da[gi * ga..(gi + 1) * ga];
                let bo = &db[gi * gb..(gi + 1) * gb];
                let oo = &mut out[gi * n * m..(gi + 1) * n * m];
                if rhs_t {
                    linalg::mm_nt(ao, bo, n, k, m, oo);
                } else {
                    linalg::mm_nn(ao, bo, n, k, m, oo);
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(out, vec![g, n, m], rg, Op::Bmm { a, b, rhs_t }, name)
    }

    /// Batched `a[g,n,k] . b[g,k,m] -> [g,n,m]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a[g,n,k] . b[g,m,k]^T -> [g,n,m]` without materializing the
    /// transpose.
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bmm_impl(a, b, true)
    }

    /// Affine map `x[n,d] . w[o,d]^T + bias[o] -> [n,o]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != vec![sw[0]] {
            return Err(TfsError::Dimension(format!(
                "linear shapes x{sx:?} w{sw:?} bias{sb:?} are incompatible"
            )));
        }
        let (n, d, o) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; n * o];
        linalg::mm_nt(self.value(x), self.value(w), n, d, o, &mut out);
        {
            let bv = self.value(bias);
            for row in out.chunks_mut(o) {
                for (r, b) in row.iter_mut().zip(bv) {
                    *r += b;
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(bias);
        self.push(out, vec![n, o], rg, Op::Linear { x, w, bias }, "linear")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TfsError::Dimension(format!(
                "add shapes {:?} != {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        self.push(data, shape, rg, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TfsError::Dimension(format!(
                "mul shapes {:?} != {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        self.push(data, shape, rg, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(data, shape, rg, Op::Scale { x, c }, "scale")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(data, shape, rg, Op::Gelu { x }, "gelu")
    }

    /// Normalizes each row over the last dimension, then applies
    /// `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().expect("tensor shapes are non-empty");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TfsError::Dimension(format!(
                "layer_norm gain/bias must be [{d}], got {:?}/{:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = self.value(x).len() / d;
        let mut out = vec![0.0; rows * d];
        {
            let xv = self.value(x);
            let gv = self.value(gain);
            let bv = self.value(bias);
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let orow = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] = gv[j] * ((row[j] - mean) * inv) + bv[j];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(out, sx, rg, Op::LayerNorm { x, gain, bias }, "layer_norm")
    }

    fn softmax_impl(&mut self, x: NodeId, axis: usize, log: bool) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        let mut out = vec![0.0; outer * len * inner];
        {
            let xv = self.value(x);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        max = max.max(xv[at(j)]);
                    }
                    let mut sum = 0.0;
                    for j in 0..len {
                        sum += (xv[at(j)] - max).exp();
                    }
                    if log {
                        let ln_sum = sum.ln();
                        for j in 0..len {
                            out[at(j)] = xv[at(j)] - max - ln_sum;
                        }
                    } else {
                        for j in 0..len {
                            out[at(j)] = (xv[at(j)] - max).exp() / sum;
                        }
                    }
                }
            }
        }
        let rg = self.requires(x);
        let (op, name) = if log {
            (Op::LogSoftmax { x, axis }, "log_softmax")
        } else {
            (Op::Softmax { x, axis }, "softmax")
        };
        self.push(out, shape, rg, op, name)
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.softmax_impl(x, axis, false)
    }

    /// Log-softmax along `axis`; finite even for widely spread inputs.
    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.softmax_impl(x, axis, true)
    }

    /// Selects rows of a `[n, ...]` tensor; rows may repeat, and gradients
    /// scatter-add back into the source.
    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        if idx.is_empty() {
            return Err(TfsError::Dimension("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TfsError::Dimension(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let row_len: usize = shape[1..].iter().product::<usize>().max(1);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * row_len);
        for &i in &idx {
            out.extend_from_slice(&xv[i * row_len..(i + 1) * row_len]);
        }
        let mut new_shape = vec![idx.len()];
        new_shape.extend_from_slice(&shape[1..]);
        let rg = self.requires(x);
        self.push(out, new_shape, rg, Op::GatherRows { x, idx }, "gather_rows")
    }

    /// `out[i] = x[i, idx[i]]` for a 2-D `x`.
    pub fn pick_per_row(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TfsError::Dimension(format!(
                "pick_per_row wants a 2-D tensor, got {shape:?}"
            )));
        }
        let (n, m) = (shape[0], shape[1]);
        if idx.len() != n {
            return Err(TfsError::Dimension(format!(
                "pick_per_row wants {n} indices, got {}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= m) {
            return Err(TfsError::Dimension(format!(
                "pick_per_row column {bad} out of range for {m} columns"
            )));
        }
        let xv = self.value(x);
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xv[i * m + j]).collect();
        let rg = self.requires(x);
        self.push(out, vec![n], rg, Op::PickPerRow { x, idx }, "pick_per_row")
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.requires(x);
        self.push(vec![s], vec![1], rg, Op::SumAll { x }, "sum_all")
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let len = self.value(x).len();
        let s: f64 = self.value(x).iter().sum::<f64>() / len as f64;
        let rg = self.requires(x);
        self.push(vec![s], vec![1], rg, Op::MeanAll { x }, "mean_all")
    }

    /// KL divergence `mean_rows( sum_k p * (ln p - log_q) )` against the
    /// constant distribution rows `p`. Rows of `p` must be normalized within
    /// 1e-5; entries equal to zero contribute exactly zero. No gradient is
    /// ever computed for `p`.
    pub fn kl_divergence(&mut self, p: &[f64], log_q: NodeId) -> Result<NodeId> {
        let shape = self.shape(log_q).to_vec();
        if shape.len() != 2 {
            return Err(TfsError::Dimension(format!(
                "kl_divergence wants 2-D log_q, got {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if p.len() != rows * cols {
            return Err(TfsError::Dimension(format!(
                "kl_divergence p length {} != {rows}x{cols}",
                p.len()
            )));
        }
        for (r, row) in p.chunks(cols).enumerate() {
            let mut sum = 0.0;
            for &v in row {
                if !v.is_finite() || v < 0.0 {
                    return Err(TfsError::Distribution(format!(
                        "p row {r} contains invalid probability {v}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(TfsError::Distribution(format!(
                    "p row {r} sums to {sum}, not 1"
                )));
            }
        }
        let lq = self.value(log_q);
        let mut total = 0.0;
        for (pi, &lqi) in p.iter().zip(lq) {
            if *pi > 0.0 {
                total += pi * (pi.ln() - lqi);
            }
        }
        let value = total / rows as f64;
        let rg = self.requires(log_q);
        self.push(vec![value], vec![1], rg, Op::KlRows { log_q, p: p.to_vec() }, "kl_divergence")
    }

    /// Mean stable binary cross-entropy of logits `z` against constant
    /// targets in `[0,1]`: `mean( max(z,0) - z*y + ln(1+exp(-|z|)) )`.
    pub fn binary_cross_entropy_mean(&mut self, z: NodeId, targets: &[f64]) -> Result<NodeId> {
        let zv = self.value(z);
        if targets.len() != zv.len() {
            return Err(TfsError::Dimension(format!(
                "bce targets length {} != logits length {}",
                targets.len(),
                zv.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| !(0.0..=1.0).contains(&y)) {
            return Err(TfsError::Distribution(format!(
                "bce target {bad} outside [0,1]"
            )));
        }
        let mut total = 0.0;
        for (&zi, &yi) in zv.iter().zip(targets) {
            total += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        let value = total / zv.len() as f64;
        let rg = self.requires(z);
        self.push(vec![value], vec![1], rg, Op::BceMean { z, targets: targets.to_vec() }, "bce_mean")
    }

    /// `[b, t, h*d] -> [b*h, t, d]`: regroups per-position features into
    /// per-head groups for batched attention.
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || heads == 0 || shape[2] % heads != 0 {
            return Err(TfsError::Dimension(format!(
                "split_heads({heads}) on shape {shape:?}"
            )));
        }
        let (b, t, i) = (shape[0], shape[1], shape[2]);
        let d = i / heads;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = (bi * t + ti) * i + h * d;
                    let dst = ((bi * heads + h) * t + ti) * d;
                    out[dst..dst + d].copy_from_slice(&xv[src..src + d]);
                }
            }
        }
        let rg = self.requires(x);
        self.push(out, vec![b * heads, t, d], rg, Op::SplitHeads { x, heads }, "split_heads")
    }

    /// Inverse of [`Graph::split_heads`]: `[b*h, t, d] -> [b, t, h*d]`.
    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || heads == 0 || shape[0] % heads != 0 {
            return Err(TfsError::Dimension(format!(
                "merge_heads({heads}) on shape {shape:?}"
            )));
        }
        let (g, t, d) = (shape[0], shape[1], shape[2]);
        let b = g / heads;
        let i = heads * d;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = ((bi * heads + h) * t + ti) * d;
                    let dst = (bi * t + ti) * i + h * d;
                    out[dst..dst + d].copy_from_slice(&xv[src..src + d]);
                }
            }
        }
        let rg = self.requires(x);
        self.push(out, vec![b, t, i], rg, Op::MergeHeads { x, heads }, "merge_heads")
    }

    /// Reinterprets the data with a new shape of the same element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || len != self.value(x).len() {
            return Err(TfsError::Dimension(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let data = self.value(x).to_vec();
        let rg = self.requires(x);
        self.push(data, shape, rg, Op::Reshape { x }, "reshape")
    }

    fn accumulate(&mut self, id: NodeId, delta: Vec<f64>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    /// Runs reverse-mode accumulation from a scalar `loss` node. Visits every
    /// tape node at most once, in reverse creation order; earlier gradients
    /// are cleared first, so calling it twice yields the same result.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(TfsError::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.requires(loss) {
            // Loss does not depend on any trainable leaf; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("checked above");
            self.backprop_node(i, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Move the op out so its owned index/probability buffers can be read
        // while gradients are accumulated into other nodes.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.backprop_op(i, &op, g);
        self.nodes[i].op = op;
        result
    }

    fn backprop_op(&mut self, i: usize, op: &Op, g: &[f64]) -> Result<()> {
        // Ids referenced by ops always precede node i on the tape.
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
                let m = self.shape(b)[1];
                if self.requires(a) {
                    // y = a.b  =>  da = g.b^T
                    let mut da = vec![0.0; n * k];
                    linalg::mm_nt(g, self.value(b), n, m, k, &mut da);
                    self.accumulate(a, da);
                }
                if self.requires(b) {
                    // y = a.b  =>  db = a^T.g
                    let mut db = vec![0.0; k * m];
                    linalg::mm_tn(self.value(a), g, k, n, m, &mut db);
                    self.accumulate(b, db);
                }
            }
            Op::Bmm { a, b, rhs_t } => {
                let (a, b, rhs_t) = (*a, *b, *rhs_t);
                let (gr, n, k) = {
                    let sa = self.shape(a);
                    (sa[0], sa[1], sa[2])
                };
                let m = self.shape(i_id(i))[2];
                let (ga_len, gb_len) = (n * k, if rhs_t { m * k } else { k * m });
                if self.requires(a) {
                    let mut da = vec![0.0; gr * ga_len];
                    let bv = self.value(b);
                    for gi in 0..gr {
                        let go = &g[gi * n * m..(gi + 1) * n * m];
                        let bo = &bv[gi * gb_len..(gi + 1) * gb_len];
                        let dao = &mut da[gi * ga_len..(gi + 1) * ga_len];
                        if rhs_t {
                            // y = a.b^T  =>  da = g.b
                            linalg::mm_nn(go, bo, n, m, k, dao);
                        } else {
                            // y = a.b    =>  da = g.b^T
                            linalg::mm_nt(go, bo, n, m, k, dao);
                        }
                    }
                    self.accumulate(a, da);
                }
                if self.requires(b) {
                    let mut db = vec![0.0; gr * gb_len];
                    let av = self.value(a);
                    for gi in 0..gr {
                        let go = &g[gi * n * m..(gi + 1) * n * m];
                        let ao = &av[gi * ga_len..(gi + 1) * ga_len];
                        let dbo = &mut db[gi * gb_len..(gi + 1) * gb_len];
                        if rhs_t {
                            // y = a.b^T  =>  db = g^T.a  ([m,k])
                            linalg::mm_tn(go, ao, m, n, k, dbo);
                        } else {
                            // y = a.b    =>  db = a^T.g  ([k,m])
                            linalg::mm_tn(ao, go, k, n, m, dbo);
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Linear { x, w, bias } => {
                let (x, w, bias) = (*x, *w, *bias);
                let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
                let o = self.shape(w)[0];
                if self.requires(x) {
                    let mut dx = vec![0.0; n * d];
                    linalg::mm_nn(g, self.value(w), n, o, d, &mut dx);
                    self.accumulate(x, dx);
                }
                if self.requires(w) {
                    let mut dw = vec![0.0; o * d];
                    linalg::mm_tn(g, self.value(x), o, n, d, &mut dw);
                    self.accumulate(w, dw);
                }
                if self.requires(bias) {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        for (dbj, gj) in db.iter_mut().zip(row) {
                            *dbj += gj;
                        }
                    }
                    self.accumulate(bias, db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.requires(b) {
                    self.accumulate(b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let da: Vec<f64> = g.iter().zip(self.value(b)).map(|(gi, bi)| gi * bi).collect();
                    self.accumulate(a, da);
                }
                if self.requires(b) {
                    let db: Vec<f64> = g.iter().zip(self.value(a)).map(|(gi, ai)| gi * ai).collect();
                    self.accumulate(b, db);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if self.requires(x) {
                    let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    self.accumulate(x, dx);
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if self.requires(x) {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.value(x))
                        .map(|(gi, &v)| {
                            let u = GELU_C * (v + GELU_A * v * v * v);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                        })
                        .collect();
                    self.accumulate(x, dx);
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = *self.shape(x).last().expect("non-empty shape");
                let rows = self.value(x).len() / d;
                let need_x = self.requires(x);
                let need_gain = self.requires(gain);
                let need_bias = self.requires(bias);
                let mut dx = if need_x { vec![0.0; rows * d] } else { Vec::new() };
                let mut dgain = if need_gain { vec![0.0; d] } else { Vec::new() };
                let mut dbias = if need_bias { vec![0.0; d] } else { Vec::new() };
                {
                    let xv = self.value(x);
                    let gv = self.value(gain);
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            if need_gain {
                                dgain[j] += grow[j] * xhat;
                            }
                            if need_bias {
                                dbias[j] += grow[j];
                            }
                        }
                        if need_x {
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for j in 0..d {
                                let xhat = (row[j] - mean) * inv;
                                let dxhat = grow[j] * gv[j];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let dxr = &mut dx[r * d..(r + 1) * d];
                            for j in 0..d {
                                let xhat = (row[j] - mean) * inv;
                                let dxhat = grow[j] * gv[j];
                                dxr[j] = (inv / d as f64)
                                    * (d as f64 * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(x, dx);
                }
                if need_gain {
                    self.accumulate(gain, dgain);
                }
                if need_bias {
                    self.accumulate(bias, dbias);
                }
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                if self.requires(x) {
                    let shape = self.shape(i_id(i)).to_vec();
                    let (outer, len, inner) = axis_split(&shape, axis)?;
                    let s = self.value(i_id(i));
                    let mut dx = vec![0.0; s.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += g[at(j)] * s[at(j)];
                            }
                            for j in 0..len {
                                dx[at(j)] = s[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                if self.requires(x) {
                    let shape = self.shape(i_id(i)).to_vec();
                    let (outer, len, inner) = axis_split(&shape, axis)?;
                    let y = self.value(i_id(i));
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let mut gsum = 0.0;
                            for j in 0..len {
                                gsum += g[at(j)];
                            }
                            for j in 0..len {
                                dx[at(j)] = g[at(j)] - y[at(j)].exp() * gsum;
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                if self.requires(x) {
                    let row_len = self.value(x).len() / self.shape(x)[0];
                    let mut dx = vec![0.0; self.value(x).len()];
                    for (r, &src) in idx.iter().enumerate() {
                        let grow = &g[r * row_len..(r + 1) * row_len];
                        let drow = &mut dx[src * row_len..(src + 1) * row_len];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::PickPerRow { x, idx } => {
                let x = *x;
                if self.requires(x) {
                    let m = self.shape(x)[1];
                    let mut dx = vec![0.0; self.value(x).len()];
                    for (r, &j) in idx.iter().enumerate() {
                        dx[r * m + j] += g[r];
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::SumAll { x } => {
                let x = *x;
                if self.requires(x) {
                    let dx = vec![g[0]; self.value(x).len()];
                    self.accumulate(x, dx);
                }
            }
            Op::MeanAll { x } => {
                let x = *x;
                if self.requires(x) {
                    let n = self.value(x).len() as f64;
                    let dx = vec![g[0] / n; self.value(x).len()];
                    self.accumulate(x, dx);
                }
            }
            Op::KlRows { log_q, p } => {
                let log_q = *log_q;
                if self.requires(log_q) {
                    let rows = self.shape(log_q)[0] as f64;
                    let dx: Vec<f64> = p.iter().map(|pi| -pi / rows * g[0]).collect();
                    self.accumulate(log_q, dx);
                }
            }
            Op::BceMean { z, targets } => {
                let z = *z;
                if self.requires(z) {
                    let n = self.value(z).len() as f64;
                    let dx: Vec<f64> = self
                        .value(z)
                        .iter()
                        .zip(targets)
                        .map(|(&zi, &yi)| (super::sigmoid(zi) - yi) / n * g[0])
                        .collect();
                    self.accumulate(z, dx);
                }
            }
            Op::SplitHeads { x, heads } => {
                let (x, heads) = (*x, *heads);
                if self.requires(x) {
                    let sx = self.shape(x).to_vec();
                    let (b, t, iw) = (sx[0], sx[1], sx[2]);
                    let d = iw / heads;
                    let mut dx = vec![0.0; b * t * iw];
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..heads {
                                let dst = (bi * t + ti) * iw + h * d;
                                let src = ((bi * heads + h) * t + ti) * d;
                                dx[dst..dst + d].copy_from_slice(&g[src..src + d]);
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::MergeHeads { x, heads } => {
                let (x, heads) = (*x, *heads);
                if self.requires(x) {
                    let sx = self.shape(x).to_vec();
                    let (gr, t, d) = (sx[0], sx[1], sx[2]);
                    let b = gr / heads;
                    let iw = heads * d;
                    let mut dx = vec![0.0; gr * t * d];
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..heads {
                                let src = (bi * t + ti) * iw + h * d;
                                let dst = ((bi * heads + h) * t + ti) * d;
                                dx[dst..dst + d].copy_from_slice(&g[src..src + d]);
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.requires(x) {
                    self.accumulate(x, g.to_vec());
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn i_id(i: usize) -> NodeId {
    NodeId(i)
}
