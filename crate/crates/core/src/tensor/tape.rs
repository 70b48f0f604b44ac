//! Wengert-list reverse-mode autodiff.
//!
//! A [`Tape`] owns every intermediate value of one forward computation.
//! Operations append a node (the result buffer) and a step record; calling
//! [`Tape::backward`] on a scalar loss replays the steps in reverse,
//! visiting each one exactly once and accumulating gradients. Gradient
//! buffers are only materialized for nodes on a path from a parameter to
//! the loss.

use super::{gelu_grad_scalar, gelu_scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    L2Vector,
    FrobeniusMatrix,
}

/// Norms at or below this threshold are treated as zero: the normalize ops
/// pass the input through unchanged and count a zero-norm event.
pub const NORM_EPS: f64 = 1e-12;

/// LayerNorm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    /// True when this node is a parameter or depends on one; backward
    /// materializes gradients only for such nodes.
    wants: bool,
}

enum Step {
    Matmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, out: usize, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    AddRowBroadcast { a: usize, b: usize, out: usize, rows: usize, cols: usize },
    AddTiled { a: usize, b: usize, out: usize, reps: usize, chunk: usize },
    Scale { a: usize, out: usize, c: f64 },
    Gelu { a: usize, out: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, out: usize, rows: usize, dim: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows { a: usize, out: usize, rows: usize, cols: usize },
    SoftmaxXent { logits: usize, out: usize, labels: Vec<usize>, rows: usize, cols: usize, probs: Vec<f64> },
    GatherRows { src: usize, out: usize, idx: Vec<usize>, cols: usize },
    Pool { a: usize, out: usize, mode: PoolMode, outer: usize, mid: usize, inner: usize, argmax: Vec<usize> },
    NormalizeRows { a: usize, out: usize, rows: usize, cols: usize, norms: Vec<f64> },
    NormalizeAll { a: usize, out: usize, norm: f64 },
    Transpose { a: usize, out: usize, rows: usize, cols: usize },
    Permute { a: usize, out: usize, index_map: Vec<usize> },
    Reshape { a: usize, out: usize },
    SumAll { a: usize, out: usize },
}

impl Step {
    fn out(&self) -> usize {
        match *self {
            Step::Matmul { out, .. }
            | Step::Bmm { out, .. }
            | Step::Add { out, .. }
            | Step::Mul { out, .. }
            | Step::AddRowBroadcast { out, .. }
            | Step::AddTiled { out, .. }
            | Step::Scale { out, .. }
            | Step::Gelu { out, .. }
            | Step::LayerNorm { out, .. }
            | Step::SoftmaxRows { out, .. }
            | Step::SoftmaxXent { out, .. }
            | Step::GatherRows { out, .. }
            | Step::Pool { out, .. }
            | Step::NormalizeRows { out, .. }
            | Step::NormalizeAll { out, .. }
            | Step::Transpose { out, .. }
            | Step::Permute { out, .. }
            | Step::Reshape { out, .. }
            | Step::SumAll { out, .. } => out,
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    steps: Vec<Step>,
    grads: Vec<Option<Vec<f64>>>,
    zero_norm_events: usize,
    ran_backward: bool,
}

// ── matmul kernels ──
// All three accumulate into `out`; callers pass zeroed buffers for fresh
// products. The inner loops run over contiguous slices so they vectorize.

/// out[m×n] += a[m×k] · b[k×n]
fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *o += s;
        }
    }
}

/// out[m×n] += a[k×m]ᵀ · b[k×n]
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, wants: bool) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { data, shape, wants });
        TensorId(self.nodes.len() - 1)
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].wants
    }

    /// Register a non-trainable leaf (data, frozen weights).
    pub fn input(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn input_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(
                "input_from",
                format!("shape {:?} vs {} elements", shape, data.len()),
            ));
        }
        Ok(self.push(shape, data, false))
    }

    /// Register a trainable leaf; its gradient survives `backward`.
    pub fn param(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the loss w.r.t. `id`, if one was materialized.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Number of zero-norm pass-through events observed by normalize ops.
    pub fn zero_norm_events(&self) -> usize {
        self.zero_norm_events
    }

    // ── ops ──

    /// out[m×n] = a[m×k] · b[k×n]
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let wants = self.wants(a) || self.wants(b);
        let id = self.push(vec![m, n], out, wants);
        self.steps.push(Step::Matmul { a: a.0, b: b.0, out: id.0, m, k, n });
        Ok(id)
    }

    /// Batched matmul over the leading axis: a[N,m,k] · b[N,k,n] (or
    /// a[N,m,k] · b[N,n,k]ᵀ when `trans_b`).
    pub fn bmm(&mut self, a: TensorId, b: TensorId, trans_b: bool) -> Result<TensorId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::ShapeMismatch { op: "bmm", lhs: sa.clone(), rhs: sb.clone() });
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let av = &self.nodes[a.0].data[i * m * k..(i + 1) * m * k];
            let bv = &self.nodes[b.0].data[i * k * n..(i + 1) * k * n];
            let ov = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                mm_nt(av, bv, ov, m, k, n);
            } else {
                mm_nn(av, bv, ov, m, k, n);
            }
        }
        let wants = self.wants(a) || self.wants(b);
        let id = self.push(vec![batch, m, n], out, wants);
        self.steps.push(Step::Bmm { a: a.0, b: b.0, out: id.0, batch, m, k, n, trans_b });
        Ok(id)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let wants = self.wants(a) || self.wants(b);
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push(shape, out, wants);
        self.steps.push(Step::Add { a: a.0, b: b.0, out: id.0 });
        Ok(id)
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let wants = self.wants(a) || self.wants(b);
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push(shape, out, wants);
        self.steps.push(Step::Mul { a: a.0, b: b.0, out: id.0 });
        Ok(id)
    }

    /// a[.., cols] + b[cols], broadcast over rows (bias add).
    pub fn add_row_broadcast(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let cols = *self.nodes[a.0].shape.last().unwrap();
        if self.nodes[b.0].shape != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let rows = self.nodes[a.0].data.len() / cols;
        let mut out = self.nodes[a.0].data.clone();
        for r in 0..rows {
            for (o, &bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(&self.nodes[b.0].data) {
                *o += bv;
            }
        }
        let wants = self.wants(a) || self.wants(b);
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push(shape, out, wants);
        self.steps.push(Step::AddRowBroadcast { a: a.0, b: b.0, out: id.0, rows, cols });
        Ok(id)
    }

    /// a + b tiled `reps` times (e.g. position embeddings over a batch).
    /// `a.numel() == reps * b.numel()`.
    pub fn add_tiled(&mut self, a: TensorId, b: TensorId, reps: usize) -> Result<TensorId> {
        let chunk = self.nodes[b.0].data.len();
        if self.nodes[a.0].data.len() != reps * chunk {
            return Err(Error::ShapeMismatch {
                op: "add_tiled",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = self.nodes[a.0].data.clone();
        for r in 0..reps {
            for (o, &bv) in out[r * chunk..(r + 1) * chunk].iter_mut().zip(&self.nodes[b.0].data) {
                *o += bv;
            }
        }
        let wants = self.wants(a) || self.wants(b);
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push(shape, out, wants);
        self.steps.push(Step::AddTiled { a: a.0, b: b.0, out: id.0, reps, chunk });
        Ok(id)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let wants = self.wants(a);
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push(shape, out, wants);
        self.steps.push(Step::Scale { a: a.0, out: id.0, c });
        id
    }

    /// Exact GeLU, elementwise: 0.5·x·(1 + erf(x/√2)).
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu_scalar(x)).collect();
        let wants = self.wants(a);
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push(shape, out, wants);
        self.steps.push(Step::Gelu { a: a.0, out: id.0 });
        id
    }

    /// LayerNorm over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let dim = *self.nodes[x.0].shape.last().unwrap();
        if dim < 2 {
            return Err(Error::invalid(
                "layer_norm",
                format!("last axis must have at least 2 elements, got {dim}"),
            ));
        }
        if self.nodes[gain.0].shape != [dim] || self.nodes[bias.0].shape != [dim] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        let rows = self.nodes[x.0].data.len() / dim;
        let mut out = vec![0.0; rows * dim];
        let mut mean = vec![0.0; rows];
        let mut inv_std = vec![0.0; rows];
        {
            let xd = &self.nodes[x.0].data;
            let g = &self.nodes[gain.0].data;
            let b = &self.nodes[bias.0].data;
            for r in 0..rows {
                let row = &xd[r * dim..(r + 1) * dim];
                let mu = row.iter().sum::<f64>() / dim as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / dim as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                mean[r] = mu;
                inv_std[r] = is;
                let orow = &mut out[r * dim..(r + 1) * dim];
                for j in 0..dim {
                    orow[j] = (row[j] - mu) * is * g[j] + b[j];
                }
            }
        }
        let wants = self.wants(x) || self.wants(gain) || self.wants(bias);
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push(shape, out, wants);
        self.steps.push(Step::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            out: id.0,
            rows,
            dim,
            mean,
            inv_std,
        });
        Ok(id)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let cols = *self.nodes[a.0].shape.last().unwrap();
        let rows = self.nodes[a.0].data.len() / cols;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.nodes[a.0].data[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut s = 0.0;
            for j in 0..cols {
                let e = (row[j] - m).exp();
                orow[j] = e;
                s += e;
            }
            for o in orow.iter_mut() {
                *o /= s;
            }
        }
        let wants = self.wants(a);
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push(shape, out, wants);
        self.steps.push(Step::SoftmaxRows { a: a.0, out: id.0, rows, cols });
        id
    }

    /// Mean cross-entropy of logits[B,C] against integer labels, with
    /// max-subtraction stabilization. Returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("logits {:?} vs {} labels", shape, labels.len()),
            ));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if rows == 0 {
            return Err(Error::invalid("softmax_cross_entropy", "empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::IndexOutOfRange(format!(
                "label {bad} out of range for {cols} classes"
            )));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &self.nodes[logits.0].data[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            let prow = &mut probs[r * cols..(r + 1) * cols];
            for j in 0..cols {
                let e = (row[j] - m).exp();
                prow[j] = e;
                s += e;
            }
            for p in prow.iter_mut() {
                *p /= s;
            }
            total += s.ln() - (row[labels[r]] - m);
        }
        let wants = self.wants(logits);
        let id = self.push(vec![1], vec![total / rows as f64], wants);
        self.steps.push(Step::SoftmaxXent {
            logits: logits.0,
            out: id.0,
            labels: labels.to_vec(),
            rows,
            cols,
            probs,
        });
        Ok(id)
    }

    /// out[i, :] = src[idx[i], :] (embedding lookup / row selection).
    pub fn gather_rows(&mut self, src: TensorId, idx: &[usize]) -> Result<TensorId> {
        let sshape = &self.nodes[src.0].shape;
        if sshape.len() != 2 {
            return Err(Error::invalid("gather_rows", format!("source must be 2-d, got {sshape:?}")));
        }
        let (src_rows, cols) = (sshape[0], sshape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= src_rows) {
            return Err(Error::IndexOutOfRange(format!(
                "row {bad} out of range for {src_rows} rows"
            )));
        }
        let mut out = vec![0.0; idx.len() * cols];
        for (r, &i) in idx.iter().enumerate() {
            out[r * cols..(r + 1) * cols].copy_from_slice(&self.nodes[src.0].data[i * cols..(i + 1) * cols]);
        }
        let wants = self.wants(src);
        let id = self.push(vec![idx.len(), cols], out, wants);
        self.steps.push(Step::GatherRows { src: src.0, out: id.0, idx: idx.to_vec(), cols });
        Ok(id)
    }

    /// Reduce one axis by mean or max. Max ties resolve to the lowest index,
    /// in forward and backward alike.
    pub fn pool(&mut self, a: TensorId, axis: usize, mode: PoolMode) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "pool",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        let data = &self.nodes[a.0].data;
        match mode {
            PoolMode::Mean => {
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += data[base + i];
                        }
                    }
                }
                let inv = 1.0 / mid as f64;
                for v in out.iter_mut() {
                    *v *= inv;
                }
            }
            PoolMode::Max => {
                argmax = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = data[o * mid * inner + i];
                        let mut best_m = 0;
                        for m in 1..mid {
                            let v = data[(o * mid + m) * inner + i];
                            if v > best {
                                best = v;
                                best_m = m;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = best_m;
                    }
                }
            }
        }
        let wants = self.wants(a);
        let id = self.push(out_shape, out, wants);
        self.steps.push(Step::Pool { a: a.0, out: id.0, mode, outer, mid, inner, argmax });
        Ok(id)
    }

    /// Whole-buffer normalization x/‖x‖ (vector ℓ2 or matrix Frobenius; the
    /// arithmetic is identical). Inputs with norm ≤ `NORM_EPS` pass through
    /// unchanged and count a zero-norm event.
    pub fn normalize(&mut self, a: TensorId, _mode: NormMode) -> TensorId {
        let norm = self.nodes[a.0].data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let out: Vec<f64> = if norm <= NORM_EPS {
            self.zero_norm_events += 1;
            self.nodes[a.0].data.clone()
        } else {
            self.nodes[a.0].data.iter().map(|v| v / norm).collect()
        };
        let wants = self.wants(a);
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push(shape, out, wants);
        self.steps.push(Step::NormalizeAll { a: a.0, out: id.0, norm });
        id
    }

    /// Normalize each row (last axis) to unit ℓ2 length. Zero-norm rows pass
    /// through unchanged and count a zero-norm event.
    pub fn normalize_rows(&mut self, a: TensorId) -> TensorId {
        let cols = *self.nodes[a.0].shape.last().unwrap();
        let rows = self.nodes[a.0].data.len() / cols;
        let mut out = self.nodes[a.0].data.clone();
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = norm;
            if norm <= NORM_EPS {
                self.zero_norm_events += 1;
            } else {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        let wants = self.wants(a);
        let shape = self.nodes[a.0].shape.clone();
        let id = self.push(shape, out, wants);
        self.steps.push(Step::NormalizeRows { a: a.0, out: id.0, rows, cols, norms });
        id
    }

    /// 2-d transpose.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected 2-d, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.nodes[a.0].data[r * cols + c];
            }
        }
        let wants = self.wants(a);
        let id = self.push(vec![cols, rows], out, wants);
        self.steps.push(Step::Transpose { a: a.0, out: id.0, rows, cols });
        Ok(id)
    }

    /// Axis permutation (generalized transpose).
    pub fn permute(&mut self, a: TensorId, perm: &[usize]) -> Result<TensorId> {
        let in_shape = self.nodes[a.0].shape.clone();
        let nd = in_shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of {nd} axes"),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let mut in_strides = vec![1usize; nd];
        for d in (0..nd.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
        }
        let total = numel(&in_shape);
        // index_map[out_linear] = in_linear
        let mut index_map = vec![0usize; total];
        let mut out_idx = vec![0usize; nd];
        for (lin, slot) in index_map.iter_mut().enumerate() {
            let mut rem = lin;
            for d in (0..nd).rev() {
                out_idx[d] = rem % out_shape[d];
                rem /= out_shape[d];
            }
            let mut src = 0;
            for d in 0..nd {
                src += out_idx[d] * in_strides[perm[d]];
            }
            *slot = src;
        }
        let mut out = vec![0.0; total];
        for (dst, &src) in out.iter_mut().zip(&index_map) {
            *dst = self.nodes[a.0].data[src];
        }
        let wants = self.wants(a);
        let id = self.push(out_shape, out, wants);
        self.steps.push(Step::Permute { a: a.0, out: id.0, index_map });
        Ok(id)
    }

    /// View with a new shape (same element count; data copied).
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let out = self.nodes[a.0].data.clone();
        let wants = self.wants(a);
        let id = self.push(shape, out, wants);
        self.steps.push(Step::Reshape { a: a.0, out: id.0 });
        Ok(id)
    }

    /// Sum of all elements (scalar).
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.nodes[a.0].data.iter().sum();
        let wants = self.wants(a);
        let id = self.push(vec![1], vec![s], wants);
        self.steps.push(Step::SumAll { a: a.0, out: id.0 });
        id
    }

    // ── backward ──

    /// Reverse sweep from a scalar loss. Each recorded step is visited
    /// exactly once; a second call on the same tape is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.ran_backward {
            return Err(Error::Contract(
                "backward already ran on this tape; build a fresh tape per step".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        self.ran_backward = true;
        self.grads = Vec::with_capacity(self.nodes.len());
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(vec![1.0]);
        let steps = std::mem::take(&mut self.steps);
        for step in steps.iter().rev() {
            let out = step.out();
            let Some(g) = self.grads[out].take() else { continue };
            self.backprop_step(step, &g);
        }
        self.steps = steps;
        Ok(())
    }

    /// Temporarily move a node's data out for backward arithmetic; aliased
    /// operands (both inputs the same node) are cloned instead so the second
    /// arm still sees the values.
    fn borrow_data(&mut self, id: usize, aliased: bool) -> Vec<f64> {
        if aliased {
            self.nodes[id].data.clone()
        } else {
            std::mem::take(&mut self.nodes[id].data)
        }
    }

    fn restore_data(&mut self, id: usize, data: Vec<f64>, aliased: bool) {
        if !aliased {
            self.nodes[id].data = data;
        }
    }

    /// Gradient buffer for node `id`, created on demand; None when the node
    /// does not need a gradient. Sized from the shape, not the data buffer,
    /// because backward temporarily takes node data while it works.
    fn acc(&mut self, id: usize) -> Option<&mut Vec<f64>> {
        if !self.nodes[id].wants {
            return None;
        }
        let len = numel(&self.nodes[id].shape);
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_step(&mut self, step: &Step, g: &[f64]) {
        match *step {
            Step::Matmul { a, b, out: _, m, k, n } => {
                if self.nodes[a].wants {
                    let bdata = self.borrow_data(b, a == b);
                    let ga = self.acc(a).unwrap();
                    mm_nt(g, &bdata, ga, m, n, k);
                    self.restore_data(b, bdata, a == b);
                }
                if self.nodes[b].wants {
                    let adata = self.borrow_data(a, a == b);
                    let gb = self.acc(b).unwrap();
                    mm_tn(&adata, g, gb, k, m, n);
                    self.restore_data(a, adata, a == b);
                }
            }
            Step::Bmm { a, b, out: _, batch, m, k, n, trans_b } => {
                if self.nodes[a].wants {
                    let bdata = self.borrow_data(b, a == b);
                    let ga = self.acc(a).unwrap();
                    for i in 0..batch {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let bs = &bdata[i * k * n..(i + 1) * k * n];
                        let gas = &mut ga[i * m * k..(i + 1) * m * k];
                        if trans_b {
                            mm_nn(gs, bs, gas, m, n, k);
                        } else {
                            mm_nt(gs, bs, gas, m, n, k);
                        }
                    }
                    self.restore_data(b, bdata, a == b);
                }
                if self.nodes[b].wants {
                    let adata = self.borrow_data(a, a == b);
                    let gb = self.acc(b).unwrap();
                    for i in 0..batch {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let as_ = &adata[i * m * k..(i + 1) * m * k];
                        let gbs = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            // d/db of a·bᵀ: gᵀ·a, shape [n,k]
                            mm_tn(gs, as_, gbs, n, m, k);
                        } else {
                            mm_tn(as_, gs, gbs, k, m, n);
                        }
                    }
                    self.restore_data(a, adata, a == b);
                }
            }
            Step::Add { a, b, out: _ } => {
                if let Some(ga) = self.acc(a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Step::Mul { a, b, out: _ } => {
                if self.nodes[a].wants {
                    let bdata = self.borrow_data(b, a == b);
                    let ga = self.acc(a).unwrap();
                    for i in 0..bdata.len() {
                        ga[i] += g[i] * bdata[i];
                    }
                    self.restore_data(b, bdata, a == b);
                }
                if self.nodes[b].wants {
                    let adata = self.borrow_data(a, a == b);
                    let gb = self.acc(b).unwrap();
                    for i in 0..adata.len() {
                        gb[i] += g[i] * adata[i];
                    }
                    self.restore_data(a, adata, a == b);
                }
            }
            Step::AddRowBroadcast { a, b, out: _, rows, cols } => {
                if let Some(ga) = self.acc(a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for r in 0..rows {
                        for (d, &s) in gb.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += s;
                        }
                    }
                }
            }
            Step::AddTiled { a, b, out: _, reps, chunk } => {
                if let Some(ga) = self.acc(a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if let Some(gb) = self.acc(b) {
                    for r in 0..reps {
                        for (d, &s) in gb.iter_mut().zip(&g[r * chunk..(r + 1) * chunk]) {
                            *d += s;
                        }
                    }
                }
            }
            Step::Scale { a, out: _, c } => {
                if let Some(ga) = self.acc(a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += c * s;
                    }
                }
            }
            Step::Gelu { a, out: _ } => {
                if self.nodes[a].wants {
                    let x = std::mem::take(&mut self.nodes[a].data);
                    let ga = self.acc(a).unwrap();
                    for i in 0..x.len() {
                        ga[i] += g[i] * gelu_grad_scalar(x[i]);
                    }
                    self.nodes[a].data = x;
                }
            }
            Step::LayerNorm { x, gain, bias, out: _, rows, dim, ref mean, ref inv_std } => {
                let xd = std::mem::take(&mut self.nodes[x].data);
                let gd = std::mem::take(&mut self.nodes[gain].data);
                for r in 0..rows {
                    let xrow = &xd[r * dim..(r + 1) * dim];
                    let grow = &g[r * dim..(r + 1) * dim];
                    let (mu, is) = (mean[r], inv_std[r]);
                    if self.nodes[x].wants {
                        // h = g⊙gain; dx = is·(h − mean(h) − x̂·mean(h⊙x̂))
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..dim {
                            let h = grow[j] * gd[j];
                            let xh = (xrow[j] - mu) * is;
                            m1 += h;
                            m2 += h * xh;
                        }
                        m1 /= dim as f64;
                        m2 /= dim as f64;
                        let gx = self.acc(x).unwrap();
                        let gxrow = &mut gx[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            let h = grow[j] * gd[j];
                            let xh = (xrow[j] - mu) * is;
                            gxrow[j] += is * (h - m1 - xh * m2);
                        }
                    }
                    if self.nodes[gain].wants {
                        let gg = self.acc(gain).unwrap();
                        for j in 0..dim {
                            gg[j] += grow[j] * (xrow[j] - mu) * is;
                        }
                    }
                    if self.nodes[bias].wants {
                        let gb = self.acc(bias).unwrap();
                        for j in 0..dim {
                            gb[j] += grow[j];
                        }
                    }
                }
                self.nodes[x].data = xd;
                self.nodes[gain].data = gd;
            }
            Step::SoftmaxRows { a, out, rows, cols } => {
                if self.nodes[a].wants {
                    let probs = std::mem::take(&mut self.nodes[out].data);
                    let ga = self.acc(a).unwrap();
                    for r in 0..rows {
                        let p = &probs[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = p.iter().zip(grow).map(|(pv, gv)| pv * gv).sum();
                        let garow = &mut ga[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            garow[j] += p[j] * (grow[j] - dot);
                        }
                    }
                    self.nodes[out].data = probs;
                }
            }
            Step::SoftmaxXent { logits, out: _, ref labels, rows, cols, ref probs } => {
                if self.nodes[logits].wants {
                    let scale = g[0] / rows as f64;
                    let gl = self.acc(logits).unwrap();
                    for r in 0..rows {
                        let prow = &probs[r * cols..(r + 1) * cols];
                        let grow = &mut gl[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            let indicator = if j == labels[r] { 1.0 } else { 0.0 };
                            grow[j] += scale * (prow[j] - indicator);
                        }
                    }
                }
            }
            Step::GatherRows { src, out: _, ref idx, cols } => {
                if let Some(gs) = self.acc(src) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, &s) in gs[i * cols..(i + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *d += s;
                        }
                    }
                }
            }
            Step::Pool { a, out: _, mode, outer, mid, inner, ref argmax } => {
                if let Some(ga) = self.acc(a) {
                    match mode {
                        PoolMode::Mean => {
                            let inv = 1.0 / mid as f64;
                            for o in 0..outer {
                                for m in 0..mid {
                                    let base = (o * mid + m) * inner;
                                    for i in 0..inner {
                                        ga[base + i] += g[o * inner + i] * inv;
                                    }
                                }
                            }
                        }
                        PoolMode::Max => {
                            for o in 0..outer {
                                for i in 0..inner {
                                    let m = argmax[o * inner + i];
                                    ga[(o * mid + m) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    }
                }
            }
            Step::NormalizeRows { a, out, rows, cols, ref norms } => {
                if self.nodes[a].wants {
                    let y = std::mem::take(&mut self.nodes[out].data);
                    let ga = self.acc(a).unwrap();
                    for r in 0..rows {
                        let norm = norms[r];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let garow = &mut ga[r * cols..(r + 1) * cols];
                        if norm <= NORM_EPS {
                            for (d, &s) in garow.iter_mut().zip(grow) {
                                *d += s;
                            }
                        } else {
                            let yrow = &y[r * cols..(r + 1) * cols];
                            let dot: f64 = yrow.iter().zip(grow).map(|(yv, gv)| yv * gv).sum();
                            for j in 0..cols {
                                garow[j] += (grow[j] - yrow[j] * dot) / norm;
                            }
                        }
                    }
                    self.nodes[out].data = y;
                }
            }
            Step::NormalizeAll { a, out, norm } => {
                if self.nodes[a].wants {
                    let y = std::mem::take(&mut self.nodes[out].data);
                    let ga = self.acc(a).unwrap();
                    if norm <= NORM_EPS {
                        for (d, &s) in ga.iter_mut().zip(g) {
                            *d += s;
                        }
                    } else {
                        let dot: f64 = y.iter().zip(g).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..y.len() {
                            ga[j] += (g[j] - y[j] * dot) / norm;
                        }
                    }
                    self.nodes[out].data = y;
                }
            }
            Step::Transpose { a, out: _, rows, cols } => {
                if let Some(ga) = self.acc(a) {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            Step::Permute { a, out: _, ref index_map } => {
                if let Some(ga) = self.acc(a) {
                    for (&gv, &src) in g.iter().zip(index_map) {
                        ga[src] += gv;
                    }
                }
            }
            Step::Reshape { a, out: _ } => {
                if let Some(ga) = self.acc(a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Step::SumAll { a, out: _ } => {
                if let Some(ga) = self.acc(a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}
