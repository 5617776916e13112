//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed at
//! recording time, and [`Graph::backward`] replays the tape in reverse to
//! accumulate gradients via vector-Jacobian products. Handles ([`Var`]) are
//! plain indices into the tape, cheap to copy.
//!
//! Backward may run at most once per graph; a second call is rejected.
//! Parameter gradients accumulate into the owning [`ParamSet`] across
//! graphs (and therefore across micro-batches) until explicitly zeroed.

use std::collections::HashMap;

use crate::error::AutodiffError;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Additive mask value for attention logits. Large enough that masked
/// entries underflow to exactly 0 after softmax, small enough to stay
/// finite. Adding any realistic score to it leaves it bit-identical, which
/// keeps masked positions numerically invisible.
pub const MASK_NEG: f64 = -1e30;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    DivScalar(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    PowInt(usize, i32),
    Matmul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Ln(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Softmax(usize, usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    SumAll(usize),
    SumAxis(usize, usize),
    GatherRows(usize, Vec<usize>),
    SelectPerRow(usize, Vec<usize>),
    SliceCols(usize, usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Reshape(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    param_index: HashMap<String, usize>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Unnamed differentiable leaf, for probing gradients of raw inputs.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Mounts a named parameter as a differentiable leaf. Repeated mounts of
    /// the same name return the same node so its gradient accumulates once.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var, AutodiffError> {
        if let Some(&id) = self.param_index.get(name) {
            return Ok(Var(id));
        }
        let value = params.value(name)?.clone();
        let var = self.push(Op::Leaf, value, true);
        self.param_index.insert(name.to_string(), var.0);
        Ok(var)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64, AutodiffError> {
        self.nodes[v.0].value.item()
    }

    /// Gradient of `v`, present once backward has run and `v` participates.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Sum of every normalized slice of every softmax node recorded in the
    /// graph (rows for axis 1, columns for axis 0). Each entry is 1 up to
    /// floating-point error; exposed so callers can audit normalization of
    /// all attention and output distributions in a forward pass.
    pub fn softmax_slice_sums(&self) -> Vec<f64> {
        let mut sums = Vec::new();
        for node in &self.nodes {
            if let Op::Softmax(_, axis) = node.op {
                let (n, d) = node.value.dims2();
                if node.value.rank() <= 1 || axis == 1 {
                    for i in 0..n {
                        sums.push(node.value.data()[i * d..(i + 1) * d].iter().sum());
                    }
                } else {
                    for j in 0..d {
                        sums.push((0..n).map(|i| node.value.data()[i * d + j]).sum());
                    }
                }
            }
        }
        sums
    }

    // ── elementwise and arithmetic ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn binary_same_shape(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: opname,
                details: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(op, value, rg))
    }

    /// `[n, d] + [d]` (or `[1, d]`), broadcasting the bias over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, d) = va.dims2();
        if va.rank() != 2 || vb.numel() != d {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                details: format!("{:?} + {:?}", va.shape(), vb.shape()),
            });
        }
        let mut data = va.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += vb.data()[j];
            }
        }
        let value = Tensor::new(vec![n, d], data).expect("shape");
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::AddBias(a.0, b.0), value, rg))
    }

    /// Elementwise division by a scalar-valued variable.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        let sv = self.nodes[s.0].value.item()?;
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x / sv).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape");
        let rg = self.nodes[a.0].requires_grad || self.nodes[s.0].requires_grad;
        Ok(self.push(Op::DivScalar(a.0, s.0), value, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape");
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Scale(a.0, c), value, rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x + c).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape");
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::AddConst(a.0), value, rg)
    }

    /// Elementwise integer power (valid for negative bases).
    pub fn pow_int(&mut self, a: Var, k: i32) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x.powi(k)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape");
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::PowInt(a.0, k), value, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| f(*x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape");
        let rg = self.nodes[a.0].requires_grad;
        self.push(op, value, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    /// Natural log. Callers are responsible for flooring the argument away
    /// from zero (see [`crate::ops::LOG_EPS`]).
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a.0, slope))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                details: format!("{:?} x {:?}", va.shape(), vb.shape()),
            });
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let n = vb.shape()[1];
        let value = Tensor::new(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n)).expect("shape");
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(Op::Matmul(a.0, b.0), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                details: format!("expected rank 2, got {:?}", va.shape()),
            });
        }
        let (n, d) = va.dims2();
        let value = Tensor::new(vec![d, n], transpose_raw(va.data(), n, d)).expect("shape");
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Transpose(a.0), value, rg))
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis` (max subtraction per
    /// slice). Rank-1 tensors use axis 0; rank-2 accept axis 0 or 1.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let va = &self.nodes[a.0].value;
        let rank = va.rank().max(1);
        if axis >= rank || va.rank() > 2 {
            return Err(AutodiffError::InvalidAxis { axis, rank: va.rank() });
        }
        let (n, d) = va.dims2();
        let mut data = va.data().to_vec();
        if va.rank() <= 1 || axis == 1 {
            for i in 0..n {
                softmax_slice(&mut data[i * d..(i + 1) * d], 1);
            }
        } else {
            for j in 0..d {
                softmax_slice(&mut data[j..], d);
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape");
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Softmax(a.0, axis), value, rg))
    }

    /// Layer normalization over the last axis of `[n, d]`, with learned
    /// gain `gamma` and shift `beta` of `d` elements each.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, AutodiffError> {
        let (vx, vg, vb) =
            (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let (n, d) = vx.dims2();
        if vx.rank() != 2 || vg.numel() != d || vb.numel() != d {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                details: format!("x {:?}, gamma {:?}, beta {:?}", vx.shape(), vg.shape(), vb.shape()),
            });
        }
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &vx.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = vg.data()[j] * (row[j] - mean) * inv + vb.data()[j];
            }
        }
        let value = Tensor::new(vec![n, d], data).expect("shape");
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        Ok(self.push(Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }, value, rg))
    }

    // ── reductions and indexing ─────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::SumAll(a.0), Tensor::scalar(s), rg)
    }

    /// Sum of a rank-2 tensor along `axis`: axis 0 yields `[d]`, axis 1 `[n]`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 || axis > 1 {
            return Err(AutodiffError::InvalidAxis { axis, rank: va.rank() });
        }
        let (n, d) = va.dims2();
        let value = if axis == 0 {
            let mut out = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    out[j] += va.data()[i * d + j];
                }
            }
            Tensor::vector(out)
        } else {
            let out = (0..n).map(|i| va.row(i).iter().sum()).collect();
            Tensor::vector(out)
        };
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::SumAxis(a.0, axis), value, rg))
    }

    /// Rows of `a` at `indices`, in order; duplicates allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let va = &self.nodes[a.0].value;
        let (n, d) = va.dims2();
        if va.rank() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                details: format!("expected rank 2, got {:?}", va.shape()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                details: format!("row {} out of bounds for {} rows", bad, n),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(va.row(i));
        }
        let value = Tensor::new(vec![indices.len(), d], data).expect("shape");
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::GatherRows(a.0, indices.to_vec()), value, rg))
    }

    /// One element per row: `out[i] = a[i, ids[i]]`.
    pub fn select_per_row(&mut self, a: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let va = &self.nodes[a.0].value;
        let (n, d) = va.dims2();
        if va.rank() != 2 || ids.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "select_per_row",
                details: format!("{:?} with {} ids", va.shape(), ids.len()),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&j| j >= d) {
            return Err(AutodiffError::ShapeMismatch {
                op: "select_per_row",
                details: format!("column {} out of bounds for {} columns", bad, d),
            });
        }
        let data = ids.iter().enumerate().map(|(i, &j)| va.data()[i * d + j]).collect();
        let value = Tensor::vector(data);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::SelectPerRow(a.0, ids.to_vec()), value, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let va = &self.nodes[a.0].value;
        let (n, d) = va.dims2();
        if va.rank() != 2 || start >= end || end > d {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                details: format!("columns {}..{} of {:?}", start, end, va.shape()),
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&va.data()[i * d + start..i * d + end]);
        }
        let value = Tensor::new(vec![n, w], data).expect("shape");
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::SliceCols(a.0, start, end), value, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_rows",
                details: "no inputs".into(),
            });
        }
        let d = self.nodes[parts[0].0].value.dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rank() != 2 || v.dims2().1 != d {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    details: format!("expected [*, {}], got {:?}", d, v.shape()),
                });
            }
            rows += v.dims2().0;
            data.extend_from_slice(v.data());
            rg |= self.nodes[p.0].requires_grad;
        }
        let value = Tensor::new(vec![rows, d], data).expect("shape");
        Ok(self.push(Op::ConcatRows(parts.iter().map(|p| p.0).collect()), value, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_cols",
                details: "no inputs".into(),
            });
        }
        let n = self.nodes[parts[0].0].value.dims2().0;
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.dims2().1).collect();
        let mut rg = false;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rank() != 2 || v.dims2().0 != n {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    details: format!("expected [{}, *], got {:?}", n, v.shape()),
                });
            }
            rg |= self.nodes[p.0].requires_grad;
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        let value = Tensor::new(vec![n, total], data).expect("shape");
        Ok(self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), value, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let va = &self.nodes[a.0].value;
        let numel: usize = shape.iter().product();
        if numel != va.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {:?}", va.shape(), shape),
            });
        }
        let value = Tensor::new(shape.to_vec(), va.data().to_vec()).expect("shape");
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Reshape(a.0), value, rg))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates per-node gradients; a
    /// second call on the same graph is rejected (rebuild the graph to
    /// differentiate again).
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalar(lv.shape().to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).expect("scalar"));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, id: usize, update: impl FnOnce(&mut Tensor)) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id].value.shape()));
        }
        update(slot.as_mut().expect("just filled"));
    }

    fn propagate(&mut self, id: usize, g: &Tensor) {
        // The tape is topologically ordered, so every input index is < id
        // and never aliases the output gradient.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, |t| add_into(t, g.data()));
                self.accum(b, |t| add_into(t, g.data()));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, |t| add_into(t, g.data()));
                self.accum(b, |t| sub_into(t, g.data()));
            }
            Op::AddBias(a, b) => {
                let (a, b) = (*a, *b);
                let (n, d) = self.nodes[a].value.dims2();
                self.accum(a, |t| add_into(t, g.data()));
                self.accum(b, |t| {
                    for i in 0..n {
                        for j in 0..d {
                            t.data_mut()[j] += g.data()[i * d + j];
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a].value.data().to_vec();
                let bv = self.nodes[b].value.data().to_vec();
                self.accum(a, |t| {
                    for (i, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g.data()[i] * bv[i];
                    }
                });
                self.accum(b, |t| {
                    for (i, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g.data()[i] * av[i];
                    }
                });
            }
            Op::DivScalar(a, s) => {
                let (a, s) = (*a, *s);
                let sv = self.nodes[s].value.data()[0];
                let av = self.nodes[a].value.data().to_vec();
                self.accum(a, |t| {
                    for (i, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g.data()[i] / sv;
                    }
                });
                let ds: f64 =
                    g.data().iter().zip(av.iter()).map(|(gi, ai)| -gi * ai / (sv * sv)).sum();
                self.accum(s, |t| t.data_mut()[0] += ds);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accum(a, |t| {
                    for (i, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += c * g.data()[i];
                    }
                });
            }
            Op::AddConst(a) => {
                let a = *a;
                self.accum(a, |t| add_into(t, g.data()));
            }
            Op::PowInt(a, k) => {
                let (a, k) = (*a, *k);
                let av = self.nodes[a].value.data().to_vec();
                self.accum(a, |t| {
                    for (i, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g.data()[i] * k as f64 * av[i].powi(k - 1);
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.nodes[a].value.dims2();
                let n = self.nodes[b].value.dims2().1;
                let at = transpose_raw(self.nodes[a].value.data(), m, k);
                let bt = transpose_raw(self.nodes[b].value.data(), k, n);
                let da = matmul_raw(g.data(), &bt, m, n, k);
                let db = matmul_raw(&at, g.data(), k, m, n);
                self.accum(a, |t| add_into(t, &da));
                self.accum(b, |t| add_into(t, &db));
            }
            Op::Transpose(a) => {
                let a = *a;
                let (n, d) = self.nodes[a].value.dims2();
                let gt = transpose_raw(g.data(), d, n);
                self.accum(a, |t| add_into(t, &gt));
            }
            Op::Exp(a) => {
                let a = *a;
                let y = self.nodes[id].value.data().to_vec();
                self.accum(a, |t| {
                    for (i, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g.data()[i] * y[i];
                    }
                });
            }
            Op::Ln(a) => {
                let a = *a;
                let x = self.nodes[a].value.data().to_vec();
                self.accum(a, |t| {
                    for (i, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g.data()[i] / x[i];
                    }
                });
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = self.nodes[id].value.data().to_vec();
                self.accum(a, |t| {
                    for (i, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g.data()[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = self.nodes[id].value.data().to_vec();
                self.accum(a, |t| {
                    for (i, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g.data()[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let a = *a;
                let x = self.nodes[a].value.data().to_vec();
                self.accum(a, |t| {
                    for (i, tv) in t.data_mut().iter_mut().enumerate() {
                        if x[i] > 0.0 {
                            *tv += g.data()[i];
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let x = self.nodes[a].value.data().to_vec();
                self.accum(a, |t| {
                    for (i, tv) in t.data_mut().iter_mut().enumerate() {
                        *tv += g.data()[i] * if x[i] > 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (a, axis) = (*a, *axis);
                let y = &self.nodes[id].value;
                let (n, d) = y.dims2();
                let mut dx = vec![0.0; y.numel()];
                let along_rows = y.rank() <= 1 || axis == 1;
                if along_rows {
                    for i in 0..n {
                        softmax_vjp(
                            &y.data()[i * d..(i + 1) * d],
                            &g.data()[i * d..(i + 1) * d],
                            &mut dx[i * d..(i + 1) * d],
                            1,
                        );
                    }
                } else {
                    for j in 0..d {
                        softmax_vjp(&y.data()[j..], &g.data()[j..], &mut dx[j..], d);
                    }
                }
                self.accum(a, |t| add_into(t, &dx));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let vx = self.nodes[x].value.clone();
                let vg = self.nodes[gamma].value.clone();
                let (n, d) = vx.dims2();
                let mut dx = vec![0.0; n * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    let row = &vx.data()[i * d..(i + 1) * d];
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    for j in 0..d {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    let dxhat: Vec<f64> = (0..d).map(|j| grow[j] * vg.data()[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.accum(x, |t| add_into(t, &dx));
                self.accum(gamma, |t| add_into(t, &dgamma));
                self.accum(beta, |t| add_into(t, &dbeta));
            }
            Op::SumAll(a) => {
                let a = *a;
                let gv = g.data()[0];
                self.accum(a, |t| t.data_mut().iter_mut().for_each(|v| *v += gv));
            }
            Op::SumAxis(a, axis) => {
                let (a, axis) = (*a, *axis);
                let (n, d) = self.nodes[a].value.dims2();
                self.accum(a, |t| {
                    for i in 0..n {
                        for j in 0..d {
                            t.data_mut()[i * d + j] += g.data()[if axis == 0 { j } else { i }];
                        }
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                let a = *a;
                let indices = indices.clone();
                let d = self.nodes[a].value.dims2().1;
                self.accum(a, |t| {
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            t.data_mut()[i * d + j] += g.data()[k * d + j];
                        }
                    }
                });
            }
            Op::SelectPerRow(a, ids) => {
                let a = *a;
                let ids = ids.clone();
                let d = self.nodes[a].value.dims2().1;
                self.accum(a, |t| {
                    for (i, &j) in ids.iter().enumerate() {
                        t.data_mut()[i * d + j] += g.data()[i];
                    }
                });
            }
            Op::SliceCols(a, start, end) => {
                let (a, start, end) = (*a, *start, *end);
                let (n, d) = self.nodes[a].value.dims2();
                let w = end - start;
                self.accum(a, |t| {
                    for i in 0..n {
                        for j in 0..w {
                            t.data_mut()[i * d + start + j] += g.data()[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p].value.numel();
                    let slice = g.data()[offset..offset + len].to_vec();
                    self.accum(p, |t| add_into(t, &slice));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let n = self.nodes[parts[0]].value.dims2().0;
                let total = self.nodes[id].value.dims2().1;
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p].value.dims2().1;
                    let mut slice = vec![0.0; n * w];
                    for i in 0..n {
                        slice[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    self.accum(p, |t| add_into(t, &slice));
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                self.accum(a, |t| add_into(t, g.data()));
            }
        }
    }

    /// Adds the gradient of every mounted parameter into `params`. Leaves
    /// that never influenced the loss contribute zero, so every parameter
    /// ends up with a populated gradient.
    pub fn export_grads(&self, params: &mut ParamSet) -> Result<(), AutodiffError> {
        if !self.backward_done {
            return Err(AutodiffError::ContractViolation(
                "export_grads called before backward".into(),
            ));
        }
        for (name, &id) in &self.param_index {
            match &self.grads[id] {
                Some(g) => params.accumulate_grad(name, g)?,
                None => {
                    let zero = Tensor::zeros(self.nodes[id].value.shape());
                    params.accumulate_grad(name, &zero)?;
                }
            }
        }
        Ok(())
    }
}

fn add_into(t: &mut Tensor, g: &[f64]) {
    for (tv, gv) in t.data_mut().iter_mut().zip(g) {
        *tv += gv;
    }
}

fn sub_into(t: &mut Tensor, g: &[f64]) {
    for (tv, gv) in t.data_mut().iter_mut().zip(g) {
        *tv -= gv;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            out[j * n + i] = a[i * d + j];
        }
    }
    out
}

/// In-place stabilized softmax over a strided slice (stride 1 for rows).
fn softmax_slice(data: &mut [f64], stride: usize) {
    let mut max = f64::NEG_INFINITY;
    let mut i = 0;
    while i < data.len() {
        max = max.max(data[i]);
        i += stride;
    }
    let mut sum = 0.0;
    let mut i = 0;
    while i < data.len() {
        data[i] = (data[i] - max).exp();
        sum += data[i];
        i += stride;
    }
    let mut i = 0;
    while i < data.len() {
        data[i] /= sum;
        i += stride;
    }
}

/// dx = y * (g - <g, y>) over a strided slice.
fn softmax_vjp(y: &[f64], g: &[f64], dx: &mut [f64], stride: usize) {
    let mut dot = 0.0;
    let mut i = 0;
    while i < y.len() {
        dot += y[i] * g[i];
        i += stride;
    }
    let mut i = 0;
    while i < y.len() {
        dx[i] = y[i] * (g[i] - dot);
        i += stride;
    }
}
