//! Recording graph: eager forward evaluation plus a reverse sweep.

use super::ops;
use super::{GradMask, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Minimum,
    Maximum,
    Relu,
    Neg,
    Scale(f32),
    AddScalar(f32),
    /// inputs: [a, s]; s is a 1-element tensor broadcast over a.
    AddScalarT,
    /// inputs: [a, bias]; bias has length cols(a), broadcast over rows.
    AddBias,
    MatMul,
    Transpose,
    Gelu,
    Sigmoid,
    Softplus,
    SoftmaxRows,
    /// inputs: [x, gamma, beta]
    LayerNorm { eps: f32 },
    GatherRows { ids: Vec<usize> },
    /// inputs: [base, rows]; out = base with rows[i] added at positions[i].
    ScatterAddRows { positions: Vec<usize> },
    SliceCols { start: usize, len: usize },
    ConcatCols,
    /// [c,h,w] image -> [g*g, c*p*p] patch matrix.
    Patchify { patch: usize },
    Sum,
    Mean,
    FocalBce { targets: Vec<f32>, alpha: f32, gamma: f32 },
    SmoothL1 { targets: Vec<f32>, beta: f32 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Minimum => "minimum",
            Op::Maximum => "maximum",
            Op::Relu => "relu",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::AddScalarT => "add_scalar_t",
            Op::AddBias => "add_bias",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::SoftmaxRows => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols => "concat_cols",
            Op::Patchify { .. } => "patchify",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::FocalBce { .. } => "focal_bce",
            Op::SmoothL1 { .. } => "smooth_l1",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    mask: Option<Vec<usize>>,
}

/// Append-only computation graph. Construction and `backward` are
/// single-threaded; a finished graph may be read concurrently.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, shape: Vec<usize>, data: Vec<f32>) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { op, inputs, shape, data, requires_grad, grad: None, mask: None });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rows(&self, v: Var) -> usize {
        let s = &self.nodes[v.0].shape;
        if s.len() >= 2 {
            s[0]
        } else {
            1
        }
    }

    fn cols(&self, v: Var) -> usize {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            0 => 1,
            1 => s[0],
            _ => s[s.len() - 1],
        }
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Insert a tensor as a leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let v = self.push(Op::Leaf, vec![], t.shape().to_vec(), t.data().to_vec());
        self.nodes[v.0].requires_grad = t.requires_grad;
        v
    }

    /// Leaf that records gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.push(Op::Leaf, vec![], t.shape().to_vec(), t.data().to_vec());
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Trainable leaf restricted to the mask's rows: all other rows come
    /// out of `backward` with exactly-zero gradient.
    pub fn masked_param(&mut self, t: &Tensor, mask: &GradMask) -> Result<Var> {
        let rows = if t.shape().len() >= 2 { t.shape()[0] } else { 1 };
        if let Some(&mx) = mask.rows().last() {
            if mx >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "masked_param",
                    index: mx,
                    bound: rows,
                });
            }
        }
        let v = self.param(t);
        self.nodes[v.0].mask = Some(mask.rows().to_vec());
        Ok(v)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&mut self, v: f32) -> Var {
        self.leaf(&Tensor::scalar(v))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_elementwise(&mut self, op: Op, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(op.name(), a, b)?;
        let data: Vec<f32> = {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            match op {
                Op::Add => da.iter().zip(db).map(|(x, y)| x + y).collect(),
                Op::Sub => da.iter().zip(db).map(|(x, y)| x - y).collect(),
                Op::Mul => da.iter().zip(db).map(|(x, y)| x * y).collect(),
                Op::Div => da.iter().zip(db).map(|(x, y)| x / y).collect(),
                Op::Minimum => da.iter().zip(db).map(|(x, y)| x.min(*y)).collect(),
                Op::Maximum => da.iter().zip(db).map(|(x, y)| x.max(*y)).collect(),
                _ => unreachable!(),
            }
        };
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(op, vec![a.0, b.0], shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(Op::Div, a, b)
    }

    /// Elementwise minimum; ties send the gradient to the first input.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(Op::Minimum, a, b)
    }

    /// Elementwise maximum; ties send the gradient to the first input.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(Op::Maximum, a, b)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f32) -> f32) -> Var {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(op, vec![a.0], shape, data)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu, a, |x| x.max(0.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(Op::Scale(c), a, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.unary(Op::AddScalar(c), a, |x| x + c)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Op::Gelu, a, ops::gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid, a, ops::sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus, a, ops::softplus)
    }

    /// Broadcast a 1-element tensor over all entries of `a`.
    pub fn add_scalar_t(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "add_scalar_t",
                detail: format!("scalar operand has shape {:?}", self.nodes[s.0].shape),
            });
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|&x| x + sv).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::AddScalarT, vec![a.0, s.0], shape, data))
    }

    /// Broadcast-add a length-n bias over the rows of an m x n matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.cols(a);
        if self.nodes[bias.0].data.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias len {} vs {} cols", self.nodes[bias.0].data.len(), n),
            });
        }
        let m = self.rows(a);
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            for (o, &b) in row.iter_mut().zip(&self.nodes[bias.0].data) {
                *o += b;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::AddBias, vec![a.0, bias.0], shape, data))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = (self.rows(a), self.cols(a));
        let (kb, n) = (self.rows(b), self.cols(b));
        if ka != kb || self.nodes[a.0].shape.len() != 2 || self.nodes[b.0].shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let mut data = vec![0.0f32; m * n];
        ops::matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut data);
        Ok(self.push(Op::MatMul, vec![a.0, b.0], vec![m, n], data))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("{:?}", self.nodes[a.0].shape),
            });
        }
        let (m, n) = (self.rows(a), self.cols(a));
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose, vec![a.0], vec![n, m], data))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = (self.rows(a), self.cols(a));
        let mut data = self.nodes[a.0].data.clone();
        for i in 0..m {
            ops::softmax_row(&mut data[i * n..(i + 1) * n]);
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(Op::SoftmaxRows, vec![a.0], shape, data)
    }

    /// Per-row layer normalization with learnable gain/offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let n = self.cols(x);
        if self.nodes[gamma.0].data.len() != n || self.nodes[beta.0].data.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("gamma/beta len vs {} cols", n),
            });
        }
        let m = self.rows(x);
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &self.nodes[x.0].data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let inv = 1.0 / (var + eps).sqrt();
            let out = &mut data[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] =
                    (row[j] - mean) * inv * self.nodes[gamma.0].data[j] + self.nodes[beta.0].data[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::LayerNorm { eps }, vec![x.0, gamma.0, beta.0], shape, data))
    }

    // ── Indexing ─────────────────────────────────────────────────────

    /// Row lookup: out[i] = table[ids[i]]. The backward pass accumulates
    /// into exactly the gathered rows, so duplicate ids sum.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, d) = (self.rows(table), self.cols(table));
        for &id in ids {
            if id >= m {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: id, bound: m });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        Ok(self.push(Op::GatherRows { ids: ids.to_vec() }, vec![table.0], vec![ids.len(), d], data))
    }

    /// out = base, with rows[i] added into row positions[i].
    pub fn scatter_add_rows(&mut self, base: Var, rows: Var, positions: &[usize]) -> Result<Var> {
        let (m, d) = (self.rows(base), self.cols(base));
        let (k, dr) = (self.rows(rows), self.cols(rows));
        if dr != d || k != positions.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                detail: format!("rows {}x{} vs base {}x{} with {} positions", k, dr, m, d, positions.len()),
            });
        }
        for &p in positions {
            if p >= m {
                return Err(TensorError::IndexOutOfRange { op: "scatter_add_rows", index: p, bound: m });
            }
        }
        let mut data = self.nodes[base.0].data.clone();
        for (i, &p) in positions.iter().enumerate() {
            let src = &self.nodes[rows.0].data[i * d..(i + 1) * d];
            let dst = &mut data[p * d..(p + 1) * d];
            for (o, &s) in dst.iter_mut().zip(src) {
                *o += s;
            }
        }
        let shape = self.nodes[base.0].shape.clone();
        Ok(self.push(Op::ScatterAddRows { positions: positions.to_vec() }, vec![base.0, rows.0], shape, data))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = (self.rows(a), self.cols(a));
        if start + len > n {
            return Err(TensorError::IndexOutOfRange { op: "slice_cols", index: start + len, bound: n });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&self.nodes[a.0].data[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Op::SliceCols { start, len }, vec![a.0], vec![m, len], data))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid { op: "concat_cols", msg: "no parts".into() });
        }
        let m = self.rows(parts[0]);
        for &p in parts {
            if self.rows(p) != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: "row counts differ".into(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let n = self.cols(p);
                data.extend_from_slice(&self.nodes[p.0].data[i * n..(i + 1) * n]);
            }
        }
        Ok(self.push(Op::ConcatCols, parts.iter().map(|p| p.0).collect(), vec![m, total], data))
    }

    /// [c,h,w] image into a [g*g, c*p*p] patch matrix, g = h/p.
    pub fn patchify(&mut self, image: Var, patch: usize) -> Result<Var> {
        let s = self.nodes[image.0].shape.clone();
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "patchify",
                detail: format!("expected [c,h,w], got {:?}", s),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h != w || h % patch != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "patchify",
                detail: format!("image {}x{} not divisible into {} patches", h, w, patch),
            });
        }
        let g = h / patch;
        let pc = c * patch * patch;
        let src = &self.nodes[image.0].data;
        let mut data = vec![0.0f32; g * g * pc];
        for gi in 0..g {
            for gj in 0..g {
                let out_row = &mut data[(gi * g + gj) * pc..(gi * g + gj + 1) * pc];
                for ch in 0..c {
                    for pi in 0..patch {
                        for pj in 0..patch {
                            out_row[ch * patch * patch + pi * patch + pj] =
                                src[ch * h * w + (gi * patch + pi) * w + (gj * patch + pj)];
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::Patchify { patch }, vec![image.0], vec![g * g, pc], data))
    }

    // ── Reductions and losses ────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s = ops::sum_f64(&self.nodes[a.0].data) as f32;
        self.push(Op::Sum, vec![a.0], vec![1], vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len().max(1);
        let s = (ops::sum_f64(&self.nodes[a.0].data) / n as f64) as f32;
        self.push(Op::Mean, vec![a.0], vec![1], vec![s])
    }

    /// Elementwise focal binary cross-entropy against a constant 0/1 map.
    pub fn focal_bce(&mut self, logits: Var, targets: &[f32], alpha: f32, gamma: f32) -> Result<Var> {
        if targets.len() != self.nodes[logits.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "focal_bce",
                detail: format!("{} logits vs {} targets", self.nodes[logits.0].data.len(), targets.len()),
            });
        }
        let data: Vec<f32> = self.nodes[logits.0]
            .data
            .iter()
            .zip(targets)
            .map(|(&x, &t)| ops::focal_bce(x, t, alpha, gamma))
            .collect();
        let shape = self.nodes[logits.0].shape.clone();
        Ok(self.push(Op::FocalBce { targets: targets.to_vec(), alpha, gamma }, vec![logits.0], shape, data))
    }

    /// Elementwise smooth-L1 against a constant target.
    pub fn smooth_l1(&mut self, pred: Var, targets: &[f32], beta: f32) -> Result<Var> {
        if targets.len() != self.nodes[pred.0].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "smooth_l1",
                detail: format!("{} preds vs {} targets", self.nodes[pred.0].data.len(), targets.len()),
            });
        }
        let data: Vec<f32> = self.nodes[pred.0]
            .data
            .iter()
            .zip(targets)
            .map(|(&x, &t)| ops::smooth_l1(x - t, beta))
            .collect();
        let shape = self.nodes[pred.0].shape.clone();
        Ok(self.push(Op::SmoothL1 { targets: targets.to_vec(), beta }, vec![pred.0], shape, data))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// requires-grad node reachable from `loss`; leaf masks are applied
    /// at the end so non-allowed rows are exactly zero.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss { numel: self.nodes[loss.0].data.len() });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("grad present");
            if g.iter().any(|v| !v.is_finite()) {
                let op = self.nodes[i].op.name().to_string();
                self.nodes[i].grad = Some(g);
                return Err(TensorError::NonFinite { op: format!("gradient of {op}") });
            }
            self.propagate(i, &g)?;
            self.nodes[i].grad = Some(g);
        }

        for n in &mut self.nodes {
            if let (Some(mask), Some(grad)) = (&n.mask, &mut n.grad) {
                let cols = if n.shape.len() >= 2 { n.shape[n.shape.len() - 1] } else { n.shape[0] };
                let rows = grad.len() / cols;
                let allowed: std::collections::HashSet<usize> = mask.iter().copied().collect();
                for r in 0..rows {
                    if !allowed.contains(&r) {
                        for v in &mut grad[r * cols..(r + 1) * cols] {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn wants_grad(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn acc(&mut self, idx: usize, f: impl FnOnce(&mut [f32])) {
        if !self.wants_grad(idx) {
            return;
        }
        if self.nodes[idx].grad.is_none() {
            let len = self.nodes[idx].data.len();
            self.nodes[idx].grad = Some(vec![0.0; len]);
        }
        let mut g = self.nodes[idx].grad.take().expect("grad allocated");
        f(&mut g);
        self.nodes[idx].grad = Some(g);
    }

    fn propagate(&mut self, i: usize, g: &[f32]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        let inputs = self.nodes[i].inputs.clone();
        match op {
            Op::Leaf => {}
            Op::Add => {
                for &inp in &inputs {
                    self.acc(inp, |dst| {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d += gv;
                        }
                    });
                }
            }
            Op::Sub => {
                self.acc(inputs[0], |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.acc(inputs[1], |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.wants_grad(a) {
                    let db: Vec<f32> = self.nodes[b.to_owned()].data.clone();
                    self.acc(a, |dst| {
                        for ((d, &gv), &bv) in dst.iter_mut().zip(g).zip(&db) {
                            *d += gv * bv;
                        }
                    });
                }
                if self.wants_grad(b) {
                    let da: Vec<f32> = self.nodes[a].data.clone();
                    self.acc(b, |dst| {
                        for ((d, &gv), &av) in dst.iter_mut().zip(g).zip(&da) {
                            *d += gv * av;
                        }
                    });
                }
            }
            Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.wants_grad(a) {
                    let db: Vec<f32> = self.nodes[b].data.clone();
                    self.acc(a, |dst| {
                        for ((d, &gv), &bv) in dst.iter_mut().zip(g).zip(&db) {
                            *d += gv / bv;
                        }
                    });
                }
                if self.wants_grad(b) {
                    let da: Vec<f32> = self.nodes[a].data.clone();
                    let db: Vec<f32> = self.nodes[b].data.clone();
                    self.acc(b, |dst| {
                        for i in 0..dst.len() {
                            dst[i] -= g[i] * da[i] / (db[i] * db[i]);
                        }
                    });
                }
            }
            Op::Minimum | Op::Maximum => {
                let (a, b) = (inputs[0], inputs[1]);
                let take_a: Vec<bool> = {
                    let da = &self.nodes[a].data;
                    let db = &self.nodes[b].data;
                    match op {
                        // ties route to the first input
                        Op::Minimum => da.iter().zip(db).map(|(x, y)| x <= y).collect(),
                        _ => da.iter().zip(db).map(|(x, y)| x >= y).collect(),
                    }
                };
                self.acc(a, |dst| {
                    for i in 0..dst.len() {
                        if take_a[i] {
                            dst[i] += g[i];
                        }
                    }
                });
                self.acc(b, |dst| {
                    for i in 0..dst.len() {
                        if !take_a[i] {
                            dst[i] += g[i];
                        }
                    }
                });
            }
            Op::Relu => {
                let dx: Vec<f32> = self.nodes[inputs[0]].data.clone();
                self.acc(inputs[0], |dst| {
                    for i in 0..dst.len() {
                        if dx[i] > 0.0 {
                            dst[i] += g[i];
                        }
                    }
                });
            }
            Op::Neg => {
                self.acc(inputs[0], |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Scale(c) => {
                self.acc(inputs[0], |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                });
            }
            Op::AddScalar(_) => {
                self.acc(inputs[0], |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::AddScalarT => {
                self.acc(inputs[0], |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                let total = ops::sum_f64(g) as f32;
                self.acc(inputs[1], |dst| {
                    dst[0] += total;
                });
            }
            Op::AddBias => {
                self.acc(inputs[0], |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                if self.wants_grad(inputs[1]) {
                    let n = self.nodes[inputs[1]].data.len();
                    let m = g.len() / n;
                    self.acc(inputs[1], |dst| {
                        for i in 0..m {
                            for j in 0..n {
                                dst[j] += g[i * n + j];
                            }
                        }
                    });
                }
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let m = self.nodes[a].shape[0];
                let k = self.nodes[a].shape[1];
                let n = self.nodes[b].shape[1];
                if self.wants_grad(a) {
                    let bd = self.nodes[b].data.clone();
                    self.acc(a, |dst| ops::matmul_bt_acc(g, &bd, m, k, n, dst));
                }
                if self.wants_grad(b) {
                    let ad = self.nodes[a].data.clone();
                    self.acc(b, |dst| ops::matmul_at_acc(&ad, g, m, k, n, dst));
                }
            }
            Op::Transpose => {
                let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                self.acc(inputs[0], |dst| {
                    for r in 0..n {
                        for c in 0..m {
                            dst[c * n + r] += g[r * m + c];
                        }
                    }
                });
            }
            Op::Sigmoid => {
                let y: Vec<f32> = self.nodes[i].data.clone();
                self.acc(inputs[0], |dst| {
                    for j in 0..dst.len() {
                        dst[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Softplus => {
                let x: Vec<f32> = self.nodes[inputs[0]].data.clone();
                self.acc(inputs[0], |dst| {
                    for j in 0..dst.len() {
                        dst[j] += g[j] * ops::sigmoid(x[j]);
                    }
                });
            }
            Op::Gelu => {
                let x: Vec<f32> = self.nodes[inputs[0]].data.clone();
                self.acc(inputs[0], |dst| {
                    for j in 0..dst.len() {
                        dst[j] += g[j] * ops::gelu_grad(x[j]);
                    }
                });
            }
            Op::SoftmaxRows => {
                let s: Vec<f32> = self.nodes[i].data.clone();
                let shape = &self.nodes[i].shape;
                let n = shape[shape.len() - 1];
                let m = s.len() / n;
                self.acc(inputs[0], |dst| {
                    for r in 0..m {
                        let srow = &s[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let dot: f32 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        let drow = &mut dst[r * n..(r + 1) * n];
                        for j in 0..n {
                            drow[j] += srow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { eps } => {
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let n = self.nodes[gamma].data.len();
                let m = self.nodes[x].data.len() / n;
                let xd = self.nodes[x].data.clone();
                let gd = self.nodes[gamma].data.clone();
                // Per-row statistics recomputed for the backward pass.
                let mut xhat = vec![0.0f32; m * n];
                let mut inv_std = vec![0.0f32; m];
                for r in 0..m {
                    let row = &xd[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f32>() / n as f32;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_std[r] = inv;
                    for j in 0..n {
                        xhat[r * n + j] = (row[j] - mean) * inv;
                    }
                }
                if self.wants_grad(x) {
                    self.acc(x, |dst| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            let xrow = &xhat[r * n..(r + 1) * n];
                            let mut sum_gg = 0.0f32;
                            let mut sum_ggx = 0.0f32;
                            for j in 0..n {
                                let gg = grow[j] * gd[j];
                                sum_gg += gg;
                                sum_ggx += gg * xrow[j];
                            }
                            let drow = &mut dst[r * n..(r + 1) * n];
                            for j in 0..n {
                                let gg = grow[j] * gd[j];
                                drow[j] += inv_std[r]
                                    * (gg - sum_gg / n as f32 - xrow[j] * sum_ggx / n as f32);
                            }
                        }
                    });
                }
                if self.wants_grad(gamma) {
                    self.acc(gamma, |dst| {
                        for r in 0..m {
                            for j in 0..n {
                                dst[j] += g[r * n + j] * xhat[r * n + j];
                            }
                        }
                    });
                }
                if self.wants_grad(beta) {
                    self.acc(beta, |dst| {
                        for r in 0..m {
                            for j in 0..n {
                                dst[j] += g[r * n + j];
                            }
                        }
                    });
                }
            }
            Op::GatherRows { ids } => {
                let d = self.nodes[i].shape[1];
                self.acc(inputs[0], |dst| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        let out = &mut dst[id * d..(id + 1) * d];
                        for (o, &s) in out.iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                });
            }
            Op::ScatterAddRows { positions } => {
                self.acc(inputs[0], |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                if self.wants_grad(inputs[1]) {
                    let d = self.nodes[inputs[1]].shape[1];
                    self.acc(inputs[1], |dst| {
                        for (r, &p) in positions.iter().enumerate() {
                            let src = &g[p * d..(p + 1) * d];
                            let out = &mut dst[r * d..(r + 1) * d];
                            for (o, &s) in out.iter_mut().zip(src) {
                                *o += s;
                            }
                        }
                    });
                }
            }
            Op::SliceCols { start, len } => {
                let shape = self.nodes[inputs[0]].shape.clone();
                let n = shape[shape.len() - 1];
                let m = self.nodes[inputs[0]].data.len() / n;
                self.acc(inputs[0], |dst| {
                    for r in 0..m {
                        for j in 0..len {
                            dst[r * n + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols => {
                let m = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut offset = 0usize;
                for &inp in &inputs {
                    let n = self.nodes[inp].shape[1];
                    if self.wants_grad(inp) {
                        let off = offset;
                        self.acc(inp, |dst| {
                            for r in 0..m {
                                for j in 0..n {
                                    dst[r * n + j] += g[r * total + off + j];
                                }
                            }
                        });
                    }
                    offset += n;
                }
            }
            Op::Patchify { patch } => {
                let s = self.nodes[inputs[0]].shape.clone();
                let (c, h, w) = (s[0], s[1], s[2]);
                let gsz = h / patch;
                let pc = c * patch * patch;
                self.acc(inputs[0], |dst| {
                    for gi in 0..gsz {
                        for gj in 0..gsz {
                            let grow = &g[(gi * gsz + gj) * pc..(gi * gsz + gj + 1) * pc];
                            for ch in 0..c {
                                for pi in 0..patch {
                                    for pj in 0..patch {
                                        dst[ch * h * w + (gi * patch + pi) * w + (gj * patch + pj)] +=
                                            grow[ch * patch * patch + pi * patch + pj];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum => {
                let gv = g[0];
                self.acc(inputs[0], |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Mean => {
                let n = self.nodes[inputs[0]].data.len().max(1);
                let gv = g[0] / n as f32;
                self.acc(inputs[0], |dst| {
                    for d in dst.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::FocalBce { targets, alpha, gamma } => {
                let x: Vec<f32> = self.nodes[inputs[0]].data.clone();
                self.acc(inputs[0], |dst| {
                    for j in 0..dst.len() {
                        dst[j] += g[j] * ops::focal_bce_grad(x[j], targets[j], alpha, gamma);
                    }
                });
            }
            Op::SmoothL1 { targets, beta } => {
                let x: Vec<f32> = self.nodes[inputs[0]].data.clone();
                self.acc(inputs[0], |dst| {
                    for j in 0..dst.len() {
                        dst[j] += g[j] * ops::smooth_l1_grad(x[j] - targets[j], beta);
                    }
                });
            }
        }
        Ok(())
    }
}
