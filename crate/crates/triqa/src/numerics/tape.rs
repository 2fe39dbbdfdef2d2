//! Reverse-mode automatic differentiation on a tensor-level tape.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks the recording in reverse and accumulates gradients. Graphs are
//! built per example and dropped after the step, so values are reference
//! counted while parameter leaves share storage with the [`ParamSet`].

use super::params::ParamSet;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

/// Per-channel statistics observed by one training-mode batch-norm node.
/// The trainer folds these into the running estimates after the step.
#[derive(Debug, Clone)]
pub struct BnBatchStats<S> {
    pub mean: Vec<S>,
    pub var_biased: Vec<S>,
    pub count: usize,
}

enum Op<S> {
    Leaf,
    Add(u32, u32),
    Mul(u32, u32),
    Scale(u32, S),
    AddBiasRow { x: u32, b: u32 },
    Matmul { a: u32, b: u32, ta: bool, tb: bool },
    MatVec { m: u32, v: u32 },
    VecMat { v: u32, m: u32 },
    Relu(u32),
    Sigmoid(u32),
    Tanh(u32),
    Conv2d { x: u32, w: u32, b: u32, stride: usize, pad: usize },
    Conv1d { x: u32, w: u32, b: u32, stride: usize, pad: usize },
    MaxPool2d { x: u32, argmax: Vec<u32> },
    BnTrain { x: u32, gamma: u32, beta: u32, xhat: Tensor<S>, inv_std: Vec<S>, n: usize },
    BnEval { x: u32, gamma: u32, beta: u32, mean: Vec<S>, inv_std: Vec<S> },
    Dropout { x: u32, mask: Vec<bool>, scale: S },
    SoftmaxCe { logits: u32, probs: Tensor<S>, target: usize },
    MaskedSoftmax { x: u32, mask: Vec<bool> },
    MeanRows(u32),
    MaskedMeanRows { x: u32, mask: Vec<bool>, count: usize },
    Bce { probs: u32, labels: Tensor<S> },
    Gather { table: u32, indices: Vec<usize> },
    ConcatVec(Vec<u32>),
    StackRows(Vec<u32>),
    Reshape(u32),
    Transpose2d(u32),
    Row { x: u32, row: usize },
    Sum(u32),
}

struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
    name: Option<String>,
}

/// Recording of one forward pass.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    param_ids: RefCell<HashMap<String, u32>>,
    grads: RefCell<Vec<Option<Tensor<S>>>>,
}

/// Handle to one tape node. Cheap to copy; tied to its tape's lifetime.
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: u32,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.tape.value(self.id).shape())
    }
}

impl<S: Scalar> Clone for Var<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<S: Scalar> Copy for Var<'_, S> {}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_ids: RefCell::new(HashMap::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, needs_grad: bool, name: Option<String>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len() as u32;
        nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
            name,
        });
        Var { tape: self, id }
    }

    fn push_arc(&self, value: Arc<Tensor<S>>, op: Op<S>, needs_grad: bool, name: Option<String>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len() as u32;
        nodes.push(Node {
            value,
            op,
            needs_grad,
            name,
        });
        Var { tape: self, id }
    }

    /// Leaf that never receives a gradient (inputs, fixed features).
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false, None)
    }

    /// Leaf bound to a named parameter. Registering the same name twice on
    /// one tape returns the original node so gradients accumulate in one
    /// place.
    pub fn param(&self, params: &ParamSet<S>, name: &str) -> Result<Var<'_, S>> {
        if let Some(&id) = self.param_ids.borrow().get(name) {
            return Ok(Var { tape: self, id });
        }
        let p = params.get(name)?;
        let var = self.push_arc(p.tensor.clone(), Op::Leaf, p.trainable, Some(name.to_string()));
        self.param_ids.borrow_mut().insert(name.to_string(), var.id);
        Ok(var)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn needs(&self, id: u32) -> bool {
        self.nodes.borrow()[id as usize].needs_grad
    }

    fn value(&self, id: u32) -> Arc<Tensor<S>> {
        self.nodes.borrow()[id as usize].value.clone()
    }

    /// Concatenate rank-1 vectors into one longer vector.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, S>]) -> Var<'t, S> {
        assert!(!parts.is_empty(), "concat needs at least one part");
        let mut data = Vec::new();
        let mut needs = false;
        for p in parts {
            let v = self.value(p.id);
            assert_eq!(v.rank(), 1, "concat expects rank-1 parts");
            data.extend_from_slice(v.data());
            needs |= self.needs(p.id);
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(Tensor::from_vec(data), Op::ConcatVec(ids), needs, None)
    }

    /// Stack rank-1 vectors of equal length into a `[T, H]` matrix.
    pub fn stack_rows<'t>(&'t self, parts: &[Var<'t, S>]) -> Var<'t, S> {
        assert!(!parts.is_empty(), "stack_rows needs at least one row");
        let width = self.value(parts[0].id).numel();
        let mut data = Vec::with_capacity(parts.len() * width);
        let mut needs = false;
        for p in parts {
            let v = self.value(p.id);
            assert_eq!(v.rank(), 1, "stack_rows expects rank-1 parts");
            assert_eq!(v.numel(), width, "stack_rows rows must agree in length");
            data.extend_from_slice(v.data());
            needs |= self.needs(p.id);
        }
        let ids = parts.iter().map(|p| p.id).collect();
        let t = Tensor::new(vec![parts.len(), width], data).expect("stack shape");
        self.push(t, Op::StackRows(ids), needs, None)
    }

    /// Gradient of a node after [`Tape::backward`]; `None` when the node
    /// took no part in the loss or tracking was off.
    pub fn grad(&self, var: Var<'_, S>) -> Option<Tensor<S>> {
        self.grads.borrow().get(var.id as usize).and_then(|g| g.clone())
    }

    /// Gradients of all named parameter leaves, keyed by name.
    pub fn param_grads(&self) -> std::collections::BTreeMap<String, Tensor<S>> {
        let nodes = self.nodes.borrow();
        let grads = self.grads.borrow();
        let mut out = std::collections::BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                if let Some(Some(g)) = grads.get(id) {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id as usize];
        if loss_node.value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id as usize] = Some(Tensor::full(loss_node.value.shape(), S::one()));

        for id in (0..=loss.id as usize).rev() {
            if grads[id].is_none() || !nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().expect("grad present");
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

/// Mutable access to the gradient buffer of `id`, allocated on first use.
/// Returns `None` for nodes outside the differentiable cone.
fn grad_buf<'a, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'a mut [Option<Tensor<S>>],
    id: u32,
) -> Option<&'a mut Tensor<S>> {
    let node = &nodes[id as usize];
    if !node.needs_grad {
        return None;
    }
    let slot = &mut grads[id as usize];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(node.value.shape()));
    }
    slot.as_mut()
}

fn backprop_node<S: Scalar>(nodes: &[Node<S>], id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
    let val = |i: u32| -> &Tensor<S> { &nodes[i as usize].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                buf.add_assign(g);
            }
            if let Some(buf) = grad_buf(nodes, grads, *b) {
                buf.add_assign(g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                for ((o, &gi), &bi) in buf.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *o = *o + gi * bi;
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *b) {
                for ((o, &gi), &ai) in buf.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *o = *o + gi * ai;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                for (o, &gi) in buf.data_mut().iter_mut().zip(g.data()) {
                    *o = *o + gi * *c;
                }
            }
        }
        Op::AddBiasRow { x, b } => {
            let n = val(*b).numel();
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                buf.add_assign(g);
            }
            if let Some(buf) = grad_buf(nodes, grads, *b) {
                let bd = buf.data_mut();
                for (i, &gi) in g.data().iter().enumerate() {
                    bd[i % n] = bd[i % n] + gi;
                }
            }
        }
        Op::Matmul { a, b, ta, tb } => {
            backprop_matmul(nodes, grads, g, *a, *b, *ta, *tb);
        }
        Op::MatVec { m, v } => {
            // y = M x : dM += g x^T, dx += M^T g
            let (mv, vv) = (val(*m).clone(), val(*v).clone());
            let (rows, cols) = (mv.shape()[0], mv.shape()[1]);
            if let Some(buf) = grad_buf(nodes, grads, *m) {
                S::gemm(
                    rows, 1, cols,
                    S::one(),
                    g.data(), 1, 1,
                    vv.data(), 1, 1,
                    S::one(),
                    buf.data_mut(), cols as isize, 1,
                );
            }
            if let Some(buf) = grad_buf(nodes, grads, *v) {
                S::gemm(
                    cols, rows, 1,
                    S::one(),
                    mv.data(), 1, cols as isize,
                    g.data(), 1, 1,
                    S::one(),
                    buf.data_mut(), 1, 1,
                );
            }
        }
        Op::VecMat { v, m } => {
            // y = M^T x : dM += x g^T, dx += M g
            let (mv, vv) = (val(*m).clone(), val(*v).clone());
            let (rows, cols) = (mv.shape()[0], mv.shape()[1]);
            if let Some(buf) = grad_buf(nodes, grads, *m) {
                S::gemm(
                    rows, 1, cols,
                    S::one(),
                    vv.data(), 1, 1,
                    g.data(), 1, 1,
                    S::one(),
                    buf.data_mut(), cols as isize, 1,
                );
            }
            if let Some(buf) = grad_buf(nodes, grads, *v) {
                S::gemm(
                    rows, cols, 1,
                    S::one(),
                    mv.data(), cols as isize, 1,
                    g.data(), 1, 1,
                    S::one(),
                    buf.data_mut(), 1, 1,
                );
            }
        }
        Op::Relu(a) => {
            let out = &nodes[id].value;
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                for ((o, &gi), &yi) in buf.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    if yi > S::zero() {
                        *o = *o + gi;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            let out = nodes[id].value.clone();
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                for ((o, &gi), &yi) in buf.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *o = *o + gi * yi * (S::one() - yi);
                }
            }
        }
        Op::Tanh(a) => {
            let out = nodes[id].value.clone();
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                for ((o, &gi), &yi) in buf.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *o = *o + gi * (S::one() - yi * yi);
                }
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            backprop_conv2d(nodes, grads, g, *x, *w, *b, *stride, *pad, nodes[id].value.shape());
        }
        Op::Conv1d { x, w, b, stride, pad } => {
            backprop_conv1d(nodes, grads, g, *x, *w, *b, *stride, *pad, nodes[id].value.shape());
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                let bd = buf.data_mut();
                for (&src, &gi) in argmax.iter().zip(g.data()) {
                    bd[src as usize] = bd[src as usize] + gi;
                }
            }
        }
        Op::BnTrain { x, gamma, beta, xhat, inv_std, n } => {
            backprop_bn_train(nodes, grads, g, *x, *gamma, *beta, xhat, inv_std, *n);
        }
        Op::BnEval { x, gamma, beta, mean, inv_std } => {
            let channels = inv_std.len();
            let per = val(*x).numel() / channels;
            let xv = val(*x).clone();
            let gv = val(*gamma).clone();
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for (i, (o, &gi)) in buf.data_mut().iter_mut().zip(g.data()).enumerate() {
                    let c = (i / per) % channels;
                    *o = *o + gi * gv.data()[c] * inv_std[c];
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *gamma) {
                let bd = buf.data_mut();
                for (i, &gi) in g.data().iter().enumerate() {
                    let c = (i / per) % channels;
                    bd[c] = bd[c] + gi * (xv.data()[i] - mean[c]) * inv_std[c];
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *beta) {
                let bd = buf.data_mut();
                for (i, &gi) in g.data().iter().enumerate() {
                    let c = (i / per) % channels;
                    bd[c] = bd[c] + gi;
                }
            }
        }
        Op::Dropout { x, mask, scale } => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for ((o, &gi), &keep) in buf.data_mut().iter_mut().zip(g.data()).zip(mask.iter()) {
                    if keep {
                        *o = *o + gi * *scale;
                    }
                }
            }
        }
        Op::SoftmaxCe { logits, probs, target } => {
            let gs = g.data()[0];
            if let Some(buf) = grad_buf(nodes, grads, *logits) {
                for (i, (o, &pi)) in buf.data_mut().iter_mut().zip(probs.data()).enumerate() {
                    let delta = if i == *target { S::one() } else { S::zero() };
                    *o = *o + gs * (pi - delta);
                }
            }
        }
        Op::MaskedSoftmax { x, mask } => {
            let y = nodes[id].value.clone();
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                let dot: S = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yi, &gi)| yi * gi)
                    .sum();
                for (((o, &gi), &yi), &keep) in buf
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(y.data())
                    .zip(mask.iter())
                {
                    if keep {
                        *o = *o + yi * (gi - dot);
                    }
                }
            }
        }
        Op::MeanRows(x) => {
            let rows = val(*x).shape()[0];
            let inv = S::one() / S::from_f64c(rows as f64);
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                let cols = g.numel();
                for (i, o) in buf.data_mut().iter_mut().enumerate() {
                    *o = *o + g.data()[i % cols] * inv;
                }
            }
        }
        Op::MaskedMeanRows { x, mask, count } => {
            let inv = S::one() / S::from_f64c(*count as f64);
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                let cols = g.numel();
                for (i, o) in buf.data_mut().iter_mut().enumerate() {
                    if mask[i / cols] {
                        *o = *o + g.data()[i % cols] * inv;
                    }
                }
            }
        }
        Op::Bce { probs, labels } => {
            let gs = g.data()[0];
            let pv = val(*probs).clone();
            let n_inv = S::one() / S::from_f64c(pv.numel() as f64);
            let eps = S::from_f64c(BCE_EPS);
            if let Some(buf) = grad_buf(nodes, grads, *probs) {
                for ((o, &p), &y) in buf.data_mut().iter_mut().zip(pv.data()).zip(labels.data()) {
                    if p > eps && p < S::one() - eps {
                        *o = *o + gs * n_inv * (p - y) / (p * (S::one() - p));
                    }
                }
            }
        }
        Op::Gather { table, indices } => {
            let cols = val(*table).shape()[1];
            if let Some(buf) = grad_buf(nodes, grads, *table) {
                let bd = buf.data_mut();
                for (row, &idx) in indices.iter().enumerate() {
                    for c in 0..cols {
                        bd[idx * cols + c] = bd[idx * cols + c] + g.data()[row * cols + c];
                    }
                }
            }
        }
        Op::ConcatVec(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                if let Some(buf) = grad_buf(nodes, grads, p) {
                    for (o, &gi) in buf.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                        *o = *o + gi;
                    }
                }
                offset += len;
            }
        }
        Op::StackRows(parts) => {
            let width = g.numel() / parts.len();
            for (row, &p) in parts.iter().enumerate() {
                if let Some(buf) = grad_buf(nodes, grads, p) {
                    for (o, &gi) in buf
                        .data_mut()
                        .iter_mut()
                        .zip(&g.data()[row * width..(row + 1) * width])
                    {
                        *o = *o + gi;
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for (o, &gi) in buf.data_mut().iter_mut().zip(g.data()) {
                    *o = *o + gi;
                }
            }
        }
        Op::Transpose2d(x) => {
            let (rows, cols) = (val(*x).shape()[0], val(*x).shape()[1]);
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                let bd = buf.data_mut();
                for r in 0..rows {
                    for c in 0..cols {
                        bd[r * cols + c] = bd[r * cols + c] + g.data()[c * rows + r];
                    }
                }
            }
        }
        Op::Row { x, row } => {
            let cols = g.numel();
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                let bd = buf.data_mut();
                for (c, &gi) in g.data().iter().enumerate() {
                    bd[row * cols + c] = bd[row * cols + c] + gi;
                }
            }
        }
        Op::Sum(x) => {
            let gs = g.data()[0];
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for o in buf.data_mut().iter_mut() {
                    *o = *o + gs;
                }
            }
        }
    }
}

fn backprop_matmul<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    g: &Tensor<S>,
    a: u32,
    b: u32,
    ta: bool,
    tb: bool,
) {
    let av = nodes[a as usize].value.clone();
    let bv = nodes[b as usize].value.clone();
    let (ap, aq) = (av.shape()[0], av.shape()[1]);
    let (bp, bq) = (bv.shape()[0], bv.shape()[1]);
    let m = if ta { aq } else { ap };
    let k = if ta { ap } else { aq };
    let n = if tb { bp } else { bq };

    // dA: without ta, dA = dC B'^T; with ta, dA = B' dC^T.
    if let Some(buf) = grad_buf(nodes, grads, a) {
        if !ta {
            // [m,k] += [m,n] x [n,k] where the rhs is B' transposed
            let (rsb, csb) = if tb { (bq as isize, 1) } else { (1, bq as isize) };
            S::gemm(
                m, n, k,
                S::one(),
                g.data(), n as isize, 1,
                bv.data(), rsb, csb,
                S::one(),
                buf.data_mut(), k as isize, 1,
            );
        } else {
            // a stored [k,m]: dA_stored = B' dC^T -> [k, m]
            let (rsb, csb) = if tb { (1, bq as isize) } else { (bq as isize, 1) };
            S::gemm(
                k, n, m,
                S::one(),
                bv.data(), rsb, csb,
                g.data(), 1, n as isize,
                S::one(),
                buf.data_mut(), m as isize, 1,
            );
        }
    }
    // dB: without tb, dB = A'^T dC; with tb, dB = dC^T A'.
    if let Some(buf) = grad_buf(nodes, grads, b) {
        if !tb {
            let (rsa, csa) = if ta { (aq as isize, 1) } else { (1, aq as isize) };
            S::gemm(
                k, m, n,
                S::one(),
                av.data(), rsa, csa,
                g.data(), n as isize, 1,
                S::one(),
                buf.data_mut(), n as isize, 1,
            );
        } else {
            // b stored [n,k]: dB_stored = dC^T A' -> [n, k]
            let (rsa, csa) = if ta { (1, aq as isize) } else { (aq as isize, 1) };
            S::gemm(
                n, m, k,
                S::one(),
                g.data(), 1, n as isize,
                av.data(), rsa, csa,
                S::one(),
                buf.data_mut(), k as isize, 1,
            );
        }
    }
}

const BCE_EPS: f64 = 1e-7;

// ---------------------------------------------------------------------------
// convolution plumbing
// ---------------------------------------------------------------------------

fn conv2d_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// `[C_in, H, W]` -> columns `[C_in*k*k, H_out*W_out]`.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<S> {
    let cols_n = h_out * w_out;
    let mut cols = vec![S::zero(); c_in * k * k * cols_n];
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * cols_n;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (c * h + iy as usize) * w;
                    let dst = row + oy * w_out;
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add columns back onto the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    out: &mut [S],
) {
    let cols_n = h_out * w_out;
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * cols_n;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (c * h + iy as usize) * w;
                    let src = row + oy * w_out;
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[dst + ix as usize] = out[dst + ix as usize] + cols[src + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backprop_conv2d<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    g: &Tensor<S>,
    x: u32,
    w: u32,
    b: u32,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) {
    let xv = nodes[x as usize].value.clone();
    let wv = nodes[w as usize].value.clone();
    let (c_in, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
    let (h_out, w_out) = (out_shape[1], out_shape[2]);
    let cols_n = h_out * w_out;
    let kk = c_in * k * k;

    if let Some(buf) = grad_buf(nodes, grads, b) {
        let bd = buf.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            let c = i / cols_n;
            bd[c] = bd[c] + gi;
        }
    }
    if nodes[w as usize].needs_grad {
        let cols = im2col(xv.data(), c_in, h, wd, k, stride, pad, h_out, w_out);
        if let Some(buf) = grad_buf(nodes, grads, w) {
            // dW[c_out, kk] += dY[c_out, cols_n] x cols^T[cols_n, kk]
            S::gemm(
                c_out, cols_n, kk,
                S::one(),
                g.data(), cols_n as isize, 1,
                &cols, 1, cols_n as isize,
                S::one(),
                buf.data_mut(), kk as isize, 1,
            );
        }
    }
    if nodes[x as usize].needs_grad {
        // dcols = W^T dY, then scatter back.
        let mut dcols = vec![S::zero(); kk * cols_n];
        S::gemm(
            kk, c_out, cols_n,
            S::one(),
            wv.data(), 1, kk as isize,
            g.data(), cols_n as isize, 1,
            S::zero(),
            &mut dcols, cols_n as isize, 1,
        );
        if let Some(buf) = grad_buf(nodes, grads, x) {
            col2im(&dcols, c_in, h, wd, k, stride, pad, h_out, w_out, buf.data_mut());
        }
    }
}

/// `[L, D]` -> columns `[D*k, L_out]`.
fn im2col1d<S: Scalar>(
    x: &[S],
    l: usize,
    d: usize,
    k: usize,
    stride: usize,
    pad: usize,
    l_out: usize,
) -> Vec<S> {
    let mut cols = vec![S::zero(); d * k * l_out];
    for c in 0..d {
        for t in 0..k {
            let row = (c * k + t) * l_out;
            for o in 0..l_out {
                let pos = (o * stride + t) as isize - pad as isize;
                if pos >= 0 && pos < l as isize {
                    cols[row + o] = x[pos as usize * d + c];
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn backprop_conv1d<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    g: &Tensor<S>,
    x: u32,
    w: u32,
    b: u32,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) {
    let xv = nodes[x as usize].value.clone();
    let wv = nodes[w as usize].value.clone();
    let (l, d) = (xv.shape()[0], xv.shape()[1]);
    let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
    let l_out = out_shape[0];
    let dk = d * k;

    // g is [L_out, C_out]; the GEMM view below treats it transposed.
    if let Some(buf) = grad_buf(nodes, grads, b) {
        let bd = buf.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            let c = i % c_out;
            bd[c] = bd[c] + gi;
        }
    }
    if nodes[w as usize].needs_grad {
        let cols = im2col1d(xv.data(), l, d, k, stride, pad, l_out);
        if let Some(buf) = grad_buf(nodes, grads, w) {
            // dW[c_out, dk] += dY^T[c_out, l_out] x cols^T[l_out, dk]
            S::gemm(
                c_out, l_out, dk,
                S::one(),
                g.data(), 1, c_out as isize,
                &cols, 1, l_out as isize,
                S::one(),
                buf.data_mut(), dk as isize, 1,
            );
        }
    }
    if nodes[x as usize].needs_grad {
        let mut dcols = vec![S::zero(); dk * l_out];
        S::gemm(
            dk, c_out, l_out,
            S::one(),
            wv.data(), 1, dk as isize,
            g.data(), 1, c_out as isize,
            S::zero(),
            &mut dcols, l_out as isize, 1,
        );
        if let Some(buf) = grad_buf(nodes, grads, x) {
            let bd = buf.data_mut();
            for c in 0..d {
                for t in 0..k {
                    let row = (c * k + t) * l_out;
                    for o in 0..l_out {
                        let pos = (o * stride + t) as isize - pad as isize;
                        if pos >= 0 && pos < l as isize {
                            let dst = pos as usize * d + c;
                            bd[dst] = bd[dst] + dcols[row + o];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backprop_bn_train<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Tensor<S>>],
    g: &Tensor<S>,
    x: u32,
    gamma: u32,
    beta: u32,
    xhat: &Tensor<S>,
    inv_std: &[S],
    n: usize,
) {
    let channels = inv_std.len();
    let per = xhat.numel() / channels;
    let gv = nodes[gamma as usize].value.clone();
    let n_s = S::from_f64c(n as f64);

    // channel sums of dxhat and dxhat*xhat, where dxhat = g*gamma
    let mut sum_dxh = vec![S::zero(); channels];
    let mut sum_dxh_xh = vec![S::zero(); channels];
    for (i, &gi) in g.data().iter().enumerate() {
        let c = (i / per) % channels;
        let dxh = gi * gv.data()[c];
        sum_dxh[c] = sum_dxh[c] + dxh;
        sum_dxh_xh[c] = sum_dxh_xh[c] + dxh * xhat.data()[i];
    }
    if let Some(buf) = grad_buf(nodes, grads, x) {
        for (i, (o, &gi)) in buf.data_mut().iter_mut().zip(g.data()).enumerate() {
            let c = (i / per) % channels;
            let dxh = gi * gv.data()[c];
            let term = n_s * dxh - sum_dxh[c] - xhat.data()[i] * sum_dxh_xh[c];
            *o = *o + inv_std[c] / n_s * term;
        }
    }
    if let Some(buf) = grad_buf(nodes, grads, gamma) {
        let bd = buf.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            let c = (i / per) % channels;
            bd[c] = bd[c] + gi * xhat.data()[i];
        }
    }
    if let Some(buf) = grad_buf(nodes, grads, beta) {
        let bd = buf.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            let c = (i / per) % channels;
            bd[c] = bd[c] + gi;
        }
    }
}

// ---------------------------------------------------------------------------
// forward operations
// ---------------------------------------------------------------------------

impl<'t, S: Scalar> Var<'t, S> {
    pub fn value(self) -> Arc<Tensor<S>> {
        self.tape.value(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// The tape this variable lives on.
    pub fn tape(self) -> &'t Tape<S> {
        self.tape
    }

    fn needs(self) -> bool {
        self.tape.needs(self.id)
    }

    pub fn add(self, other: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("add shape");
        self.tape.push(t, Op::Add(self.id, other.id), self.needs() || other.needs(), None)
    }

    /// Hadamard product.
    pub fn mul(self, other: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("mul shape");
        self.tape.push(t, Op::Mul(self.id, other.id), self.needs() || other.needs(), None)
    }

    pub fn scale(self, factor: S) -> Var<'t, S> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * factor).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("scale shape");
        self.tape.push(t, Op::Scale(self.id, factor), self.needs(), None)
    }

    /// Broadcast-add a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_bias_row(self, bias: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), bias.value());
        let n = b.numel();
        assert!(a.rank() == 2 && a.shape()[1] == n, "add_bias_row shape mismatch");
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.data()[i % n])
            .collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("bias shape");
        self.tape.push(
            t,
            Op::AddBiasRow { x: self.id, b: bias.id },
            self.needs() || bias.needs(),
            None,
        )
    }

    /// Matrix product with optional transposes: `op(self) @ op(other)`.
    pub fn matmul(self, other: Var<'t, S>, ta: bool, tb: bool) -> Var<'t, S> {
        let (a, b) = (self.value(), other.value());
        assert!(a.rank() == 2 && b.rank() == 2, "matmul expects matrices");
        let (ap, aq) = (a.shape()[0], a.shape()[1]);
        let (bp, bq) = (b.shape()[0], b.shape()[1]);
        let (m, k1) = if ta { (aq, ap) } else { (ap, aq) };
        let (k2, n) = if tb { (bq, bp) } else { (bp, bq) };
        assert_eq!(k1, k2, "matmul inner dimensions disagree: {k1} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        let (rsa, csa) = if ta { (1, aq as isize) } else { (aq as isize, 1) };
        let (rsb, csb) = if tb { (1, bq as isize) } else { (bq as isize, 1) };
        S::gemm(
            m, k1, n,
            S::one(),
            a.data(), rsa, csa,
            b.data(), rsb, csb,
            S::zero(),
            &mut out, n as isize, 1,
        );
        let t = Tensor::new(vec![m, n], out).expect("matmul shape");
        self.tape.push(
            t,
            Op::Matmul { a: self.id, b: other.id, ta, tb },
            self.needs() || other.needs(),
            None,
        )
    }

    /// `self [m, n] @ v [n] -> [m]`.
    pub fn matvec(self, v: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), v.value());
        assert!(a.rank() == 2 && b.rank() == 1, "matvec expects matrix and vector");
        let (m, n) = (a.shape()[0], a.shape()[1]);
        assert_eq!(n, b.numel(), "matvec dimension mismatch");
        let mut out = vec![S::zero(); m];
        S::gemm(
            m, n, 1,
            S::one(),
            a.data(), n as isize, 1,
            b.data(), 1, 1,
            S::zero(),
            &mut out, 1, 1,
        );
        self.tape.push(
            Tensor::from_vec(out),
            Op::MatVec { m: self.id, v: v.id },
            self.needs() || v.needs(),
            None,
        )
    }

    /// `self [L] @ m [L, H] -> [H]` — a weighted sum of rows.
    pub fn vecmat(self, m: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), m.value());
        assert!(a.rank() == 1 && b.rank() == 2, "vecmat expects vector and matrix");
        let (l, h) = (b.shape()[0], b.shape()[1]);
        assert_eq!(l, a.numel(), "vecmat dimension mismatch");
        let mut out = vec![S::zero(); h];
        S::gemm(
            h, l, 1,
            S::one(),
            b.data(), 1, h as isize,
            a.data(), 1, 1,
            S::zero(),
            &mut out, 1, 1,
        );
        self.tape.push(
            Tensor::from_vec(out),
            Op::VecMat { v: self.id, m: m.id },
            self.needs() || m.needs(),
            None,
        )
    }

    pub fn relu(self) -> Var<'t, S> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x.max(S::zero())).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("relu shape");
        self.tape.push(t, Op::Relu(self.id), self.needs(), None)
    }

    pub fn sigmoid(self) -> Var<'t, S> {
        let a = self.value();
        let data = a
            .data()
            .iter()
            .map(|&x| {
                if x >= S::zero() {
                    S::one() / (S::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (S::one() + e)
                }
            })
            .collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("sigmoid shape");
        self.tape.push(t, Op::Sigmoid(self.id), self.needs(), None)
    }

    pub fn tanh(self) -> Var<'t, S> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x.tanh()).collect();
        let t = Tensor::new(a.shape().to_vec(), data).expect("tanh shape");
        self.tape.push(t, Op::Tanh(self.id), self.needs(), None)
    }

    /// 2-D convolution over `[C_in, H, W]` with square kernels
    /// `[C_out, C_in, k, k]`, symmetric zero padding, and per-filter bias.
    pub fn conv2d(self, weights: Var<'t, S>, bias: Var<'t, S>, stride: usize, pad: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let w = weights.value();
        let b = bias.value();
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        if x.rank() != 3 || w.rank() != 4 {
            return Err(Error::Shape(format!(
                "conv2d: expected input [C,H,W] and weights [C_out,C_in,k,k], got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, wc_in, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d: input has {c_in} channels but weights expect {wc_in} (weights {:?}, input {:?})",
                w.shape(),
                x.shape()
            )));
        }
        if k != k2 {
            return Err(Error::Shape(format!("conv2d: kernel must be square, got {k}x{k2}")));
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::Shape(format!(
                "conv2d: kernel {k} exceeds padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if b.numel() != c_out {
            return Err(Error::Shape(format!(
                "conv2d: bias has {} entries, expected {c_out}",
                b.numel()
            )));
        }
        let h_out = conv2d_out_dim(h, k, stride, pad);
        let w_out = conv2d_out_dim(wd, k, stride, pad);
        let cols_n = h_out * w_out;
        let kk = c_in * k * k;
        let cols = im2col(x.data(), c_in, h, wd, k, stride, pad, h_out, w_out);
        let mut out = vec![S::zero(); c_out * cols_n];
        S::gemm(
            c_out, kk, cols_n,
            S::one(),
            w.data(), kk as isize, 1,
            &cols, cols_n as isize, 1,
            S::zero(),
            &mut out, cols_n as isize, 1,
        );
        for c in 0..c_out {
            let bv = b.data()[c];
            for o in out[c * cols_n..(c + 1) * cols_n].iter_mut() {
                *o = *o + bv;
            }
        }
        let t = Tensor::new(vec![c_out, h_out, w_out], out).expect("conv2d shape");
        Ok(self.tape.push(
            t,
            Op::Conv2d { x: self.id, w: weights.id, b: bias.id, stride, pad },
            self.needs() || weights.needs() || bias.needs(),
            None,
        ))
    }

    /// 1-D convolution along the sequence axis of `[L, D]` with kernels
    /// `[C_out, D, k]`; output is `[L_out, C_out]`.
    pub fn conv1d(self, weights: Var<'t, S>, bias: Var<'t, S>, stride: usize, pad: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let w = weights.value();
        let b = bias.value();
        if stride == 0 {
            return Err(Error::Config("conv1d: stride must be >= 1".into()));
        }
        if x.rank() != 2 || w.rank() != 3 {
            return Err(Error::Shape(format!(
                "conv1d: expected input [L,D] and weights [C_out,D,k], got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (l, d) = (x.shape()[0], x.shape()[1]);
        let (c_out, wd, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if wd != d {
            return Err(Error::Shape(format!(
                "conv1d: input dimension {d} does not match weight dimension {wd}"
            )));
        }
        if k > l + 2 * pad {
            return Err(Error::Shape(format!(
                "conv1d: kernel {k} exceeds padded length {}",
                l + 2 * pad
            )));
        }
        if b.numel() != c_out {
            return Err(Error::Shape(format!(
                "conv1d: bias has {} entries, expected {c_out}",
                b.numel()
            )));
        }
        let l_out = (l + 2 * pad - k) / stride + 1;
        let dk = d * k;
        let cols = im2col1d(x.data(), l, d, k, stride, pad, l_out);
        // out stored [L_out, C_out]: compute C = (W x cols)^T directly.
        let mut out = vec![S::zero(); l_out * c_out];
        S::gemm(
            l_out, dk, c_out,
            S::one(),
            &cols, 1, l_out as isize,
            w.data(), 1, dk as isize,
            S::zero(),
            &mut out, c_out as isize, 1,
        );
        for (i, o) in out.iter_mut().enumerate() {
            *o = *o + b.data()[i % c_out];
        }
        let t = Tensor::new(vec![l_out, c_out], out).expect("conv1d shape");
        Ok(self.tape.push(
            t,
            Op::Conv1d { x: self.id, w: weights.id, b: bias.id, stride, pad },
            self.needs() || weights.needs() || bias.needs(),
            None,
        ))
    }

    /// Non-overlapping max pooling over `[C, H, W]`; gradient flows to the
    /// first maximal element of each window in row-major order.
    pub fn maxpool2d(self, window: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        if x.rank() != 3 {
            return Err(Error::Shape(format!(
                "maxpool2d: expected [C,H,W], got {:?}",
                x.shape()
            )));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if h < window || w < window {
            return Err(Error::Shape(format!(
                "maxpool2d: input {h}x{w} smaller than window {window}"
            )));
        }
        let (h_out, w_out) = (h / window, w / window);
        let mut out = vec![S::zero(); c * h_out * w_out];
        let mut argmax = vec![0u32; c * h_out * w_out];
        for ci in 0..c {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0u32;
                    for ky in 0..window {
                        for kx in 0..window {
                            let iy = oy * window + ky;
                            let ix = ox * window + kx;
                            let idx = (ci * h + iy) * w + ix;
                            let v = x.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx as u32;
                            }
                        }
                    }
                    let o = (ci * h_out + oy) * w_out + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let t = Tensor::new(vec![c, h_out, w_out], out).expect("pool shape");
        Ok(self
            .tape
            .push(t, Op::MaxPool2d { x: self.id, argmax }, self.needs(), None))
    }

    /// Training-mode batch normalization over the channel axis of `[C, H, W]`
    /// or `[B, C, H, W]`. Returns the normalized output and the batch
    /// statistics for the caller's running estimates.
    pub fn batchnorm_train(
        self,
        gamma: Var<'t, S>,
        beta: Var<'t, S>,
        eps: f64,
    ) -> Result<(Var<'t, S>, BnBatchStats<S>)> {
        let x = self.value();
        let (b, c) = match x.rank() {
            3 => (1, x.shape()[0]),
            4 => (x.shape()[0], x.shape()[1]),
            _ => {
                return Err(Error::Shape(format!(
                    "batchnorm: expected [C,H,W] or [B,C,H,W], got {:?}",
                    x.shape()
                )))
            }
        };
        let per = x.numel() / (b * c);
        let n = b * per;
        if n < 2 {
            return Err(Error::Config(
                "batchnorm: training mode needs at least 2 values per channel".into(),
            ));
        }
        if gamma.value().numel() != c || beta.value().numel() != c {
            return Err(Error::Shape(format!(
                "batchnorm: gamma/beta must have {c} entries"
            )));
        }
        let n_s = S::from_f64c(n as f64);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for (i, &v) in x.data().iter().enumerate() {
            let ch = (i / per) % c;
            mean[ch] = mean[ch] + v;
        }
        for m in mean.iter_mut() {
            *m = *m / n_s;
        }
        for (i, &v) in x.data().iter().enumerate() {
            let ch = (i / per) % c;
            let d = v - mean[ch];
            var[ch] = var[ch] + d * d;
        }
        for v in var.iter_mut() {
            *v = *v / n_s;
        }
        let eps_s = S::from_f64c(eps);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps_s).sqrt()).collect();
        let mut xhat = vec![S::zero(); x.numel()];
        let mut out = vec![S::zero(); x.numel()];
        let gv = gamma.value();
        let bv = beta.value();
        for (i, &v) in x.data().iter().enumerate() {
            let ch = (i / per) % c;
            let h = (v - mean[ch]) * inv_std[ch];
            xhat[i] = h;
            out[i] = gv.data()[ch] * h + bv.data()[ch];
        }
        let stats = BnBatchStats {
            mean: mean.clone(),
            var_biased: var,
            count: n,
        };
        let xhat_t = Tensor::new(x.shape().to_vec(), xhat).expect("bn shape");
        let t = Tensor::new(x.shape().to_vec(), out).expect("bn shape");
        let var_node = self.tape.push(
            t,
            Op::BnTrain {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: xhat_t,
                inv_std,
                n,
            },
            self.needs() || gamma.needs() || beta.needs(),
            None,
        );
        Ok((var_node, stats))
    }

    /// Evaluation-mode batch normalization with fixed running statistics.
    pub fn batchnorm_eval(
        self,
        gamma: Var<'t, S>,
        beta: Var<'t, S>,
        running_mean: &Tensor<S>,
        running_var: &Tensor<S>,
        eps: f64,
    ) -> Result<Var<'t, S>> {
        let x = self.value();
        let c = match x.rank() {
            3 => x.shape()[0],
            4 => x.shape()[1],
            _ => {
                return Err(Error::Shape(format!(
                    "batchnorm: expected [C,H,W] or [B,C,H,W], got {:?}",
                    x.shape()
                )))
            }
        };
        if running_mean.numel() != c || running_var.numel() != c {
            return Err(Error::Shape(format!(
                "batchnorm: running stats must have {c} entries"
            )));
        }
        let b = if x.rank() == 4 { x.shape()[0] } else { 1 };
        let per = x.numel() / (b * c);
        let eps_s = S::from_f64c(eps);
        let inv_std: Vec<S> = running_var
            .data()
            .iter()
            .map(|&v| S::one() / (v + eps_s).sqrt())
            .collect();
        let gv = gamma.value();
        let bv = beta.value();
        let mut out = vec![S::zero(); x.numel()];
        for (i, &v) in x.data().iter().enumerate() {
            let ch = (i / per) % c;
            out[i] = gv.data()[ch] * (v - running_mean.data()[ch]) * inv_std[ch] + bv.data()[ch];
        }
        let t = Tensor::new(x.shape().to_vec(), out).expect("bn shape");
        Ok(self.tape.push(
            t,
            Op::BnEval {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                mean: running_mean.data().to_vec(),
                inv_std,
            },
            self.needs() || gamma.needs() || beta.needs(),
            None,
        ))
    }

    /// Inverted dropout: zero each element with probability `p` and scale
    /// survivors by `1/(1-p)`. Identity when not training or `p == 0`.
    pub fn dropout<R: Rng>(self, p: f64, training: bool, rng: &mut R) -> Result<Var<'t, S>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout: p must be in [0,1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(self);
        }
        let x = self.value();
        let scale = S::from_f64c(1.0 / (1.0 - p));
        let mask: Vec<bool> = (0..x.numel()).map(|_| rng.random::<f64>() >= p).collect();
        let data = x
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * scale } else { S::zero() })
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("dropout shape");
        Ok(self
            .tape
            .push(t, Op::Dropout { x: self.id, mask, scale }, self.needs(), None))
    }

    /// Softmax + cross-entropy against a single target index; returns the
    /// scalar loss node and the probability vector.
    pub fn softmax_crossentropy(self, target: usize) -> Result<(Var<'t, S>, Tensor<S>)> {
        let x = self.value();
        if x.rank() != 1 || x.numel() == 0 {
            return Err(Error::Shape(format!(
                "softmax_crossentropy: expected non-empty vector, got {:?}",
                x.shape()
            )));
        }
        if target >= x.numel() {
            return Err(Error::Config(format!(
                "softmax_crossentropy: target {target} out of range for {} logits",
                x.numel()
            )));
        }
        let max = x.data().iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<S> = x.data().iter().map(|&v| (v - max).exp()).collect();
        let z: S = exps.iter().copied().sum();
        let probs: Vec<S> = exps.iter().map(|&e| e / z).collect();
        let loss = -(probs[target].max(S::from_f64c(f64::MIN_POSITIVE))).ln();
        let probs_t = Tensor::from_vec(probs);
        let node = self.tape.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: self.id,
                probs: probs_t.clone(),
                target,
            },
            self.needs(),
            None,
        );
        Ok((node, probs_t))
    }

    /// Softmax over the unmasked entries of a vector; masked entries get
    /// exactly zero weight.
    pub fn masked_softmax(self, mask: &[bool]) -> Result<Var<'t, S>> {
        let x = self.value();
        assert_eq!(x.numel(), mask.len(), "masked_softmax mask length mismatch");
        if !mask.iter().any(|&m| m) {
            return Err(Error::Config("masked_softmax: all positions masked".into()));
        }
        let max = x
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .fold(S::neg_infinity(), |a, (&v, _)| a.max(v));
        let mut out = vec![S::zero(); x.numel()];
        let mut z = S::zero();
        for (i, (&v, &m)) in x.data().iter().zip(mask).enumerate() {
            if m {
                let e = (v - max).exp();
                out[i] = e;
                z = z + e;
            }
        }
        for o in out.iter_mut() {
            *o = *o / z;
        }
        Ok(self.tape.push(
            Tensor::from_vec(out),
            Op::MaskedSoftmax {
                x: self.id,
                mask: mask.to_vec(),
            },
            self.needs(),
            None,
        ))
    }

    /// Mean over the row axis of `[R, C]` -> `[C]`.
    pub fn mean_rows(self) -> Var<'t, S> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "mean_rows expects a matrix");
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let inv = S::one() / S::from_f64c(r as f64);
        let mut out = vec![S::zero(); c];
        for (i, &v) in x.data().iter().enumerate() {
            out[i % c] = out[i % c] + v;
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        self.tape
            .push(Tensor::from_vec(out), Op::MeanRows(self.id), self.needs(), None)
    }

    /// Mean over unmasked rows of `[R, C]` -> `[C]`.
    pub fn masked_mean_rows(self, mask: &[bool]) -> Result<Var<'t, S>> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "masked_mean_rows expects a matrix");
        let (r, c) = (x.shape()[0], x.shape()[1]);
        assert_eq!(r, mask.len(), "masked_mean_rows mask length mismatch");
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Config("masked_mean_rows: all rows masked".into()));
        }
        let inv = S::one() / S::from_f64c(count as f64);
        let mut out = vec![S::zero(); c];
        for (i, &v) in x.data().iter().enumerate() {
            if mask[i / c] {
                out[i % c] = out[i % c] + v;
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        Ok(self.tape.push(
            Tensor::from_vec(out),
            Op::MaskedMeanRows {
                x: self.id,
                mask: mask.to_vec(),
                count,
            },
            self.needs(),
            None,
        ))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    pub fn bce(self, labels: &Tensor<S>) -> Result<Var<'t, S>> {
        let p = self.value();
        if p.shape() != labels.shape() {
            return Err(Error::Shape(format!(
                "bce: probabilities {:?} vs labels {:?}",
                p.shape(),
                labels.shape()
            )));
        }
        let eps = S::from_f64c(BCE_EPS);
        let one = S::one();
        let mut total = S::zero();
        for (&pi, &yi) in p.data().iter().zip(labels.data()) {
            let pc = pi.max(eps).min(one - eps);
            total = total - (yi * pc.ln() + (one - yi) * (one - pc).ln());
        }
        let loss = total / S::from_f64c(p.numel() as f64);
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs: self.id,
                labels: labels.clone(),
            },
            self.needs(),
            None,
        ))
    }

    /// Row lookup into an embedding table `[V, E]` -> `[T, E]`.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t, S>> {
        let table = self.value();
        assert_eq!(table.rank(), 2, "gather expects a matrix table");
        if indices.is_empty() {
            return Err(Error::Config("gather: empty index list".into()));
        }
        let (v, e) = (table.shape()[0], table.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * e);
        for &idx in indices {
            if idx >= v {
                return Err(Error::Config(format!(
                    "gather: index {idx} out of range for table with {v} rows"
                )));
            }
            data.extend_from_slice(&table.data()[idx * e..(idx + 1) * e]);
        }
        let t = Tensor::new(vec![indices.len(), e], data).expect("gather shape");
        Ok(self.tape.push(
            t,
            Op::Gather {
                table: self.id,
                indices: indices.to_vec(),
            },
            self.needs(),
            None,
        ))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t, S>> {
        let x = self.value();
        let t = Tensor::new(shape.clone(), x.data().to_vec()).map_err(|_| {
            Error::Shape(format!("reshape: {:?} incompatible with {:?}", x.shape(), shape))
        })?;
        Ok(self.tape.push(t, Op::Reshape(self.id), self.needs(), None))
    }

    pub fn transpose2d(self) -> Var<'t, S> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "transpose2d expects a matrix");
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out).expect("transpose shape");
        self.tape.push(t, Op::Transpose2d(self.id), self.needs(), None)
    }

    /// Extract row `i` of `[R, C]` as a `[C]` vector.
    pub fn row(self, i: usize) -> Var<'t, S> {
        let x = self.value();
        assert_eq!(x.rank(), 2, "row expects a matrix");
        let (r, c) = (x.shape()[0], x.shape()[1]);
        assert!(i < r, "row {i} out of range for {r} rows");
        let data = x.data()[i * c..(i + 1) * c].to_vec();
        self.tape.push(
            Tensor::from_vec(data),
            Op::Row { x: self.id, row: i },
            self.needs(),
            None,
        )
    }

    pub fn sum(self) -> Var<'t, S> {
        let x = self.value();
        let total: S = x.data().iter().copied().sum();
        self.tape
            .push(Tensor::scalar(total), Op::Sum(self.id), self.needs(), None)
    }
}
