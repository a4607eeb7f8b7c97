//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes in execution order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use rand::Rng as _;

use crate::rng::{substream, Rng};
use crate::tensor::{sigmoid, softmax_rows, Tensor, TensorError};

/// Clamp applied to the argument of [`OpKind::Log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    Add,
    Sub,
    /// `[..., n] + [n]`
    AddBroadcastBias,
    /// Elementwise product.
    Mul,
    /// Multiplication by a constant.
    Scale(f64),
    Relu,
    Sigmoid,
    Tanh,
    /// Softmax of `x / tau` over the last axis.
    SoftmaxWithTemperature(f64),
    /// Log-softmax of `x / tau` over the last axis.
    LogSoftmaxWithTemperature(f64),
    ConcatLastAxis,
    MeanOverAxis(usize),
    SumOverAxis(usize),
    /// `[b, t, d] -> [b, d]` at the given time index.
    SliceTimestep(usize),
    /// Inverted dropout; identity on an inference tape.
    Dropout { rate: f64, seed: u64 },
    /// Natural log with the argument clamped below at [`LOG_FLOOR`].
    Log,
    Neg,
    Reshape(Vec<usize>),
    /// Elementwise binary cross-entropy of `sigmoid(logits)` against targets,
    /// computed in the overflow-free form `max(z,0) - z*y + ln(1 + e^-|z|)`.
    BceWithLogits,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::AddBroadcastBias => "add_broadcast_bias",
            OpKind::Mul => "elementwise_mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::SoftmaxWithTemperature(_) => "softmax_with_temperature",
            OpKind::LogSoftmaxWithTemperature(_) => "log_softmax_with_temperature",
            OpKind::ConcatLastAxis => "concat_last_axis",
            OpKind::MeanOverAxis(_) => "mean_over_axis",
            OpKind::SumOverAxis(_) => "sum_over_axis",
            OpKind::SliceTimestep(_) => "slice_timestep",
            OpKind::Dropout { .. } => "dropout",
            OpKind::Log => "log",
            OpKind::Neg => "neg",
            OpKind::Reshape(_) => "reshape",
            OpKind::BceWithLogits => "bce_with_logits",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Option<OpKind>,
    inputs: Vec<Var>,
    /// Op-specific forward state (dropout mask, softmax output).
    saved: Vec<f64>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    training: bool,
    dropout_rng: Rng,
}

impl Default for Tape {
    fn default() -> Self {
        Self::inference()
    }
}

impl Tape {
    /// A tape on which dropout is the identity.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            training: false,
            dropout_rng: substream(0, "dropout"),
        }
    }

    /// A training tape; dropout masks are drawn from a stream keyed by `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            training: true,
            dropout_rng: substream(seed, "dropout"),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Places a tensor on the tape, inheriting its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), None, Vec::new(), Vec::new())
    }

    /// Places a tensor on the tape as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, None, Vec::new(), Vec::new())
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient accumulated at `v` by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
        op: Option<OpKind>,
        inputs: Vec<Var>,
        saved: Vec<f64>,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op: if requires_grad { op } else { None },
            inputs: if requires_grad { inputs } else { Vec::new() },
            saved: if requires_grad { saved } else { Vec::new() },
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, kind: &OpKind, inputs: &[Var]) -> TensorError {
        TensorError::ShapeMismatch {
            op: kind.name(),
            shapes: inputs.iter().map(|v| self.shape(*v).to_vec()).collect(),
        }
    }

    /// Applies `kind` to `inputs`, recording a backward entry when any input
    /// requires a gradient.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, TensorError> {
        let arity = match kind {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::AddBroadcastBias
            | OpKind::Mul
            | OpKind::BceWithLogits => Some(2),
            OpKind::ConcatLastAxis => None,
            _ => Some(1),
        };
        if arity.is_some_and(|a| a != inputs.len()) || inputs.is_empty() {
            return Err(self.mismatch(&kind, inputs));
        }
        let requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        let (shape, value, saved) = self.compute(&kind, inputs)?;
        Ok(self.push(shape, value, requires_grad, Some(kind), inputs.to_vec(), saved))
    }

    fn compute(
        &self,
        kind: &OpKind,
        inputs: &[Var],
    ) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>), TensorError> {
        let a = &self.nodes[inputs[0].0];
        let elementwise = |f: &dyn Fn(f64) -> f64| a.value.iter().map(|&x| f(x)).collect::<Vec<_>>();
        Ok(match kind {
            OpKind::MatMul => {
                let b = &self.nodes[inputs[1].0];
                let (m, k, n) = match (a.shape.as_slice(), b.shape.as_slice()) {
                    ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
                    _ => return Err(self.mismatch(kind, inputs)),
                };
                (vec![m, n], matmul(&a.value, &b.value, m, k, n), Vec::new())
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::BceWithLogits => {
                let b = &self.nodes[inputs[1].0];
                if a.shape != b.shape {
                    return Err(self.mismatch(kind, inputs));
                }
                let f: fn(f64, f64) -> f64 = match kind {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    OpKind::Mul => |x, y| x * y,
                    _ => |z, y| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p(),
                };
                let v = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
                (a.shape.clone(), v, Vec::new())
            }
            OpKind::AddBroadcastBias => {
                let b = &self.nodes[inputs[1].0];
                let n = match b.shape.as_slice() {
                    [n] if a.shape.last() == Some(n) => *n,
                    _ => return Err(self.mismatch(kind, inputs)),
                };
                let mut v = a.value.clone();
                for row in v.chunks_mut(n) {
                    row.iter_mut().zip(&b.value).for_each(|(x, y)| *x += y);
                }
                (a.shape.clone(), v, Vec::new())
            }
            OpKind::Scale(c) => (a.shape.clone(), elementwise(&|x| c * x), Vec::new()),
            OpKind::Relu => (a.shape.clone(), elementwise(&|x| x.max(0.0)), Vec::new()),
            OpKind::Sigmoid => (a.shape.clone(), elementwise(&sigmoid), Vec::new()),
            OpKind::Tanh => (a.shape.clone(), elementwise(&f64::tanh), Vec::new()),
            OpKind::Log => (a.shape.clone(), elementwise(&|x| x.max(LOG_FLOOR).ln()), Vec::new()),
            OpKind::Neg => (a.shape.clone(), elementwise(&|x| -x), Vec::new()),
            OpKind::SoftmaxWithTemperature(tau) | OpKind::LogSoftmaxWithTemperature(tau) => {
                if !(*tau > 0.0) {
                    return Err(TensorError::InvalidTemperature(*tau));
                }
                let cols = match a.shape.last() {
                    Some(&c) => c,
                    None => return Err(self.mismatch(kind, inputs)),
                };
                let p = softmax_rows(&a.value, cols, *tau);
                if matches!(kind, OpKind::SoftmaxWithTemperature(_)) {
                    (a.shape.clone(), p.clone(), p)
                } else {
                    let mut out = Vec::with_capacity(p.len());
                    for row in a.value.chunks(cols) {
                        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x / tau));
                        let lse = max + row.iter().map(|&x| (x / tau - max).exp()).sum::<f64>().ln();
                        out.extend(row.iter().map(|&x| x / tau - lse));
                    }
                    (a.shape.clone(), out, p)
                }
            }
            OpKind::ConcatLastAxis => {
                let lead = &a.shape[..a.shape.len().saturating_sub(1)];
                if a.shape.is_empty()
                    || inputs.iter().any(|v| {
                        let s = self.shape(*v);
                        s.len() != a.shape.len() || &s[..s.len() - 1] != lead
                    })
                {
                    return Err(self.mismatch(kind, inputs));
                }
                let widths: Vec<usize> = inputs.iter().map(|v| *self.shape(*v).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows: usize = lead.iter().product();
                let mut v = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (inp, &w) in inputs.iter().zip(&widths) {
                        v.extend_from_slice(&self.nodes[inp.0].value[r * w..(r + 1) * w]);
                    }
                }
                let mut shape = lead.to_vec();
                shape.push(total);
                (shape, v, Vec::new())
            }
            OpKind::MeanOverAxis(axis) | OpKind::SumOverAxis(axis) => {
                if *axis >= a.shape.len() {
                    return Err(TensorError::BadAxis {
                        op: kind.name(),
                        axis: *axis,
                        shape: a.shape.clone(),
                    });
                }
                let (outer, len, inner) = split_axis(&a.shape, *axis);
                let scale = if matches!(kind, OpKind::MeanOverAxis(_)) { 1.0 / len as f64 } else { 1.0 };
                let mut v = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &a.value[(o * len + l) * inner..(o * len + l + 1) * inner];
                        v[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                v.iter_mut().for_each(|x| *x *= scale);
                let mut shape = a.shape.clone();
                shape.remove(*axis);
                (shape, v, Vec::new())
            }
            OpKind::SliceTimestep(t) => {
                let (b, steps, d) = match a.shape.as_slice() {
                    [b, s, d] => (*b, *s, *d),
                    _ => return Err(self.mismatch(kind, inputs)),
                };
                if *t >= steps {
                    return Err(TensorError::BadIndex {
                        op: kind.name(),
                        index: *t,
                        shape: a.shape.clone(),
                    });
                }
                let mut v = Vec::with_capacity(b * d);
                for i in 0..b {
                    let start = (i * steps + t) * d;
                    v.extend_from_slice(&a.value[start..start + d]);
                }
                (vec![b, d], v, Vec::new())
            }
            OpKind::Dropout { rate, seed } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(TensorError::InvalidDropoutRate(*rate));
                }
                if !self.training || *rate == 0.0 {
                    (a.shape.clone(), a.value.clone(), vec![1.0; a.value.len()])
                } else {
                    let mut rng = crate::rng::seeded_rng(*seed);
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..a.value.len())
                        .map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { keep })
                        .collect();
                    let v = a.value.iter().zip(&mask).map(|(x, m)| x * m).collect();
                    (a.shape.clone(), v, mask)
                }
            }
            OpKind::Reshape(shape) => {
                if shape.iter().product::<usize>() != a.value.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: kind.name(),
                        shapes: vec![a.shape.clone(), shape.clone()],
                    });
                }
                (shape.clone(), a.value.clone(), Vec::new())
            }
        })
    }

    /// Runs the reverse sweep from a scalar `loss`. Gradients accumulate
    /// additively into every node reachable from the loss.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 || node.shape.iter().any(|&d| d != 1) {
            return Err(TensorError::NonScalarLoss(node.shape.clone()));
        }
        if !node.requires_grad {
            return Err(TensorError::NoGradient);
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(upstream) = self.grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(kind) = &node.op {
                let contributions = self.input_grads(node, kind, &upstream);
                for (input, g) in node.inputs.iter().zip(contributions) {
                    let Some(g) = g else { continue };
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut self.grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            self.grads[i] = Some(upstream);
        }
        Ok(())
    }

    fn input_grads(&self, node: &Node, kind: &OpKind, up: &[f64]) -> Vec<Option<Vec<f64>>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let x = val(node.inputs[0]);
        let unary = |f: &dyn Fn(usize) -> f64| vec![Some((0..up.len()).map(f).collect())];
        match kind {
            OpKind::MatMul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let (av, bv) = (val(a), val(b));
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let up_row = &up[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let b_row = &bv[kk * n..(kk + 1) * n];
                        ga[i * k + kk] = up_row.iter().zip(b_row).map(|(u, w)| u * w).sum();
                        let aik = av[i * k + kk];
                        if aik != 0.0 {
                            gb[kk * n..(kk + 1) * n]
                                .iter_mut()
                                .zip(up_row)
                                .for_each(|(g, u)| *g += aik * u);
                        }
                    }
                }
                vec![Some(ga), Some(gb)]
            }
            OpKind::Add => vec![Some(up.to_vec()), Some(up.to_vec())],
            OpKind::Sub => vec![Some(up.to_vec()), Some(up.iter().map(|g| -g).collect())],
            OpKind::Mul => {
                let y = val(node.inputs[1]);
                vec![
                    Some(up.iter().zip(y).map(|(g, b)| g * b).collect()),
                    Some(up.iter().zip(x).map(|(g, a)| g * a).collect()),
                ]
            }
            OpKind::BceWithLogits => {
                let y = val(node.inputs[1]);
                vec![
                    Some(up.iter().zip(x).zip(y).map(|((g, &z), &t)| g * (sigmoid(z) - t)).collect()),
                    Some(up.iter().zip(x).map(|(g, z)| -g * z).collect()),
                ]
            }
            OpKind::AddBroadcastBias => {
                let n = self.shape(node.inputs[1])[0];
                let mut gb = vec![0.0; n];
                for row in up.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(g, u)| *g += u);
                }
                vec![Some(up.to_vec()), Some(gb)]
            }
            OpKind::Scale(c) => unary(&|i| c * up[i]),
            OpKind::Neg => unary(&|i| -up[i]),
            OpKind::Relu => unary(&|i| if x[i] > 0.0 { up[i] } else { 0.0 }),
            OpKind::Sigmoid => unary(&|i| {
                let s = node.value[i];
                up[i] * s * (1.0 - s)
            }),
            OpKind::Tanh => unary(&|i| up[i] * (1.0 - node.value[i] * node.value[i])),
            OpKind::Log => unary(&|i| if x[i] > LOG_FLOOR { up[i] / x[i] } else { 0.0 }),
            OpKind::Dropout { .. } => unary(&|i| up[i] * node.saved[i]),
            OpKind::Reshape(_) => vec![Some(up.to_vec())],
            OpKind::SoftmaxWithTemperature(tau) => {
                let cols = *node.shape.last().unwrap();
                let mut g = vec![0.0; up.len()];
                for ((gr, ur), pr) in g.chunks_mut(cols).zip(up.chunks(cols)).zip(node.saved.chunks(cols)) {
                    let dot: f64 = ur.iter().zip(pr).map(|(u, p)| u * p).sum();
                    for ((gi, ui), pi) in gr.iter_mut().zip(ur).zip(pr) {
                        *gi = pi * (ui - dot) / tau;
                    }
                }
                vec![Some(g)]
            }
            OpKind::LogSoftmaxWithTemperature(tau) => {
                let cols = *node.shape.last().unwrap();
                let mut g = vec![0.0; up.len()];
                for ((gr, ur), pr) in g.chunks_mut(cols).zip(up.chunks(cols)).zip(node.saved.chunks(cols)) {
                    let total: f64 = ur.iter().sum();
                    for ((gi, ui), pi) in gr.iter_mut().zip(ur).zip(pr) {
                        *gi = (ui - pi * total) / tau;
                    }
                }
                vec![Some(g)]
            }
            OpKind::ConcatLastAxis => {
                let widths: Vec<usize> = node.inputs.iter().map(|v| *self.shape(*v).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = up.len() / total;
                let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut offset = r * total;
                    for (o, &w) in out.iter_mut().zip(&widths) {
                        o.extend_from_slice(&up[offset..offset + w]);
                        offset += w;
                    }
                }
                out.into_iter().map(Some).collect()
            }
            OpKind::MeanOverAxis(axis) | OpKind::SumOverAxis(axis) => {
                let in_shape = self.shape(node.inputs[0]);
                let (outer, len, inner) = split_axis(in_shape, *axis);
                let scale = if matches!(kind, OpKind::MeanOverAxis(_)) { 1.0 / len as f64 } else { 1.0 };
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut g[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut()
                            .zip(&up[o * inner..(o + 1) * inner])
                            .for_each(|(d, u)| *d = u * scale);
                    }
                }
                vec![Some(g)]
            }
            OpKind::SliceTimestep(t) => {
                let in_shape = self.shape(node.inputs[0]);
                let (b, steps, d) = (in_shape[0], in_shape[1], in_shape[2]);
                let mut g = vec![0.0; b * steps * d];
                for i in 0..b {
                    let start = (i * steps + t) * d;
                    g[start..start + d].copy_from_slice(&up[i * d..(i + 1) * d]);
                }
                vec![Some(g)]
            }
        }
    }

    // Convenience wrappers. Shapes are checked by `forward_op`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Sub, &[a, b])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::AddBroadcastBias, &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Scale(c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Tanh, &[x])
    }

    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var, TensorError> {
        self.forward_op(OpKind::SoftmaxWithTemperature(tau), &[x])
    }

    pub fn log_softmax(&mut self, x: Var, tau: f64) -> Result<Var, TensorError> {
        self.forward_op(OpKind::LogSoftmaxWithTemperature(tau), &[x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        self.forward_op(OpKind::ConcatLastAxis, parts)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.forward_op(OpKind::MeanOverAxis(axis), &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.forward_op(OpKind::SumOverAxis(axis), &[x])
    }

    pub fn slice_timestep(&mut self, x: Var, t: usize) -> Result<Var, TensorError> {
        self.forward_op(OpKind::SliceTimestep(t), &[x])
    }

    /// Dropout whose mask seed is drawn from the tape's own stream.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var, TensorError> {
        let seed = if self.training && rate > 0.0 { self.dropout_rng.gen() } else { 0 };
        self.forward_op(OpKind::Dropout { rate, seed }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Log, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Neg, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.forward_op(OpKind::Reshape(shape.to_vec()), &[x])
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var, TensorError> {
        self.forward_op(OpKind::BceWithLogits, &[logits, targets])
    }

    /// Mean of every element, as a scalar of shape `[]`.
    pub fn mean_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.mean_axis(flat, 0)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.sum_axis(flat, 0)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            row.iter_mut()
                .zip(&b[kk * n..(kk + 1) * n])
                .for_each(|(o, w)| *o += aik * w);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_requires_grad(true)
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_softmax_on_equal_logits() {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_vec(vec![0.0; 3]));
        let y = tape.softmax(x, 1.0).unwrap();
        for p in tape.value(y) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_shape_algebra() {
        let mut tape = Tape::inference();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 5]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[2, 8]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::training(0);
        let x = tape.leaf(&param(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::inference();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dropout_rate_validated() {
        let mut tape = Tape::training(1);
        let x = tape.constant(Tensor::zeros(&[4]));
        assert_eq!(tape.dropout(x, 1.0), Err(TensorError::InvalidDropoutRate(1.0)));
        assert_eq!(tape.dropout(x, -0.1), Err(TensorError::InvalidDropoutRate(-0.1)));
    }

    #[test]
    fn dropout_identity_cases() {
        let data: Vec<f64> = (0..50).map(f64::from).collect();
        let mut train = Tape::training(3);
        let x = train.constant(Tensor::from_vec(data.clone()));
        let y = train.dropout(x, 0.0).unwrap();
        assert_eq!(train.value(y), &data[..]);

        let mut infer = Tape::inference();
        let x = infer.constant(Tensor::from_vec(data.clone()));
        let y = infer.dropout(x, 0.7).unwrap();
        assert_eq!(infer.value(y), &data[..]);

        let y = train.dropout(x, 0.5).unwrap();
        assert!(train.value(y).iter().zip(&data).all(|(o, i)| *o == 0.0 || *o == 2.0 * i));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::training(0);
        let x = tape.leaf(&param(&[2], &[1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.backward(y), Err(TensorError::NonScalarLoss(vec![2])));
    }

    #[test]
    fn constants_record_nothing() {
        let mut tape = Tape::training(0);
        let x = tape.constant(Tensor::from_vec(vec![1.0]));
        let y = tape.relu(x).unwrap();
        assert!(!tape.requires_grad(y));
        assert_eq!(tape.backward(y), Err(TensorError::NoGradient));
    }
}
