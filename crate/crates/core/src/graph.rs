//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op records its parents,
//! which always precede it in the arena, so arena order is a topological order
//! and [`Graph::backward`] is a single reverse sweep. Ops are deliberately
//! coarse (a whole GRU sequence is one node) to keep graphs small.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{axpy, dot, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => math::tanh(x),
            Activation::Sigmoid => math::sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

/// Op tag for a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Dense,
    Conv1d,
    Gru,
    MeanPoolTime,
    Grl,
    Identity,
    Concat,
    StackRows,
    Add,
    AddN,
    Scale,
    Sum,
    WeightedCrossEntropy,
}

#[derive(Debug)]
struct GruCache {
    width: usize,
    /// Per step: z, r, candidate, previous hidden state, each `width` long.
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    h_prev: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense {
        x: Value,
        w: Value,
        b: Value,
        act: Activation,
    },
    Conv1d {
        x: Value,
        kernels: Value,
    },
    Gru {
        x: Value,
        w_in: Value,
        w_hid: Value,
        bias: Value,
        h0: Value,
        cache: Box<GruCache>,
    },
    MeanPoolTime {
        x: Value,
    },
    Grl {
        x: Value,
        lambda: f64,
    },
    Identity {
        x: Value,
    },
    Concat {
        parts: Vec<Value>,
    },
    StackRows {
        rows: Vec<Value>,
    },
    Add {
        a: Value,
        b: Value,
    },
    AddN {
        xs: Vec<Value>,
    },
    Scale {
        x: Value,
        factor: f64,
    },
    Sum {
        x: Value,
    },
    WeightedCrossEntropy {
        logits: Value,
        /// Per row: (label, weight).
        targets: Vec<(usize, f64)>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Dense { .. } => OpKind::Dense,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::Gru { .. } => OpKind::Gru,
            Op::MeanPoolTime { .. } => OpKind::MeanPoolTime,
            Op::Grl { .. } => OpKind::Grl,
            Op::Identity { .. } => OpKind::Identity,
            Op::Concat { .. } => OpKind::Concat,
            Op::StackRows { .. } => OpKind::StackRows,
            Op::Add { .. } => OpKind::Add,
            Op::AddN { .. } => OpKind::AddN,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::WeightedCrossEntropy { .. } => OpKind::WeightedCrossEntropy,
        }
    }

    fn parents(&self) -> Vec<Value> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Dense { x, w, b, .. } => vec![*x, *w, *b],
            Op::Conv1d { x, kernels } => vec![*x, *kernels],
            Op::Gru {
                x,
                w_in,
                w_hid,
                bias,
                h0,
                ..
            } => vec![*x, *w_in, *w_hid, *bias, *h0],
            Op::MeanPoolTime { x }
            | Op::Grl { x, .. }
            | Op::Identity { x }
            | Op::Scale { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::Concat { parts } => parts.clone(),
            Op::StackRows { rows } => rows.clone(),
            Op::Add { a, b } => vec![*a, *b],
            Op::AddN { xs } => xs.clone(),
            Op::WeightedCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Computation graph. Confined to one thread; build a fresh graph per step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Value {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf that is never differentiated (data).
    pub fn input(&mut self, t: Tensor) -> Value {
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_kind(&self, v: Value) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn parents(&self, v: Value) -> Vec<Value> {
        self.nodes[v.0].op.parents()
    }

    /// Accumulated gradient, `None` when nothing flowed into `v`.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_or_zeros(&self, v: Value) -> Vec<f64> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.value(v).len()],
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Value {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Value(self.nodes.len() - 1)
    }

    fn check(&self, vs: &[Value]) -> Result<()> {
        for v in vs {
            if v.0 >= self.nodes.len() {
                return Err(Error::Graph(format!("value {} is not in this graph", v.0)));
            }
        }
        Ok(())
    }

    fn any_requires(&self, vs: &[Value]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `act(W x + b)`. `x` may be a vector `[n]` or a row batch `[B, n]`.
    pub fn dense(&mut self, x: Value, w: Value, b: Value, act: Activation) -> Result<Value> {
        self.check(&[x, w, b])?;
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if wt.rank() != 2 || bt.rank() != 1 || xt.rank() > 2 {
            return Err(Error::Dimension(format!(
                "dense expects W rank 2, b rank 1, x rank <= 2; got {:?}, {:?}, {:?}",
                wt.shape(),
                bt.shape(),
                xt.shape()
            )));
        }
        let (m, n) = (wt.shape()[0], wt.shape()[1]);
        if xt.cols() != n || bt.len() != m {
            return Err(Error::Dimension(format!(
                "dense: x {:?} / W {:?} / b {:?} do not conform",
                xt.shape(),
                wt.shape(),
                bt.shape()
            )));
        }
        let rows = xt.rows();
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let xr = &xt.data()[r * n..(r + 1) * n];
            for i in 0..m {
                let pre = dot(&wt.data()[i * n..(i + 1) * n], xr) + bt.data()[i];
                out[r * m + i] = act.apply(pre);
            }
        }
        let shape = if xt.rank() == 2 { vec![rows, m] } else { vec![m] };
        let req = self.any_requires(&[x, w, b]);
        Ok(self.push(Tensor::from_parts(shape, out), req, Op::Dense { x, w, b, act }))
    }

    /// Valid 1-D convolution with stride 1 followed by relu.
    /// `x: [T, C_in]`, `kernels: [C_out, width, C_in]` → `[T - width + 1, C_out]`.
    pub fn conv1d(&mut self, x: Value, kernels: Value) -> Result<Value> {
        self.check(&[x, kernels])?;
        let (xt, kt) = (self.value(x), self.value(kernels));
        if xt.rank() != 2 || kt.rank() != 3 || kt.shape()[2] != xt.shape()[1] {
            return Err(Error::Dimension(format!(
                "conv1d: x {:?} and kernels {:?} do not conform",
                xt.shape(),
                kt.shape()
            )));
        }
        let (t_len, c_in) = (xt.shape()[0], xt.shape()[1]);
        let (c_out, width) = (kt.shape()[0], kt.shape()[1]);
        if width == 0 || t_len < width {
            return Err(Error::DegenerateInput(format!(
                "sequence of length {t_len} is shorter than kernel width {width}"
            )));
        }
        let t_out = t_len - width + 1;
        let span = width * c_in;
        let mut out = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            let window = &xt.data()[t * c_in..t * c_in + span];
            for o in 0..c_out {
                let pre = dot(&kt.data()[o * span..(o + 1) * span], window);
                out[t * c_out + o] = if pre > 0.0 { pre } else { 0.0 };
            }
        }
        let req = self.any_requires(&[x, kernels]);
        Ok(self.push(
            Tensor::from_parts(vec![t_out, c_out], out),
            req,
            Op::Conv1d { x, kernels },
        ))
    }

    /// Runs a GRU over `x: [T, d]` and returns all hidden states `[T, w]`.
    ///
    /// Gate blocks are stacked in the order update (z), reset (r), candidate:
    /// `w_in: [3w, d]`, `w_hid: [3w, w]`, `bias: [3w]`, `h0: [w]`.
    pub fn gru_sequence(
        &mut self,
        x: Value,
        w_in: Value,
        w_hid: Value,
        bias: Value,
        h0: Value,
    ) -> Result<Value> {
        self.check(&[x, w_in, w_hid, bias, h0])?;
        let (xt, wi, wh, bt, h0t) = (
            self.value(x),
            self.value(w_in),
            self.value(w_hid),
            self.value(bias),
            self.value(h0),
        );
        if xt.rank() != 2 {
            return Err(Error::Dimension(format!("gru: x must be [T, d], got {:?}", xt.shape())));
        }
        let (t_len, d) = (xt.shape()[0], xt.shape()[1]);
        if t_len == 0 {
            return Err(Error::DegenerateInput("gru over an empty sequence".into()));
        }
        let w = h0t.len();
        if wi.shape() != [3 * w, d] || wh.shape() != [3 * w, w] || bt.shape() != [3 * w] {
            return Err(Error::Dimension(format!(
                "gru: w_in {:?}, w_hid {:?}, bias {:?} inconsistent with d={d}, width={w}",
                wi.shape(),
                wh.shape(),
                bt.shape()
            )));
        }
        let g3 = 3 * w;
        // Input projections for every step at once.
        let mut proj = vec![0.0; t_len * g3];
        for t in 0..t_len {
            let xr = xt.row(t);
            for k in 0..g3 {
                proj[t * g3 + k] = dot(&wi.data()[k * d..(k + 1) * d], xr) + bt.data()[k];
            }
        }
        let whd = wh.data();
        let mut cache = GruCache {
            width: w,
            z: vec![0.0; t_len * w],
            r: vec![0.0; t_len * w],
            cand: vec![0.0; t_len * w],
            h_prev: vec![0.0; t_len * w],
        };
        let mut out = vec![0.0; t_len * w];
        let mut h = h0t.data().to_vec();
        let mut rh = vec![0.0; w];
        for t in 0..t_len {
            let p = &proj[t * g3..(t + 1) * g3];
            let s = t * w;
            cache.h_prev[s..s + w].copy_from_slice(&h);
            for j in 0..w {
                let z = math::sigmoid(p[j] + dot(&whd[j * w..(j + 1) * w], &h));
                let r = math::sigmoid(p[w + j] + dot(&whd[(w + j) * w..(w + j + 1) * w], &h));
                cache.z[s + j] = z;
                cache.r[s + j] = r;
                rh[j] = r * h[j];
            }
            for j in 0..w {
                let c = math::tanh(p[2 * w + j] + dot(&whd[(2 * w + j) * w..(2 * w + j + 1) * w], &rh));
                cache.cand[s + j] = c;
            }
            for j in 0..w {
                let z = cache.z[s + j];
                h[j] = (1.0 - z) * h[j] + z * cache.cand[s + j];
            }
            out[s..s + w].copy_from_slice(&h);
        }
        let req = self.any_requires(&[x, w_in, w_hid, bias, h0]);
        Ok(self.push(
            Tensor::from_parts(vec![t_len, w], out),
            req,
            Op::Gru {
                x,
                w_in,
                w_hid,
                bias,
                h0,
                cache: Box::new(cache),
            },
        ))
    }

    /// Column-wise mean over the time axis: `[T, d]` → `[d]`.
    pub fn mean_pool_time(&mut self, x: Value) -> Result<Value> {
        self.check(&[x])?;
        let xt = self.value(x);
        if xt.rank() != 2 {
            return Err(Error::Dimension(format!("mean_pool_time expects [T, d], got {:?}", xt.shape())));
        }
        let (t_len, d) = (xt.shape()[0], xt.shape()[1]);
        if t_len == 0 {
            return Err(Error::DegenerateInput("mean pooling over zero timesteps".into()));
        }
        let mut out = vec![0.0; d];
        for t in 0..t_len {
            axpy(&mut out, 1.0, xt.row(t));
        }
        let inv = 1.0 / t_len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let req = self.any_requires(&[x]);
        Ok(self.push(Tensor::vector(out), req, Op::MeanPoolTime { x }))
    }

    /// Gradient reversal: identity forward, `-lambda * upstream` backward.
    /// `lambda = 0` stops the gradient entirely.
    pub fn grl(&mut self, x: Value, lambda: f64) -> Result<Value> {
        self.check(&[x])?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Domain(format!("GRL lambda must be finite and >= 0, got {lambda}")));
        }
        let t = self.value(x).clone();
        let req = self.any_requires(&[x]);
        Ok(self.push(t, req, Op::Grl { x, lambda }))
    }

    pub fn identity(&mut self, x: Value) -> Result<Value> {
        self.check(&[x])?;
        let t = self.value(x).clone();
        let req = self.any_requires(&[x]);
        Ok(self.push(t, req, Op::Identity { x }))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Value]) -> Result<Value> {
        self.check(parts)?;
        if parts.is_empty() {
            return Err(Error::Dimension("concat of nothing".into()));
        }
        let mut out = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.rank() != 1 {
                return Err(Error::Dimension(format!("concat expects vectors, got {:?}", t.shape())));
            }
            out.extend_from_slice(t.data());
        }
        let req = self.any_requires(parts);
        Ok(self.push(Tensor::vector(out), req, Op::Concat { parts: parts.to_vec() }))
    }

    /// Stacks equal-length vectors into a `[B, d]` matrix.
    pub fn stack_rows(&mut self, rows: &[Value]) -> Result<Value> {
        self.check(rows)?;
        let d = match rows.first() {
            Some(r) => self.value(*r).len(),
            None => return Err(Error::Dimension("stack of no rows".into())),
        };
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let t = self.value(*r);
            if t.rank() != 1 || t.len() != d {
                return Err(Error::Dimension(format!("stack_rows: row {:?} vs width {d}", t.shape())));
            }
            out.extend_from_slice(t.data());
        }
        let req = self.any_requires(rows);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), d], out),
            req,
            Op::StackRows { rows: rows.to_vec() },
        ))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.check(&[a, b])?;
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::Dimension(format!("add: {:?} vs {:?}", at.shape(), bt.shape())));
        }
        let out = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let shape = at.shape().to_vec();
        let req = self.any_requires(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), req, Op::Add { a, b }))
    }

    /// Elementwise sum of same-shaped values.
    pub fn add_n(&mut self, xs: &[Value]) -> Result<Value> {
        self.check(xs)?;
        let first = match xs.first() {
            Some(v) => self.value(*v),
            None => return Err(Error::Dimension("add_n of nothing".into())),
        };
        let shape = first.shape().to_vec();
        let mut out = vec![0.0; first.len()];
        for x in xs {
            let t = self.value(*x);
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!("add_n: {:?} vs {:?}", t.shape(), shape)));
            }
            axpy(&mut out, 1.0, t.data());
        }
        let req = self.any_requires(xs);
        Ok(self.push(Tensor::from_parts(shape, out), req, Op::AddN { xs: xs.to_vec() }))
    }

    pub fn scale(&mut self, x: Value, factor: f64) -> Result<Value> {
        self.check(&[x])?;
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        let req = self.any_requires(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), req, Op::Scale { x, factor }))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Value) -> Result<Value> {
        self.check(&[x])?;
        let s = self.value(x).data().iter().sum();
        let req = self.any_requires(&[x]);
        Ok(self.push(Tensor::scalar(s), req, Op::Sum { x }))
    }

    /// `-w[label] * log softmax(logits)[label]` for a single logit vector.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Value,
        label: usize,
        class_weights: &[f64],
    ) -> Result<Value> {
        self.check(&[logits])?;
        if self.value(logits).rank() != 1 {
            return Err(Error::Dimension("weighted_cross_entropy expects a logit vector".into()));
        }
        self.cross_entropy_rows(logits, &[label], class_weights)
    }

    /// Mean over rows of the weighted cross-entropy for `logits: [B, K]`.
    pub fn batch_weighted_cross_entropy(
        &mut self,
        logits: Value,
        labels: &[usize],
        class_weights: &[f64],
    ) -> Result<Value> {
        self.check(&[logits])?;
        if self.value(logits).rank() != 2 {
            return Err(Error::Dimension("batch cross-entropy expects [B, K] logits".into()));
        }
        self.cross_entropy_rows(logits, labels, class_weights)
    }

    fn cross_entropy_rows(
        &mut self,
        logits: Value,
        labels: &[usize],
        class_weights: &[f64],
    ) -> Result<Value> {
        let lt = self.value(logits);
        let (rows, k) = (lt.rows(), lt.cols());
        if k < 2 {
            return Err(Error::Dimension(format!("cross-entropy needs K >= 2 classes, got {k}")));
        }
        if class_weights.len() != k {
            return Err(Error::Dimension(format!(
                "{} class weights for {k} classes",
                class_weights.len()
            )));
        }
        if class_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Domain("class weights must be positive and finite".into()));
        }
        if labels.len() != rows {
            return Err(Error::Dimension(format!("{} labels for {rows} rows", labels.len())));
        }
        let mut probs = vec![0.0; rows * k];
        let mut targets = Vec::with_capacity(rows);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Index(format!("label {label} for {k} classes")));
            }
            let row = lt.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = math::exp(v - max);
                probs[r * k + j] = e;
                z += e;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p /= z;
            }
            let log_p = row[label] - max - math::ln(z);
            let w = class_weights[label];
            total += -w * log_p;
            targets.push((label, w));
        }
        let loss = total / rows as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("cross-entropy overflowed".into()));
        }
        let req = self.any_requires(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            req,
            Op::WeightedCrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively, so
    /// calling `backward` twice doubles them; build a fresh graph per step.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        self.check(&[loss])?;
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        accumulate(&mut self.nodes[loss.0].grad, &[1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let upstream = match node.grad.take() {
                Some(g) => g,
                None => continue,
            };
            for p in node.op.parents() {
                if p.0 >= i {
                    return Err(Error::Graph(format!(
                        "node {i} depends on node {} which is not upstream of it (cycle)",
                        p.0
                    )));
                }
            }
            let contributions = backprop_node(&node.op, &node.value, &upstream, before);
            node.grad = Some(upstream);
            for (p, g) in contributions {
                if before[p.0].requires_grad {
                    accumulate(&mut before[p.0].grad, &g);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => axpy(acc, 1.0, g),
        None => *slot = Some(g.to_vec()),
    }
}

fn wants(nodes: &[Node], v: Value) -> bool {
    nodes[v.0].requires_grad
}

/// Gradient contributions of one node to its parents.
fn backprop_node(op: &Op, out: &Tensor, g: &[f64], nodes: &[Node]) -> Vec<(Value, Vec<f64>)> {
    let val = |v: Value| &nodes[v.0].value;
    let mut res = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Dense { x, w, b, act } => {
            let (xt, wt) = (val(*x), val(*w));
            let (m, n) = (wt.shape()[0], wt.shape()[1]);
            let rows = xt.rows();
            let dpre: Vec<f64> = g
                .iter()
                .zip(out.data())
                .map(|(gi, y)| gi * act.derivative_at_output(*y))
                .collect();
            if wants(nodes, *w) {
                let mut dw = vec![0.0; m * n];
                for r in 0..rows {
                    let xr = &xt.data()[r * n..(r + 1) * n];
                    for i in 0..m {
                        let d = dpre[r * m + i];
                        if d != 0.0 {
                            axpy(&mut dw[i * n..(i + 1) * n], d, xr);
                        }
                    }
                }
                res.push((*w, dw));
            }
            if wants(nodes, *b) {
                let mut db = vec![0.0; m];
                for r in 0..rows {
                    axpy(&mut db, 1.0, &dpre[r * m..(r + 1) * m]);
                }
                res.push((*b, db));
            }
            if wants(nodes, *x) {
                let mut dx = vec![0.0; rows * n];
                for r in 0..rows {
                    for i in 0..m {
                        let d = dpre[r * m + i];
                        if d != 0.0 {
                            axpy(&mut dx[r * n..(r + 1) * n], d, &wt.data()[i * n..(i + 1) * n]);
                        }
                    }
                }
                res.push((*x, dx));
            }
        }
        Op::Conv1d { x, kernels } => {
            let (xt, kt) = (val(*x), val(*kernels));
            let c_in = xt.shape()[1];
            let (c_out, width) = (kt.shape()[0], kt.shape()[1]);
            let span = width * c_in;
            let t_out = out.shape()[0];
            let dpre: Vec<f64> = g
                .iter()
                .zip(out.data())
                .map(|(gi, y)| if *y > 0.0 { *gi } else { 0.0 })
                .collect();
            if wants(nodes, *kernels) {
                let mut dk = vec![0.0; kt.len()];
                for t in 0..t_out {
                    let window = &xt.data()[t * c_in..t * c_in + span];
                    for o in 0..c_out {
                        let d = dpre[t * c_out + o];
                        if d != 0.0 {
                            axpy(&mut dk[o * span..(o + 1) * span], d, window);
                        }
                    }
                }
                res.push((*kernels, dk));
            }
            if wants(nodes, *x) {
                let mut dx = vec![0.0; xt.len()];
                for t in 0..t_out {
                    for o in 0..c_out {
                        let d = dpre[t * c_out + o];
                        if d != 0.0 {
                            axpy(
                                &mut dx[t * c_in..t * c_in + span],
                                d,
                                &kt.data()[o * span..(o + 1) * span],
                            );
                        }
                    }
                }
                res.push((*x, dx));
            }
        }
        Op::Gru {
            x,
            w_in,
            w_hid,
            bias,
            h0,
            cache,
        } => {
            let (xt, wi, wh) = (val(*x), val(*w_in), val(*w_hid));
            let w = cache.width;
            let g3 = 3 * w;
            let (t_len, d) = (xt.shape()[0], xt.shape()[1]);
            let whd = wh.data();
            let mut dproj = vec![0.0; t_len * g3];
            let mut dwh = vec![0.0; g3 * w];
            let mut dh_next = vec![0.0; w];
            let mut rh = vec![0.0; w];
            let mut dac = vec![0.0; w];
            let mut dz = vec![0.0; w];
            for t in (0..t_len).rev() {
                let s = t * w;
                let (z, r, c, hp) = (
                    &cache.z[s..s + w],
                    &cache.r[s..s + w],
                    &cache.cand[s..s + w],
                    &cache.h_prev[s..s + w],
                );
                let mut dhp = vec![0.0; w];
                for j in 0..w {
                    let dh = g[s + j] + dh_next[j];
                    dz[j] = dh * (c[j] - hp[j]);
                    dac[j] = dh * z[j] * (1.0 - c[j] * c[j]);
                    dhp[j] = dh * (1.0 - z[j]);
                    rh[j] = r[j] * hp[j];
                }
                // Candidate block: pre = ... + U_c (r ⊙ h_prev).
                let mut d_rh = vec![0.0; w];
                for j in 0..w {
                    let a = dac[j];
                    if a != 0.0 {
                        let row = (2 * w + j) * w;
                        axpy(&mut dwh[row..row + w], a, &rh);
                        axpy(&mut d_rh, a, &whd[row..row + w]);
                    }
                }
                let dp = &mut dproj[t * g3..(t + 1) * g3];
                for j in 0..w {
                    let dr = d_rh[j] * hp[j];
                    dhp[j] += d_rh[j] * r[j];
                    dp[j] = dz[j] * z[j] * (1.0 - z[j]);
                    dp[w + j] = dr * r[j] * (1.0 - r[j]);
                    dp[2 * w + j] = dac[j];
                }
                for j in 0..2 * w {
                    let a = dp[j];
                    if a != 0.0 {
                        axpy(&mut dwh[j * w..(j + 1) * w], a, hp);
                        axpy(&mut dhp, a, &whd[j * w..(j + 1) * w]);
                    }
                }
                dh_next = dhp;
            }
            if wants(nodes, *w_in) {
                let mut dwi = vec![0.0; g3 * d];
                for t in 0..t_len {
                    let xr = xt.row(t);
                    for k in 0..g3 {
                        let a = dproj[t * g3 + k];
                        if a != 0.0 {
                            axpy(&mut dwi[k * d..(k + 1) * d], a, xr);
                        }
                    }
                }
                res.push((*w_in, dwi));
            }
            if wants(nodes, *w_hid) {
                res.push((*w_hid, dwh));
            }
            if wants(nodes, *bias) {
                let mut db = vec![0.0; g3];
                for t in 0..t_len {
                    axpy(&mut db, 1.0, &dproj[t * g3..(t + 1) * g3]);
                }
                res.push((*bias, db));
            }
            if wants(nodes, *x) {
                let mut dx = vec![0.0; t_len * d];
                for t in 0..t_len {
                    for k in 0..g3 {
                        let a = dproj[t * g3 + k];
                        if a != 0.0 {
                            axpy(&mut dx[t * d..(t + 1) * d], a, &wi.data()[k * d..(k + 1) * d]);
                        }
                    }
                }
                res.push((*x, dx));
            }
            if wants(nodes, *h0) {
                res.push((*h0, dh_next));
            }
        }
        Op::MeanPoolTime { x } => {
            let xt = val(*x);
            let t_len = xt.shape()[0];
            let inv = 1.0 / t_len as f64;
            let row: Vec<f64> = g.iter().map(|v| v * inv).collect();
            let mut dx = Vec::with_capacity(xt.len());
            for _ in 0..t_len {
                dx.extend_from_slice(&row);
            }
            res.push((*x, dx));
        }
        Op::Grl { x, lambda } => {
            if *lambda != 0.0 {
                res.push((*x, g.iter().map(|v| -lambda * v).collect()));
            }
        }
        Op::Identity { x } => res.push((*x, g.to_vec())),
        Op::Concat { parts } | Op::StackRows { rows: parts } => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).len();
                res.push((*p, g[offset..offset + n].to_vec()));
                offset += n;
            }
        }
        Op::Add { a, b } => {
            res.push((*a, g.to_vec()));
            res.push((*b, g.to_vec()));
        }
        Op::AddN { xs } => {
            for x in xs {
                res.push((*x, g.to_vec()));
            }
        }
        Op::Scale { x, factor } => res.push((*x, g.iter().map(|v| v * factor).collect())),
        Op::Sum { x } => res.push((*x, vec![g[0]; val(*x).len()])),
        Op::WeightedCrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let rows = targets.len();
            let k = probs.len() / rows;
            let scale = g[0] / rows as f64;
            let mut d = vec![0.0; probs.len()];
            for (r, &(label, w)) in targets.iter().enumerate() {
                for j in 0..k {
                    let onehot = if j == label { 1.0 } else { 0.0 };
                    d[r * k + j] = scale * w * (probs[r * k + j] - onehot);
                }
            }
            res.push((*logits, d));
        }
    }
    res
}

/// Central finite-difference gradient check.
///
/// `f` returns the scalar value and its analytic gradient at a parameter
/// vector. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, theta: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (f0, analytic) = f(theta);
    if !f0.is_finite() {
        return Err(Error::Numeric("objective is not finite at theta".into()));
    }
    if analytic.len() != theta.len() {
        return Err(Error::Dimension(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let mut probe = theta.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        probe[i] = theta[i] + eps;
        let (fp, _) = f(&probe);
        probe[i] = theta[i] - eps;
        let (fm, _) = f(&probe);
        probe[i] = theta[i];
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::Numeric(format!("objective not finite when perturbing coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_and_zero_weights() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![3.0, -1.0]));
        let w = g.param(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.param(Tensor::zeros(&[2]));
        let y = g.dense(x, w, b, Activation::Identity).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0]);

        let x = g.input(Tensor::vector(vec![5.0, 7.0]));
        let w0 = g.param(Tensor::zeros(&[2, 2]));
        let y = g.dense(x, w0, b, Activation::Relu).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let bad = g.param(Tensor::zeros(&[3, 3]));
        assert!(matches!(g.dense(x, bad, b, Activation::Relu), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv1d_hand_convolution() {
        let mut g = Graph::new();
        let x = g.input(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let k = g.param(t(&[1, 2, 1], &[1.0, 1.0]));
        let y = g.conv1d(x, k).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 1]);
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);

        let k0 = g.param(Tensor::zeros(&[4, 2, 1]));
        let y0 = g.conv1d(x, k0).unwrap();
        assert!(g.value(y0).data().iter().all(|v| *v == 0.0));

        let short = g.input(t(&[1, 1], &[1.0]));
        assert!(matches!(g.conv1d(short, k), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn gru_zero_params_stay_at_zero() {
        let mut g = Graph::new();
        let x = g.input(t(&[4, 3], &[0.5; 12]));
        let wi = g.param(Tensor::zeros(&[6, 3]));
        let wh = g.param(Tensor::zeros(&[6, 2]));
        let b = g.param(Tensor::zeros(&[6]));
        let h0 = g.input(Tensor::zeros(&[2]));
        let h = g.gru_sequence(x, wi, wh, b, h0).unwrap();
        assert!(g.value(h).data().iter().all(|v| *v == 0.0));

        let empty = g.input(Tensor::zeros(&[0, 3]));
        assert!(matches!(
            g.gru_sequence(empty, wi, wh, b, h0),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn mean_pool_examples() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, 3.0, 3.0, 5.0]));
        let p = g.mean_pool_time(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0]);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.5, 0.5, 0.5, 0.5]);

        let single = g.input(t(&[1, 3], &[1.0, -2.0, 0.25]));
        let p = g.mean_pool_time(single).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, -2.0, 0.25]);
    }

    #[test]
    fn grl_forward_identity_backward_reversed() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.2, -3.4]));
        let r = g.grl(x, 0.5).unwrap();
        assert_eq!(g.value(r).data(), &[1.2, -3.4]);
        // upstream [0.5, 1.0] via a weighted sum
        let w = g.input(t(&[1, 2], &[0.5, 1.0]));
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.dense(r, w, b, Activation::Identity).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-0.25, -0.5]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.2, -3.4]));
        let r = g.grl(x, 0.0).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad_or_zeros(x), vec![0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let l = g.param(Tensor::vector(vec![0.3, 0.3, 0.3]));
        let one = g.weighted_cross_entropy(l, 1, &[1.0, 1.0, 1.0]).unwrap();
        assert!((g.value(one).data()[0] - libm::log(3.0)).abs() < 1e-12);
        let two = g.weighted_cross_entropy(l, 1, &[1.0, 2.0, 1.0]).unwrap();
        assert_eq!(g.value(two).data()[0], 2.0 * g.value(one).data()[0]);
        assert!(matches!(
            g.weighted_cross_entropy(l, 3, &[1.0; 3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.input(Tensor::vector(vec![4.0, 5.0]));
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad_or_zeros(x), vec![0.0, 0.0]);
    }

    #[test]
    fn foreign_values_are_rejected() {
        let mut a = Graph::new();
        let mut b = Graph::new();
        let _ = a.param(Tensor::scalar(1.0));
        let v = a.param(Tensor::scalar(2.0));
        assert!(matches!(b.sum(v), Err(Error::Graph(_))));
        let x = a.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(a.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn finite_diff_on_simple_functions() {
        let quad = |th: &[f64]| (th[0] * th[0], vec![2.0 * th[0]]);
        assert!(finite_diff_check(quad, &[3.0], 1e-4).unwrap() < 1e-9);
        let lin = |th: &[f64]| (2.0 * th[0] - 0.5 * th[1], vec![2.0, -0.5]);
        assert!(finite_diff_check(lin, &[0.7, -1.3], 1e-4).unwrap() < 1e-10);
        let bad = |_: &[f64]| (f64::NAN, vec![0.0]);
        assert!(matches!(finite_diff_check(bad, &[1.0], 1e-4), Err(Error::Numeric(_))));
    }
}
