//! Tape of tensor operations with reverse-mode gradients.
//!
//! Every op appends a node holding its output value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into every node that
//! (transitively) depends on a leaf created with `requires_grad`.

use crate::error::{shape_err, AutodiffError, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm behaviour: normalise with the batch statistics, or with the
/// supplied running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BroadcastAdd(Var, Var),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    CumSum(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    TransposeLast2(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm(ops::NormCache),
    LayerNorm(ops::NormCache),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Build a fresh graph per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf (gradient tracked).
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Batch mean and (biased) variance computed by a train-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm(cache) if cache.batch_stats => Some((cache.mean.as_slice(), cache.var.as_slice())),
            _ => None,
        }
    }

    /// Hash of the sign pattern feeding every non-smooth op (`relu`, `abs`).
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece of
    /// the loss surface, which is what a finite-difference check requires.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            let input = match node.op {
                Op::Relu(x) | Op::Abs(x) => x,
                _ => continue,
            };
            for &v in self.nodes[input.0].value.data() {
                h ^= u64::from(v > 0.0);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.map(a, |x| x * s);
        self.push_op(out, Op::Scale(a, s), &[a])
    }

    /// `x[b, c, l] + y[b, c]`: adds a per-(batch, channel) vector along the
    /// last axis.
    pub fn broadcast_add(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if xs.len() != 3 || ys.len() != 2 || xs[..2] != ys[..] {
            return shape_err("broadcast_add", xs, ys);
        }
        let len = xs[2];
        let mut out = self.value(x).clone();
        let yv = self.value(y).data();
        for (row, &add) in out.data_mut().chunks_mut(len).zip(yv) {
            row.iter_mut().for_each(|v| *v += add);
        }
        Ok(self.push_op(out, Op::BroadcastAdd(x, y), &[x, y]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push_op(out, Op::Relu(a), &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, ops::gelu);
        self.push_op(out, Op::Gelu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::abs);
        self.push_op(out, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x * x);
        self.push_op(out, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::sqrt);
        self.push_op(out, Op::Sqrt(a), &[a])
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Running sum along the last axis.
    pub fn cumsum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some(&len) = t.shape().last() else {
            return Err(AutodiffError::Contract("cumsum on a scalar".into()));
        };
        let mut out = t.clone();
        if len > 0 {
            for row in out.data_mut().chunks_mut(len) {
                let mut acc = 0.0;
                for v in row.iter_mut() {
                    acc += *v;
                    *v = acc;
                }
            }
        }
        Ok(self.push_op(out, Op::CumSum(a), &[a]))
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(AutodiffError::Contract("concat of nothing".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::Contract(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", &base, s);
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(AutodiffError::Contract(format!(
                "slice {start}..{end} on axis {axis} of shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let width = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + width * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(out, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// `[b, m, n] -> [b, n, m]`.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(AutodiffError::Contract(format!(
                "transpose_last2 expects rank 3, got {s:?}"
            )));
        }
        let data = ops::transpose3(self.value(a).data(), s[0], s[1], s[2]);
        let out = Tensor::new(vec![s[0], s[2], s[1]], data)?;
        Ok(self.push_op(out, Op::TransposeLast2(a), &[a]))
    }

    // ---- layers ------------------------------------------------------------

    /// `x[..., in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return shape_err("linear", &xs, &ws);
        }
        if bs != [ws[0]] {
            return shape_err("linear(bias)", &ws, &bs);
        }
        let data = ops::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            ws[1],
            ws[0],
        );
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = ws[0];
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Stride-1, zero "same" padding 1-D convolution.
    /// `x[b, cin, l]`, `w[cout, cin, k]` (odd `k`), `b[cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] || ws[2] % 2 == 0 {
            return shape_err("conv1d", &xs, &ws);
        }
        if bs != [ws[0]] {
            return shape_err("conv1d(bias)", &ws, &bs);
        }
        let dims = ops::ConvDims {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            len: xs[2],
            kernel: ws[2],
        };
        let data = ops::conv1d_forward(&dims, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out = Tensor::new(vec![dims.batch, dims.cout, dims.len], data)?;
        Ok(self.push_op(out, Op::Conv1d { x, w, b }, &[x, w, b]))
    }

    /// Batch normalisation over `(batch, length)` per channel of `x[b, c, l]`.
    ///
    /// Train mode uses the biased batch variance (readable afterwards via
    /// [`Graph::batch_stats`]); eval mode uses `running = (mean, var)`.
    pub fn batch_norm_1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[f64], &[f64]),
        mode: NormMode,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(AutodiffError::Contract(format!(
                "batch_norm_1d expects [batch, channels, len], got {xs:?}"
            )));
        }
        let c = xs[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(AutodiffError::Contract(format!(
                    "batch_norm_1d {name} shape {:?} does not match {c} channels",
                    self.shape(v)
                )));
            }
        }
        if running.0.len() != c || running.1.len() != c {
            return Err(AutodiffError::Contract(format!(
                "batch_norm_1d running stats sized {}/{} for {c} channels",
                running.0.len(),
                running.1.len()
            )));
        }
        let (out, cache) = ops::batch_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            (xs[0], c, xs[2]),
            running,
            mode,
            eps,
            [x, gamma, beta],
        );
        let out = Tensor::new(xs, out)?;
        Ok(self.push_op(out, Op::BatchNorm(cache), &[x, gamma, beta]))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let Some(&d) = xs.last() else {
            return Err(AutodiffError::Contract("layer_norm on a scalar".into()));
        };
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err("layer_norm", &xs, self.shape(gamma));
        }
        let (out, cache) = ops::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            eps,
            [x, gamma, beta],
        );
        let out = Tensor::new(xs, out)?;
        Ok(self.push_op(out, Op::LayerNorm(cache), &[x, gamma, beta]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some(&d) = t.shape().last() else {
            return Err(AutodiffError::Contract("softmax on a scalar".into()));
        };
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(d) {
            ops::softmax_in_place(row);
        }
        Ok(self.push_op(out, Op::Softmax(a), &[a]))
    }

    /// Unmasked scaled dot-product attention split across `heads`.
    /// `q`, `k`, `v` are `[batch, tokens, dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != qs.as_slice() {
                return shape_err("attention", &qs, self.shape(other));
            }
        }
        if qs.len() != 3 || heads == 0 || qs[2] % heads != 0 {
            return Err(AutodiffError::Contract(format!(
                "attention over shape {qs:?} with {heads} heads"
            )));
        }
        let dims = (qs[0], qs[1], qs[2], heads);
        let (out, probs) =
            ops::attention_forward(dims, self.value(q).data(), self.value(k).data(), self.value(v).data());
        let out = Tensor::new(qs, out)?;
        Ok(self.push_op(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Multi-head self-attention block: input projections, attention, output
    /// projection. `x` is `[batch, tokens, dim]`.
    pub fn multi_head_attention(&mut self, x: Var, proj: &AttentionProjections, heads: usize) -> Result<Var> {
        let q = self.linear(x, proj.wq, proj.bq)?;
        let k = self.linear(x, proj.wk, proj.bk)?;
        let v = self.linear(x, proj.wv, proj.bv)?;
        let o = self.attention(q, k, v, heads)?;
        self.linear(o, proj.wo, proj.bo)
    }

    // ---- backward ----------------------------------------------------------

    /// Populate gradients of the scalar `loss` for every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 || !self.value(loss).shape().is_empty() {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k)),
            Op::BroadcastAdd(x, y) => {
                acc(*x, &mut |s| add_into(s, g));
                let len = self.nodes[x.0].value.shape()[2];
                acc(*y, &mut |s| {
                    for (s, row) in s.iter_mut().zip(g.chunks(len)) {
                        *s += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *s += g;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        *s += g * ops::gelu_grad(*x);
                    }
                });
            }
            Op::Abs(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        // d|x|/dx taken as 0 at the kink.
                        if *x > 0.0 {
                            *s += g;
                        } else if *x < 0.0 {
                            *s -= g;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(x) {
                        *s += 2.0 * g * x;
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                        *s += g / (2.0 * y);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::CumSum(a) => {
                let len = *node.value.shape().last().expect("rank >= 1");
                acc(*a, &mut |s| {
                    for (srow, grow) in s.chunks_mut(len).zip(g.chunks(len)) {
                        let mut acc = 0.0;
                        for (sv, gv) in srow.iter_mut().zip(grow).rev() {
                            acc += gv;
                            *sv += acc;
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                    acc(v, &mut |s| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut s[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.nodes[input.0].value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let width = node.value.shape()[*axis] * inner;
                let full = in_shape[*axis] * inner;
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        let dst = o * full + start * inner;
                        add_into(&mut s[dst..dst + width], &g[o * width..(o + 1) * width]);
                    }
                });
            }
            Op::TransposeLast2(a) => {
                let s3 = node.value.shape();
                let back = ops::transpose3(g, s3[0], s3[1], s3[2]);
                acc(*a, &mut |s| add_into(s, &back));
            }
            Op::Linear { x, w, b } => {
                let ws = self.nodes[w.0].value.shape();
                let (n_out, n_in) = (ws[0], ws[1]);
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |s| ops::linear_backward_input(s, g, wv, n_in, n_out));
                acc(*w, &mut |s| ops::linear_backward_weight(s, g, xv, n_in, n_out));
                acc(*b, &mut |s| {
                    for row in g.chunks(n_out) {
                        add_into(s, row);
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let dims = ops::ConvDims {
                    batch: xs[0],
                    cin: xs[1],
                    cout: ws[0],
                    len: xs[2],
                    kernel: ws[2],
                };
                let (xv, wv) = (val(*x), val(*w));
                acc(*x, &mut |s| ops::conv1d_backward_input(&dims, s, g, wv));
                acc(*w, &mut |s| ops::conv1d_backward_weight(&dims, s, g, xv));
                acc(*b, &mut |s| {
                    for (o, sv) in s.iter_mut().enumerate() {
                        for bi in 0..dims.batch {
                            let base = (bi * dims.cout + o) * dims.len;
                            *sv += g[base..base + dims.len].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::BatchNorm(cache) => {
                let shape = node.value.shape();
                let gamma = val(cache.inputs[1]);
                let grads_out = ops::batch_norm_backward(cache, gamma, g, (shape[0], shape[1], shape[2]));
                acc(cache.inputs[0], &mut |s| add_into(s, &grads_out.0));
                acc(cache.inputs[1], &mut |s| add_into(s, &grads_out.1));
                acc(cache.inputs[2], &mut |s| add_into(s, &grads_out.2));
            }
            Op::LayerNorm(cache) => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let gamma = val(cache.inputs[1]);
                let grads_out = ops::layer_norm_backward(cache, gamma, g, d);
                acc(cache.inputs[0], &mut |s| add_into(s, &grads_out.0));
                acc(cache.inputs[1], &mut |s| add_into(s, &grads_out.1));
                acc(cache.inputs[2], &mut |s| add_into(s, &grads_out.2));
            }
            Op::Softmax(a) => {
                let d = *node.value.shape().last().expect("rank >= 1");
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(d).zip(g.chunks(d)).zip(y.chunks(d)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((s, g), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += y * (g - dot);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                let s3 = node.value.shape();
                let dims = (s3[0], s3[1], s3[2], *heads);
                let (dq, dk, dv) = ops::attention_backward(dims, val(*q), val(*k), val(*v), probs, g);
                acc(*q, &mut |s| add_into(s, &dq));
                acc(*k, &mut |s| add_into(s, &dk));
                acc(*v, &mut |s| add_into(s, &dv));
            }
        }
    }
}

/// Parameter handles of a multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProjections {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
