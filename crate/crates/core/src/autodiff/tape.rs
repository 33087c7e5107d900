//! Wengert-list reverse-mode differentiation.
//!
//! Every differentiable operation appends a node holding its output value and
//! whatever it needs for the backward rule. `backward` walks the list in
//! reverse construction order exactly once and accumulates gradients
//! additively, so a value consumed by `k` operations receives `k` contributions.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul,
    Transpose,
    Reshape,
    Add,
    Sub,
    Mul,
    Scale(T),
    Sum,
    SoftmaxRows,
    Relu,
    Conv2d(ConvGeometry),
    ChannelBias,
    RowBias,
    MaxPool { argmax: Vec<usize> },
    GlobalAvgPool,
    Select(usize),
    Stack,
    SignedSqrt,
    L2Normalize,
    CrossEntropy { labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::SoftmaxRows => "softmax_rows",
            Op::Relu => "relu",
            Op::Conv2d(_) => "conv2d",
            Op::ChannelBias => "channel_bias",
            Op::RowBias => "row_bias",
            Op::MaxPool { .. } => "maxpool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Select(_) => "select",
            Op::Stack => "stack",
            Op::SignedSqrt => "signed_sqrt",
            Op::L2Normalize => "l2_normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
    retain_grad: bool,
}

/// Below this magnitude the signed-square-root derivative is evaluated at the
/// floor instead of diverging.
const SIGNED_SQRT_GRAD_FLOOR: f64 = 1e-4;
const L2_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input: gradients are recorded for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            retain_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Keep the gradient of an intermediate node after `backward` (leaves
    /// always keep theirs).
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain_grad = true;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed
    /// and `v` is a leaf or was marked with [`Tape::retain_grad`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of recorded nodes with the given operation name.
    pub fn count_op(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    /// True if `target` is an ancestor of `out` (or `out` itself).
    pub fn depends_on(&self, out: Var, target: Var) -> bool {
        if target.0 > out.0 {
            return false;
        }
        let mut seen = vec![false; out.0 + 1];
        let mut stack = vec![out];
        while let Some(v) = stack.pop() {
            if v == target {
                return true;
            }
            if std::mem::replace(&mut seen[v.0], true) {
                continue;
            }
            stack.extend(self.nodes[v.0].inputs.iter().filter(|i| i.0 >= target.0));
        }
        false
    }

    /// Clears gradients so `backward` may run again on this tape.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            retain_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::from_vec(x.shape(), data)?;
        self.push(op, vec![a, b], out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            false,
            false,
            m,
            n,
            k,
            T::one(),
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        let out = Tensor::from_vec(&[m, n], out)?;
        self.push(Op::MatMul, vec![a, b], out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::from_vec(&[c, r], out)?;
        self.push(Op::Transpose, vec![x], out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(Op::Reshape, vec![x], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add, a, b, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub, a, b, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul, a, b, |p, q| p * q)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(factor), vec![x], out)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], out)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum(sq)
    }

    /// Row-wise softmax of a 2-D tensor, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("softmax_rows", format!("expected 2-D, got {s:?}")));
        }
        let cols = s[1];
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let out = Tensor::from_vec(self.shape(x), out)?;
        self.push(Op::SoftmaxRows, vec![x], out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu, vec![x], out)
    }

    /// Zero-padded 2-D cross-correlation of `input [b, c_in, h, w]` with
    /// `kernels [c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let g = ConvGeometry::new(self.shape(input), self.shape(kernels), stride, padding)?;
        let out = kernels::conv2d_forward(&g, self.value(input).data(), self.value(kernels).data());
        let out = Tensor::from_vec(&[g.batch, g.c_out, g.out_h, g.out_w], out)?;
        self.push(Op::Conv2d(g), vec![input, kernels], out)
    }

    /// Adds `bias[c]` to every position of channel `c` in `x [.., c, h, w]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (s, sb) = (self.shape(x), self.shape(bias));
        if s.len() < 3 || sb.len() != 1 || s[s.len() - 3] != sb[0] {
            return Err(Error::Dimension {
                op: "channel_bias",
                lhs: s.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let c = sb[0];
        let plane = s[s.len() - 2] * s[s.len() - 1];
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let out = Tensor::from_vec(s, out)?;
        self.push(Op::ChannelBias, vec![x, bias], out)
    }

    /// Adds `bias[n]` to every row of `x [m, n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (s, sb) = (self.shape(x), self.shape(bias));
        if s.len() != 2 || sb.len() != 1 || s[1] != sb[0] {
            return Err(Error::Dimension {
                op: "row_bias",
                lhs: s.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(sb[0]) {
            row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
        }
        let out = Tensor::from_vec(s, out)?;
        self.push(Op::RowBias, vec![x, bias], out)
    }

    /// Max pooling over the two trailing axes.
    pub fn maxpool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 || size == 0 || stride == 0 || s[s.len() - 2] < size || s[s.len() - 1] < size {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {size} stride {stride} invalid for {s:?}"),
            ));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = s[..s.len() - 2].iter().product();
        let (out, argmax, oh, ow) =
            kernels::maxpool2d_forward(self.value(x).data(), planes, h, w, size, stride);
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([oh, ow]);
        let out = Tensor::from_vec(&shape, out)?;
        self.push(Op::MaxPool { argmax }, vec![x], out)
    }

    /// Spatial mean over the two trailing axes: `[.., c, h, w] -> [.., c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 3 {
            return Err(Error::shape("global_avg_pool", format!("expected [.., c, h, w], got {s:?}")));
        }
        let plane = s[s.len() - 2] * s[s.len() - 1];
        let inv = T::one() / T::from_usize(plane).expect("plane size");
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&s[..s.len() - 2], out)?;
        self.push(Op::GlobalAvgPool, vec![x], out)
    }

    /// The `index`-th slice along the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let out = self.value(x).select(index)?;
        self.push(Op::Select(index), vec![x], out)
    }

    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::stack(&values)?;
        self.push(Op::Stack, parts.to_vec(), out)
    }

    /// Elementwise `sign(x) * sqrt(|x|)`.
    pub fn signed_sqrt(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.signum() * v.abs().sqrt());
        let out = out.map(|v| if v == T::zero() { T::zero() } else { v });
        self.push(Op::SignedSqrt, vec![x], out)
    }

    /// `x / max(||x||_2, 1e-12)` over all elements.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let norm = l2_norm(self.value(x).data()).max(T::from_f64_lossy(L2_NORM_FLOOR));
        let out = self.value(x).map(|v| v / norm);
        self.push(Op::L2Normalize, vec![x], out)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total += lse - row[label];
            softmax_in_place(row);
        }
        let batch = T::from_usize(labels.len()).expect("batch size");
        let out = Tensor::scalar(total / batch);
        self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
            out,
        )
    }

    /// Reverse sweep from a one-element `loss`. Fills gradients for every
    /// node that requires them; a second call without [`Tape::zero_grad`] fails.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "gradients already computed; call zero_grad before another backward".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Backward(
                "loss is detached: no input requires a gradient".into(),
            ));
        }
        let mut pending: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut kept: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        pending[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if node.retain_grad || i == loss.0 {
                kept[i] = Some(Tensor::from_vec(node.value.shape(), g.clone())?);
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            for (input, contribution) in self.backward_node(node, g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &c)| *a += c),
                    slot => *slot = Some(contribution),
                }
            }
        }
        self.grads = kept;
        self.backward_done = true;
        Ok(())
    }

    fn backward_node(&self, node: &Node<T>, g: Vec<T>) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul => {
                let (a, b) = (ins[0], ins[1]);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::new();
                if needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(false, true, m, k, n, T::one(), &g, val(b), T::zero(), &mut da);
                    out.push((a, da));
                }
                if needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(true, false, k, n, m, T::one(), val(a), &g, T::zero(), &mut db);
                    out.push((b, db));
                }
                out
            }
            Op::Transpose => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                vec![(ins[0], dx)]
            }
            Op::Reshape => vec![(ins[0], g)],
            Op::Add => vec![(ins[0], g.clone()), (ins[1], g)],
            Op::Sub => {
                let neg = g.iter().map(|&v| -v).collect();
                vec![(ins[0], g), (ins[1], neg)]
            }
            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                let da = g.iter().zip(val(b)).map(|(&gv, &bv)| gv * bv).collect();
                let db = g.iter().zip(val(a)).map(|(&gv, &av)| gv * av).collect();
                vec![(a, da), (b, db)]
            }
            Op::Scale(f) => vec![(ins[0], g.iter().map(|&v| v * *f).collect())],
            Op::Sum => vec![(ins[0], vec![g[0]; self.nodes[ins[0].0].value.numel()])],
            Op::SoftmaxRows => {
                let y = node.value.data();
                let cols = node.value.shape()[1];
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                vec![(ins[0], dx)]
            }
            Op::Relu => {
                let dx = g
                    .iter()
                    .zip(val(ins[0]))
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(ins[0], dx)]
            }
            Op::Conv2d(geom) => {
                let (x, k) = (ins[0], ins[1]);
                let (dx, dk) = kernels::conv2d_backward(geom, val(x), val(k), &g, needs(x), needs(k));
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((x, dx));
                }
                if let Some(dk) = dk {
                    out.push((k, dk));
                }
                out
            }
            Op::ChannelBias => {
                let s = node.value.shape();
                let c = s[s.len() - 3];
                let plane = s[s.len() - 2] * s[s.len() - 1];
                let mut db = vec![T::zero(); c];
                for (i, chunk) in g.chunks(plane).enumerate() {
                    db[i % c] += chunk.iter().copied().sum::<T>();
                }
                vec![(ins[0], g), (ins[1], db)]
            }
            Op::RowBias => {
                let n = node.value.shape()[1];
                let mut db = vec![T::zero(); n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                vec![(ins[0], g), (ins[1], db)]
            }
            Op::MaxPool { argmax } => {
                let mut dx = vec![T::zero(); self.nodes[ins[0].0].value.numel()];
                for (&src, &gv) in argmax.iter().zip(&g) {
                    dx[src] += gv;
                }
                vec![(ins[0], dx)]
            }
            Op::GlobalAvgPool => {
                let s = self.shape(ins[0]);
                let plane = s[s.len() - 2] * s[s.len() - 1];
                let inv = T::one() / T::from_usize(plane).expect("plane size");
                let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, plane)).collect();
                vec![(ins[0], dx)]
            }
            Op::Select(index) => {
                let mut dx = vec![T::zero(); self.nodes[ins[0].0].value.numel()];
                dx[index * g.len()..(index + 1) * g.len()].copy_from_slice(&g);
                vec![(ins[0], dx)]
            }
            Op::Stack => {
                let part = g.len() / ins.len();
                ins.iter()
                    .enumerate()
                    .map(|(i, &v)| (v, g[i * part..(i + 1) * part].to_vec()))
                    .collect()
            }
            Op::SignedSqrt => {
                let floor = T::from_f64_lossy(SIGNED_SQRT_GRAD_FLOOR);
                let half = T::from_f64_lossy(0.5);
                let dx = g
                    .iter()
                    .zip(val(ins[0]))
                    .map(|(&gv, &xv)| {
                        if xv == T::zero() {
                            T::zero()
                        } else {
                            gv * half / xv.abs().sqrt().max(floor)
                        }
                    })
                    .collect();
                vec![(ins[0], dx)]
            }
            Op::L2Normalize => {
                let x = val(ins[0]);
                let floor = T::from_f64_lossy(L2_NORM_FLOOR);
                let norm = l2_norm(x);
                let dx = if norm > floor {
                    let y = node.value.data();
                    let dot: T = y.iter().zip(&g).map(|(&a, &b)| a * b).sum();
                    g.iter().zip(y).map(|(&gv, &yv)| (gv - yv * dot) / norm).collect()
                } else {
                    g.iter().map(|&gv| gv / floor).collect()
                };
                vec![(ins[0], dx)]
            }
            Op::CrossEntropy { labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::from_usize(labels.len()).expect("batch size");
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= scale;
                }
                vec![(ins[0], dx)]
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn l2_norm<T: Scalar>(x: &[T]) -> T {
    x.iter().map(|&v| v * v).sum::<T>().sqrt()
}
