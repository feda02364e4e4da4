use std::borrow::Cow;

use super::kernels::{self, dot};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    /// Backward already ran through this node; saved state is gone.
    Consumed,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    RmsNorm { x: Var, gamma: Var, rstd: Vec<T> },
    Softmax { x: Var },
    Gelu { x: Var },
    Silu { x: Var },
    Conv1d { x: Var, w: Var, stride: usize },
    Conv2d { x: Var, w: Var, stride: (usize, usize) },
    Reshape { x: Var },
    Transpose { x: Var, a: usize, b: usize },
    Rope { x: Var, n_heads: usize, pos0: usize, theta: f64 },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, causal: bool, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { x: Var, start: usize },
    LogSoftmaxGather { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Sum { x: Var },
    LogSigmoid { x: Var },
}

struct Node<'w, T: Real> {
    value: Cow<'w, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A dynamic computation graph recorded during one forward pass.
///
/// Nodes are appended in execution order, so the node list is topologically
/// sorted by construction. Leaves may borrow their tensors (weights, KV
/// caches) for the lifetime `'w`; every other node owns its value.
/// With gradients disabled nothing beyond the values is kept.
pub struct Graph<'w, T: Real = f32> {
    nodes: Vec<Node<'w, T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<'w, T: Real> Default for Graph<'w, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'w, T: Real> Graph<'w, T> {
    /// A graph that records backward information.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A graph for inference: values only, no saved intermediates.
    pub fn no_grad() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the loss w.r.t. a leaf, available after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Inserts an owned tensor. It is differentiable when its
    /// `requires_grad` flag is set and the graph records gradients.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled && t.requires_grad();
        self.push_node(Cow::Owned(t), Op::Leaf, needs_grad)
    }

    /// Inserts an owned tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_node(Cow::Owned(t), Op::Leaf, false)
    }

    /// Borrows a tensor (typically a weight) as a leaf.
    pub fn param(&mut self, t: &'w Tensor<T>, trainable: bool) -> Var {
        let needs_grad = self.grad_enabled && trainable;
        self.push_node(Cow::Borrowed(t), Op::Leaf, needs_grad)
    }

    fn push_node(&mut self, value: Cow<'w, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, inputs: &[Var], op: impl FnOnce() -> Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let needs_grad = self.any_grad(inputs);
        let op = if needs_grad { op() } else { Op::Leaf };
        Ok(self.push_node(Cow::Owned(value), op, needs_grad))
    }

    // ----------------------------------------------------------------------
    // Linear algebra
    // ----------------------------------------------------------------------

    /// `[.., m, k] × [k, n] → [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} × {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = ta.numel() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        self.push("matmul", Tensor::new(shape, out)?, &[a, b], || Op::MatMul { a, b })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push("add", out, &[a, b], || Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", out, &[a, b], || Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", out, &[a, b], || Op::Mul { a, b })
    }

    /// Adds a `[d]` bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.numel() != d {
            return Err(Error::dim("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut out = tx.clone();
        out.set_requires_grad(false);
        for row in out.data_mut().chunks_exact_mut(d) {
            row.iter_mut().zip(tb.data()).for_each(|(o, &b)| *o += b);
        }
        self.push("add_bias", out, &[x, bias], || Op::AddBias { x, bias })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v * factor).collect())?;
        self.push("scale", out, &[x], || Op::Scale { x, factor })
    }

    // ----------------------------------------------------------------------
    // Normalization and activations
    // ----------------------------------------------------------------------

    /// Normalizes the last axis: `(x − μ) / √(σ² + eps) · γ + β`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Parameter("layernorm eps must be > 0".into()));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.last_dim();
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::dim(
                "layernorm",
                format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let rows = tx.numel() / d;
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        let inv_d = T::one() / T::lit(d as f64);
        for row in tx.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for ((&v, &g), &b) in row.iter().zip(tg.data()).zip(tb.data()) {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g + b);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("layernorm", out, &[x, gamma, beta], || Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Root-mean-square normalization of the last axis, scaled by `γ`.
    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Parameter("rmsnorm eps must be > 0".into()));
        }
        let (tx, tg) = (self.value(x), self.value(gamma));
        let d = tx.last_dim();
        if tg.numel() != d {
            return Err(Error::dim("rmsnorm", format!("x {:?}, gamma {:?}", tx.shape(), tg.shape())));
        }
        let inv_d = T::one() / T::lit(d as f64);
        let mut rstd = Vec::with_capacity(tx.numel() / d);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let r = T::one() / (ms + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().zip(tg.data()).map(|(&v, &g)| v * r * g));
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("rmsnorm", out, &[x, gamma], || Op::RmsNorm { x, gamma, rstd })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut data = tx.data().to_vec();
        kernels::softmax_rows(&mut data, n);
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("softmax", out, &[x], || Op::Softmax { x })
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let tx = self.value(x);
        Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, kernels::gelu);
        self.push("gelu", out, &[x], || Op::Gelu { x })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v * kernels::sigmoid(v));
        self.push("silu", out, &[x], || Op::Silu { x })
    }

    /// Elementwise `log σ(x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, kernels::log_sigmoid);
        self.push("log_sigmoid", out, &[x], || Op::LogSigmoid { x })
    }

    // ----------------------------------------------------------------------
    // Convolutions (valid cross-correlation, no padding)
    // ----------------------------------------------------------------------

    /// `x[b, c_in, L] ⋆ w[c_out, c_in, k]` with the given stride.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Parameter("conv1d stride must be ≥ 1".into()));
        }
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::dim("conv1d", format!("x {sx:?}, w {sw:?}")));
        }
        let (b, c_in, len) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[2]);
        if len < k {
            return Err(Error::dim("conv1d", format!("input length {len} < kernel {k}")));
        }
        let l_out = (len - k) / stride + 1;
        let (xd, wd) = (tx.data(), tw.data());
        let mut out = vec![T::zero(); b * c_out * l_out];
        for bi in 0..b {
            for o in 0..c_out {
                for t in 0..l_out {
                    let mut acc = T::zero();
                    for c in 0..c_in {
                        let xs = &xd[(bi * c_in + c) * len + t * stride..][..k];
                        let ws = &wd[(o * c_in + c) * k..][..k];
                        acc += dot(xs, ws);
                    }
                    out[(bi * c_out + o) * l_out + t] = acc;
                }
            }
        }
        let out = Tensor::new(vec![b, c_out, l_out], out)?;
        self.push("conv1d", out, &[x, w], || Op::Conv1d { x, w, stride })
    }

    /// `x[b, c_in, H, W] ⋆ w[c_out, c_in, kh, kw]` with stride `(sh, sw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize)) -> Result<Var> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Parameter("conv2d strides must be ≥ 1".into()));
        }
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::dim("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        let (b, c_in, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if h < kh || wdt < kw {
            return Err(Error::dim("conv2d", format!("kernel ({kh}, {kw}) exceeds input ({h}, {wdt})")));
        }
        let h_out = (h - kh) / stride.0 + 1;
        let w_out = (wdt - kw) / stride.1 + 1;
        let (xd, wd) = (tx.data(), tw.data());
        let mut out = vec![T::zero(); b * c_out * h_out * w_out];
        for bi in 0..b {
            for o in 0..c_out {
                for y in 0..h_out {
                    for xo in 0..w_out {
                        let mut acc = T::zero();
                        for c in 0..c_in {
                            // Per-channel partial sums keep the summation order
                            // of conv1d when kw == 1.
                            let mut part = T::zero();
                            for i in 0..kh {
                                let xs = &xd[((bi * c_in + c) * h + y * stride.0 + i) * wdt + xo * stride.1..][..kw];
                                let ws = &wd[((o * c_in + c) * kh + i) * kw..][..kw];
                                part += dot(xs, ws);
                            }
                            acc += part;
                        }
                        out[((bi * c_out + o) * h_out + y) * w_out + xo] = acc;
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, c_out, h_out, w_out], out)?;
        self.push("conv2d", out, &[x, w], || Op::Conv2d { x, w, stride })
    }

    // ----------------------------------------------------------------------
    // Layout
    // ----------------------------------------------------------------------

    /// Reinterprets the row-major buffer under `shape`.
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let mut out = self.value(x).clone();
        out.set_requires_grad(false);
        let out = out.reshape(shape)?;
        self.push("reshape", out, &[x], || Op::Reshape { x })
    }

    /// Swaps axes `a` and `b`.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let tx = self.value(x);
        let nd = tx.ndim();
        if a >= nd || b >= nd {
            return Err(Error::dim("transpose", format!("axes ({a}, {b}) of {:?}", tx.shape())));
        }
        let mut shape = tx.shape().to_vec();
        shape.swap(a, b);
        let data = kernels::transpose(tx.data(), tx.shape(), a, b);
        let out = Tensor::new(shape, data)?;
        self.push("transpose", out, &[x], || Op::Transpose { x, a, b })
    }

    /// Concatenates tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let parts_vec = parts.to_vec();
        self.push("concat", out, parts, || Op::Concat { parts: parts_vec, axis })
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 || len == 0 || start + len > tx.shape()[0] {
            return Err(Error::dim("slice_rows", format!("rows {start}..{} of {:?}", start + len, tx.shape())));
        }
        let d = tx.shape()[1];
        let out = Tensor::new(vec![len, d], tx.data()[start * d..(start + len) * d].to_vec())?;
        self.push("slice_rows", out, &[x], || Op::SliceRows { x, start })
    }

    /// Gathers rows of an embedding table `[vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.ndim() != 2 || ids.is_empty() {
            return Err(Error::dim("embedding", format!("table {:?}, {} ids", tt.shape(), ids.len())));
        }
        let (vocab, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Input(format!("token id {id} outside vocab {vocab}")));
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ids = ids.to_vec();
        self.push("embedding", out, &[table], || Op::Embedding { table, ids })
    }

    // ----------------------------------------------------------------------
    // Attention
    // ----------------------------------------------------------------------

    /// Rotary position embedding on `[n, d]`, rotating each head's halves;
    /// row `i` sits at absolute position `pos0 + i`.
    pub fn rope(&mut self, x: Var, n_heads: usize, pos0: usize, theta: f64) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() != 2 || n_heads == 0 || tx.shape()[1] % (2 * n_heads) != 0 {
            return Err(Error::dim("rope", format!("{:?} with {n_heads} heads", tx.shape())));
        }
        let out = rope_apply(tx, n_heads, pos0, theta, false);
        self.push("rope", out, &[x], || Op::Rope { x, n_heads, pos0, theta })
    }

    /// Multi-head scaled dot-product attention on token-major `[n, d]`
    /// queries and `[m, d]` keys/values. With `causal`, the queries are the
    /// last `n` positions of the `m`-long key sequence.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, causal: bool) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let ok = tq.ndim() == 2
            && tk.ndim() == 2
            && tk.shape() == tv.shape()
            && tq.shape()[1] == tk.shape()[1]
            && n_heads > 0
            && tq.shape()[1] % n_heads == 0
            && (!causal || tk.shape()[0] >= tq.shape()[0]);
        if !ok {
            return Err(Error::dim(
                "attention",
                format!("q {:?}, k {:?}, v {:?}, heads {n_heads}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        let (n, d) = (tq.shape()[0], tq.shape()[1]);
        let m = tk.shape()[0];
        let (out, probs) = kernels::attention(tq.data(), tk.data(), tv.data(), n, m, d, n_heads, causal);
        let out = Tensor::new(vec![n, d], out)?;
        self.push("attention", out, &[q, k, v], || Op::Attention { q, k, v, n_heads, causal, probs })
    }

    // ----------------------------------------------------------------------
    // Reductions and losses
    // ----------------------------------------------------------------------

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.data(x).iter().copied().sum();
        self.push("sum", Tensor::scalar(s), &[x], || Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.sum(x)?;
        self.scale(s, T::one() / n)
    }

    /// `log softmax(logits[r])[targets[r]]` for each row of `[n, vocab]`.
    pub fn log_softmax_gather(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.ndim() != 2 || tl.shape()[0] != targets.len() {
            return Err(Error::dim(
                "log_softmax_gather",
                format!("logits {:?} vs {} targets", tl.shape(), targets.len()),
            ));
        }
        let vocab = tl.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("target id {bad} outside vocab {vocab}")));
        }
        let needs = self.any_grad(&[logits]);
        let mut out = Vec::with_capacity(targets.len());
        let mut probs = Vec::new();
        for (row, &t) in tl.data().chunks_exact(vocab).zip(targets) {
            let lse = kernels::log_sum_exp(row);
            out.push(row[t] - lse);
            if needs {
                probs.extend(row.iter().map(|&z| (z - lse).exp()));
            }
        }
        let out = Tensor::new(vec![targets.len()], out)?;
        let targets = targets.to_vec();
        self.push("log_softmax_gather", out, &[logits], || Op::LogSoftmaxGather { logits, targets, probs })
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax_gather(logits, targets)?;
        let m = self.mean(lp)?;
        self.scale(m, -T::one())
    }

    // ----------------------------------------------------------------------
    // Backward
    // ----------------------------------------------------------------------

    /// Propagates gradients from a scalar `loss` to every differentiable
    /// leaf. Gradients accumulate over multiple uses of a value. Saved
    /// intermediates are released as the pass proceeds, so a graph can be
    /// differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this graph".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Consumed);
            match op {
                Op::Leaf => {
                    self.nodes[i].op = Op::Leaf;
                    grads[i] = Some(g);
                    continue;
                }
                Op::Consumed => {
                    return Err(Error::Contract("graph node visited twice during backward".into()));
                }
                op => self.backprop_node(i, op, &g, &mut grads)?,
            }
        }
        // Only leaves keep their gradient.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, op: Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match op {
            Op::Leaf | Op::Consumed => unreachable!(),
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let k = tb.shape()[0];
                let n = tb.shape()[1];
                let m = ta.numel() / k;
                if self.needs(a) {
                    self.accumulate(grads, a, kernels::matmul_grad_a(g, tb.data(), m, k, n));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, kernels::matmul_grad_b(ta.data(), g, m, k, n));
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let gb = g.iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, a, gb);
                }
                if self.needs(b) {
                    let ga = g.iter().zip(self.data(a)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, b, ga);
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, x, g.to_vec());
                if self.needs(bias) {
                    let d = self.value(bias).numel();
                    let mut gb = vec![T::zero(); d];
                    for row in g.chunks_exact(d) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    self.accumulate(grads, bias, gb);
                }
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, x, g.iter().map(|&v| v * factor).collect());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(gamma).numel();
                let gam = self.data(gamma);
                if self.needs(gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                    self.accumulate(grads, gamma, gg);
                }
                if self.needs(beta) {
                    let mut gb = vec![T::zero(); d];
                    for grow in g.chunks_exact(d) {
                        gb.iter_mut().zip(grow).for_each(|(a, &b)| *a += b);
                    }
                    self.accumulate(grads, beta, gb);
                }
                if self.needs(x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut gx = Vec::with_capacity(g.len());
                    for ((grow, hrow), &r) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(&rstd) {
                        let dh: Vec<T> = grow.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_d;
                        let mean_dh_h = dot(&dh, hrow) * inv_d;
                        gx.extend(dh.iter().zip(hrow).map(|(&a, &h)| r * (a - mean_dh - h * mean_dh_h)));
                    }
                    self.accumulate(grads, x, gx);
                }
            }
            Op::RmsNorm { x, gamma, rstd } => {
                let d = self.value(gamma).numel();
                let (xd, gam) = (self.data(x), self.data(gamma));
                if self.needs(gamma) {
                    let mut gg = vec![T::zero(); d];
                    for ((grow, xrow), &r) in g.chunks_exact(d).zip(xd.chunks_exact(d)).zip(&rstd) {
                        for j in 0..d {
                            gg[j] += grow[j] * xrow[j] * r;
                        }
                    }
                    self.accumulate(grads, gamma, gg);
                }
                if self.needs(x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut gx = Vec::with_capacity(g.len());
                    for ((grow, xrow), &r) in g.chunks_exact(d).zip(xd.chunks_exact(d)).zip(&rstd) {
                        let gw: Vec<T> = grow.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let proj = dot(&gw, xrow) * inv_d * r * r * r;
                        gx.extend(gw.iter().zip(xrow).map(|(&a, &xv)| a * r - xv * proj));
                    }
                    self.accumulate(grads, x, gx);
                }
            }
            Op::Softmax { x } => {
                let n = out.last_dim();
                let mut gx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks_exact(n).zip(out.data().chunks_exact(n)) {
                    let s = dot(grow, yrow);
                    gx.extend(grow.iter().zip(yrow).map(|(&a, &y)| y * (a - s)));
                }
                self.accumulate(grads, x, gx);
            }
            Op::Gelu { x } => {
                let gx = g.iter().zip(self.data(x)).map(|(&a, &v)| a * kernels::gelu_grad(v)).collect();
                self.accumulate(grads, x, gx);
            }
            Op::Silu { x } => {
                let gx = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(&a, &v)| {
                        let s = kernels::sigmoid(v);
                        a * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, x, gx);
            }
            Op::LogSigmoid { x } => {
                let gx = g.iter().zip(self.data(x)).map(|(&a, &v)| a * kernels::sigmoid(-v)).collect();
                self.accumulate(grads, x, gx);
            }
            Op::Conv1d { x, w, stride } => {
                let (tx, tw) = (self.value(x), self.value(w));
                let (b, c_in, len) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (c_out, k) = (tw.shape()[0], tw.shape()[2]);
                let l_out = out.shape()[2];
                let (xd, wd) = (tx.data(), tw.data());
                let mut gx = if self.needs(x) { vec![T::zero(); xd.len()] } else { Vec::new() };
                let mut gw = if self.needs(w) { vec![T::zero(); wd.len()] } else { Vec::new() };
                for bi in 0..b {
                    for o in 0..c_out {
                        for t in 0..l_out {
                            let go = g[(bi * c_out + o) * l_out + t];
                            for c in 0..c_in {
                                let xo = (bi * c_in + c) * len + t * stride;
                                let wo = (o * c_in + c) * k;
                                if !gx.is_empty() {
                                    for j in 0..k {
                                        gx[xo + j] += go * wd[wo + j];
                                    }
                                }
                                if !gw.is_empty() {
                                    for j in 0..k {
                                        gw[wo + j] += go * xd[xo + j];
                                    }
                                }
                            }
                        }
                    }
                }
                if !gx.is_empty() {
                    self.accumulate(grads, x, gx);
                }
                if !gw.is_empty() {
                    self.accumulate(grads, w, gw);
                }
            }
            Op::Conv2d { x, w, stride } => {
                let (tx, tw) = (self.value(x), self.value(w));
                let (b, c_in, h, wdt) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                let (c_out, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
                let (h_out, w_out) = (out.shape()[2], out.shape()[3]);
                let (xd, wd) = (tx.data(), tw.data());
                let mut gx = if self.needs(x) { vec![T::zero(); xd.len()] } else { Vec::new() };
                let mut gw = if self.needs(w) { vec![T::zero(); wd.len()] } else { Vec::new() };
                for bi in 0..b {
                    for o in 0..c_out {
                        for y in 0..h_out {
                            for xo in 0..w_out {
                                let go = g[((bi * c_out + o) * h_out + y) * w_out + xo];
                                for c in 0..c_in {
                                    for i in 0..kh {
                                        let xoff = ((bi * c_in + c) * h + y * stride.0 + i) * wdt + xo * stride.1;
                                        let woff = ((o * c_in + c) * kh + i) * kw;
                                        for j in 0..kw {
                                            if !gx.is_empty() {
                                                gx[xoff + j] += go * wd[woff + j];
                                            }
                                            if !gw.is_empty() {
                                                gw[woff + j] += go * xd[xoff + j];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if !gx.is_empty() {
                    self.accumulate(grads, x, gx);
                }
                if !gw.is_empty() {
                    self.accumulate(grads, w, gw);
                }
            }
            Op::Reshape { x } => self.accumulate(grads, x, g.to_vec()),
            Op::Transpose { x, a, b } => {
                self.accumulate(grads, x, kernels::transpose(g, out.shape(), a, b));
            }
            Op::Rope { x, n_heads, pos0, theta } => {
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec())?;
                let gx = rope_apply(&gt, n_heads, pos0, theta, true);
                self.accumulate(grads, x, gx.into_data());
            }
            Op::Attention { q, k, v, n_heads, causal, probs } => {
                self.backprop_attention(q, k, v, n_heads, causal, &probs, g, grads);
            }
            Op::Embedding { table, ids } => {
                let d = self.value(table).shape()[1];
                let mut gt = vec![T::zero(); self.value(table).numel()];
                for (row, &id) in g.chunks_exact(d).zip(&ids) {
                    gt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                self.accumulate(grads, table, gt);
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total_block = shape[axis] * inner;
                let mut offset = 0;
                for &p in &parts {
                    let block = self.shape(p)[axis] * inner;
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * total_block + offset;
                            gp.extend_from_slice(&g[start..start + block]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += block;
                }
            }
            Op::SliceRows { x, start } => {
                let d = out.shape()[1];
                let mut gx = vec![T::zero(); self.value(x).numel()];
                gx[start * d..start * d + g.len()].copy_from_slice(g);
                self.accumulate(grads, x, gx);
            }
            Op::LogSoftmaxGather { logits, targets, probs } => {
                let vocab = self.value(logits).shape()[1];
                let mut gl = Vec::with_capacity(probs.len());
                for ((prow, &t), &go) in probs.chunks_exact(vocab).zip(&targets).zip(g) {
                    gl.extend(prow.iter().enumerate().map(|(j, &p)| {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        go * (onehot - p)
                    }));
                }
                self.accumulate(grads, logits, gl);
            }
            Op::Sum { x } => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        causal: bool,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = (tq.shape()[0], tq.shape()[1]);
        let m = tk.shape()[0];
        let hd = d / n_heads;
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); m];
        for h in 0..n_heads {
            let c0 = h * hd;
            for i in 0..n {
                let visible = if causal { m - n + i + 1 } else { m };
                let p_row = &probs[(h * n + i) * m..(h * n + i) * m + m];
                let g_row = &g[i * d + c0..i * d + c0 + hd];
                // dP = dO · Vᵀ, dV += Pᵀ · dO
                for j in 0..visible {
                    let v_row = &vd[j * d + c0..j * d + c0 + hd];
                    dp[j] = dot(g_row, v_row);
                    let gv_row = &mut gv[j * d + c0..j * d + c0 + hd];
                    for (a, &b) in gv_row.iter_mut().zip(g_row) {
                        *a += p_row[j] * b;
                    }
                }
                // dS = P ⊙ (dP − Σ P·dP)
                let s: T = (0..visible).map(|j| p_row[j] * dp[j]).sum();
                for j in 0..visible {
                    let ds = p_row[j] * (dp[j] - s) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let k_row = &kd[j * d + c0..j * d + c0 + hd];
                    let q_row = &qd[i * d + c0..i * d + c0 + hd];
                    let gq_row = &mut gq[i * d + c0..i * d + c0 + hd];
                    for (a, &b) in gq_row.iter_mut().zip(k_row) {
                        *a += ds * b;
                    }
                    let gk_row = &mut gk[j * d + c0..j * d + c0 + hd];
                    for (a, &b) in gk_row.iter_mut().zip(q_row) {
                        *a += ds * b;
                    }
                }
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }
}

/// Applies (or with `inverse`, un-applies) the rotary rotation.
fn rope_apply<T: Real>(x: &Tensor<T>, n_heads: usize, pos0: usize, theta: f64, inverse: bool) -> Tensor<T> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let hd = d / n_heads;
    let half = hd / 2;
    let mut out = x.data().to_vec();
    for i in 0..n {
        let angles: Vec<(T, T)> = kernels::rope_angles(pos0 + i, half, theta)
            .map(|(c, s)| (T::lit(c), T::lit(if inverse { -s } else { s })))
            .collect();
        for h in 0..n_heads {
            let base = i * d + h * hd;
            for (j, &(c, s)) in angles.iter().enumerate() {
                let a = x.data()[base + j];
                let b = x.data()[base + half + j];
                out[base + j] = a * c - b * s;
                out[base + half + j] = b * c + a * s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
