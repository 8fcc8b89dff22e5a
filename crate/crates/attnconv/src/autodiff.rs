//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are appended to a [`GradTape`] in evaluation order, so the
//! tape index order is already a topological order; `backward` walks it in
//! reverse. Leaves keep their gradient in the tensor's grad slot.

use crate::error::{Error, Result};
use crate::tensor::{gemm, numel, transpose, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Expand(Var),
    Reshape(Var),
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    SumAll(Var),
    SumAxis {
        a: Var,
        axis: usize,
    },
    Softmax {
        a: Var,
        tau: f64,
    },
    LayerNorm {
        a: Var,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Gelu(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        a: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
        smoothing: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations with their backward rules.
///
/// A tape is single-threaded; build one per forward pass.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visits every multi-index of `shape` in row-major order, passing the
/// offset computed from `src_strides`.
fn for_each_offset(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for lin in 0..n {
        f(lin, off);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Source strides that map a `target` index onto `src` with broadcasting
/// over leading and size-one axes.
fn broadcast_strides(src: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if src.len() > target.len() {
        return None;
    }
    let lead = target.len() - src.len();
    let s = strides(src);
    let mut out = vec![0; target.len()];
    for (i, &d) in src.iter().enumerate() {
        let t = target[lead + i];
        if d == t {
            out[lead + i] = s[i];
        } else if d != 1 {
            return None;
        }
    }
    Some(out)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    if axes[rank - 1] == rank - 1 && rank > 1 {
        // Last axis kept: copy contiguous rows.
        let w = shape[rank - 1];
        let outer_shape = &out_shape[..rank - 1];
        let outer_strides: Vec<usize> = axes[..rank - 1].iter().map(|&a| in_strides[a]).collect();
        for_each_offset(outer_shape, &outer_strides, |_, off| {
            out.extend_from_slice(&data[off..off + w]);
        });
    } else {
        let s: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        for_each_offset(&out_shape, &s, |_, off| out.push(data[off]));
    }
    (out, out_shape)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

/// Row-wise stabilized softmax of `x / tau` over blocks of width `w`.
pub(crate) fn softmax_rows(x: &[f64], w: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = ((v - max) / tau).exp();
            sum += *ov;
        }
        for ov in o.iter_mut() {
            *ov /= sum;
        }
    }
    out
}

impl GradTape {
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let rg = t.requires_grad();
        t.zero_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad())
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient stored on a leaf by the last `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ra = sa.len();
        if ra < 2 || ra != sb.len() || sa[..ra - 2] != sb[..ra - 2] || sa[ra - 1] != sb[ra - 2] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, p) = (sa[ra - 2], sa[ra - 1], sb[ra - 1]);
        let batch = numel(&sa[..ra - 2]);
        let mut out = vec![0.0; batch * m * p];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                gemm(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * p..(i + 1) * k * p],
                    &mut out[i * m * p..(i + 1) * m * p],
                    m,
                    k,
                    p,
                );
            }
        }
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, p]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
            },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        Ok(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn elementwise(&mut self, a: Var, b: Var, op: ElementwiseOp) -> Result<Var> {
        match op {
            ElementwiseOp::Add => self.add(a, b),
            ElementwiseOp::Mul => self.mul(a, b),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a).map(|v| v * factor);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// Explicit broadcast: `a`'s shape must be right-aligned with `shape`,
    /// each axis either equal or 1; missing leading axes are repeated.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(a).to_vec();
        let st = broadcast_strides(&src, shape).ok_or_else(|| Error::dim("expand", &src, shape))?;
        let mut out = vec![0.0; numel(shape)];
        {
            let d = self.value(a).data();
            for_each_offset(shape, &st, |lin, off| out[lin] = d[off]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Expand(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::Contract(format!(
                "invalid permutation {axes:?} for shape {shape:?}"
            )));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), &shape, axes);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Contract("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Sum over one axis; the axis is removed (rank-1 inputs give `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        {
            let d = self.value(a).data();
            for o in 0..outer {
                for l in 0..len {
                    let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::SumAxis { a, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::Contract(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Softmax of `a / tau` over the last axis.
    pub fn softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Contract(format!("softmax temperature must be > 0, got {tau}")));
        }
        let t = self.value(a);
        let w = t.cols();
        let out = softmax_rows(t.data(), w, tau);
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { a, tau }, rg))
    }

    /// Standardization over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let w = t.cols();
        let mut out = vec![0.0; t.numel()];
        let mut inv_std = Vec::with_capacity(t.numel() / w);
        for (row, o) in t.data().chunks_exact(w).zip(out.chunks_exact_mut(w)) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = (v - mean) * r;
            }
            inv_std.push(r);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::LayerNorm { a, inv_std }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| gelu_parts(v).0);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.value(a).data();
            for o in 0..outer {
                let base = (o * full + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow { a, axis, start },
            rg,
        ))
    }

    /// Picks `index` entries along the last axis: `out[.., l] = a[.., index[l]]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let k = *shape.last().unwrap();
        if index.is_empty() || index.iter().any(|&i| i >= k) {
            return Err(Error::Contract(format!("gather index out of range for width {k}")));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(d.len() / k * index.len());
        for row in d.chunks_exact(k) {
            out.extend(index.iter().map(|&i| row[i]));
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = index.len();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Gather {
                a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `logits: [B×K]` against integer targets with
    /// label smoothing `smoothing` spread uniformly over all K classes.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        let k = t.cols();
        if targets.iter().any(|&y| y >= k) {
            return Err(Error::Contract("target class out of range".into()));
        }
        let probs = softmax_rows(t.data(), k, 1.0);
        let mut loss = 0.0;
        for (row, &y) in t.data().chunks_exact(k).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mut l = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let tc = smoothing / k as f64 + if c == y { 1.0 - smoothing } else { 0.0 };
                l -= tc * (v - lse);
            }
            loss += l;
        }
        loss /= targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                smoothing,
            },
            rg,
        ))
    }

    /// `x · w + b` over the last axis of `x`; `x` is `[.., I]`, `w` is
    /// `[I×O]`, `b` is `[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let i = *xs.last().unwrap();
        let rows = numel(&xs) / i;
        let x2 = self.reshape(x, &[rows, i])?;
        let mut y = self.matmul(x2, w)?;
        let o = self.shape(y)[1];
        if let Some(b) = b {
            let be = self.expand(b, &[rows, o])?;
            y = self.add(y, be)?;
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = o;
        self.reshape(y, &out_shape)
    }

    /// Populates gradients of every requires-grad leaf with
    /// d(`loss`)/d(leaf). Leaves the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g).expect("grad shape");
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, p } => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if self.rg(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let bt = transpose(&bd[i * k * p..(i + 1) * k * p], k, p);
                        gemm(&g[i * m * p..(i + 1) * m * p], &bt, &mut da[i * m * k..(i + 1) * m * k], m, p, k);
                    }
                    acc(a, da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; batch * k * p];
                    for i in 0..batch {
                        let at = transpose(&ad[i * m * k..(i + 1) * m * k], m, k);
                        gemm(&at, &g[i * m * p..(i + 1) * m * p], &mut db[i * k * p..(i + 1) * k * p], k, m, p);
                    }
                    acc(b, db);
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let ad = self.value(a).data();
                let bd = self.value(b).data();
                if self.rg(a) {
                    acc(a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                }
                if self.rg(b) {
                    acc(b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
                }
            }
            &Op::Scale(a, f) => acc(a, g.iter().map(|v| v * f).collect()),
            &Op::AddScalar(a) | &Op::Reshape(a) => acc(a, g.to_vec()),
            &Op::Expand(a) => {
                let src = self.shape(a);
                let st = broadcast_strides(src, node.value.shape()).unwrap();
                let mut da = vec![0.0; numel(src)];
                for_each_offset(node.value.shape(), &st, |lin, off| da[off] += g[lin]);
                acc(a, da);
            }
            Op::Permute { a, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &x) in axes.iter().enumerate() {
                    inv[x] = i;
                }
                let (da, _) = permute_data(g, node.value.shape(), &inv);
                acc(*a, da);
            }
            &Op::SumAll(a) => acc(a, vec![g[0]; self.value(a).numel()]),
            &Op::SumAxis { a, axis } => {
                let (outer, len, inner) = split_axis(self.shape(a), axis);
                let mut da = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        da.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(a, da);
            }
            &Op::Softmax { a, tau } => {
                let y = node.value.data();
                let w = node.value.cols();
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks_exact(w).zip(g.chunks_exact(w)).zip(da.chunks_exact_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot) / tau;
                    }
                }
                acc(a, da);
            }
            Op::LayerNorm { a, inv_std } => {
                let y = node.value.data();
                let w = node.value.cols();
                let n = w as f64;
                let mut da = vec![0.0; y.len()];
                for (((yr, gr), dr), &r) in y
                    .chunks_exact(w)
                    .zip(g.chunks_exact(w))
                    .zip(da.chunks_exact_mut(w))
                    .zip(inv_std)
                {
                    let sg: f64 = gr.iter().sum();
                    let sgy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = r / n * (n * gv - sg - yv * sgy);
                    }
                }
                acc(*a, da);
            }
            &Op::Relu(a) => {
                let x = self.value(a).data();
                acc(a, g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect());
            }
            &Op::Gelu(a) => {
                let x = self.value(a).data();
                acc(a, g.iter().zip(x).map(|(&gv, &xv)| gv * gelu_parts(xv).1).collect());
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc(v, dv);
                    }
                    offset += len;
                }
            }
            &Op::Narrow { a, axis, start } => {
                let (outer, full, inner) = split_axis(self.shape(a), axis);
                let len = node.value.shape()[axis];
                let mut da = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    da[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(a, da);
            }
            Op::Gather { a, index } => {
                let k = self.value(*a).cols();
                let l = index.len();
                let mut da = vec![0.0; self.value(*a).numel()];
                for (dr, gr) in da.chunks_exact_mut(k).zip(g.chunks_exact(l)) {
                    for (&i, &gv) in index.iter().zip(gr) {
                        dr[i] += gv;
                    }
                }
                acc(*a, da);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                smoothing,
            } => {
                let k = self.value(*logits).cols();
                let b = targets.len() as f64;
                let mut da = probs.clone();
                for (row, &y) in da.chunks_exact_mut(k).zip(targets) {
                    for (c, v) in row.iter_mut().enumerate() {
                        let tc = smoothing / k as f64 + if c == y { 1.0 - smoothing } else { 0.0 };
                        *v = (*v - tc) / b * g[0];
                    }
                }
                acc(*logits, da);
            }
        }
    }
}

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_coords(f, x, step, &coords)
}

/// Same as [`finite_diff_check`] restricted to a subset of coordinates.
pub fn finite_diff_check_coords<F>(f: F, x: &Tensor, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut GradTape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("step must be > 0, got {step}")));
    }
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = GradTape::new();
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if val.numel() != 1 {
            return Err(Error::Contract("checked function must return a scalar".into()));
        }
        let s = val.data()[0];
        if !s.is_finite() {
            return Err(Error::Evaluation(format!("f(x) = {s}")));
        }
        Ok(s)
    };

    let mut tape = GradTape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let y = tape.value(out);
    if y.numel() != 1 {
        return Err(Error::Contract("checked function must return a scalar".into()));
    }
    if !y.data()[0].is_finite() {
        return Err(Error::Evaluation(format!("f(x) = {}", y.data()[0])));
    }
    tape.backward(out)?;
    let analytic = tape.grad(xv).expect("leaf grad").to_vec();

    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
