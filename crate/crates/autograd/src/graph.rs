use std::rc::Rc;

use crate::Tensor;

/// Index value that makes [`Graph::gather`] emit a zero (used for padding).
pub const GATHER_ZERO: u32 = u32::MAX;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dimensions of a (batched) matrix product `op(a) · op(b)`.
#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    b_batched: bool,
}

enum Op {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Rc<[f64]>),
    MatMul(Var, Var, MatMulDims),
    Gather(Var, Rc<[u32]>),
    Concat(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, train: bool },
    Gelu(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    MeanGroups(Var, usize),
    L2NormRows(Var, Vec<f64>, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-column statistics computed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over the normalized rows.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Gradients produced by [`Graph::backward`], kept for leaf nodes only.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `numel` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, numel: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel])
    }
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node list is
/// already topologically sorted.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const B: f64 = 0.044_715;
    let inner = A * (x + B * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * A * (1.0 + 3.0 * B * x * x);
    (y, dy)
}

#[derive(Clone, Copy)]
struct Strides {
    rs: isize,
    cs: isize,
    batch: usize,
}

/// `c[b] += a[b] · b[b]` for every batch entry, with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    c: &mut [f64],
    sc: Strides,
) {
    for bi in 0..batch {
        let a_off = bi * sa.batch;
        let b_off = bi * sb.batch;
        let c_off = bi * sc.batch;
        // SAFETY: every offset below stays inside the slices; the callers derive the
        // strides and batch offsets from the same dims used to size the buffers.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                sa.rs,
                sa.cs,
                b.as_ptr().add(b_off),
                sb.rs,
                sb.cs,
                1.0,
                c.as_mut_ptr().add(c_off),
                sc.rs,
                sc.cs,
            );
        }
    }
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
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

    /// Copies the value into a fresh constant leaf, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn reshape(&mut self, v: Var, shape: &[usize]) -> Var {
        let t = self.value(v).clone().reshaped(shape).expect("reshape");
        self.push(t, Op::Reshape(v), &[v])
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(self.shape(a), data);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::from_vec(self.shape(a), data);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(self.shape(a), data);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "div");
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x / y).collect();
        let t = Tensor::from_vec(self.shape(a), data);
        self.push(t, Op::Div(a, b), &[a, b])
    }

    /// `a + b` where `b` is tiled over the leading elements of `a`
    /// (`a.numel()` must be a multiple of `b.numel()`).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let bn = bv.numel();
        assert!(bn > 0 && av.numel() % bn == 0, "add_broadcast: {:?} vs {:?}", av.shape(), bv.shape());
        let bd = bv.data();
        let data = av.data().iter().enumerate().map(|(i, x)| x + bd[i % bn]).collect();
        let t = Tensor::from_vec(av.shape(), data);
        self.push(t, Op::AddBroadcast(a, b), &[a, b])
    }

    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let bn = bv.numel();
        assert!(bn > 0 && av.numel() % bn == 0, "mul_broadcast: {:?} vs {:?}", av.shape(), bv.shape());
        let bd = bv.data();
        let data = av.data().iter().enumerate().map(|(i, x)| x * bd[i % bn]).collect();
        let t = Tensor::from_vec(av.shape(), data);
        self.push(t, Op::MulBroadcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::from_vec(av.shape(), av.data().iter().map(|x| x * s).collect());
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::from_vec(av.shape(), av.data().iter().map(|x| x + s).collect());
        self.push(t, Op::AddScalar(a), &[a])
    }

    /// Elementwise product with a constant array of the same size.
    pub fn mul_const(&mut self, a: Var, c: Rc<[f64]>) -> Var {
        let av = self.value(a);
        assert_eq!(av.numel(), c.len(), "mul_const: size mismatch");
        let t = Tensor::from_vec(av.shape(), av.data().iter().zip(c.iter()).map(|(x, y)| x * y).collect());
        self.push(t, Op::MulConst(a, c), &[a])
    }

    /// `x · w` for `x` of shape `[.., k]` and `w` of shape `[k, n]`; output `[.., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "matmul: weight must be 2-D, got {ws:?}");
        let k = *xs.last().expect("matmul: scalar input");
        assert_eq!(k, ws[0], "matmul: inner dims {xs:?} x {ws:?}");
        let m = self.value(x).numel() / k.max(1);
        let dims = MatMulDims { batch: 1, m, k, n: ws[1], ta: false, tb: false, b_batched: false };
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = ws[1];
        self.matmul_impl(x, w, dims, &out_shape)
    }

    /// Batched product over the leading axis of 3-D operands, with optional transposes
    /// of the trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        assert!(as_.len() == 3 && bs.len() == 3, "bmm: operands must be 3-D");
        assert_eq!(as_[0], bs[0], "bmm: batch mismatch");
        let (m, k) = if ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (kb, n) = if tb { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        assert_eq!(k, kb, "bmm: inner dims {as_:?} x {bs:?} (ta={ta}, tb={tb})");
        let dims = MatMulDims { batch: as_[0], m, k, n, ta, tb, b_batched: true };
        self.matmul_impl(a, b, dims, &[as_[0], m, n])
    }

    fn a_strides(d: &MatMulDims) -> Strides {
        if d.ta {
            Strides { rs: 1, cs: d.m as isize, batch: d.m * d.k }
        } else {
            Strides { rs: d.k as isize, cs: 1, batch: d.m * d.k }
        }
    }

    fn b_strides(d: &MatMulDims) -> Strides {
        let batch = if d.b_batched { d.k * d.n } else { 0 };
        if d.tb {
            Strides { rs: 1, cs: d.k as isize, batch }
        } else {
            Strides { rs: d.n as isize, cs: 1, batch }
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, d: MatMulDims, out_shape: &[usize]) -> Var {
        let mut out = vec![0.0; d.batch * d.m * d.n];
        let sc = Strides { rs: d.n as isize, cs: 1, batch: d.m * d.n };
        gemm_acc(
            d.batch,
            d.m,
            d.k,
            d.n,
            self.value(a).data(),
            Self::a_strides(&d),
            self.value(b).data(),
            Self::b_strides(&d),
            &mut out,
            sc,
        );
        let t = Tensor::from_vec(out_shape, out);
        self.push(t, Op::MatMul(a, b, d), &[a, b])
    }

    /// `out[i] = src[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, src: Var, index: Rc<[u32]>, out_shape: &[usize]) -> Var {
        let numel: usize = out_shape.iter().product();
        assert_eq!(numel, index.len(), "gather: index length vs output shape");
        let sd = self.value(src).data();
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { sd[i as usize] })
            .collect();
        let t = Tensor::from_vec(out_shape, data);
        self.push(t, Op::Gather(src, index), &[src])
    }

    /// Concatenate along the last axis; all parts must have equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat: no parts");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        for p in parts {
            assert_eq!(self.value(*p).rows(), rows, "concat: row mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = self.shape(parts[0]).to_vec();
        *shape.last_mut().unwrap() = total;
        let t = Tensor::from_vec(&shape, out);
        self.push(t, Op::Concat(parts.to_vec()), parts)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::from_vec(xv.shape(), out);
        self.push(t, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::from_vec(xv.shape(), out);
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta` per column.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(self.value(gamma).numel(), c, "layer_norm: gamma width");
        assert_eq!(self.value(beta).numel(), c, "layer_norm: beta width");
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, row) in xv.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (j, v) in row.iter().enumerate() {
                xhat[r * c + j] = (v - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat.iter().enumerate().map(|(i, h)| h * g[i % c] + b[i % c]).collect();
        let t = Tensor::from_vec(xv.shape(), out);
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Batch norm over rows (per column) using the batch's own statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let c = xv.cols();
        let rows = xv.rows();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in xv.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for row in xv.data().chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let out = self.batch_norm_with(x, gamma, beta, &mean, &var, eps, true);
        (out, BatchStats { mean, var, count: rows })
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        self.batch_norm_with(x, gamma, beta, mean, var, eps, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64, train: bool) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(mean.len(), c, "batch_norm: stats width");
        assert_eq!(self.value(gamma).numel(), c, "batch_norm: gamma width");
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Vec<f64> = xv.data().iter().enumerate().map(|(i, v)| (v - mean[i % c]) * rstd[i % c]).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out = xhat.iter().enumerate().map(|(i, h)| h * g[i % c] + b[i % c]).collect();
        let t = Tensor::from_vec(xv.shape(), out);
        self.push(t, Op::BatchNorm { x, gamma, beta, xhat, rstd, train }, &[x, gamma, beta])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_vec(xv.shape(), xv.data().iter().map(|v| gelu_parts(*v).0).collect());
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_vec(
            xv.shape(),
            xv.data().iter().map(|v| if *v >= 0.0 { *v } else { slope * v }).collect(),
        );
        self.push(t, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `[groups * r, c] -> [groups, c]` by averaging each group of `r` consecutive rows.
    pub fn mean_groups(&mut self, x: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let rows = xv.rows();
        assert!(groups > 0 && rows % groups == 0, "mean_groups: {rows} rows into {groups} groups");
        let r = rows / groups;
        let mut out = vec![0.0; groups * c];
        for (i, row) in xv.data().chunks(c).enumerate() {
            let g = i / r;
            for (o, v) in out[g * c..(g + 1) * c].iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let t = Tensor::from_vec(&[groups, c], out);
        self.push(t, Op::MeanGroups(x, groups), &[x])
    }

    /// Scales each row to unit L2 norm (norms below `eps` are replaced by `eps`).
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let t = Tensor::from_vec(xv.shape(), out);
        self.push(t, Op::L2NormRows(x, norms, eps), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(a) | Op::AddScalar(a) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / bv[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *b, |d| {
                    let n = d.len();
                    for (i, gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                });
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let bn = bv.len();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i % bn];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % bn] += gv * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s));
            }
            Op::MulConst(a, c) => {
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * c[i];
                    }
                });
            }
            Op::MatMul(a, b, dims) => self.backprop_matmul(*a, *b, dims, g, grads),
            Op::Gather(src, index) => {
                self.accumulate(grads, *src, |d| {
                    for (gv, &i) in g.iter().zip(index.iter()) {
                        if i != GATHER_ZERO {
                            d[i as usize] += gv;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.accumulate(grads, *p, |d| {
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                self.accumulate(grads, *x, |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                self.accumulate(grads, *x, |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let gs: f64 = grow.iter().sum();
                        for j in 0..c {
                            drow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = node.value.cols();
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % c] += gv * xhat[i];
                    }
                });
                self.accumulate(grads, *beta, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % c] += gv;
                    }
                });
                self.accumulate(grads, *x, |d| {
                    let mut dxhat = vec![0.0; c];
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * c;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[base + j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[base + j];
                        }
                        let (m1, m2) = (s1 / c as f64, s2 / c as f64);
                        for j in 0..c {
                            d[base + j] += rs * (dxhat[j] - m1 - xhat[base + j] * m2);
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let c = node.value.cols();
                let rows = node.value.rows();
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % c] += gv * xhat[i];
                    }
                });
                self.accumulate(grads, *beta, |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % c] += gv;
                    }
                });
                let train = *train;
                self.accumulate(grads, *x, |d| {
                    if !train {
                        for (i, gv) in g.iter().enumerate() {
                            d[i] += gv * gam[i % c] * rstd[i % c];
                        }
                        return;
                    }
                    let mut s1 = vec![0.0; c];
                    let mut s2 = vec![0.0; c];
                    for (i, gv) in g.iter().enumerate() {
                        let dh = gv * gam[i % c];
                        s1[i % c] += dh;
                        s2[i % c] += dh * xhat[i];
                    }
                    let n = rows as f64;
                    for (i, gv) in g.iter().enumerate() {
                        let j = i % c;
                        let dh = gv * gam[j];
                        d[i] += rstd[j] * (dh - s1[j] / n - xhat[i] * s2[j] / n);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_parts(xv[i]).1;
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += if xv[i] >= 0.0 { g[i] } else { g[i] * slope };
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += gv));
            }
            Op::MeanGroups(x, groups) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let r = xv.rows() / groups;
                self.accumulate(grads, *x, |d| {
                    for (i, drow) in d.chunks_mut(c).enumerate() {
                        let grow = &g[(i / r) * c..(i / r + 1) * c];
                        for j in 0..c {
                            drow[j] += grow[j] / r as f64;
                        }
                    }
                });
            }
            Op::L2NormRows(x, norms, eps) => {
                let y = node.value.data();
                let c = node.value.cols();
                let eps = *eps;
                self.accumulate(grads, *x, |d| {
                    for (r, n) in norms.iter().enumerate() {
                        let base = r * c;
                        let grow = &g[base..base + c];
                        if *n > eps {
                            let yrow = &y[base..base + c];
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                d[base + j] += (grow[j] - yrow[j] * dot) / n;
                            }
                        } else {
                            for j in 0..c {
                                d[base + j] += grow[j] / eps;
                            }
                        }
                    }
                });
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, d: &MatMulDims, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (m, k, n) = (d.m, d.k, d.n);
        let gs = Strides { rs: n as isize, cs: 1, batch: m * n };
        let gs_t = Strides { rs: 1, cs: n as isize, batch: m * n };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let sa = Self::a_strides(d);
        let sb = Self::b_strides(d);
        // op(B)^T and op(A)^T are the same buffers with swapped strides.
        let sb_t = Strides { rs: sb.cs, cs: sb.rs, batch: sb.batch };
        let sa_t = Strides { rs: sa.cs, cs: sa.rs, batch: sa.batch };
        self.accumulate(grads, a, |da| {
            if d.ta {
                // storage [k, m]: op(B) · dC^T
                let out = Strides { rs: m as isize, cs: 1, batch: m * k };
                gemm_acc(d.batch, k, n, m, bv, sb, g, gs_t, da, out);
            } else {
                let out = Strides { rs: k as isize, cs: 1, batch: m * k };
                gemm_acc(d.batch, m, n, k, g, gs, bv, sb_t, da, out);
            }
        });
        self.accumulate(grads, b, |db| {
            let batch_stride = if d.b_batched { k * n } else { 0 };
            if d.tb {
                // storage [n, k]: dC^T · op(A)
                let out = Strides { rs: k as isize, cs: 1, batch: batch_stride };
                gemm_acc(d.batch, n, m, k, g, gs_t, av, sa, db, out);
            } else {
                let out = Strides { rs: n as isize, cs: 1, batch: batch_stride };
                gemm_acc(d.batch, k, m, n, av, sa_t, g, gs, db, out);
            }
        });
    }
}
