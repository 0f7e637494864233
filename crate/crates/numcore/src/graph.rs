//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node to the [`Graph`]; because inputs always
//! precede outputs on the tape, walking it backwards is a valid reverse
//! topological order.

use crate::scalar::matmul_into;
use crate::{NumError, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Column ranges of a logit matrix that are normalised independently.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    ranges: Vec<(usize, usize)>,
}

impl Segments {
    /// Consecutive segments of the given widths starting at column 0.
    pub fn from_widths(widths: &[usize]) -> Self {
        let mut start = 0;
        let ranges = widths
            .iter()
            .map(|&w| {
                let r = (start, w);
                start += w;
                r
            })
            .collect();
        Self { ranges }
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn total_width(&self) -> usize {
        self.ranges.iter().map(|r| r.1).sum()
    }

    fn max_column(&self) -> usize {
        self.ranges.iter().map(|&(s, w)| s + w).max().unwrap_or(0)
    }
}

/// Logit written in place of masked entries before normalisation.
pub const MASKED_LOGIT: f64 = -1e8;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Neg(Var),
    Exp(Var),
    Square(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Reshape(Var),
    GatherCols { input: Var, index: Vec<usize> },
    Conv2d { input: Var, filters: Var, stride: usize, cols: Vec<T> },
    MaskedLogSoftmax { input: Var, segments: Segments, valid: Vec<bool> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise operands differ in shape");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data);
        self.push(value, op, &[a, b])
    }

    /// `(m, k) @ (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects matrices, got {sa:?} and {sb:?}");
        assert_eq!(sa[1], sb[0], "matmul inner dimensions {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let c = *self.shape(x).last().expect("add_bias on a scalar");
        assert_eq!(self.shape(bias), &[c], "bias shape");
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v = *v + bv;
            }
        }
        self.push(value, Op::AddBias(x, bias), &[x, bias])
    }

    /// Affine map `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| if p <= q { p } else { q }, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| if p >= q { p } else { q }, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::cast(s);
        self.unary(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |v| -v, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(a))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::cast(lo), T::cast(hi));
        self.unary(a, |v| v.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = T::cast(x.len() as f64);
        let s: T = x.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    /// `(n, k) -> (n)` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape.len(), 2, "sum_rows expects a matrix");
        let (n, k) = (shape[0], shape[1]);
        let data = self.value(a).data().chunks(k.max(1)).take(n).map(|r| r.iter().copied().sum()).collect();
        self.push(Tensor::new(vec![n], data), Op::SumRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape.to_vec());
        self.push(value, Op::Reshape(a), &[a])
    }

    /// `(n, k) -> (n, m)` picking `index[i * m + j]` from row `i`.
    pub fn gather_cols(&mut self, a: Var, index: Vec<usize>) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape.len(), 2, "gather_cols expects a matrix");
        let (n, k) = (shape[0], shape[1]);
        assert!(n > 0 && index.len().is_multiple_of(n), "index length {} not a multiple of {n}", index.len());
        let m = index.len() / n;
        let x = self.value(a).data();
        let data = index
            .iter()
            .enumerate()
            .map(|(p, &j)| {
                assert!(j < k, "column {j} out of range {k}");
                x[(p / m) * k + j]
            })
            .collect();
        let value = Tensor::new(vec![n, m], data);
        self.push(value, Op::GatherCols { input: a, index }, &[a])
    }

    /// Valid (unpadded) convolution over NHWC input with `(kh, kw, c_in, c_out)` filters.
    ///
    /// Rank-3 input is treated as a batch of one and returns rank 3.
    pub fn conv2d(&mut self, input: Var, filters: Var, stride: usize) -> Var {
        assert!(stride > 0, "stride must be positive");
        let in_shape = self.shape(input).to_vec();
        let batched = match in_shape.len() {
            4 => true,
            3 => false,
            _ => panic!("conv2d expects (h, w, c) or (n, h, w, c), got {in_shape:?}"),
        };
        let (n, h, w, c) = if batched {
            (in_shape[0], in_shape[1], in_shape[2], in_shape[3])
        } else {
            (1, in_shape[0], in_shape[1], in_shape[2])
        };
        let fs = self.shape(filters).to_vec();
        assert_eq!(fs.len(), 4, "filters must be (kh, kw, c_in, c_out)");
        let (kh, kw, fc, co) = (fs[0], fs[1], fs[2], fs[3]);
        assert_eq!(fc, c, "filter input channels {fc} vs input channels {c}");
        assert!(h >= kh && w >= kw, "input {h}x{w} smaller than filter {kh}x{kw}");
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let patch = kh * kw * c;
        let rows = n * oh * ow;

        let x = self.value(input).data();
        let mut cols = vec![T::zero(); rows * patch];
        let mut r = 0;
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let dst = &mut cols[r * patch..(r + 1) * patch];
                    for ky in 0..kh {
                        let src = ((b * h + oy * stride + ky) * w + ox * stride) * c;
                        let len = kw * c;
                        dst[ky * len..(ky + 1) * len].copy_from_slice(&x[src..src + len]);
                    }
                    r += 1;
                }
            }
        }
        let mut out = vec![T::zero(); rows * co];
        matmul_into(rows, patch, co, &cols, false, self.value(filters).data(), false, &mut out, false);
        let shape = if batched { vec![n, oh, ow, co] } else { vec![oh, ow, co] };
        self.push(
            Tensor::new(shape, out),
            Op::Conv2d { input, filters, stride, cols },
            &[input, filters],
        )
    }

    /// Row-wise log-softmax computed independently on each segment of the
    /// columns, with invalid entries replaced by [`MASKED_LOGIT`] first.
    ///
    /// `valid` has one flag per output entry (`n * segments.total_width()`).
    /// Output is `(n, segments.total_width())`.
    pub fn masked_log_softmax(&mut self, input: Var, segments: &Segments, valid: Vec<bool>) -> Var {
        let shape = self.shape(input);
        assert_eq!(shape.len(), 2, "masked_log_softmax expects a matrix");
        let (n, k) = (shape[0], shape[1]);
        assert!(segments.max_column() <= k, "segments exceed {k} columns");
        let width = segments.total_width();
        assert_eq!(valid.len(), n * width, "mask length");
        let x = self.value(input).data();
        let fill = T::cast(MASKED_LOGIT);
        let mut out = vec![T::zero(); n * width];
        for i in 0..n {
            let mut o = 0;
            for &(start, len) in segments.ranges() {
                let xs = &x[i * k + start..i * k + start + len];
                let vs = &valid[i * width + o..i * width + o + len];
                assert!(vs.iter().any(|&v| v), "row {i}: segment at column {start} has no valid entry");
                let dst = &mut out[i * width + o..i * width + o + len];
                let mut max = T::neg_infinity();
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = if vs[j] { xs[j] } else { fill };
                    max = max.max(*d);
                }
                let lse = max + dst.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
                for d in dst.iter_mut() {
                    *d = *d - lse;
                }
                o += len;
            }
        }
        let value = Tensor::new(vec![n, width], out);
        self.push(value, Op::MaskedLogSoftmax { input, segments: segments.clone(), valid }, &[input])
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumError> {
        let loss_len = self.value(loss).len();
        if loss_len != 1 {
            return Err(NumError::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        // Only leaves keep their gradients.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let d = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let buf = self.grad_buf(grads, *a);
                    matmul_into(m, n, k, d, false, self.value(*b).data(), true, buf, true);
                }
                if self.requires_grad(*b) {
                    let buf = self.grad_buf(grads, *b);
                    matmul_into(k, m, n, self.value(*a).data(), true, d, false, buf, true);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |g| add_assign(g, d));
                if self.requires_grad(*b) {
                    let c = self.shape(*b)[0];
                    let buf = self.grad_buf(grads, *b);
                    for row in d.chunks(c) {
                        for (g, &v) in buf.iter_mut().zip(row) {
                            *g = *g + v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_assign(g, d));
                self.accumulate(grads, *b, |g| add_assign(g, d));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_assign(g, d));
                self.accumulate(grads, *b, |g| zip_assign(g, d, |x, dv| x - dv));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    for ((g, &dv), &y) in g.iter_mut().zip(d).zip(vb) {
                        *g = *g + dv * y;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((g, &dv), &x) in g.iter_mut().zip(d).zip(va) {
                        *g = *g + dv * x;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |g| zip_assign(g, d, |x, dv| x + dv * *s)),
            Op::Neg(a) => self.accumulate(grads, *a, |g| zip_assign(g, d, |x, dv| x - dv)),
            Op::Exp(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |g| {
                    for ((g, &dv), &yv) in g.iter_mut().zip(d).zip(y) {
                        *g = *g + dv * yv;
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let two = T::cast(2.0);
                self.accumulate(grads, *a, |g| {
                    for ((g, &dv), &xv) in g.iter_mut().zip(d).zip(x) {
                        *g = *g + two * xv * dv;
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for ((g, &dv), &xv) in g.iter_mut().zip(d).zip(x) {
                        if xv > T::zero() {
                            *g = *g + dv;
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for ((g, &dv), &xv) in g.iter_mut().zip(d).zip(x) {
                        if xv >= *lo && xv <= *hi {
                            *g = *g + dv;
                        }
                    }
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let take_a: Vec<bool> = {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let is_min = matches!(node.op, Op::Minimum(..));
                    va.iter().zip(vb).map(|(&x, &y)| if is_min { x <= y } else { x >= y }).collect()
                };
                self.accumulate(grads, *a, |g| {
                    for ((g, &dv), &t) in g.iter_mut().zip(d).zip(&take_a) {
                        if t {
                            *g = *g + dv;
                        }
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((g, &dv), &t) in g.iter_mut().zip(d).zip(&take_a) {
                        if !t {
                            *g = *g + dv;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let dv = d[0];
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|g| *g = *g + dv));
            }
            Op::Mean(a) => {
                let dv = d[0] / T::cast(self.value(*a).len() as f64);
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|g| *g = *g + dv));
            }
            Op::SumRows(a) => {
                let k = self.shape(*a)[1];
                self.accumulate(grads, *a, |g| {
                    for (row, &dv) in g.chunks_mut(k.max(1)).zip(d) {
                        row.iter_mut().for_each(|g| *g = *g + dv);
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |g| add_assign(g, d)),
            Op::GatherCols { input, index } => {
                let k = self.shape(*input)[1];
                let m = node.value.shape()[1];
                self.accumulate(grads, *input, |g| {
                    for (p, (&j, &dv)) in index.iter().zip(d).enumerate() {
                        let idx = (p / m) * k + j;
                        g[idx] = g[idx] + dv;
                    }
                });
            }
            Op::Conv2d { input, filters, stride, cols } => {
                let fs = self.shape(*filters);
                let (kh, kw, c, co) = (fs[0], fs[1], fs[2], fs[3]);
                let patch = kh * kw * c;
                let rows = cols.len() / patch;
                if self.requires_grad(*filters) {
                    let buf = self.grad_buf(grads, *filters);
                    matmul_into(patch, rows, co, cols, true, d, false, buf, true);
                }
                if self.requires_grad(*input) {
                    let mut dcols = vec![T::zero(); rows * patch];
                    matmul_into(rows, co, patch, d, false, self.value(*filters).data(), true, &mut dcols, false);
                    let is = self.shape(*input);
                    let (h, w) = if is.len() == 4 { (is[1], is[2]) } else { (is[0], is[1]) };
                    let oh = (h - kh) / stride + 1;
                    let ow = (w - kw) / stride + 1;
                    let buf = self.grad_buf(grads, *input);
                    let mut r = 0;
                    let n = rows / (oh * ow);
                    for b in 0..n {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let src = &dcols[r * patch..(r + 1) * patch];
                                for ky in 0..kh {
                                    let dst = ((b * h + oy * stride + ky) * w + ox * stride) * c;
                                    let len = kw * c;
                                    for (g, &v) in buf[dst..dst + len].iter_mut().zip(&src[ky * len..(ky + 1) * len]) {
                                        *g = *g + v;
                                    }
                                }
                                r += 1;
                            }
                        }
                    }
                }
            }
            Op::MaskedLogSoftmax { input, segments, valid } => {
                let k = self.shape(*input)[1];
                let width = segments.total_width();
                let y = node.value.data();
                self.accumulate(grads, *input, |g| {
                    for i in 0..y.len() / width.max(1) {
                        let mut o = 0;
                        for &(start, len) in segments.ranges() {
                            let row = i * width + o;
                            let total: T = d[row..row + len].iter().copied().sum();
                            for j in 0..len {
                                if valid[row + j] {
                                    let p = y[row + j].exp();
                                    let gi = i * k + start + j;
                                    g[gi] = g[gi] + d[row + j] - p * total;
                                }
                            }
                            o += len;
                        }
                    }
                });
            }
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut [T] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.shape(v).to_vec()))
            .data_mut()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if self.requires_grad(v) {
            f(self.grad_buf(grads, v));
        }
    }
}

fn add_assign<T: Scalar>(g: &mut [T], d: &[T]) {
    zip_assign(g, d, |x, dv| x + dv);
}

fn zip_assign<T: Scalar>(g: &mut [T], d: &[T], f: impl Fn(T, T) -> T) {
    for (g, &dv) in g.iter_mut().zip(d) {
        *g = f(*g, dv);
    }
}
