use rand::Rng;

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::{gelu, gelu_grad, sigmoid, softplus, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    /// Inverted dropout; holds the already-scaled keep mask.
    Dropout(Var, Vec<f64>),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Rows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<(usize, usize)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// exact reverse order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        value.requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 || self.value(b).shape().len() != 2 {
            return Err(Error::shape(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulBt(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(Error::shape(
                "add_bias",
                self.value(x).shape(),
                self.value(bias).shape(),
            ));
        }
        let mut t = self.value(x).clone();
        let b = self.value(bias).data();
        for row in t.data_mut().chunks_mut(cols) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(t, Op::Scale(x, factor), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = softplus(*v));
        self.push(t, Op::Softplus(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Inverted dropout with keep-probability `1 - rate`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut t = self.value(x).clone();
        t.data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(v, m)| *v *= m);
        self.push(t, Op::Dropout(x, mask), &[x])
    }

    /// Row-wise softmax restricted to positions where `mask` is nonzero;
    /// masked positions come out exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        if self.value(x).shape() != mask.shape() {
            return Err(Error::shape(
                "masked_softmax",
                self.value(x).shape(),
                mask.shape(),
            ));
        }
        let cols = self.value(x).cols();
        let mut t = self.value(x).clone();
        for (r, (row, mrow)) in t
            .data_mut()
            .chunks_mut(cols)
            .zip(mask.data().chunks(cols))
            .enumerate()
        {
            let mut max = f64::NEG_INFINITY;
            for (v, &m) in row.iter().zip(mrow) {
                if m != 0.0 && *v > max {
                    max = *v;
                }
            }
            if mrow.iter().all(|&m| m == 0.0) {
                return Err(Error::InvalidMask { row: r });
            }
            if !max.is_finite() {
                // Non-finite scores propagate so the loss reports the divergence.
                row.fill(f64::NAN);
                continue;
            }
            let mut sum = 0.0;
            for (v, &m) in row.iter_mut().zip(mrow) {
                *v = if m != 0.0 { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(self.push(t, Op::MaskedSoftmax(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mask = Tensor::full(self.value(x).shape(), 1.0);
        self.masked_softmax(x, &mask)
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(
                "layer_norm",
                self.value(x).shape(),
                self.value(gain).shape(),
            ));
        }
        let rows = self.value(x).rows();
        let mut xhat = self.value(x).data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        for row in xhat.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, gi), bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Gathers rows of `x` by index. Used both for embedding lookup and for
    /// picking positions out of a hidden-state matrix.
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::shape("rows", self.value(x).shape(), &[i]));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(t, Op::Rows(x, idx.to_vec()), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, d) = self.dims(x);
        if start + len > d {
            return Err(Error::shape(
                "slice_cols",
                self.value(x).shape(),
                &[start, len],
            ));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        Ok(self.push(t, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            total += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![m, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != d {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
            rows += self.value(p).rows();
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Summed softmax cross-entropy. With one target per row, row `i` is
    /// scored against `targets[i]`; a single-row `logits` is scored against
    /// every target (bag-of-words style).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, v) = self.dims(logits);
        let pairs: Vec<(usize, usize)> = if rows == targets.len() {
            targets.iter().copied().enumerate().collect()
        } else if rows == 1 {
            // Sorted so the sum does not depend on target order.
            let mut sorted = targets.to_vec();
            sorted.sort_unstable();
            sorted.into_iter().map(|t| (0, t)).collect()
        } else {
            return Err(Error::shape(
                "cross_entropy",
                self.value(logits).shape(),
                &[targets.len()],
            ));
        };
        if let Some(&(_, bad)) = pairs.iter().find(|(_, t)| *t >= v) {
            return Err(Error::shape(
                "cross_entropy",
                self.value(logits).shape(),
                &[bad],
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; rows * v];
        let mut lse = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut sum = 0.0;
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                sum += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= sum);
            lse[r] = max + sum.ln();
        }
        let loss: f64 = pairs.iter().map(|&(r, t)| lse[r] - src[r * v + t]).sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: pairs,
            },
            &[logits],
        ))
    }

    /// Back-propagates from a one-element `root`. Afterwards every recorded
    /// tensor with `requires_grad` carries a gradient (zeros if `root` does
    /// not depend on it).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", self.value(root).shape(), &[1]));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            grads.push(if node.value.requires_grad {
                Some(vec![0.0; node.value.len()])
            } else {
                None
            });
        }
        if let Some(g) = grads[root.0].as_mut() {
            g[0] = 1.0;
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = g;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if let Some(ga) = grads[a.0].as_mut() {
                    gemm_nt(m, n, k, g, val(*b).data(), ga);
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    gemm_tn(m, k, n, val(*a).data(), g, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                if let Some(ga) = grads[a.0].as_mut() {
                    gemm_nn(m, n, k, g, val(*b).data(), ga);
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    gemm_tn(m, n, k, g, val(*a).data(), gb);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = grads[v.0].as_mut() {
                        axpy(1.0, g, gv);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = grads[x.0].as_mut() {
                    axpy(1.0, g, gx);
                }
                if let Some(gb) = grads[bias.0].as_mut() {
                    for row in g.chunks(gb.len()) {
                        axpy(1.0, row, gb);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = grads[a.0].as_mut() {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(gx) = grads[x.0].as_mut() {
                    axpy(*factor, g, gx);
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                        *o += gi * gelu_grad(*xi);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for ((o, gi), yi) in gx.iter_mut().zip(g).zip(node.value.data()) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Softplus(x) => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(val(*x).data()) {
                        *o += gi * sigmoid(*xi);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = grads[x.0].as_mut() {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(gx) = grads[x.0].as_mut() {
                    for ((o, gi), mi) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * mi;
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                if let Some(gx) = grads[x.0].as_mut() {
                    let cols = node.value.cols();
                    for ((grow, yrow), orow) in g
                        .chunks(cols)
                        .zip(node.value.data().chunks(cols))
                        .zip(gx.chunks_mut(cols))
                    {
                        let s = dot(grow, yrow);
                        for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*gain).len();
                let gvals = val(*gain).data();
                if let Some(gx) = grads[x.0].as_mut() {
                    let mut dxhat = vec![0.0; d];
                    for (r, ((grow, xrow), orow)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        for ((dh, gi), gain_i) in dxhat.iter_mut().zip(grow).zip(gvals) {
                            *dh = gi * gain_i;
                        }
                        let mean_dh = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh_xh = dot(&dxhat, xrow) / d as f64;
                        for ((o, dh), xh) in orow.iter_mut().zip(&dxhat).zip(xrow) {
                            *o += rstd[r] * (dh - mean_dh - xh * mean_dh_xh);
                        }
                    }
                }
                if let Some(gg) = grads[gain.0].as_mut() {
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gi), xh) in gg.iter_mut().zip(grow).zip(xrow) {
                            *o += gi * xh;
                        }
                    }
                }
                if let Some(gb) = grads[bias.0].as_mut() {
                    for grow in g.chunks(d) {
                        axpy(1.0, grow, gb);
                    }
                }
            }
            Op::Rows(x, idx) => {
                if let Some(gx) = grads[x.0].as_mut() {
                    let d = val(*x).cols();
                    for (grow, &r) in g.chunks(d).zip(idx) {
                        axpy(1.0, grow, &mut gx[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SliceCols(x, start) => {
                if let Some(gx) = grads[x.0].as_mut() {
                    let d = val(*x).cols();
                    let len = node.value.cols();
                    for (r, grow) in g.chunks(len).enumerate() {
                        axpy(1.0, grow, &mut gx[r * d + start..r * d + start + len]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if let Some(gp) = grads[p.0].as_mut() {
                        for (r, grow) in g.chunks(total).enumerate() {
                            axpy(1.0, &grow[offset..offset + w], &mut gp[r * w..(r + 1) * w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    if let Some(gp) = grads[p.0].as_mut() {
                        axpy(1.0, &g[offset..offset + n], gp);
                    }
                    offset += n;
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                if let Some(gl) = grads[logits.0].as_mut() {
                    let v = val(*logits).cols();
                    let mut counts = vec![0usize; val(*logits).rows()];
                    for &(r, t) in targets {
                        counts[r] += 1;
                        gl[r * v + t] -= g[0];
                    }
                    for (r, &c) in counts.iter().enumerate() {
                        if c > 0 {
                            axpy(g[0] * c as f64, &probs[r * v..(r + 1) * v], &mut gl[r * v..(r + 1) * v]);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LAYER_NORM_EPS;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let id = tape.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let r = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.matmul(a, zero).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0; 4]);
        let r = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(r).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradients_follow_transposes() {
        let mut tape = Tape::new();
        let a = tape.param(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.param(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        // g = ones, so dA = 1·Bᵀ row sums, dB = Aᵀ·1 column sums
        assert_eq!(tape.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn masked_softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
        let y = tape
            .masked_softmax(x, &Tensor::vector(&[1.0, 1.0, 1.0]))
            .unwrap();
        close(tape.value(y).data(), &[1.0 / 3.0; 3], 1e-15);

        let x = tape.constant(Tensor::vector(&[5.0, -3.0, 9.0]));
        let y = tape
            .masked_softmax(x, &Tensor::vector(&[0.0, 1.0, 0.0]))
            .unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0]);

        let x = tape.constant(Tensor::vector(&[1.0, 2.0]));
        let y = tape.masked_softmax(x, &Tensor::vector(&[1.0, 1.0])).unwrap();
        close(tape.value(y).data(), &[0.26894, 0.73106], 5e-6);
    }

    #[test]
    fn masked_softmax_rejects_fully_masked_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let mask = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            tape.masked_softmax(x, &mask),
            Err(Error::InvalidMask { row: 1 })
        ));
    }

    #[test]
    fn masked_softmax_propagates_non_finite_scores() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[&[f64::NAN, 1.0], &[0.0, 1.0]]));
        let y = tape.masked_softmax(x, &Tensor::full(&[2, 2], 1.0)).unwrap();
        assert!(tape.value(y).row(0).iter().all(|v| v.is_nan()));
        assert!(tape.value(y).row(1).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let ones3 = tape.constant(Tensor::full(&[3], 1.0));
        let zeros3 = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(Tensor::vector(&[1.0, 1.0, 1.0]));
        let y = tape.layer_norm(x, ones3, zeros3, LAYER_NORM_EPS).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let ones2 = tape.constant(Tensor::full(&[2], 1.0));
        let zeros2 = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(Tensor::vector(&[-1.0, 1.0]));
        let y = tape.layer_norm(x, ones2, zeros2, 0.0).unwrap();
        close(tape.value(y).data(), &[-1.0, 1.0], 1e-15);

        let fives = tape.constant(Tensor::full(&[2], 5.0));
        let x = tape.constant(Tensor::vector(&[0.0, 0.0]));
        let y = tape.layer_norm(x, ones2, fives, LAYER_NORM_EPS).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 5.0]);
    }

    #[test]
    fn cross_entropy_bag_mode_counts_repeats() {
        // f(a)=0.5, f(b)=0.25, f(c)=0.25 via logits ln f
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::vector(&[0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()]));
        let loss = tape.cross_entropy(logits, &[0, 0, 1]).unwrap();
        assert!((tape.value(loss).item() - 4.0 * 2f64.ln()).abs() < 1e-12);
        tape.backward(loss).unwrap();
        // 3·p − counts
        close(tape.grad(logits).unwrap(), &[1.5 - 2.0, 0.75 - 1.0, 0.75], 1e-12);
    }

    #[test]
    fn backward_reaches_unused_params_with_zeros() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(&[1.0, 2.0]));
        let unused = tape.param(Tensor::vector(&[3.0]));
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(&[1.0, 2.0]));
        let c = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let p = tape.mul(a, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_is_linear_over_summed_graphs() {
        let build = |tape: &mut Tape, which: u8| {
            let w = tape.param(m(&[&[0.3, -0.2], &[0.1, 0.7]]));
            let x = tape.constant(m(&[&[1.0, 2.0], &[-1.0, 0.5]]));
            let h = tape.matmul(x, w).unwrap();
            let g = tape.gelu(h);
            let s1 = tape.sum(g);
            let sq = tape.mul(h, h).unwrap();
            let s2 = tape.sum(sq);
            let root = match which {
                1 => s1,
                2 => s2,
                _ => tape.add(s1, s2).unwrap(),
            };
            tape.backward(root).unwrap();
            tape.grad(w).unwrap().to_vec()
        };
        let g1 = build(&mut Tape::new(), 1);
        let g2 = build(&mut Tape::new(), 2);
        let g12 = build(&mut Tape::new(), 0);
        let summed: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        close(&g12, &summed, 1e-12);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.param(m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let a = tape.slice_cols(x, 0, 1).unwrap();
        let b = tape.slice_cols(x, 1, 2).unwrap();
        let y = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let w = tape.constant(m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let p = tape.mul(y, w).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
