//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output and whatever it needs for the
//! backward rule, so node order is a topological order by construction and
//! `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::{col2im, im2col, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm node normalizes and whether it touches running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Running statistics used for normalization and left untouched, while
    /// gamma/beta may still train. This is how a frozen extractor runs.
    TrainFrozenStats,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::ZERO; channels],
            var: vec![T::ONE; channels],
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Scale(Var, T),
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
    Relu(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Tensor<T>,
        probs: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(t: &Tensor<impl Scalar>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        [b, c] => Ok((b, c, 1, 1)),
        ref s => Err(Error::shape(op, format!("expected [B,C,H,W] or [B,C], got {s:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Clear all gradient buffers so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, rg, Op::Add(a, b), "add")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale(x, c), "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, rg, Op::Sum(x), "sum")
    }

    /// `sum(x ⊙ weights)` with constant weights; handy for reducing any output to a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != weights.shape() {
            return Err(Error::shape("weighted_sum", format!("{:?} vs {:?}", vx.shape(), weights.shape())));
        }
        let s = vx.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::WeightedSum { x, weights }, "weighted_sum")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu(x), "relu")
    }

    /// `x [B×in] · wᵀ + b`, with `w [out×in]` and `b [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 2 || vw.rank() != 2 || vx.dim(1) != vw.dim(1) {
            return Err(Error::shape(
                "dense",
                format!("input {:?} with weight {:?}", vx.shape(), vw.shape()),
            ));
        }
        let (batch, inp, outp) = (vx.dim(0), vx.dim(1), vw.dim(0));
        let mut out = Tensor::zeros(&[batch, outp]);
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [outp] {
                return Err(Error::shape("dense", format!("bias {:?} for {outp} outputs", vb.shape())));
            }
            for r in 0..batch {
                out.row_mut(r).copy_from_slice(vb.data());
            }
        }
        T::gemm(
            batch,
            inp,
            outp,
            T::ONE,
            vx.data(),
            inp as isize,
            1,
            vw.data(),
            1,
            inp as isize,
            T::ONE,
            out.data_mut(),
            outp as isize,
            1,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, rg, Op::Dense { x, w, b }, "dense")
    }

    /// 2-D convolution without bias: `x [B,C,H,W]`, `w [O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (batch, in_ch, in_h, in_w) = match *vx.shape() {
            [b, c, h, w] => (b, c, h, w),
            ref s => return Err(Error::shape("conv2d", format!("input must be [B,C,H,W], got {s:?}"))),
        };
        let (out_ch, kernel) = match *vw.shape() {
            [o, c, k1, k2] if c == in_ch && k1 == k2 => (o, k1),
            ref s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight {s:?} incompatible with {in_ch} input channels"),
                ))
            }
        };
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if kernel > in_h + 2 * pad || kernel > in_w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel} larger than padded input {}x{}", in_h + 2 * pad, in_w + 2 * pad),
            ));
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::ZERO; rows * cols_n];
        let mut out = Tensor::zeros(&[batch, out_ch, geom.out_h, geom.out_w]);
        let out_plane = geom.out_plane();
        for b in 0..batch {
            im2col(&geom, vx.outer(b), &mut cols);
            T::gemm(
                out_ch,
                rows,
                cols_n,
                T::ONE,
                vw.data(),
                rows as isize,
                1,
                &cols,
                cols_n as isize,
                1,
                T::ZERO,
                &mut out.data_mut()[b * out_plane..(b + 1) * out_plane],
                cols_n as isize,
                1,
            );
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(out, rg, Op::Conv2d { x, w, geom }, "conv2d")
    }

    /// Per-channel batch normalization over `[B,C,H,W]` (or `[B,C]`).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, running: &mut RunningStats<T>, mode: BnMode) -> Result<Var> {
        let vx = self.value(x);
        let (batch, ch, h, w) = dims4(vx, "batch_norm")?;
        if self.value(gamma).shape() != [ch] || self.value(beta).shape() != [ch] {
            return Err(Error::shape("batch_norm", format!("affine params must be [{ch}]")));
        }
        if running.mean.len() != ch || running.var.len() != ch {
            return Err(Error::shape("batch_norm", format!("running stats must have {ch} channels")));
        }
        let hw = h * w;
        let count = batch * hw;
        let batch_stats = mode == BnMode::Train;
        if batch_stats && count < 2 {
            return Err(Error::invalid("batch_norm", "training mode needs more than one value per channel"));
        }
        let eps = T::from_f64(BN_EPS);
        let mut mean = vec![T::ZERO; ch];
        let mut var = vec![T::ZERO; ch];
        if batch_stats {
            let n = T::from_f64(count as f64);
            for c in 0..ch {
                let mut s = T::ZERO;
                for b in 0..batch {
                    let off = (b * ch + c) * hw;
                    s += vx.data()[off..off + hw].iter().copied().sum::<T>();
                }
                let m = s / n;
                let mut sq = T::ZERO;
                for b in 0..batch {
                    let off = (b * ch + c) * hw;
                    for &v in &vx.data()[off..off + hw] {
                        let d = v - m;
                        sq += d * d;
                    }
                }
                mean[c] = m;
                var[c] = sq / n;
            }
        } else {
            mean.copy_from_slice(&running.mean);
            var.copy_from_slice(&running.var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::ZERO; vx.len()];
        let mut out = Tensor::zeros(vx.shape());
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * hw;
                let (m, is, gc, bc) = (mean[c], inv_std[c], g[c], bt[c]);
                let src = &vx.data()[off..off + hw];
                let xh = &mut xhat[off..off + hw];
                for (dst, &v) in xh.iter_mut().zip(src) {
                    *dst = (v - m) * is;
                }
                for (o, &v) in out.data_mut()[off..off + hw].iter_mut().zip(xh.iter()) {
                    *o = v * gc + bc;
                }
            }
        }
        if batch_stats {
            let mom = T::from_f64(BN_MOMENTUM);
            let unbias = T::from_f64(count as f64 / (count as f64 - 1.0));
            for c in 0..ch {
                running.mean[c] = (T::ONE - mom) * running.mean[c] + mom * mean[c];
                running.var[c] = (T::ONE - mom) * running.var[c] + mom * var[c] * unbias;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            "batch_norm",
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (batch, ch, h, w) = match *vx.shape() {
            [b, c, h, w] => (b, c, h, w),
            ref s => return Err(Error::shape("global_avg_pool", format!("expected [B,C,H,W], got {s:?}"))),
        };
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let data = vx
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![batch, ch], data)?;
        let rg = self.rg(x);
        self.push(out, rg, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    /// Concatenate along `axis`; inputs appear in the output in argument order.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
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
                let chunk = t.dim(axis) * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            out,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Mean over the batch of `-Σ_c targets[i,c] · log softmax(logits)[i,c]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 2 || vl.shape() != targets.shape() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} vs targets {:?}", vl.shape(), targets.shape()),
            ));
        }
        let (batch, classes) = (vl.dim(0), vl.dim(1));
        if batch == 0 || classes == 0 {
            return Err(Error::invalid("softmax_cross_entropy", "empty batch"));
        }
        for i in 0..batch {
            let s: f64 = targets.row(i).iter().map(|v| v.to_f64()).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(
                    "softmax_cross_entropy",
                    format!("target row {i} sums to {s}, expected 1"),
                ));
            }
        }
        let probs = crate::loss::softmax_rows(vl);
        let mut total = T::ZERO;
        for i in 0..batch {
            let row = vl.row(i);
            let lse = crate::loss::log_sum_exp(row);
            for (c, &t) in targets.row(i).iter().enumerate() {
                if t != T::ZERO {
                    total -= t * (row[c] - lse);
                }
            }
        }
        let loss = total / T::from_f64(batch as f64);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy { logits, targets, probs },
            "softmax_cross_entropy",
        )
    }

    /// Populate gradients of every node that requires one, seeded with
    /// d(root)/d(root) = 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let rshape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(rshape));
        }
        self.backward_done = true;
        if !self.rg(root) {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::full(&rshape, T::ONE));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop(idx, &op, &grad)?;
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&mut self, idx: usize, op: &Op<T>, grad: &Tensor<T>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, grad.clone());
                self.accumulate(*b, grad.clone());
            }
            Op::Scale(x, c) => {
                let c = *c;
                let g = grad.map(|v| v * c);
                self.accumulate(*x, g);
            }
            Op::Sum(x) => {
                let g0 = grad.item();
                let g = Tensor::full(self.value(*x).shape(), g0);
                self.accumulate(*x, g);
            }
            Op::WeightedSum { x, weights } => {
                let g0 = grad.item();
                let g = weights.map(|w| w * g0);
                self.accumulate(*x, g);
            }
            Op::Relu(x) => {
                let out = &self.nodes[idx].value;
                let data = grad
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &o)| if o > T::ZERO { g } else { T::ZERO })
                    .collect();
                let g = Tensor::new(grad.shape().to_vec(), data)?;
                self.accumulate(*x, g);
            }
            Op::Dense { x, w, b } => self.backprop_dense(*x, *w, *b, grad),
            Op::Conv2d { x, w, geom } => self.backprop_conv(*x, *w, geom, grad),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => self.backprop_bn(*x, *gamma, *beta, xhat, inv_std, *batch_stats, grad),
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape().to_vec();
                let hw = shape[2] * shape[3];
                let inv = T::from_f64(1.0 / hw as f64);
                let mut g = Tensor::zeros(&shape);
                for (plane, &gv) in g.data_mut().chunks_exact_mut(hw).zip(grad.data()) {
                    plane.fill(gv * inv);
                }
                self.accumulate(*x, g);
            }
            Op::Concat { inputs, axis } => {
                let shape = grad.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let vshape = self.value(v).shape().to_vec();
                    let chunk = vshape[*axis] * inner;
                    if self.rg(v) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total + offset;
                            data.extend_from_slice(&grad.data()[start..start + chunk]);
                        }
                        self.accumulate(v, Tensor::new(vshape, data)?);
                    }
                    offset += chunk;
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let (batch, classes) = (probs.dim(0), probs.dim(1));
                let scale = grad.item() / T::from_f64(batch as f64);
                let mut g = Tensor::zeros(&[batch, classes]);
                for i in 0..batch {
                    let tsum: T = targets.row(i).iter().copied().sum();
                    let (p, t) = (probs.row(i), targets.row(i));
                    for (c, dst) in g.row_mut(i).iter_mut().enumerate() {
                        *dst = (p[c] * tsum - t[c]) * scale;
                    }
                }
                self.accumulate(*logits, g);
            }
        }
        Ok(())
    }

    fn backprop_dense(&mut self, x: Var, w: Var, b: Option<Var>, grad: &Tensor<T>) {
        let (batch, outp) = (grad.dim(0), grad.dim(1));
        let inp = self.value(x).dim(1);
        if self.rg(x) {
            let mut dx = Tensor::zeros(&[batch, inp]);
            T::gemm(
                batch,
                outp,
                inp,
                T::ONE,
                grad.data(),
                outp as isize,
                1,
                self.value(w).data(),
                inp as isize,
                1,
                T::ZERO,
                dx.data_mut(),
                inp as isize,
                1,
            );
            self.accumulate(x, dx);
        }
        if self.rg(w) {
            let mut dw = Tensor::zeros(&[outp, inp]);
            T::gemm(
                outp,
                batch,
                inp,
                T::ONE,
                grad.data(),
                1,
                outp as isize,
                self.value(x).data(),
                inp as isize,
                1,
                T::ZERO,
                dw.data_mut(),
                inp as isize,
                1,
            );
            self.accumulate(w, dw);
        }
        if let Some(b) = b.filter(|&b| self.rg(b)) {
            let mut db = Tensor::zeros(&[outp]);
            for i in 0..batch {
                for (d, &g) in db.data_mut().iter_mut().zip(grad.row(i)) {
                    *d += g;
                }
            }
            self.accumulate(b, db);
        }
    }

    fn backprop_conv(&mut self, x: Var, w: Var, geom: &ConvGeom, grad: &Tensor<T>) {
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let (need_dx, need_dw) = (self.rg(x), self.rg(w));
        let mut cols = vec![T::ZERO; rows * cols_n];
        let mut dcols = vec![T::ZERO; rows * cols_n];
        let mut dw = need_dw.then(|| Tensor::zeros(self.value(w).shape()));
        let mut dx = need_dx.then(|| Tensor::zeros(self.value(x).shape()));
        let out_plane = geom.out_plane();
        let in_plane = geom.in_plane();
        for b in 0..geom.batch {
            let gout = &grad.data()[b * out_plane..(b + 1) * out_plane];
            if let Some(dw) = dw.as_mut() {
                im2col(geom, self.value(x).outer(b), &mut cols);
                T::gemm(
                    geom.out_ch,
                    cols_n,
                    rows,
                    T::ONE,
                    gout,
                    cols_n as isize,
                    1,
                    &cols,
                    1,
                    cols_n as isize,
                    T::ONE,
                    dw.data_mut(),
                    rows as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    rows,
                    geom.out_ch,
                    cols_n,
                    T::ONE,
                    self.value(w).data(),
                    1,
                    rows as isize,
                    gout,
                    cols_n as isize,
                    1,
                    T::ZERO,
                    &mut dcols,
                    cols_n as isize,
                    1,
                );
                col2im(geom, &dcols, &mut dx.data_mut()[b * in_plane..(b + 1) * in_plane]);
            }
        }
        if let Some(dw) = dw {
            self.accumulate(w, dw);
        }
        if let Some(dx) = dx {
            self.accumulate(x, dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_bn(&mut self, x: Var, gamma: Var, beta: Var, xhat: &[T], inv_std: &[T], batch_stats: bool, grad: &Tensor<T>) {
        let shape = grad.shape().to_vec();
        let (batch, ch) = (shape[0], shape[1]);
        let hw: usize = shape[2..].iter().product();
        let mut dgamma = vec![T::ZERO; ch];
        let mut dbeta = vec![T::ZERO; ch];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * hw;
                for (&g, &xh) in grad.data()[off..off + hw].iter().zip(&xhat[off..off + hw]) {
                    dgamma[c] += g * xh;
                    dbeta[c] += g;
                }
            }
        }
        if self.rg(x) {
            let gam = self.value(gamma).data().to_vec();
            let mut dx = Tensor::zeros(&shape);
            let n = T::from_f64((batch * hw) as f64);
            for b in 0..batch {
                for c in 0..ch {
                    let off = (b * ch + c) * hw;
                    let scale = gam[c] * inv_std[c];
                    let src = &grad.data()[off..off + hw];
                    let dst = &mut dx.data_mut()[off..off + hw];
                    if batch_stats {
                        // dx = γ·σ⁻¹/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
                        let (sum_dy, sum_dy_xh) = (dbeta[c], dgamma[c]);
                        for ((d, &g), &xh) in dst.iter_mut().zip(src).zip(&xhat[off..off + hw]) {
                            *d = scale / n * (n * g - sum_dy - xh * sum_dy_xh);
                        }
                    } else {
                        for (d, &g) in dst.iter_mut().zip(src) {
                            *d = g * scale;
                        }
                    }
                }
            }
            self.accumulate(x, dx);
        }
        if self.rg(gamma) {
            self.accumulate(gamma, Tensor::from_fn(&[ch], |i| dgamma[i]));
        }
        if self.rg(beta) {
            self.accumulate(beta, Tensor::from_fn(&[ch], |i| dbeta[i]));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap(), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_twice_is_an_error_until_reset() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[3], 1.0), true).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[3], 1.0), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn constant_receives_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 2], 1.0), true).unwrap();
        let w = g.constant(Tensor::full(&[3, 2], 0.5)).unwrap();
        let y = g.dense(x, w, None).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[2], 3.0), true).unwrap();
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_keeps_argument_order() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_fn(&[1, 8], |i| i as f32)).unwrap();
        let b = g.constant(Tensor::from_fn(&[1, 8], |i| 100.0 + i as f32)).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        let v = g.value(c);
        assert_eq!(v.shape(), &[1, 16]);
        assert_eq!(&v.data()[..8], g.value(a).data());
        assert_eq!(&v.data()[8..], g.value(b).data());
    }

    #[test]
    fn frozen_stats_batch_norm_is_repeatable_and_leaves_stats() {
        let x = Tensor::<f32>::from_fn(&[4, 2, 3, 3], |i| ((i * 37) % 11) as f32 * 0.3 - 1.0);
        let mut stats = RunningStats {
            mean: vec![0.2, -0.1],
            var: vec![1.5, 0.7],
        };
        let before = stats.clone();
        let mut outs = Vec::new();
        for _ in 0..2 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let ga = g.leaf(Tensor::full(&[2], 1.2), true).unwrap();
            let be = g.leaf(Tensor::full(&[2], 0.1), true).unwrap();
            let y = g.batch_norm(xv, ga, be, &mut stats, BnMode::TrainFrozenStats).unwrap();
            outs.push(g.value(y).clone());
        }
        assert_eq!(outs[0], outs[1]);
        assert_eq!(stats, before);
    }

    #[test]
    fn train_batch_norm_updates_running_stats() {
        let x = Tensor::<f64>::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let mut stats = RunningStats::new(1);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let ga = g.constant(Tensor::full(&[1], 1.0)).unwrap();
        let be = g.constant(Tensor::full(&[1], 0.0)).unwrap();
        let y = g.batch_norm(xv, ga, be, &mut stats, BnMode::Train).unwrap();
        // mean 2, biased var 1, unbiased var 2
        assert!((stats.mean[0] - 0.2).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 + 0.2)).abs() < 1e-12);
        let out = g.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-4 && (out[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        let w = g.constant(Tensor::zeros(&[1, 1, 5, 5])).unwrap();
        assert!(matches!(g.conv2d(x, w, 1, 1), Err(Error::Shape { .. })));
        assert!(g.conv2d(x, w, 1, 2).is_ok());
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = Graph::<f32>::new();
        let x = Tensor::from_fn(&[2, 1, 4, 4], |i| i as f32);
        let xv = g.constant(x.clone()).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let w = g.constant(k).unwrap();
        let y = g.conv2d(xv, w, 1, 1).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2], f32::MAX)).unwrap();
        assert!(matches!(g.add(x, x), Err(Error::NonFinite { op: "add" })));
    }
}
