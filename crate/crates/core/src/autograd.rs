//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter the
//! tape by reference, so recording a pass over a large model does not copy its
//! weights. Nodes that do not depend on a gradient-tracked leaf are marked as
//! constant and are skipped entirely during [`Tape::backward`].

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, ConvGeometry, ResizeAxis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x + b` with `b` repeated periodically over `x`.
    AddTiled(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Clamp01(Var),
    CurveStep(Var, Var),
    Gather(Var, Arc<[usize]>),
    Reshape(Var),
    Concat(Vec<Var>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        row: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    Resize {
        x: Var,
        rows: ResizeAxis,
        cols: ResizeAxis,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: HashMap<ParamId, Var>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// One projection step. For `x` in `[0, 1]` the exact result stays in `[0, 1]`;
/// the clamp only absorbs rounding at the interval ends.
#[inline]
pub(crate) fn curve_value(x: f64, illum: f64) -> f64 {
    let y = x + illum * x * (1.0 - x);
    if (0.0..=1.0).contains(&x) {
        y.clamp(0.0, 1.0)
    } else {
        y
    }
}

#[inline]
fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A gradient-tracked input owned by the tape.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Registers a trainable parameter. Repeated calls with the same id return
    /// the same leaf, so a tape assumes a single trainable store.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// A parameter that receives no gradient (frozen weights).
    pub fn frozen(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.constant_ref(store.get(id))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b), what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_tiled(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).len();
        let p = self.value(b).len();
        if p == 0 || !n.is_multiple_of(p) {
            return Err(Error::shape(format!(
                "add_tiled: period {p} does not divide length {n}"
            )));
        }
        let bd = self.value(b).data();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += bd[i % p];
        }
        Ok(self.push_op(v, Op::AddTiled(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|e| e * s);
        self.push_op(v, Op::Scale(x, s), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|e| leaky(e, slope));
        self.push_op(v, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push_op(v, Op::Tanh(x), &[x])
    }

    /// Clamp to `[0, 1]`; the gradient is zero where the input lies outside.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.clamp(0.0, 1.0));
        self.push_op(v, Op::Clamp01(x), &[x])
    }

    /// One curve projection `x + illum * x * (1 - x)`.
    pub fn curve_step(&mut self, x: Var, illum: Var) -> Result<Var> {
        self.same_shape(x, illum, "curve_step")?;
        let v = self.value(x).zip_map(self.value(illum), curve_value)?;
        Ok(self.push_op(v, Op::CurveStep(x, illum), &[x, illum]))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape(format!(
                "gather: {} indices for shape {shape:?}",
                index.len()
            )));
        }
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(format!(
                "gather index {bad} out of bounds for {}",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push_op(v, Op::Gather(x, index), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(v, Op::Reshape(x), &[x]))
    }

    /// Leading-axis range `[start, end)`.
    pub fn narrow0(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x).narrow0(start, end)?;
        let inner: usize = t.shape()[1..].iter().product();
        let index: Arc<[usize]> = (start * inner..end * inner).collect();
        let shape = t.shape().to_vec();
        self.gather(x, index, &shape)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat: trailing shape {:?} vs {:?}",
                    &s[1..],
                    tail
                )));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Tensor::new(shape, data)?;
        Ok(self.push_op(v, Op::Concat(parts.to_vec()), parts))
    }

    /// `x @ w^T + b` for `x: n x in`, `w: out x in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(x).dims2()?;
        let (dout, win) = self.value(w).dims2()?;
        if din != win {
            return Err(Error::shape(format!("linear: input dim {din}, weight expects {win}")));
        }
        if let Some(b) = b {
            if self.value(b).len() != dout {
                return Err(Error::shape("linear: bias length"));
            }
        }
        let mut out = vec![0.0; n * dout];
        tensor::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bd).for_each(|(o, &bv)| *o += bv);
            }
        }
        let v = Tensor::new(vec![n, dout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push_op(v, Op::Linear { x, w, b }, &parents))
    }

    /// Batched matrix product over the leading axis; with `trans_b` computes `a @ b^T`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ba, n, k) = dims3_of(self.value(a))?;
        let (bb, r, c) = dims3_of(self.value(b))?;
        let (kb, m) = if trans_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb {
            return Err(Error::shape(format!(
                "bmm: {:?} x {:?} (trans_b={trans_b})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; ba * n * m];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        for i in 0..ba {
            tensor::gemm(
                n,
                k,
                m,
                &ad[i * n * k..][..n * k],
                false,
                &bd[i * k * m..][..k * m],
                trans_b,
                &mut out[i * n * m..][..n * m],
                0.0,
            );
        }
        let v = Tensor::new(vec![ba, n, m], out)?;
        Ok(self.push_op(
            v,
            Op::Bmm {
                a,
                b,
                batch: ba,
                n,
                k,
                m,
                trans_b,
            },
            &[a, b],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let row = *self.shape(x).last().ok_or_else(|| Error::shape("softmax of 0-d"))?;
        let mut v = self.value(x).clone();
        for r in v.data_mut().chunks_mut(row) {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in r.iter_mut() {
                *e = (*e - mx).exp();
                s += *e;
            }
            r.iter_mut().for_each(|e| *e /= s);
        }
        Ok(self.push_op(v, Op::Softmax { x, row }, &[x]))
    }

    /// Layer normalization over the last axis of a 2-d tensor.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm: affine parameters do not match width"));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = &xd[r * d..][..d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let v = Tensor::new(vec![n, d], out)?;
        let xhat = Tensor::new(vec![n, d], xhat)?;
        Ok(self.push_op(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let ws = self.shape(w);
        let expect = [geo.out_channels, geo.in_channels / geo.groups, geo.kernel, geo.kernel];
        if ws != expect {
            return Err(Error::shape(format!("conv weight {ws:?}, expected {expect:?}")));
        }
        let v = tensor::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geo)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push_op(v, Op::Conv2d { x, w, b, geo }, &parents))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3()?;
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize with an empty side"));
        }
        let rows = ResizeAxis::new(h, out_h);
        let cols = ResizeAxis::new(w, out_w);
        let v = tensor::resize_forward(self.value(x), &rows, &cols)?;
        Ok(self.push_op(v, Op::Resize { x, rows, cols }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push_op(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        self.push_op(v, Op::Mean(x), &[x])
    }

    /// Gradients of the scalar `root` with respect to every tracked leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        debug_assert_eq!(t.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &t),
            slot @ None => *slot = Some(t),
        }
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = node.value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.wants(p) {
                        self.accumulate(grads, p, g.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|e| -e));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let t = g.zip_map(self.value(*b), |x, y| x * y).expect("same shape");
                    self.accumulate(grads, *a, t);
                }
                if self.wants(*b) {
                    let t = g.zip_map(self.value(*a), |x, y| x * y).expect("same shape");
                    self.accumulate(grads, *b, t);
                }
            }
            Op::AddTiled(x, b) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let bs = self.shape(*b);
                    let p = self.value(*b).len();
                    let mut t = Tensor::zeros(bs);
                    for (i, &e) in g.data().iter().enumerate() {
                        t.data_mut()[i % p] += e;
                    }
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|e| e * s));
            }
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                let t = g
                    .zip_map(self.value(*x), |ge, xe| if xe > 0.0 { ge } else { slope * ge })
                    .expect("same shape");
                self.accumulate(grads, *x, t);
            }
            Op::Tanh(x) => {
                let t = g.zip_map(y, |ge, ye| ge * (1.0 - ye * ye)).expect("same shape");
                self.accumulate(grads, *x, t);
            }
            Op::Clamp01(x) => {
                let t = g
                    .zip_map(
                        self.value(*x),
                        |ge, xe| {
                            if (0.0..=1.0).contains(&xe) {
                                ge
                            } else {
                                0.0
                            }
                        },
                    )
                    .expect("same shape");
                self.accumulate(grads, *x, t);
            }
            Op::CurveStep(x, illum) => {
                let xv = self.value(*x);
                let iv = self.value(*illum);
                if self.wants(*x) {
                    let t = Tensor::from_fn(xv.shape(), |i| {
                        let (xe, ie) = (xv.data()[i], iv.data()[i]);
                        g.data()[i] * (1.0 + ie * (1.0 - 2.0 * xe))
                    });
                    self.accumulate(grads, *x, t);
                }
                if self.wants(*illum) {
                    let t = Tensor::from_fn(xv.shape(), |i| {
                        let xe = xv.data()[i];
                        g.data()[i] * xe * (1.0 - xe)
                    });
                    self.accumulate(grads, *illum, t);
                }
            }
            Op::Gather(x, index) => {
                let mut t = Tensor::zeros(self.shape(*x));
                let td = t.data_mut();
                for (&src, &e) in index.iter().zip(g.data()) {
                    td[src] += e;
                }
                self.accumulate(grads, *x, t);
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(self.shape(*x)).expect("reshape back");
                self.accumulate(grads, *x, t);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let t = Tensor::new(s.to_vec(), g.data()[offset..offset + n].to_vec()).expect("concat split");
                        self.accumulate(grads, p, t);
                    }
                    offset += n;
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2().expect("2-d");
                let dout = g.shape()[1];
                if self.wants(*x) {
                    let mut t = vec![0.0; n * din];
                    tensor::gemm(n, dout, din, g.data(), false, self.value(*w).data(), false, &mut t, 0.0);
                    self.accumulate(grads, *x, Tensor::new(vec![n, din], t).expect("shape"));
                }
                if self.wants(*w) {
                    let mut t = vec![0.0; dout * din];
                    tensor::gemm(dout, n, din, g.data(), true, self.value(*x).data(), false, &mut t, 0.0);
                    self.accumulate(grads, *w, Tensor::new(vec![dout, din], t).expect("shape"));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut t = Tensor::zeros(self.shape(*b));
                        for row in g.data().chunks(dout) {
                            t.data_mut().iter_mut().zip(row).for_each(|(a, &e)| *a += e);
                        }
                        self.accumulate(grads, *b, t);
                    }
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                n,
                k,
                m,
                trans_b,
            } => {
                let (batch, n, k, m) = (*batch, *n, *k, *m);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let gd = g.data();
                if self.wants(*a) {
                    let mut t = Tensor::zeros(self.shape(*a));
                    for i in 0..batch {
                        let gi = &gd[i * n * m..][..n * m];
                        let bi = &bd[i * k * m..][..k * m];
                        let ti = &mut t.data_mut()[i * n * k..][..n * k];
                        // trans_b: b is m x k, so dA = dC @ b; otherwise b is k x m and dA = dC @ b^T
                        tensor::gemm(n, m, k, gi, false, bi, !*trans_b, ti, 0.0);
                    }
                    self.accumulate(grads, *a, t);
                }
                if self.wants(*b) {
                    let mut t = Tensor::zeros(self.shape(*b));
                    for i in 0..batch {
                        let gi = &gd[i * n * m..][..n * m];
                        let ai = &ad[i * n * k..][..n * k];
                        let ti = &mut t.data_mut()[i * k * m..][..k * m];
                        if *trans_b {
                            tensor::gemm(m, n, k, gi, true, ai, false, ti, 0.0);
                        } else {
                            tensor::gemm(k, n, m, ai, true, gi, false, ti, 0.0);
                        }
                    }
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Softmax { x, row } => {
                let row = *row;
                let mut t = g.clone();
                for (tr, yr) in t.data_mut().chunks_mut(row).zip(y.data().chunks(row)) {
                    let dot: f64 = tr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (te, &ye) in tr.iter_mut().zip(yr) {
                        *te = ye * (*te - dot);
                    }
                }
                self.accumulate(grads, *x, t);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.dims2().expect("2-d");
                let gd = g.data();
                let hd = xhat.data();
                if self.wants(*gamma) {
                    let mut t = Tensor::zeros(self.shape(*gamma));
                    for r in 0..n {
                        for j in 0..d {
                            t.data_mut()[j] += gd[r * d + j] * hd[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gamma, t);
                }
                if self.wants(*beta) {
                    let mut t = Tensor::zeros(self.shape(*beta));
                    for row in gd.chunks(d) {
                        t.data_mut().iter_mut().zip(row).for_each(|(a, &e)| *a += e);
                    }
                    self.accumulate(grads, *beta, t);
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let mut t = vec![0.0; n * d];
                    for r in 0..n {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gam[j];
                            s1 += dh;
                            s2 += dh * hd[r * d + j];
                        }
                        let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                        for j in 0..d {
                            let dh = gd[r * d + j] * gam[j];
                            t[r * d + j] = inv_std[r] * (dh - m1 - hd[r * d + j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, d], t).expect("shape"));
                }
            }
            Op::Conv2d { x, w, b, geo } => {
                let need = [self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b))];
                let (gi, gw, gb) = tensor::conv2d_backward(self.value(*x), self.value(*w), g, geo, need);
                if let Some(t) = gi {
                    self.accumulate(grads, *x, t);
                }
                if let Some(t) = gw {
                    self.accumulate(grads, *w, t);
                }
                if let (Some(b), Some(t)) = (b, gb) {
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Resize { x, rows, cols } => {
                let t = tensor::resize_backward(g, self.shape(*x), rows, cols);
                self.accumulate(grads, *x, t);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1);
                let s = g.data()[0] / n as f64;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), s));
            }
        }
    }

    /// Collects the gradient of every registered parameter, indexed by [`ParamId`].
    pub fn param_grads(&self, grads: &Gradients, num_params: usize) -> Vec<Option<Tensor>> {
        let mut out = vec![None; num_params];
        for (&id, &v) in &self.params {
            if let Some(g) = grads.wrt(v) {
                out[id.index()] = Some(g.clone());
            }
        }
        out
    }
}

fn dims3_of(t: &Tensor) -> Result<(usize, usize, usize)> {
    t.dims3()
}
