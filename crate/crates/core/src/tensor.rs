//! Dense row-major `f64` tensors and the small set of kernels the network needs.

use crate::error::{Error, Result};

/// A dense, row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the tensor as `channels x height x width`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::shape(format!("expected a 3-d tensor, got {other:?}"))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::shape(format!("expected a 2-d tensor, got {other:?}"))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{what}: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Slice of leading-axis entries `[start, end)`.
    pub fn narrow0(&self, start: usize, end: usize) -> Result<Self> {
        let lead = *self.shape.first().ok_or_else(|| Error::shape("narrow0 on 0-d"))?;
        if start > end || end > lead {
            return Err(Error::shape(format!("narrow0 {start}..{end} of {lead}")));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts of a, b and c.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-d convolution over a single `C x H x W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::shape(format!(
                "input {h}x{w} (padding {}) smaller than kernel {}",
                self.padding, self.kernel
            )));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }
}

/// Unfolds one group of input channels into `(cg * k * k) x (oh * ow)` columns.
#[allow(clippy::too_many_arguments)]
fn im2col(input: &[f64], h: usize, w: usize, geo: &ConvGeometry, group: usize, oh: usize, ow: usize, cols: &mut [f64]) {
    let cg = geo.in_per_group();
    let k = geo.kernel;
    let pad = geo.padding as isize;
    let plane = oh * ow;
    for ci in 0..cg {
        let chan = &input[(group * cg + ci) * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - pad;
                    let line = &mut dst[oy * ow..][..ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &chan[iy as usize * w..][..w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - pad;
                        *out = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds column gradients back onto one group of input channels (accumulating).
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    h: usize,
    w: usize,
    geo: &ConvGeometry,
    group: usize,
    oh: usize,
    ow: usize,
    grad_in: &mut [f64],
) {
    let cg = geo.in_per_group();
    let k = geo.kernel;
    let pad = geo.padding as isize;
    let plane = oh * ow;
    for ci in 0..cg {
        let chan = &mut grad_in[(group * cg + ci) * h * w..][..h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut chan[iy as usize * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geo: &ConvGeometry,
) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if c != geo.in_channels {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {c}",
            geo.in_channels
        )));
    }
    let (oh, ow) = geo.output_size(h, w)?;
    let cg = geo.in_per_group();
    let og = geo.out_per_group();
    let kk = cg * geo.kernel * geo.kernel;
    let plane = oh * ow;
    let mut out = vec![0.0; geo.out_channels * plane];
    let mut cols = vec![0.0; kk * plane];
    for g in 0..geo.groups {
        im2col(input.data(), h, w, geo, g, oh, ow, &mut cols);
        let wg = &weight.data()[g * og * kk..][..og * kk];
        gemm(
            og,
            kk,
            plane,
            wg,
            false,
            &cols,
            false,
            &mut out[g * og * plane..][..og * plane],
            0.0,
        );
    }
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[o];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(vec![geo.out_channels, oh, ow], out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`; each is computed only when requested.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geo: &ConvGeometry,
    need: [bool; 3],
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (_, h, w) = input.dims3().expect("conv input is 3-d");
    let (_, oh, ow) = grad_out.dims3().expect("conv output is 3-d");
    let cg = geo.in_per_group();
    let og = geo.out_per_group();
    let kk = cg * geo.kernel * geo.kernel;
    let plane = oh * ow;
    let mut gi = need[0].then(|| Tensor::zeros(input.shape()));
    let mut gw = need[1].then(|| Tensor::zeros(weight.shape()));
    let mut cols = vec![0.0; kk * plane];
    for g in 0..geo.groups {
        let go = &grad_out.data()[g * og * plane..][..og * plane];
        if let Some(gw) = gw.as_mut() {
            im2col(input.data(), h, w, geo, g, oh, ow, &mut cols);
            gemm(
                og,
                plane,
                kk,
                go,
                false,
                &cols,
                true,
                &mut gw.data_mut()[g * og * kk..][..og * kk],
                0.0,
            );
        }
        if let Some(gi) = gi.as_mut() {
            let wg = &weight.data()[g * og * kk..][..og * kk];
            gemm(kk, og, plane, wg, true, go, false, &mut cols, 0.0);
            col2im(&cols, h, w, geo, g, oh, ow, gi.data_mut());
        }
    }
    let gb = need[2].then(|| {
        Tensor::from_fn(&[geo.out_channels], |o| {
            grad_out.data()[o * plane..][..plane].iter().sum()
        })
    });
    (gi, gw, gb)
}

/// Per-axis interpolation taps for half-pixel-centre bilinear resampling.
#[derive(Clone, Debug)]
pub(crate) struct ResizeAxis {
    taps: Vec<(usize, usize, f64, f64)>,
}

impl ResizeAxis {
    pub(crate) fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let taps = (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let frac = src - i0 as f64;
                (i0, i1, 1.0 - frac, frac)
            })
            .collect();
        Self { taps }
    }
}

pub(crate) fn resize_forward(input: &Tensor, rows: &ResizeAxis, cols: &ResizeAxis) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let oh = rows.taps.len();
    let ow = cols.taps.len();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &input.data()[ch * h * w..][..h * w];
        let dst = &mut out[ch * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in rows.taps.iter().enumerate() {
            let r0 = &src[y0 * w..][..w];
            let r1 = &src[y1 * w..][..w];
            for (ox, &(x0, x1, wx0, wx1)) in cols.taps.iter().enumerate() {
                dst[oy * ow + ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub(crate) fn resize_backward(grad_out: &Tensor, in_shape: &[usize], rows: &ResizeAxis, cols: &ResizeAxis) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = rows.taps.len();
    let ow = cols.taps.len();
    let mut gi = Tensor::zeros(in_shape);
    for ch in 0..c {
        let go = &grad_out.data()[ch * oh * ow..][..oh * ow];
        let dst = &mut gi.data_mut()[ch * h * w..][..h * w];
        for (oy, &(y0, y1, wy0, wy1)) in rows.taps.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in cols.taps.iter().enumerate() {
                let g = go[oy * ow + ox];
                dst[y0 * w + x0] += g * wy0 * wx0;
                dst[y0 * w + x1] += g * wy0 * wx1;
                dst[y1 * w + x0] += g * wy1 * wx0;
                dst[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    gi
}

/// Bilinear resize of a `C x H x W` tensor with half-pixel centres (no antialiasing).
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, h, w) = input.dims3()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize with an empty side"));
    }
    resize_forward(input, &ResizeAxis::new(h, out_h), &ResizeAxis::new(w, out_w))
}
