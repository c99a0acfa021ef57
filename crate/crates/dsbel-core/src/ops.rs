//! Layer primitives with explicit forward and backward kernels.
//!
//! Convolution is realized as im2col plus a small dense matmul; pooling and
//! the rest are direct loops. Everything is deterministic and sequential.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};
use rand::Rng;

// ---------------------------------------------------------------------------
// small dense matrices (flat row-major), used for im2col and classifier heads
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Mat<T: Scalar = f32> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len());
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// c[m x n] += a[m x k] * b[k x n]
pub fn matmul_nn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m x n] += a[m x k] * b[n x k]^T
pub fn matmul_nt<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[m x n] += a[k x m]^T * b[k x n]
pub fn matmul_tn<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

/// Geometry of a 2-D (optionally dilated) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// (kernel height, kernel width)
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    /// zero padding per side, (vertical, horizontal)
    pub pad: (usize, usize),
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, k: usize, pad: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            dilation,
            pad: (pad, pad),
        }
    }

    /// Kernel extent once dilation spreads the taps apart.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            (self.kernel.0 - 1) * self.dilation + 1,
            (self.kernel.1 - 1) * self.dilation + 1,
        )
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (eh, ew) = self.effective_kernel();
        let ph = h + 2 * self.pad.0;
        let pw = w + 2 * self.pad.1;
        if eh > ph || ew > pw {
            return Err(Error::Config(format!(
                "effective kernel {}x{} exceeds padded input {}x{}",
                eh, ew, ph, pw
            )));
        }
        Ok(((ph - eh) / self.stride + 1, (pw - ew) / self.stride + 1))
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1
    }
}

/// A convolution layer: spec plus its filter bank and per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar = f32> {
    pub spec: ConvSpec,
    /// (out_channels, in_channels, kh, kw), row-major
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T: Scalar = f32> {
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(spec: ConvSpec) -> Self {
        Conv2d {
            spec,
            weight: vec![T::zero(); spec.weight_count()],
            bias: vec![T::zero(); spec.out_channels],
        }
    }

    /// He-uniform weights (bound sqrt(6 / fan_in)), zero bias.
    pub fn init<R: Rng>(spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = (spec.in_channels * spec.kernel.0 * spec.kernel.1) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = (0..spec.weight_count())
            .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        Conv2d {
            spec,
            weight,
            bias: vec![T::zero(); spec.out_channels],
        }
    }

    pub fn grads_zero(&self) -> ConvGrads<T> {
        ConvGrads {
            dweight: vec![T::zero(); self.weight.len()],
            dbias: vec![T::zero(); self.bias.len()],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            spec: self.spec,
            weight: self.weight.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = &self.spec;
        if x.shape.c != s.in_channels {
            return Err(Error::Shape(format!(
                "conv2d expects {} input channels, got {}",
                s.in_channels, x.shape.c
            )));
        }
        let (oh, ow) = s.out_dims(x.shape.h, x.shape.w)?;
        let k = s.in_channels * s.kernel.0 * s.kernel.1;
        let ohw = oh * ow;
        let mut out = Tensor::zeros(Shape::new(x.shape.n, s.out_channels, oh, ow));
        let mut col = vec![T::zero(); k * ohw];
        for n in 0..x.shape.n {
            im2col(x, n, s, oh, ow, &mut col);
            let dst = &mut out.data[n * s.out_channels * ohw..(n + 1) * s.out_channels * ohw];
            matmul_nn(dst, &self.weight, &col, s.out_channels, k, ohw);
            for oc in 0..s.out_channels {
                let b = self.bias[oc];
                for v in &mut dst[oc * ohw..(oc + 1) * ohw] {
                    *v += b;
                }
            }
        }
        Ok(out)
    }

    /// Returns the input gradient and accumulates weight/bias gradients.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut ConvGrads<T>) -> Tensor<T> {
        let s = &self.spec;
        let (oh, ow) = (dy.shape.h, dy.shape.w);
        let k = s.in_channels * s.kernel.0 * s.kernel.1;
        let ohw = oh * ow;
        let mut dx = Tensor::zeros(x.shape);
        let mut col = vec![T::zero(); k * ohw];
        let mut dcol = vec![T::zero(); k * ohw];
        for n in 0..x.shape.n {
            let dyn_ = &dy.data[n * s.out_channels * ohw..(n + 1) * s.out_channels * ohw];
            // bias grads
            for oc in 0..s.out_channels {
                let mut acc = T::zero();
                for v in &dyn_[oc * ohw..(oc + 1) * ohw] {
                    acc += *v;
                }
                grads.dbias[oc] += acc;
            }
            // weight grads: dW += dy * col^T
            im2col(x, n, s, oh, ow, &mut col);
            matmul_nt(&mut grads.dweight, dyn_, &col, s.out_channels, ohw, k);
            // input grads: dcol = W^T * dy, then scatter
            dcol.iter_mut().for_each(|v| *v = T::zero());
            matmul_tn(&mut dcol, &self.weight, dyn_, k, s.out_channels, ohw);
            col2im(&mut dx, n, s, oh, ow, &dcol);
        }
        dx
    }
}

fn im2col<T: Scalar>(x: &Tensor<T>, n: usize, s: &ConvSpec, oh: usize, ow: usize, col: &mut [T]) {
    let (kh, kw) = s.kernel;
    let (h, w) = (x.shape.h, x.shape.w);
    let mut row = 0;
    for ic in 0..s.in_channels {
        let base = x.shape.idx(n, ic, 0, 0);
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                let mut di = 0;
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky * s.dilation) as isize - s.pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        for _ in 0..ow {
                            dst[di] = T::zero();
                            di += 1;
                        }
                        continue;
                    }
                    let src = &x.data[base + iy as usize * w..base + (iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s.stride + kx * s.dilation) as isize - s.pad.1 as isize;
                        dst[di] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                        di += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(dx: &mut Tensor<T>, n: usize, s: &ConvSpec, oh: usize, ow: usize, dcol: &[T]) {
    let (kh, kw) = s.kernel;
    let (h, w) = (dx.shape.h, dx.shape.w);
    let mut row = 0;
    for ic in 0..s.in_channels {
        let base = dx.shape.idx(n, ic, 0, 0);
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &dcol[row * oh * ow..(row + 1) * oh * ow];
                let mut si = 0;
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky * s.dilation) as isize - s.pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        si += ow;
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * s.stride + kx * s.dilation) as isize - s.pad.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            dx.data[base + iy as usize * w + ix as usize] += src[si];
                        }
                        si += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    /// square window side m
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PoolMode,
}

impl PoolSpec {
    pub fn max(window: usize, stride: usize, pad: usize) -> Self {
        PoolSpec {
            window,
            stride,
            pad,
            mode: PoolMode::Max,
        }
    }

    pub fn avg(window: usize, stride: usize, pad: usize) -> Self {
        PoolSpec {
            window,
            stride,
            pad,
            mode: PoolMode::Avg,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if self.window > ph || self.window > pw {
            return Err(Error::Config(format!(
                "pool window {} exceeds padded input {}x{}",
                self.window, ph, pw
            )));
        }
        Ok(((ph - self.window) / self.stride + 1, (pw - self.window) / self.stride + 1))
    }
}

/// Forward pooling result plus what the backward pass needs.
pub struct PoolCache {
    /// flat input index of the (first) max per output cell, MAX mode only
    pub argmax: Vec<usize>,
}

pub fn pool2d<T: Scalar>(x: &Tensor<T>, spec: &PoolSpec) -> Result<(Tensor<T>, PoolCache)> {
    let (oh, ow) = spec.out_dims(x.shape.h, x.shape.w)?;
    let mut out = Tensor::zeros(Shape::new(x.shape.n, x.shape.c, oh, ow));
    let mut argmax = Vec::new();
    if spec.mode == PoolMode::Max {
        argmax.resize(out.shape.len(), usize::MAX);
    }
    let m2 = T::from_f64((spec.window * spec.window) as f64);
    let (h, w) = (x.shape.h, x.shape.w);
    for n in 0..x.shape.n {
        for c in 0..x.shape.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let oi = out.shape.idx(n, c, oy, ox);
                    match spec.mode {
                        PoolMode::Avg => {
                            // fixed divisor m^2; padded cells count as zero
                            let mut acc = T::zero();
                            for ky in 0..spec.window {
                                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..spec.window {
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        acc += x.at(n, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                            out.data[oi] = acc / m2;
                        }
                        PoolMode::Max => {
                            let mut best = T::neg_infinity();
                            let mut best_i = usize::MAX;
                            for ky in 0..spec.window {
                                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..spec.window {
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let v = x.at(n, c, iy as usize, ix as usize);
                                    // ties route to the first maximal element
                                    if v > best {
                                        best = v;
                                        best_i = x.shape.idx(n, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                            out.data[oi] = best;
                            argmax[oi] = best_i;
                        }
                    }
                }
            }
        }
    }
    Ok((out, PoolCache { argmax }))
}

pub fn pool2d_backward<T: Scalar>(
    in_shape: Shape,
    spec: &PoolSpec,
    cache: &PoolCache,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_shape);
    match spec.mode {
        PoolMode::Max => {
            for (oi, &ii) in cache.argmax.iter().enumerate() {
                if ii != usize::MAX {
                    dx.data[ii] += dy.data[oi];
                }
            }
        }
        PoolMode::Avg => {
            let m2 = T::from_f64((spec.window * spec.window) as f64);
            let (oh, ow) = (dy.shape.h, dy.shape.w);
            let (h, w) = (in_shape.h, in_shape.w);
            for n in 0..in_shape.n {
                for c in 0..in_shape.c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dy.at(n, c, oy, ox) / m2;
                            for ky in 0..spec.window {
                                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..spec.window {
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        *dx.at_mut(n, c, iy as usize, ix as usize) += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// dense (fully connected)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Dense<T: Scalar = f32> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// (out_dim, in_dim), row per output neuron
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T: Scalar = f32> {
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        Dense {
            in_dim,
            out_dim,
            weight,
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn grads_zero(&self) -> DenseGrads<T> {
        DenseGrads {
            dweight: vec![T::zero(); self.weight.len()],
            dbias: vec![T::zero(); self.bias.len()],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Dense<U> {
        Dense {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: self.weight.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// x: N x in_dim -> N x out_dim
    pub fn forward(&self, x: &Mat<T>) -> Result<Mat<T>> {
        if x.cols != self.in_dim {
            return Err(Error::Shape(format!(
                "dense expects input length {}, got {}",
                self.in_dim, x.cols
            )));
        }
        let mut y = Mat::zeros(x.rows, self.out_dim);
        matmul_nt(&mut y.data, &x.data, &self.weight, x.rows, self.in_dim, self.out_dim);
        for r in 0..x.rows {
            let row = y.row_mut(r);
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += *b;
            }
        }
        Ok(y)
    }

    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, grads: &mut DenseGrads<T>) -> Mat<T> {
        // dW += dy^T * x ; db += column sums of dy ; dx = dy * W
        matmul_tn(&mut grads.dweight, &dy.data, &x.data, self.out_dim, x.rows, self.in_dim);
        for r in 0..dy.rows {
            for (g, d) in grads.dbias.iter_mut().zip(dy.row(r)) {
                *g += *d;
            }
        }
        let mut dx = Mat::zeros(x.rows, self.in_dim);
        matmul_nn(&mut dx.data, &dy.data, &self.weight, x.rows, self.out_dim, self.in_dim);
        dx
    }
}

// ---------------------------------------------------------------------------
// activations and regularizers
// ---------------------------------------------------------------------------

pub fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// dx from the pre-activation input and the output gradient.
pub fn relu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

/// Inverted dropout. Training mode zeroes with probability `rate` and scales
/// survivors by 1/(1-rate); inference mode is the identity.
pub fn dropout<T: Scalar, R: Rng>(
    x: &[T],
    rate: f64,
    train: bool,
    rng: &mut R,
) -> Result<(Vec<T>, Vec<bool>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {} outside [0,1)", rate)));
    }
    if !train || rate == 0.0 {
        return Ok((x.to_vec(), vec![true; x.len()]));
    }
    let scale = T::from_f64(1.0 / (1.0 - rate));
    let mut mask = vec![false; x.len()];
    let y = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                mask[i] = true;
                v * scale
            }
        })
        .collect();
    Ok((y, mask))
}

pub fn dropout_backward<T: Scalar>(dy: &[T], mask: &[bool], rate: f64) -> Vec<T> {
    let scale = T::from_f64(1.0 / (1.0 - rate));
    dy.iter()
        .zip(mask)
        .map(|(&g, &keep)| if keep { g * scale } else { T::zero() })
        .collect()
}

// ---------------------------------------------------------------------------
// channel concatenation
// ---------------------------------------------------------------------------

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let (n, h, w) = (first.shape.n, first.shape.h, first.shape.w);
    let mut c_total = 0;
    for p in parts {
        if p.shape.n != n || p.shape.h != h || p.shape.w != w {
            return Err(Error::Shape(format!(
                "concat parts disagree: {:?} vs {:?}",
                first.shape, p.shape
            )));
        }
        c_total += p.shape.c;
    }
    let mut out = Tensor::zeros(Shape::new(n, c_total, h, w));
    let hw = h * w;
    for ni in 0..n {
        let mut oc = 0;
        for p in parts {
            let src = &p.data[ni * p.shape.c * hw..(ni + 1) * p.shape.c * hw];
            let dst_start = out.shape.idx(ni, oc, 0, 0);
            out.data[dst_start..dst_start + src.len()].copy_from_slice(src);
            oc += p.shape.c;
        }
    }
    Ok(out)
}

/// Inverse of concat for the backward pass: split the gradient back into
/// per-part tensors with the given channel counts.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let (n, h, w) = (grad.shape.n, grad.shape.h, grad.shape.w);
    debug_assert_eq!(channels.iter().sum::<usize>(), grad.shape.c);
    let hw = h * w;
    let mut out: Vec<Tensor<T>> = channels
        .iter()
        .map(|&c| Tensor::zeros(Shape::new(n, c, h, w)))
        .collect();
    for ni in 0..n {
        let mut sc = 0;
        for (pi, &c) in channels.iter().enumerate() {
            let src_start = grad.shape.idx(ni, sc, 0, 0);
            let dst_start = out[pi].shape.idx(ni, 0, 0, 0);
            out[pi].data[dst_start..dst_start + c * hw]
                .copy_from_slice(&grad.data[src_start..src_start + c * hw]);
            sc += c;
        }
    }
    out
}

/// Copy `count` channels starting at `start` into a new tensor.
pub fn slice_channels<T: Scalar>(t: &Tensor<T>, start: usize, count: usize) -> Tensor<T> {
    let (n, h, w) = (t.shape.n, t.shape.h, t.shape.w);
    let hw = h * w;
    let mut out = Tensor::zeros(Shape::new(n, count, h, w));
    for ni in 0..n {
        let src_start = t.shape.idx(ni, start, 0, 0);
        let dst_start = out.shape.idx(ni, 0, 0, 0);
        out.data[dst_start..dst_start + count * hw]
            .copy_from_slice(&t.data[src_start..src_start + count * hw]);
    }
    out
}

// ---------------------------------------------------------------------------
// softmax + cross entropy
// ---------------------------------------------------------------------------

/// Row-wise stabilized softmax with cross-entropy against integer labels.
/// Returns probabilities and the mean loss over rows.
pub fn softmax_xent_batch<T: Scalar>(logits: &Mat<T>, labels: &[usize]) -> Result<(Mat<T>, T)> {
    if logits.cols < 2 {
        return Err(Error::Config("softmax needs at least 2 classes".into()));
    }
    if logits.rows != labels.len() {
        return Err(Error::Shape("logit rows != label count".into()));
    }
    if !logits.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let mut probs = Mat::zeros(logits.rows, logits.cols);
    let mut loss = T::zero();
    for r in 0..logits.rows {
        let row = logits.row(r);
        let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        let prow = probs.row_mut(r);
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = (v - mx).exp();
            denom += *p;
        }
        for p in prow.iter_mut() {
            *p = *p / denom;
        }
        loss -= prow[labels[r]].max(T::from_f64(1e-300)).ln();
    }
    loss = loss / T::from_f64(logits.rows as f64);
    Ok((probs, loss))
}

/// Gradient of the mean loss with respect to the logits: (p - onehot)/N.
pub fn softmax_xent_backward<T: Scalar>(probs: &Mat<T>, labels: &[usize]) -> Mat<T> {
    let mut d = probs.clone();
    let inv_n = T::from_f64(1.0 / probs.rows as f64);
    for r in 0..d.rows {
        d.row_mut(r)[labels[r]] -= T::one();
        for v in d.row_mut(r) {
            *v *= inv_n;
        }
    }
    d
}

/// Single-vector convenience form: probabilities and -ln p[label].
pub fn softmax_xent<T: Scalar>(logits: &[T], label: usize) -> Result<(Vec<T>, T)> {
    let m = Mat::from_vec(1, logits.len(), logits.to_vec());
    let (p, loss) = softmax_xent_batch(&m, &[label])?;
    Ok((p.data, loss))
}

// ---------------------------------------------------------------------------
// global average pooling
// ---------------------------------------------------------------------------

/// (N, C, H, W) -> N x C matrix of spatial means.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Mat<T> {
    let hw = x.shape.h * x.shape.w;
    let inv = T::from_f64(1.0 / hw as f64);
    let mut out = Mat::zeros(x.shape.n, x.shape.c);
    for n in 0..x.shape.n {
        for c in 0..x.shape.c {
            let start = x.shape.idx(n, c, 0, 0);
            let mut acc = T::zero();
            for v in &x.data[start..start + hw] {
                acc += *v;
            }
            out.data[n * x.shape.c + c] = acc * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(in_shape: Shape, dy: &Mat<T>) -> Tensor<T> {
    let hw = in_shape.h * in_shape.w;
    let inv = T::from_f64(1.0 / hw as f64);
    let mut dx = Tensor::zeros(in_shape);
    for n in 0..in_shape.n {
        for c in 0..in_shape.c {
            let g = dy.data[n * in_shape.c + c] * inv;
            let start = in_shape.idx(n, c, 0, 0);
            for v in &mut dx.data[start..start + hw] {
                *v = g;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_error;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tensor_f64(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(n, c, h, w);
        let data = (0..shape.len()).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    // ---- convolution -----------------------------------------------------

    #[test]
    fn conv_1x1_identity_kernel() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![5.0f32]).unwrap();
        let mut conv = Conv2d::<f32>::zeros(ConvSpec::new(1, 1, 1, 0, 1));
        conv.weight[0] = 1.0;
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.data, vec![5.0]);

        // identity on a larger random input too
        let x = tensor_f64(1, 1, 4, 4, 0).cast::<f32>();
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv_ones_3x3_input_2x2_kernel() {
        let x = Tensor::from_vec(Shape::new(1, 1, 3, 3), vec![1.0f32; 9]).unwrap();
        let mut conv = Conv2d::<f32>::zeros(ConvSpec::new(1, 1, 2, 0, 1));
        conv.weight.iter_mut().for_each(|w| *w = 1.0);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape, Shape::new(1, 1, 2, 2));
        assert_eq!(y.data, vec![4.0; 4]);
    }

    #[test]
    fn conv_dilated_taps_skip_one() {
        let x = Tensor::from_vec(Shape::new(1, 1, 5, 5), vec![1.0f32; 25]).unwrap();
        let mut conv = Conv2d::<f32>::zeros(ConvSpec::new(1, 1, 2, 0, 2));
        conv.weight.iter_mut().for_each(|w| *w = 1.0);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape, Shape::new(1, 1, 3, 3));
        assert_eq!(y.data, vec![4.0; 9]);
    }

    #[test]
    fn conv_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = ConvSpec::new(2, 3, 3, 1, 1);
        let conv = Conv2d::<f32>::init(spec, &mut rng); // bias stays zero
        let x = tensor_f64(1, 2, 5, 5, 1).cast::<f32>();
        let y = tensor_f64(1, 2, 5, 5, 2).cast::<f32>();
        let (a, b) = (0.7f32, -1.3f32);
        let mixed = Tensor::from_vec(
            x.shape,
            x.data.iter().zip(&y.data).map(|(u, v)| a * u + b * v).collect(),
        )
        .unwrap();
        let lhs = conv.forward(&mixed).unwrap();
        let fx = conv.forward(&x).unwrap();
        let fy = conv.forward(&y).unwrap();
        for i in 0..lhs.data.len() {
            let rhs = a * fx.data[i] + b * fy.data[i];
            assert!((lhs.data[i] - rhs).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_shape_mismatch_rejected() {
        let conv = Conv2d::<f32>::zeros(ConvSpec::new(2, 1, 3, 1, 1));
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        assert!(conv.forward(&x).is_err());
        let spec = ConvSpec::new(1, 1, 5, 0, 2); // effective 9 > 4
        assert!(spec.out_dims(4, 4).is_err());
    }

    /// Scalar objective: sum of conv output weighted by fixed coefficients.
    #[test]
    fn conv_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::new(2, 3, 3, 1, 2);
        let conv = Conv2d::<f64>::init(spec, &mut rng);
        let x = tensor_f64(1, 2, 5, 5, 6);
        let y0 = conv.forward(&x).unwrap();
        let coef: Vec<f64> = (0..y0.data.len()).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();

        let dy = Tensor::from_vec(y0.shape, coef.clone()).unwrap();
        let mut grads = conv.grads_zero();
        let dx = conv.backward(&x, &dy, &mut grads);

        // input gradient
        let mut params = x.data.clone();
        let conv_c = conv.clone();
        let shape = x.shape;
        let err = max_rel_error(
            |p| {
                let xt = Tensor::from_vec(shape, p.to_vec()).unwrap();
                let y = conv_c.forward(&xt).unwrap();
                y.data.iter().zip(&coef).map(|(v, c)| v * c).sum()
            },
            &mut params,
            &dx.data,
            1e-4,
        );
        assert!(err < 1e-5, "conv dx rel err {err}");

        // weight gradient
        let mut wparams = conv.weight.clone();
        let err = max_rel_error(
            |p| {
                let mut c2 = conv.clone();
                c2.weight.copy_from_slice(p);
                let y = c2.forward(&x).unwrap();
                y.data.iter().zip(&coef).map(|(v, c)| v * c).sum()
            },
            &mut wparams,
            &grads.dweight,
            1e-4,
        );
        assert!(err < 1e-5, "conv dW rel err {err}");

        // bias gradient
        let mut bparams = conv.bias.clone();
        let err = max_rel_error(
            |p| {
                let mut c2 = conv.clone();
                c2.bias.copy_from_slice(p);
                let y = c2.forward(&x).unwrap();
                y.data.iter().zip(&coef).map(|(v, c)| v * c).sum()
            },
            &mut bparams,
            &grads.dbias,
            1e-4,
        );
        assert!(err < 1e-5, "conv db rel err {err}");
    }

    // ---- pooling ----------------------------------------------------------

    #[test]
    fn pool_examples() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = pool2d(&x, &PoolSpec::max(2, 2, 0)).unwrap();
        assert_eq!(y.data, vec![4.0]);
        let (y, _) = pool2d(&x, &PoolSpec::avg(2, 2, 0)).unwrap();
        assert_eq!(y.data, vec![2.5]);
    }

    #[test]
    fn max_pool_constant_input_is_constant() {
        let x = Tensor::from_vec(Shape::new(1, 1, 4, 4), vec![3.25f32; 16]).unwrap();
        let (y, _) = pool2d(&x, &PoolSpec::max(2, 2, 0)).unwrap();
        assert!(y.data.iter().all(|&v| v == 3.25));
    }

    #[test]
    fn avg_pool_padded_corner_divides_by_m2() {
        // all-ones 2x2, window 2, pad 1, stride 1 -> 3x3; corner sees one
        // real cell out of m^2 = 4
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32; 4]).unwrap();
        let (y, _) = pool2d(&x, &PoolSpec::avg(2, 1, 1)).unwrap();
        assert_eq!(y.shape, Shape::new(1, 1, 3, 3));
        assert_eq!(y.at(0, 0, 0, 0), 0.25);
        assert_eq!(y.at(0, 0, 1, 1), 1.0);
    }

    #[test]
    fn avg_pool_interior_preserves_constant_mean() {
        let x = Tensor::from_vec(Shape::new(1, 1, 4, 4), vec![2.0f32; 16]).unwrap();
        let (y, _) = pool2d(&x, &PoolSpec::avg(2, 2, 0)).unwrap();
        assert!(y.data.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn max_pool_tie_routes_to_first() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![7.0f32; 4]).unwrap();
        let (_, cache) = pool2d(&x, &PoolSpec::max(2, 2, 0)).unwrap();
        assert_eq!(cache.argmax, vec![0]);
        let dy = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.0f32]).unwrap();
        let dx = pool2d_backward(x.shape, &PoolSpec::max(2, 2, 0), &cache, &dy);
        assert_eq!(dx.data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_window_too_large_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        assert!(pool2d(&x, &PoolSpec::max(5, 1, 1)).is_err());
    }

    #[test]
    fn pool_grad_checks() {
        // distinct values so MAX has no ties at the probe point
        let shape = Shape::new(1, 2, 4, 4);
        let data: Vec<f64> = (0..shape.len()).map(|i| (i as f64 * 0.618).sin() * 3.0).collect();
        let x = Tensor::from_vec(shape, data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [PoolSpec::avg(2, 2, 0), PoolSpec::max(2, 2, 0), PoolSpec::avg(3, 1, 1)] {
            let (y0, cache) = pool2d(&x, &spec).unwrap();
            let coef: Vec<f64> = (0..y0.data.len()).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let dy = Tensor::from_vec(y0.shape, coef.clone()).unwrap();
            let dx = pool2d_backward(shape, &spec, &cache, &dy);
            let mut params = x.data.clone();
            let err = max_rel_error(
                |p| {
                    let xt = Tensor::from_vec(shape, p.to_vec()).unwrap();
                    let (y, _) = pool2d(&xt, &spec).unwrap();
                    y.data.iter().zip(&coef).map(|(v, c)| v * c).sum()
                },
                &mut params,
                &dx.data,
                1e-5,
            );
            assert!(err < 1e-5, "pool {spec:?} rel err {err}");
        }
    }

    // ---- dense ------------------------------------------------------------

    #[test]
    fn dense_examples() {
        let mut d = Dense::<f32>::zeros(2, 2);
        d.weight.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let x = Mat::from_vec(1, 2, vec![4.0, -2.0]);
        assert_eq!(d.forward(&x).unwrap().data, vec![4.0, -2.0]);

        d.weight.copy_from_slice(&[1.0, 1.0, 1.0, -1.0]);
        let x = Mat::from_vec(1, 2, vec![1.0, 2.0]);
        assert_eq!(d.forward(&x).unwrap().data, vec![3.0, -1.0]);

        let mut d = Dense::<f32>::zeros(2, 1);
        d.bias[0] = 7.0;
        assert_eq!(d.forward(&x).unwrap().data, vec![7.0]);
    }

    #[test]
    fn dense_length_mismatch_rejected() {
        let d = Dense::<f32>::zeros(3, 2);
        assert!(d.forward(&Mat::from_vec(1, 2, vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn dense_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dense = Dense::<f64>::init(4, 3, &mut rng);
        let x = Mat::from_vec(2, 4, (0..8).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect());
        let y0 = dense.forward(&x).unwrap();
        let coef: Vec<f64> = (0..y0.data.len()).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let dy = Mat::from_vec(y0.rows, y0.cols, coef.clone());
        let mut grads = dense.grads_zero();
        let dx = dense.backward(&x, &dy, &mut grads);

        let mut params = x.data.clone();
        let err = max_rel_error(
            |p| {
                let xt = Mat::from_vec(2, 4, p.to_vec());
                let y = dense.forward(&xt).unwrap();
                y.data.iter().zip(&coef).map(|(v, c)| v * c).sum()
            },
            &mut params,
            &dx.data,
            1e-5,
        );
        assert!(err < 1e-6, "dense dx rel err {err}");

        let mut wparams = dense.weight.clone();
        let err = max_rel_error(
            |p| {
                let mut d2 = dense.clone();
                d2.weight.copy_from_slice(p);
                let y = d2.forward(&x).unwrap();
                y.data.iter().zip(&coef).map(|(v, c)| v * c).sum()
            },
            &mut wparams,
            &grads.dweight,
            1e-5,
        );
        assert!(err < 1e-6, "dense dW rel err {err}");
    }

    // ---- activations and dropout -------------------------------------------

    #[test]
    fn relu_clamps_negatives() {
        assert_eq!(relu(&[-1.0f32, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(
            relu_backward(&[-1.0f32, 0.0, 2.0], &[5.0, 5.0, 5.0]),
            vec![0.0, 0.0, 5.0]
        );
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = [1.0f32, -2.0, 3.0];
        let (y, mask) = dropout(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y, x.to_vec());
        assert!(mask.iter().all(|&m| m));
        let (y, _) = dropout(&x, 0.5, false, &mut rng).unwrap();
        assert_eq!(y, x.to_vec());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec![2.0f64; 20_000];
        let (y, mask) = dropout(&x, 0.5, true, &mut rng).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
        // backward scales kept units by the same factor
        let dy = vec![1.0f64; x.len()];
        let dx = dropout_backward(&dy, &mask, 0.5);
        for (d, &m) in dx.iter().zip(&mask) {
            assert_eq!(*d, if m { 2.0 } else { 0.0 });
        }
    }

    #[test]
    fn dropout_bad_rate_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(dropout(&[1.0f32], 1.0, true, &mut rng).is_err());
    }

    // ---- concat -------------------------------------------------------------

    #[test]
    fn concat_preserves_order() {
        let a = tensor_f64(2, 2, 3, 3, 10).cast::<f32>();
        let b = tensor_f64(2, 3, 3, 3, 11).cast::<f32>();
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape.c, 5);
        for n in 0..2 {
            for c in 0..2 {
                for i in 0..9 {
                    assert_eq!(y.data[y.shape.idx(n, c, i / 3, i % 3)], a.data[a.shape.idx(n, c, i / 3, i % 3)]);
                }
            }
        }
        // single-tensor concat is the identity
        let y = concat_channels(&[&a]).unwrap();
        assert_eq!(y.data, a.data);
        // spatial mismatch rejected
        let c = Tensor::<f32>::zeros(Shape::new(2, 1, 2, 2));
        assert!(concat_channels(&[&a, &c]).is_err());
    }

    proptest! {
        #[test]
        fn concat_split_round_trip(
            c1 in 1usize..4, c2 in 1usize..4, c3 in 1usize..4, seed in 0u64..50
        ) {
            let parts = [
                tensor_f64(2, c1, 3, 3, seed).cast::<f32>(),
                tensor_f64(2, c2, 3, 3, seed + 1).cast::<f32>(),
                tensor_f64(2, c3, 3, 3, seed + 2).cast::<f32>(),
            ];
            let refs: Vec<&Tensor<f32>> = parts.iter().collect();
            let merged = concat_channels(&refs).unwrap();
            let back = split_channels(&merged, &[c1, c2, c3]);
            for (orig, got) in parts.iter().zip(&back) {
                prop_assert_eq!(&orig.data, &got.data);
            }
            let sliced = slice_channels(&merged, c1, c2);
            prop_assert_eq!(&sliced.data, &parts[1].data);
        }
    }

    // ---- softmax + cross entropy ---------------------------------------------

    #[test]
    fn softmax_examples() {
        let (p, _) = softmax_xent(&[0.0f64, 0.0], 0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);

        let (p, _) = softmax_xent(&[1000.0f64, 1000.0], 0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);

        let (p, loss) = softmax_xent(&[0.0f64, 3.0f64.ln()], 1).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        assert!((loss - (-0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant_probability_vector() {
        let logits = [0.3f64, -1.2, 2.2];
        let (p, _) = softmax_xent(&logits, 0).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + 11.5).collect();
        let (q, _) = softmax_xent(&shifted, 0).unwrap();
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for (a, b) in p.iter().zip(&q) {
            assert!(a >= &0.0 && (a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax_xent(&[1.0f32], 0).is_err());
        assert!(softmax_xent(&[f32::NAN, 0.0], 0).is_err());
    }

    #[test]
    fn softmax_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Mat::from_vec(3, 2, (0..6).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect());
        let labels = [0usize, 1, 1];
        let (probs, _) = softmax_xent_batch(&logits, &labels).unwrap();
        let analytic = softmax_xent_backward(&probs, &labels);
        let mut params = logits.data.clone();
        let err = max_rel_error(
            |p| {
                let m = Mat::from_vec(3, 2, p.to_vec());
                softmax_xent_batch(&m, &labels).unwrap().1
            },
            &mut params,
            &analytic.data,
            1e-5,
        );
        assert!(err < 1e-6, "softmax rel err {err}");
    }

    // ---- global average pooling ------------------------------------------------

    #[test]
    fn gap_means_and_backward() {
        let x = Tensor::from_vec(
            Shape::new(1, 2, 2, 2),
            vec![1.0f32, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0],
        )
        .unwrap();
        let y = global_avg_pool(&x);
        assert_eq!(y.data, vec![2.5, 10.0]);
        let dy = Mat::from_vec(1, 2, vec![4.0f32, 8.0]);
        let dx = global_avg_pool_backward(x.shape, &dy);
        assert_eq!(dx.data, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}
