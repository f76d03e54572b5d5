//! Shared numeric kernels: convolution geometry, im2col/col2im, pooling,
//! activations and axis softmax. The tape ops and the pure capsule/objective
//! functions all route through these so there is a single source of truth
//! for the forward math.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{s, Scalar, Tensor};

/// Convolution padding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// No padding; the kernel must fit inside the input.
    Valid,
    /// Zero padding chosen so the output side is `ceil(in/stride)`.
    /// Padding is symmetric with the extra pixel on the bottom/right.
    Same,
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Local derivative given the pre-activation `x` and the output `y`.
    pub fn grad<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// Resolved geometry of one conv2d application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn resolve(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<ConvGeom> {
        if input_shape.len() != 3 {
            return Err(Error::shape(format!(
                "conv2d input must be C x H x W, got {:?}",
                input_shape
            )));
        }
        if kernel_shape.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d kernels must be F x C x kh x kw, got {:?}",
                kernel_shape
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        let (in_c, in_h, in_w) = (input_shape[0], input_shape[1], input_shape[2]);
        let (out_c, k_c, kh, kw) = (
            kernel_shape[0],
            kernel_shape[1],
            kernel_shape[2],
            kernel_shape[3],
        );
        if k_c != in_c {
            return Err(Error::shape(format!(
                "conv2d kernel expects {} input channels but input has {}",
                k_c, in_c
            )));
        }
        let (pad_top, pad_left, out_h, out_w) = match padding {
            Padding::Valid => {
                if kh > in_h || kw > in_w {
                    return Err(Error::shape(format!(
                        "conv2d kernel {}x{} exceeds input {}x{} with valid padding",
                        kh, kw, in_h, in_w
                    )));
                }
                (0, 0, (in_h - kh) / stride + 1, (in_w - kw) / stride + 1)
            }
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + kh).saturating_sub(in_h);
                let pad_w = ((out_w - 1) * stride + kw).saturating_sub(in_w);
                (pad_h / 2, pad_w / 2, out_h, out_w)
            }
        };
        Ok(ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold the input into a `patch_len x out_spatial` matrix (zero fill
/// outside the padded border).
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let spatial = g.out_spatial();
    let mut cols = vec![T::zero(); g.patch_len() * spatial];
    for c in 0..g.in_c {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * spatial;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = iy as usize * g.in_w;
                    let dst_row = row + oy * g.out_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        cols[dst_row + ox] = plane[src_row + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the inverse of [`im2col`]: fold a patch matrix gradient back
/// onto the input gradient.
pub fn col2im<T: Scalar>(d_cols: &[T], g: &ConvGeom, d_input: &mut [T]) {
    let spatial = g.out_spatial();
    for c in 0..g.in_c {
        let plane_off = c * g.in_h * g.in_w;
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * spatial;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = row + oy * g.out_w;
                    let dst_row = plane_off + iy as usize * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        d_input[dst_row + ix as usize] += d_cols[src_row + ox];
                    }
                }
            }
        }
    }
}

/// Full conv2d forward: im2col, one gemm, bias add. Returns the output
/// tensor together with the patch matrix (reused by the backward pass).
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Vec<T>, ConvGeom)> {
    let g = ConvGeom::resolve(input.shape(), kernels.shape(), stride, padding)?;
    if bias.shape() != [g.out_c] {
        return Err(Error::shape(format!(
            "conv2d bias must have shape [{}], got {:?}",
            g.out_c,
            bias.shape()
        )));
    }
    let cols = im2col(input.data(), &g);
    let spatial = g.out_spatial();
    let mut out = vec![T::zero(); g.out_c * spatial];
    T::gemm(
        g.out_c,
        g.patch_len(),
        spatial,
        T::one(),
        kernels.data(),
        false,
        &cols,
        false,
        T::zero(),
        &mut out,
    );
    for f in 0..g.out_c {
        let b = bias.data()[f];
        for v in &mut out[f * spatial..(f + 1) * spatial] {
            *v += b;
        }
    }
    let out = Tensor::from_vec(vec![g.out_c, g.out_h, g.out_w], out)?;
    Ok((out, cols, g))
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the flat
/// argmax index of each window (ties resolved to the first element in
/// row-major scan order).
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let shape = input.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "maxpool2 input must be C x H x W, got {:?}",
            shape
        )));
    }
    let (c_n, h, w) = (shape[0], shape[1], shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2 needs even spatial dims, got {}x{}",
            h, w
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); c_n * oh * ow];
    let mut argmax = vec![0usize; c_n * oh * ow];
    let data = input.data();
    for c in 0..c_n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = c * h * w + (2 * oy) * w + 2 * ox;
                let mut best = data[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = c * h * w + (2 * oy + dy) * w + (2 * ox + dx);
                    if data[idx] > best {
                        best = data[idx];
                        best_idx = idx;
                    }
                }
                let o = c * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((Tensor::from_vec(vec![c_n, oh, ow], out)?, argmax))
}

/// `weights (m x n) . input (n) + bias (m)`.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if weights.shape().len() != 2 {
        return Err(Error::shape(format!(
            "dense weights must be m x n, got {:?}",
            weights.shape()
        )));
    }
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    if input.numel() != n {
        return Err(Error::shape(format!(
            "dense weights {}x{} applied to input of length {}",
            m,
            n,
            input.numel()
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::shape(format!(
            "dense bias must have shape [{}], got {:?}",
            m,
            bias.shape()
        )));
    }
    let mut out = bias.data().to_vec();
    T::gemm(
        m,
        n,
        1,
        T::one(),
        weights.data(),
        false,
        input.data(),
        false,
        T::one(),
        &mut out,
    );
    Tensor::from_vec(vec![m], out)
}

/// Numerically stable softmax along `axis`, any rank.
pub fn softmax_axis<T: Scalar>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = input.shape();
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "softmax axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    let axis_len = shape[axis];
    if axis_len == 0 {
        return Err(Error::shape("softmax over an empty axis".to_string()));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let data = input.data();
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = data[base];
            for k in 1..axis_len {
                let v = data[base + k * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for k in 0..axis_len {
                let e = (data[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                sum += e;
            }
            for k in 0..axis_len {
                out[base + k * inner] /= sum;
            }
        }
    }
    Tensor::from_vec(shape.to_vec(), out)
}

/// VJP of [`softmax_axis`] given its output `y`:
/// `d_in = y * (d_out - sum(d_out * y))` per row.
pub fn softmax_axis_vjp<T: Scalar>(y: &Tensor<T>, d_out: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = y.shape();
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let yv = y.data();
    let dv = d_out.data();
    let mut out = vec![T::zero(); yv.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut dot = T::zero();
            for k in 0..axis_len {
                let idx = base + k * inner;
                dot += dv[idx] * yv[idx];
            }
            for k in 0..axis_len {
                let idx = base + k * inner;
                out[idx] = yv[idx] * (dv[idx] - dot);
            }
        }
    }
    Tensor::from_vec(shape.to_vec(), out).expect("softmax vjp shape")
}

/// Squash scale factor `||s|| / (1 + ||s||^2)` written without the
/// direction division, so the zero vector maps to zero with no guard.
pub fn squash_factor<T: Scalar>(norm: T) -> T {
    norm / (T::one() + norm * norm)
}

/// Per-vector L2 norms over the last axis of an `n x d` view.
pub fn row_norms<T: Scalar>(data: &[T], n: usize, d: usize) -> Vec<T> {
    let mut norms = vec![T::zero(); n];
    for (i, norm) in norms.iter_mut().enumerate() {
        let row = &data[i * d..(i + 1) * d];
        let sq: T = row.iter().map(|&v| v * v).sum();
        *norm = sq.sqrt();
    }
    norms
}

/// Mean pixel value of each spatial position across channels:
/// `C x H x W -> H x W`.
pub fn channel_mean<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = input.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "channel_mean input must be C x H x W, got {:?}",
            shape
        )));
    }
    let (c_n, h, w) = (shape[0], shape[1], shape[2]);
    let inv = T::one() / s::<T>(c_n as f64);
    let mut out = vec![T::zero(); h * w];
    for c in 0..c_n {
        let plane = &input.data()[c * h * w..(c + 1) * h * w];
        for (o, &v) in out.iter_mut().zip(plane.iter()) {
            *o += v;
        }
    }
    for o in &mut out {
        *o *= inv;
    }
    Tensor::from_vec(vec![h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        // 8x8 input, 9x9 kernel, stride 2: out = ceil(8/2) = 4,
        // pad total = (4-1)*2 + 9 - 8 = 7 -> top 3, bottom 4.
        let g = ConvGeom::resolve(&[1, 8, 8], &[1, 1, 9, 9], 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
        assert_eq!((g.pad_top, g.pad_left), (3, 3));
        // floor((H + pad - kh)/stride) + 1 must agree with the direct form.
        assert_eq!((8 + 7 - 9) / 2 + 1, 4);
    }

    #[test]
    fn valid_padding_rejects_oversized_kernel() {
        assert!(ConvGeom::resolve(&[1, 4, 4], &[1, 1, 5, 5], 1, Padding::Valid).is_err());
    }

    #[test]
    fn channel_count_mismatch_is_shape_error() {
        assert!(ConvGeom::resolve(&[2, 4, 4], &[1, 3, 3, 3], 1, Padding::Valid).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::from_vec(vec![3, 4], (0..12).map(|i| i as f64 * 0.7 - 3.0).collect())
            .unwrap();
        let sm = softmax_axis(&t, 1).unwrap();
        for r in 0..3 {
            let sum: f64 = sm.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn maxpool_tie_takes_first_in_scan_order() {
        let t = Tensor::filled(vec![1, 2, 2], 3.5f32);
        let (out, idx) = maxpool2_forward(&t).unwrap();
        assert_eq!(out.data(), &[3.5]);
        assert_eq!(idx, vec![0]);
    }
}
