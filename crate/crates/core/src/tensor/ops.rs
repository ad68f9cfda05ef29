//! Forward kernels.
//!
//! Every kernel validates shapes, produces a fresh tensor, charges the
//! multiply-add meter (see [`crate::meter`] for the counting convention),
//! and in debug builds asserts the output is finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meter;
use crate::scalar::Scalar;

use super::{idx4, Tensor};

/// Pooling operator. The ordering (`Avg` before `Max`) is the canonical
/// operator order used when partitioning channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PoolKind {
    Avg,
    Max,
}

impl PoolKind {
    pub const fn name(self) -> &'static str {
        match self {
            PoolKind::Avg => "avg",
            PoolKind::Max => "max",
        }
    }
}

/// One pooling configuration: operator, odd kernel size, stride, padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn new(kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "pool kernel must be odd and positive, got {kernel}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("pool stride must be positive".into()));
        }
        // padding < kernel keeps every window over at least one valid element.
        if padding >= kernel {
            return Err(Error::Config(format!(
                "pool padding {padding} must be smaller than kernel {kernel}"
            )));
        }
        Ok(PoolSpec {
            kind,
            kernel,
            stride,
            padding,
        })
    }

    /// Stride 1 and padding `(kernel - 1) / 2`, so output spatial dims equal
    /// the input's.
    pub fn same_size(kind: PoolKind, kernel: usize) -> Result<Self> {
        PoolSpec::new(kind, kernel, 1, (kernel.max(1) - 1) / 2)
    }
}

/// Output extent of a sliding window: `floor((input - kernel + 2*padding) / stride) + 1`.
pub fn window_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Dimension(format!(
            "window of {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2-D pooling over `[N, C, H, W]`.
///
/// Padding never contributes a value: max is taken over the valid elements
/// of each window, and avg divides by the number of valid elements only, so
/// constants survive pooling unchanged at the borders.
pub fn pool2d<T: Scalar>(x: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    let (out, _) = pool2d_with_argmax(x, spec, false)?;
    Ok(out)
}

/// Pooling that can also report, for max pooling, the flat input index of
/// the element that won each window (first maximum in row-major window scan
/// order on ties). The VJP routes gradient through those indices.
pub(crate) fn pool2d_with_argmax<T: Scalar>(
    x: &Tensor<T>,
    spec: &PoolSpec,
    want_argmax: bool,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n_batch, channels, h, w) = x.shape4()?;
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let oh = window_out_dim(h, k, s, p)?;
    let ow = window_out_dim(w, k, s, p)?;

    let mut out = vec![T::zero(); n_batch * channels * oh * ow];
    let mut argmax = if want_argmax && spec.kind == PoolKind::Max {
        vec![0usize; out.len()]
    } else {
        Vec::new()
    };

    let xd = x.data();
    for n in 0..n_batch {
        for c in 0..channels {
            let plane = idx4(channels, h, w, n, c, 0, 0);
            for out_r in 0..oh {
                let row0 = (out_r * s) as isize - p as isize;
                for out_c in 0..ow {
                    let col0 = (out_c * s) as isize - p as isize;
                    let out_idx = idx4(channels, oh, ow, n, c, out_r, out_c);
                    match spec.kind {
                        PoolKind::Max => {
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0usize;
                            for kr in 0..k {
                                let ir = row0 + kr as isize;
                                if ir < 0 || ir >= h as isize {
                                    continue;
                                }
                                let row_off = plane + ir as usize * w;
                                for kc in 0..k {
                                    let ic = col0 + kc as isize;
                                    if ic < 0 || ic >= w as isize {
                                        continue;
                                    }
                                    let v = xd[row_off + ic as usize];
                                    if v > best {
                                        best = v;
                                        best_idx = row_off + ic as usize;
                                    }
                                }
                            }
                            out[out_idx] = best;
                            if !argmax.is_empty() {
                                argmax[out_idx] = best_idx;
                            }
                        }
                        PoolKind::Avg => {
                            let mut sum = T::zero();
                            let mut count = 0usize;
                            for kr in 0..k {
                                let ir = row0 + kr as isize;
                                if ir < 0 || ir >= h as isize {
                                    continue;
                                }
                                let row_off = plane + ir as usize * w;
                                for kc in 0..k {
                                    let ic = col0 + kc as isize;
                                    if ic < 0 || ic >= w as isize {
                                        continue;
                                    }
                                    sum += xd[row_off + ic as usize];
                                    count += 1;
                                }
                            }
                            out[out_idx] = sum / T::from_usize(count);
                        }
                    }
                }
            }
        }
    }

    // Full kernel area per output element, borders included.
    meter::charge((n_batch * channels * oh * ow * k * k) as u64);
    let out = Tensor::new(vec![n_batch, channels, oh, ow], out)?;
    out.debug_check_finite("pool2d");
    Ok((out, argmax))
}

fn conv_check<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    groups: usize,
) -> Result<()> {
    let (_, c_in, _, _) = x.shape4()?;
    let wd = weight.dims();
    if wd.len() != 4 {
        return Err(Error::Dimension(format!(
            "conv weight must be rank 4, got {wd:?}"
        )));
    }
    let (c_out, c_in_g) = (wd[0], wd[1]);
    if groups == 0 {
        return Err(Error::Config("conv groups must be positive".into()));
    }
    if c_in % groups != 0 || c_out % groups != 0 {
        return Err(Error::Config(format!(
            "channels ({c_in} in, {c_out} out) must be divisible by groups {groups}"
        )));
    }
    if c_in_g != c_in / groups {
        return Err(Error::Dimension(format!(
            "conv weight expects {c_in_g} input channels per group, input has {}",
            c_in / groups
        )));
    }
    if let Some(b) = bias {
        if b.dims() != [c_out] {
            return Err(Error::Dimension(format!(
                "conv bias shape {:?} does not match {c_out} output channels",
                b.dims()
            )));
        }
    }
    Ok(())
}

/// Grouped 2-D cross-correlation.
///
/// `x` is `[N, Cin, H, W]`, `weight` is `[Cout, Cin/groups, Kh, Kw]`. Group
/// `j` reads input channels `[j*Cin/g, (j+1)*Cin/g)` and writes output
/// channels `[j*Cout/g, (j+1)*Cout/g)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    conv_check(x, weight, bias, groups)?;
    let (n_batch, c_in, h, w) = x.shape4()?;
    let wd = weight.dims();
    let (c_out, cig, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
    if stride == 0 {
        return Err(Error::Config("conv stride must be positive".into()));
    }
    let oh = window_out_dim(h, kh, stride, padding)?;
    let ow = window_out_dim(w, kw, stride, padding)?;

    let mut out = vec![T::zero(); n_batch * c_out * oh * ow];
    let xd = x.data();
    let wt = weight.data();
    let cout_g = c_out / groups;

    let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;
    if pointwise {
        // 1x1 stride-1 convolution is a per-group channel mix; accumulate
        // whole planes so the inner loop is a contiguous axpy.
        let hw = h * w;
        for n in 0..n_batch {
            for co in 0..c_out {
                let g = co / cout_g;
                let out_off = idx4(c_out, oh, ow, n, co, 0, 0);
                if let Some(b) = bias {
                    let bv = b.data()[co];
                    out[out_off..out_off + hw].iter_mut().for_each(|o| *o = bv);
                }
                for ci_local in 0..cig {
                    let ci = g * cig + ci_local;
                    let coef = wt[co * cig + ci_local];
                    let in_off = idx4(c_in, h, w, n, ci, 0, 0);
                    let src = &xd[in_off..in_off + hw];
                    let dst = &mut out[out_off..out_off + hw];
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o += coef * v;
                    }
                }
            }
        }
    } else {
        for n in 0..n_batch {
            for co in 0..c_out {
                let g = co / cout_g;
                let bv = bias.map_or(T::zero(), |b| b.data()[co]);
                for out_r in 0..oh {
                    let row0 = (out_r * stride) as isize - padding as isize;
                    for out_c in 0..ow {
                        let col0 = (out_c * stride) as isize - padding as isize;
                        let mut acc = bv;
                        for ci_local in 0..cig {
                            let ci = g * cig + ci_local;
                            let plane = idx4(c_in, h, w, n, ci, 0, 0);
                            let w_plane = ((co * cig) + ci_local) * kh * kw;
                            for kr in 0..kh {
                                let ir = row0 + kr as isize;
                                if ir < 0 || ir >= h as isize {
                                    continue;
                                }
                                let row_off = plane + ir as usize * w;
                                let w_row = w_plane + kr * kw;
                                for kc in 0..kw {
                                    let ic = col0 + kc as isize;
                                    if ic < 0 || ic >= w as isize {
                                        continue;
                                    }
                                    acc += xd[row_off + ic as usize] * wt[w_row + kc];
                                }
                            }
                        }
                        out[idx4(c_out, oh, ow, n, co, out_r, out_c)] = acc;
                    }
                }
            }
        }
    }

    meter::charge((n_batch * c_out * oh * ow * cig * kh * kw) as u64);
    let out = Tensor::new(vec![n_batch, c_out, oh, ow], out)?;
    out.debug_check_finite("conv2d");
    Ok(out)
}

/// Per-location layer normalization over the channel axis of `[N, C, H, W]`:
/// each `C`-vector at `(n, h, w)` is shifted to zero mean and scaled to unit
/// population variance, then scaled by `gamma` and shifted by `beta`.
pub fn layer_norm_channels<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (out, _, _) = layer_norm_with_stats(x, gamma, beta, eps)?;
    Ok(out)
}

pub(crate) fn layer_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n_batch, channels, h, w) = x.shape4()?;
    if gamma.dims() != [channels] || beta.dims() != [channels] {
        return Err(Error::Dimension(format!(
            "norm scale/shift must be [{channels}], got {:?} and {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Config("norm eps must be positive".into()));
    }

    let hw = h * w;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let inv_c = T::from_usize(channels).recip();
    let eps = T::from_f64(eps);

    let mut out = vec![T::zero(); xd.len()];
    let mut means = vec![T::zero(); n_batch * hw];
    let mut inv_stds = vec![T::zero(); n_batch * hw];

    for n in 0..n_batch {
        for pos in 0..hw {
            let base = n * channels * hw + pos;
            let mut mean = T::zero();
            for c in 0..channels {
                mean += xd[base + c * hw];
            }
            mean *= inv_c;
            let mut var = T::zero();
            for c in 0..channels {
                let d = xd[base + c * hw] - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = (var + eps).sqrt().recip();
            means[n * hw + pos] = mean;
            inv_stds[n * hw + pos] = inv_std;
            for c in 0..channels {
                let xhat = (xd[base + c * hw] - mean) * inv_std;
                out[base + c * hw] = xhat * gd[c] + bd[c];
            }
        }
    }

    meter::charge(2 * xd.len() as u64);
    let out = Tensor::new(x.dims().to_vec(), out)?;
    out.debug_check_finite("layer_norm_channels");
    Ok((out, means, inv_stds))
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    if x.dims() != y.dims() {
        return Err(Error::Dimension(format!(
            "add: shape {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    meter::charge(x.len() as u64);
    let data = x.data().iter().zip(y.data()).map(|(&a, &b)| a + b).collect();
    Tensor::new(x.dims().to_vec(), data)
}

/// Elementwise (Hadamard) product.
pub fn mul<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    if x.dims() != y.dims() {
        return Err(Error::Dimension(format!(
            "mul: shape {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    meter::charge(x.len() as u64);
    let data = x.data().iter().zip(y.data()).map(|(&a, &b)| a * b).collect();
    Tensor::new(x.dims().to_vec(), data)
}

/// Matrix product of `[M, K]` and `[K, P]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.shape2()?;
    let (k2, p) = b.shape2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul: inner dims {k} vs {k2}"
        )));
    }
    let mut out = vec![T::zero(); m * p];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for kk in 0..k {
            let coef = ad[i * k + kk];
            let brow = &bd[kk * p..(kk + 1) * p];
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &v) in orow.iter_mut().zip(brow) {
                *o += coef * v;
            }
        }
    }
    meter::charge((m * k * p) as u64);
    let out = Tensor::new(vec![m, p], out)?;
    out.debug_check_finite("matmul");
    Ok(out)
}

/// Softmax over the last axis, stabilized by max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let last = *x.dims().last().expect("rank >= 1");
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(last) {
        let mut max = T::neg_infinity();
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    let out = Tensor::new(x.dims().to_vec(), data)?;
    out.debug_check_finite("softmax");
    Ok(out)
}

/// Same data, new shape (element count must match).
pub fn reshape<T: Scalar>(x: &Tensor<T>, dims: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
    Tensor::new(dims, x.data().to_vec())
}

/// Transpose of a rank-2 tensor.
pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.shape2()?;
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// Concatenates along the channel axis of `[N, C_i, H, W]` tensors.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Dimension("concat of zero tensors".into()));
    }
    let (n_batch, _, h, w) = parts[0].shape4()?;
    let mut c_total = 0;
    for part in parts {
        let (n2, c, h2, w2) = part.shape4()?;
        if n2 != n_batch || h2 != h || w2 != w {
            return Err(Error::Dimension(
                "concat: batch/spatial dims differ between parts".into(),
            ));
        }
        c_total += c;
    }
    let hw = h * w;
    let mut out = vec![T::zero(); n_batch * c_total * hw];
    for n in 0..n_batch {
        let mut c_off = 0;
        for part in parts {
            let c = part.dims()[1];
            let src = &part.data()[n * c * hw..(n + 1) * c * hw];
            let dst_start = (n * c_total + c_off) * hw;
            out[dst_start..dst_start + c * hw].copy_from_slice(src);
            c_off += c;
        }
    }
    Tensor::new(vec![n_batch, c_total, h, w], out)
}

/// Splits the channel axis into consecutive slices of the given sizes.
/// Exact inverse of [`concat_channels`] for the same partition.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n_batch, channels, h, w) = x.shape4()?;
    let total: usize = sizes.iter().sum();
    if total != channels {
        return Err(Error::Dimension(format!(
            "split sizes sum to {total}, tensor has {channels} channels"
        )));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Dimension("split size of zero".into()));
    }
    let hw = h * w;
    let mut parts = Vec::with_capacity(sizes.len());
    let mut c_off = 0;
    for &c in sizes {
        let mut data = vec![T::zero(); n_batch * c * hw];
        for n in 0..n_batch {
            let src_start = (n * channels + c_off) * hw;
            data[n * c * hw..(n + 1) * c * hw]
                .copy_from_slice(&x.data()[src_start..src_start + c * hw]);
        }
        parts.push(Tensor::new(vec![n_batch, c, h, w], data)?);
        c_off += c;
    }
    Ok(parts)
}

/// Exact GELU, `0.5 * x * (1 + erf(x / sqrt(2)))`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let half = T::from_f64(0.5);
    meter::charge(x.len() as u64);
    let out = x.map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
    out.debug_check_finite("gelu");
    Ok(out)
}

/// Derivative of the exact GELU: `Phi(x) + x * phi(x)`.
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let half = T::from_f64(0.5);
    let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
    cdf + x * pdf
}

/// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n_batch, channels, h, w) = x.shape4()?;
    let hw = h * w;
    let inv = T::from_usize(hw).recip();
    let mut out = vec![T::zero(); n_batch * channels];
    for n in 0..n_batch {
        for c in 0..channels {
            let start = idx4(channels, h, w, n, c, 0, 0);
            let mut sum = T::zero();
            for &v in &x.data()[start..start + hw] {
                sum += v;
            }
            out[n * channels + c] = sum * inv;
        }
    }
    meter::charge(x.len() as u64);
    Tensor::new(vec![n_batch, channels], out)
}

/// Affine map of row vectors: `x [N, D] x weight [K, D] (+ bias [K]) -> [N, K]`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, d) = x.shape2()?;
    let (k, d2) = weight.shape2()?;
    if d != d2 {
        return Err(Error::Dimension(format!(
            "linear: input dim {d} vs weight dim {d2}"
        )));
    }
    if let Some(b) = bias {
        if b.dims() != [k] {
            return Err(Error::Dimension(format!(
                "linear bias shape {:?}, expected [{k}]",
                b.dims()
            )));
        }
    }
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let xrow = &xd[i * d..(i + 1) * d];
        for j in 0..k {
            let wrow = &wd[j * d..(j + 1) * d];
            let mut acc = bias.map_or(T::zero(), |b| b.data()[j]);
            for (a, b) in xrow.iter().zip(wrow) {
                acc += *a * *b;
            }
            out[i * k + j] = acc;
        }
    }
    meter::charge((n * k * d) as u64);
    let out = Tensor::new(vec![n, k], out)?;
    out.debug_check_finite("linear");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn pool_same_size_spec_defaults() {
        let s = PoolSpec::same_size(PoolKind::Max, 5).unwrap();
        assert_eq!((s.stride, s.padding), (1, 2));
        assert!(PoolSpec::new(PoolKind::Max, 4, 1, 1).is_err()); // even kernel
        assert!(PoolSpec::new(PoolKind::Avg, 3, 1, 3).is_err()); // padding >= kernel
    }

    #[test]
    fn max_pool_of_constants_is_constant() {
        let x = Tensor::<f32>::full(vec![1, 1, 4, 4], 5.0).unwrap();
        let y = pool2d(&x, &PoolSpec::same_size(PoolKind::Max, 3).unwrap()).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn max_pool_small_window_covers_everything() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pool2d(&x, &PoolSpec::same_size(PoolKind::Max, 3).unwrap()).unwrap();
        assert_eq!(y.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn avg_pool_excludes_padding_from_the_mean() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pool2d(&x, &PoolSpec::same_size(PoolKind::Avg, 3).unwrap()).unwrap();
        assert_eq!(y.data(), &[2.5, 2.5, 2.5, 2.5]);
    }

    #[test]
    fn pool_rejects_vanishing_output() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 2, 2]).unwrap();
        let spec = PoolSpec::new(PoolKind::Max, 5, 1, 0).unwrap();
        assert!(pool2d(&x, &spec).is_err());
    }

    #[test]
    fn pointwise_conv_identity_and_scaling() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::rand_uniform(vec![2, 3, 4, 4], -1.0, 1.0, &mut rng).unwrap();
        // channel identity
        let mut w = Tensor::<f64>::zeros(vec![3, 3, 1, 1]).unwrap();
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y, x);

        // single channel scalar scale
        let x1 = Tensor::<f64>::rand_uniform(vec![1, 1, 5, 5], -1.0, 1.0, &mut rng).unwrap();
        let w1 = Tensor::<f64>::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y1 = conv2d(&x1, &w1, None, 1, 0, 1).unwrap();
        for (a, b) in y1.data().iter().zip(x1.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn conv_rejects_group_indivisibility() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 4, 4]).unwrap();
        let w = Tensor::<f64>::zeros(vec![4, 1, 1, 1]).unwrap();
        assert!(conv2d(&x, &w, None, 1, 0, 2).is_err());
    }

    #[test]
    fn layer_norm_constant_input_is_all_zeros() {
        let x = Tensor::<f64>::full(vec![1, 4, 2, 2], 7.0).unwrap();
        let gamma = Tensor::<f64>::full(vec![4], 1.0).unwrap();
        let beta = Tensor::<f64>::zeros(vec![4]).unwrap();
        let y = layer_norm_channels(&x, &gamma, &beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_channel_hand_value() {
        // (1, 3) normalized with eps 1e-5: (x - 2) / sqrt(1 + 1e-5)
        let x = Tensor::<f64>::new(vec![1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let gamma = Tensor::<f64>::full(vec![2], 1.0).unwrap();
        let beta = Tensor::<f64>::zeros(vec![2]).unwrap();
        let y = layer_norm_channels(&x, &gamma, &beta, 1e-5).unwrap();
        let expected = 0.999_995_000_037_499_6;
        assert!((y.data()[0] + expected).abs() < 1e-12);
        assert!((y.data()[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes_random_input() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f64>::rand_uniform(vec![2, 16, 3, 3], -4.0, 4.0, &mut rng).unwrap();
        let gamma = Tensor::<f64>::full(vec![16], 1.0).unwrap();
        let beta = Tensor::<f64>::zeros(vec![16]).unwrap();
        let y = layer_norm_channels(&x, &gamma, &beta, 1e-5).unwrap();
        let (n_batch, c, h, w) = y.shape4().unwrap();
        let hw = h * w;
        for n in 0..n_batch {
            for pos in 0..hw {
                let mut mean = 0.0;
                let mut var = 0.0;
                for ch in 0..c {
                    mean += y.data()[n * c * hw + ch * hw + pos];
                }
                mean /= c as f64;
                for ch in 0..c {
                    let d = y.data()[n * c * hw + ch * hw + pos] - mean;
                    var += d * d;
                }
                var /= c as f64;
                assert!(mean.abs() <= 1e-6, "per-location mean {mean}");
                assert!((var - 1.0).abs() <= 1e-4, "per-location variance {var}");
            }
        }
    }

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let x = Tensor::<f64>::full(vec![4], 3.0).unwrap();
        let y = softmax(&x).unwrap();
        for &v in y.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn split_then_concat_is_identity() {
        let mut rng = Rng::new(9);
        let x = Tensor::<f64>::rand_uniform(vec![1, 64, 8, 8], -1.0, 1.0, &mut rng).unwrap();
        let sizes = [7, 7, 7, 7, 6, 6, 6, 6, 6, 6];
        let parts = split_channels(&x, &sizes).unwrap();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        assert_eq!(concat_channels(&refs).unwrap(), x);
    }

    #[test]
    fn gelu_reference_values() {
        let x = Tensor::<f64>::new(vec![3], vec![0.0, 1.0, -0.5]).unwrap();
        let y = gelu(&x).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((y.data()[2] + 0.154_268_769_362_993_44).abs() < 1e-15);
    }

    #[test]
    fn global_avg_pool_means_planes() {
        let x = Tensor::<f64>::from_fn(vec![1, 2, 2, 2], |i| i as f64).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2]);
        assert_eq!(y.data(), &[1.5, 5.5]);
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::rand_uniform(vec![3, 5], -1.0, 1.0, &mut rng).unwrap();
        assert_eq!(transpose(&transpose(&x).unwrap()).unwrap(), x);
    }
}
