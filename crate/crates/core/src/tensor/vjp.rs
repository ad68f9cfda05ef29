//! Per-operation vector-Jacobian products.
//!
//! Each op is a small state machine: `forward` runs the kernel and stashes
//! whatever residuals the backward pass needs (the input itself, argmax
//! indices, normalization statistics); `vjp` turns an upstream cotangent into
//! cotangents for every differentiable input. Calling `vjp` before `forward`
//! is a state error. There is no tape — layers wire these together by hand.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ops::{self, PoolKind, PoolSpec};
use super::{idx4, Tensor};

fn saved<S>(state: &Option<S>) -> Result<&S> {
    state.as_ref().ok_or(Error::VjpBeforeForward)
}

// ---------------------------------------------------------------------------
// elementwise

/// `z = x + y`; the cotangent passes through unchanged to both inputs.
#[derive(Debug, Default)]
pub struct AddOp {
    ran: bool,
}

impl AddOp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        let out = ops::add(x, y)?;
        self.ran = true;
        Ok(out)
    }

    pub fn vjp<T: Scalar>(&self, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if !self.ran {
            return Err(Error::VjpBeforeForward);
        }
        Ok((gy.clone(), gy.clone()))
    }
}

/// `z = x * y` elementwise.
#[derive(Debug, Default)]
pub struct MulOp<T: Scalar> {
    saved: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> MulOp<T> {
    pub fn new() -> Self {
        MulOp { saved: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        let out = ops::mul(x, y)?;
        self.saved = Some((x.clone(), y.clone()));
        Ok(out)
    }

    pub fn vjp(&self, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (x, y) = saved(&self.saved)?;
        Ok((ops::mul(gy, y)?, ops::mul(gy, x)?))
    }
}

// ---------------------------------------------------------------------------
// linear algebra

/// `C = A B` for rank-2 tensors.
#[derive(Debug, Default)]
pub struct MatmulOp<T: Scalar> {
    saved: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> MatmulOp<T> {
    pub fn new() -> Self {
        MatmulOp { saved: None }
    }

    pub fn forward(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let out = ops::matmul(a, b)?;
        self.saved = Some((a.clone(), b.clone()));
        Ok(out)
    }

    /// Returns `(dA, dB) = (G B^T, A^T G)`.
    pub fn vjp(&self, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (a, b) = saved(&self.saved)?;
        let da = ops::matmul(gy, &ops::transpose(b)?)?;
        let db = ops::matmul(&ops::transpose(a)?, gy)?;
        Ok((da, db))
    }
}

/// Row-affine map `y = x W^T + b` with `x [N, D]`, `W [K, D]`.
#[derive(Debug, Default)]
pub struct LinearOp<T: Scalar> {
    saved: Option<(Tensor<T>, Tensor<T>, bool)>,
}

impl<T: Scalar> LinearOp<T> {
    pub fn new() -> Self {
        LinearOp { saved: None }
    }

    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let out = ops::linear(x, weight, bias)?;
        self.saved = Some((x.clone(), weight.clone(), bias.is_some()));
        Ok(out)
    }

    pub fn vjp(&self, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
        let (x, weight, has_bias) = saved(&self.saved)?;
        let (n, d) = x.shape2()?;
        let (k, _) = weight.shape2()?;
        let gd = gy.data();
        let xd = x.data();
        let wd = weight.data();

        let mut dx = vec![T::zero(); n * d];
        let mut dw = vec![T::zero(); k * d];
        for i in 0..n {
            for j in 0..k {
                let g = gd[i * k + j];
                let wrow = &wd[j * d..(j + 1) * d];
                let xrow = &xd[i * d..(i + 1) * d];
                let dxrow = &mut dx[i * d..(i + 1) * d];
                for (o, &wv) in dxrow.iter_mut().zip(wrow) {
                    *o += g * wv;
                }
                let dwrow = &mut dw[j * d..(j + 1) * d];
                for (o, &xv) in dwrow.iter_mut().zip(xrow) {
                    *o += g * xv;
                }
            }
        }
        let db = if *has_bias {
            let mut db = vec![T::zero(); k];
            for i in 0..n {
                for j in 0..k {
                    db[j] += gd[i * k + j];
                }
            }
            Some(Tensor::new(vec![k], db)?)
        } else {
            None
        };
        Ok((
            Tensor::new(vec![n, d], dx)?,
            Tensor::new(vec![k, d], dw)?,
            db,
        ))
    }
}

// ---------------------------------------------------------------------------
// shape manipulation

#[derive(Debug, Default)]
pub struct ReshapeOp {
    saved: Option<Vec<usize>>,
}

impl ReshapeOp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(
        &mut self,
        x: &Tensor<T>,
        dims: impl Into<Vec<usize>>,
    ) -> Result<Tensor<T>> {
        let out = ops::reshape(x, dims)?;
        self.saved = Some(x.dims().to_vec());
        Ok(out)
    }

    pub fn vjp<T: Scalar>(&self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = saved(&self.saved)?;
        ops::reshape(gy, dims.clone())
    }
}

#[derive(Debug, Default)]
pub struct TransposeOp {
    ran: bool,
}

impl TransposeOp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = ops::transpose(x)?;
        self.ran = true;
        Ok(out)
    }

    pub fn vjp<T: Scalar>(&self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.ran {
            return Err(Error::VjpBeforeForward);
        }
        ops::transpose(gy)
    }
}

#[derive(Debug, Default)]
pub struct ConcatChannelsOp {
    saved: Option<Vec<usize>>,
}

impl ConcatChannelsOp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let out = ops::concat_channels(parts)?;
        self.saved = Some(parts.iter().map(|p| p.dims()[1]).collect());
        Ok(out)
    }

    pub fn vjp<T: Scalar>(&self, gy: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let sizes = saved(&self.saved)?;
        ops::split_channels(gy, sizes)
    }
}

#[derive(Debug, Default)]
pub struct SplitChannelsOp {
    saved: Option<Vec<usize>>,
}

impl SplitChannelsOp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        let out = ops::split_channels(x, sizes)?;
        self.saved = Some(sizes.to_vec());
        Ok(out)
    }

    pub fn vjp<T: Scalar>(&self, gys: &[Tensor<T>]) -> Result<Tensor<T>> {
        let sizes = saved(&self.saved)?;
        if gys.len() != sizes.len() {
            return Err(Error::Dimension(format!(
                "split vjp expects {} cotangents, got {}",
                sizes.len(),
                gys.len()
            )));
        }
        let refs: Vec<&Tensor<T>> = gys.iter().collect();
        ops::concat_channels(&refs)
    }
}

// ---------------------------------------------------------------------------
// softmax

#[derive(Debug, Default)]
pub struct SoftmaxOp<T: Scalar> {
    saved: Option<Tensor<T>>,
}

impl<T: Scalar> SoftmaxOp<T> {
    pub fn new() -> Self {
        SoftmaxOp { saved: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = ops::softmax(x)?;
        self.saved = Some(out.clone());
        Ok(out)
    }

    /// `dx_i = y_i (g_i - sum_j g_j y_j)` per row.
    pub fn vjp(&self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = saved(&self.saved)?;
        if y.dims() != gy.dims() {
            return Err(Error::Dimension("softmax vjp shape mismatch".into()));
        }
        let last = *y.dims().last().expect("rank >= 1");
        let mut dx = vec![T::zero(); y.len()];
        for ((dx_row, y_row), g_row) in dx
            .chunks_mut(last)
            .zip(y.data().chunks(last))
            .zip(gy.data().chunks(last))
        {
            let mut dot = T::zero();
            for (g, yv) in g_row.iter().zip(y_row) {
                dot += *g * *yv;
            }
            for ((o, &yv), &g) in dx_row.iter_mut().zip(y_row).zip(g_row) {
                *o = yv * (g - dot);
            }
        }
        Tensor::new(y.dims().to_vec(), dx)
    }
}

// ---------------------------------------------------------------------------
// gelu

#[derive(Debug, Default)]
pub struct GeluOp<T: Scalar> {
    saved: Option<Tensor<T>>,
}

impl<T: Scalar> GeluOp<T> {
    pub fn new() -> Self {
        GeluOp { saved: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = ops::gelu(x)?;
        self.saved = Some(x.clone());
        Ok(out)
    }

    pub fn vjp(&self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = saved(&self.saved)?;
        if x.dims() != gy.dims() {
            return Err(Error::Dimension("gelu vjp shape mismatch".into()));
        }
        let data = x
            .data()
            .iter()
            .zip(gy.data())
            .map(|(&xv, &g)| g * ops::gelu_grad(xv))
            .collect();
        Tensor::new(x.dims().to_vec(), data)
    }
}

// ---------------------------------------------------------------------------
// pooling

#[derive(Debug)]
struct PoolSaved {
    in_dims: Vec<usize>,
    /// Winning flat input index per output element (max pooling only).
    argmax: Vec<usize>,
}

/// 2-D pooling with gradient routing.
///
/// Max pooling routes the full cotangent to the first maximal element of each
/// window (row-major window scan order on ties); avg pooling spreads it
/// uniformly over the window's valid (non-padded) elements.
#[derive(Debug)]
pub struct Pool2dOp {
    spec: PoolSpec,
    saved: Option<PoolSaved>,
}

impl Pool2dOp {
    pub fn new(spec: PoolSpec) -> Self {
        Pool2dOp { spec, saved: None }
    }

    pub fn spec(&self) -> &PoolSpec {
        &self.spec
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, argmax) = ops::pool2d_with_argmax(x, &self.spec, true)?;
        self.saved = Some(PoolSaved {
            in_dims: x.dims().to_vec(),
            argmax,
        });
        Ok(out)
    }

    pub fn vjp<T: Scalar>(&self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let state = saved(&self.saved)?;
        let [n_batch, channels, h, w] = state.in_dims[..] else {
            return Err(Error::Dimension("pool vjp expects rank-4 input".into()));
        };
        let mut dx = Tensor::<T>::zeros(state.in_dims.clone())?;
        let dxd = dx.data_mut();
        let gd = gy.data();

        match self.spec.kind {
            PoolKind::Max => {
                for (out_idx, &in_idx) in state.argmax.iter().enumerate() {
                    dxd[in_idx] += gd[out_idx];
                }
            }
            PoolKind::Avg => {
                let (k, s, p) = (self.spec.kernel, self.spec.stride, self.spec.padding);
                let (_, _, oh, ow) = gy.shape4()?;
                for n in 0..n_batch {
                    for c in 0..channels {
                        let plane = idx4(channels, h, w, n, c, 0, 0);
                        for out_r in 0..oh {
                            let row0 = (out_r * s) as isize - p as isize;
                            for out_c in 0..ow {
                                let col0 = (out_c * s) as isize - p as isize;
                                let mut count = 0usize;
                                for kr in 0..k {
                                    let ir = row0 + kr as isize;
                                    if ir < 0 || ir >= h as isize {
                                        continue;
                                    }
                                    for kc in 0..k {
                                        let ic = col0 + kc as isize;
                                        if ic >= 0 && ic < w as isize {
                                            count += 1;
                                        }
                                    }
                                }
                                let share = gd[idx4(channels, oh, ow, n, c, out_r, out_c)]
                                    / T::from_usize(count);
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
                                        dxd[row_off + ic as usize] += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug)]
struct ConvSaved<T: Scalar> {
    x: Tensor<T>,
    weight: Tensor<T>,
    has_bias: bool,
}

/// Grouped 2-D convolution with gradients for input, weight, and bias.
#[derive(Debug)]
pub struct Conv2dOp<T: Scalar> {
    stride: usize,
    padding: usize,
    groups: usize,
    saved: Option<ConvSaved<T>>,
}

impl<T: Scalar> Conv2dOp<T> {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dOp {
            stride,
            padding,
            groups,
            saved: None,
        }
    }

    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let out = ops::conv2d(x, weight, bias, self.stride, self.padding, self.groups)?;
        self.saved = Some(ConvSaved {
            x: x.clone(),
            weight: weight.clone(),
            has_bias: bias.is_some(),
        });
        Ok(out)
    }

    /// Returns `(dx, dweight, dbias)`.
    pub fn vjp(&self, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
        let state = saved(&self.saved)?;
        let x = &state.x;
        let weight = &state.weight;
        let (n_batch, c_in, h, w) = x.shape4()?;
        let wd = weight.dims();
        let (c_out, cig, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        let (_, _, oh, ow) = gy.shape4()?;
        let (s, p) = (self.stride, self.padding);
        let cout_g = c_out / self.groups;

        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); weight.len()];
        let xd = x.data();
        let wt = weight.data();
        let gd = gy.data();

        let pointwise = kh == 1 && kw == 1 && s == 1 && p == 0;
        if pointwise {
            let hw = h * w;
            for n in 0..n_batch {
                for co in 0..c_out {
                    let g = co / cout_g;
                    let g_off = idx4(c_out, oh, ow, n, co, 0, 0);
                    let grow = &gd[g_off..g_off + hw];
                    for ci_local in 0..cig {
                        let ci = g * cig + ci_local;
                        let in_off = idx4(c_in, h, w, n, ci, 0, 0);
                        let coef = wt[co * cig + ci_local];
                        let dxrow = &mut dx[in_off..in_off + hw];
                        for (o, &gv) in dxrow.iter_mut().zip(grow) {
                            *o += coef * gv;
                        }
                        let xrow = &xd[in_off..in_off + hw];
                        let mut acc = T::zero();
                        for (&gv, &xv) in grow.iter().zip(xrow) {
                            acc += gv * xv;
                        }
                        dw[co * cig + ci_local] += acc;
                    }
                }
            }
        } else {
            for n in 0..n_batch {
                for co in 0..c_out {
                    let g = co / cout_g;
                    for out_r in 0..oh {
                        let row0 = (out_r * s) as isize - p as isize;
                        for out_c in 0..ow {
                            let col0 = (out_c * s) as isize - p as isize;
                            let gv = gd[idx4(c_out, oh, ow, n, co, out_r, out_c)];
                            for ci_local in 0..cig {
                                let ci = g * cig + ci_local;
                                let plane = idx4(c_in, h, w, n, ci, 0, 0);
                                let w_plane = (co * cig + ci_local) * kh * kw;
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
                                        dx[row_off + ic as usize] += gv * wt[w_row + kc];
                                        dw[w_row + kc] += gv * xd[row_off + ic as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        let db = if state.has_bias {
            let mut db = vec![T::zero(); c_out];
            for n in 0..n_batch {
                for co in 0..c_out {
                    let off = idx4(c_out, oh, ow, n, co, 0, 0);
                    let mut acc = T::zero();
                    for &gv in &gd[off..off + oh * ow] {
                        acc += gv;
                    }
                    db[co] += acc;
                }
            }
            Some(Tensor::new(vec![c_out], db)?)
        } else {
            None
        };

        Ok((
            Tensor::new(x.dims().to_vec(), dx)?,
            Tensor::new(weight.dims().to_vec(), dw)?,
            db,
        ))
    }
}

// ---------------------------------------------------------------------------
// layer norm

#[derive(Debug)]
struct NormSaved<T: Scalar> {
    x: Tensor<T>,
    gamma: Tensor<T>,
    means: Vec<T>,
    inv_stds: Vec<T>,
}

/// Per-location channel layer norm with gradients for input, gamma, beta.
#[derive(Debug)]
pub struct LayerNormOp<T: Scalar> {
    eps: f64,
    saved: Option<NormSaved<T>>,
}

impl<T: Scalar> LayerNormOp<T> {
    pub fn new(eps: f64) -> Self {
        LayerNormOp { eps, saved: None }
    }

    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (out, means, inv_stds) = ops::layer_norm_with_stats(x, gamma, beta, self.eps)?;
        self.saved = Some(NormSaved {
            x: x.clone(),
            gamma: gamma.clone(),
            means,
            inv_stds,
        });
        Ok(out)
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn vjp(&self, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let state = saved(&self.saved)?;
        let x = &state.x;
        let (n_batch, channels, h, w) = x.shape4()?;
        let hw = h * w;
        let xd = x.data();
        let gd = gy.data();
        let gamma = state.gamma.data();
        let inv_c = T::from_usize(channels).recip();

        let mut dx = vec![T::zero(); x.len()];
        let mut dgamma = vec![T::zero(); channels];
        let mut dbeta = vec![T::zero(); channels];

        for n in 0..n_batch {
            for pos in 0..hw {
                let base = n * channels * hw + pos;
                let mean = state.means[n * hw + pos];
                let inv_std = state.inv_stds[n * hw + pos];

                // ghat = g * gamma; dx = inv_std * (ghat - mean(ghat) - xhat * mean(ghat * xhat))
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for c in 0..channels {
                    let xhat = (xd[base + c * hw] - mean) * inv_std;
                    let ghat = gd[base + c * hw] * gamma[c];
                    m1 += ghat;
                    m2 += ghat * xhat;
                }
                m1 *= inv_c;
                m2 *= inv_c;
                for c in 0..channels {
                    let xhat = (xd[base + c * hw] - mean) * inv_std;
                    let ghat = gd[base + c * hw] * gamma[c];
                    dx[base + c * hw] = inv_std * (ghat - m1 - xhat * m2);
                    dgamma[c] += gd[base + c * hw] * xhat;
                    dbeta[c] += gd[base + c * hw];
                }
            }
        }

        Ok((
            Tensor::new(x.dims().to_vec(), dx)?,
            Tensor::new(vec![channels], dgamma)?,
            Tensor::new(vec![channels], dbeta)?,
        ))
    }
}

// ---------------------------------------------------------------------------
// global average pool

#[derive(Debug, Default)]
pub struct GlobalAvgPoolOp {
    saved: Option<Vec<usize>>,
}

impl GlobalAvgPoolOp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out = ops::global_avg_pool(x)?;
        self.saved = Some(x.dims().to_vec());
        Ok(out)
    }

    pub fn vjp<T: Scalar>(&self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = saved(&self.saved)?;
        let [n_batch, channels, h, w] = dims[..] else {
            return Err(Error::Dimension("gap vjp expects rank-4 input".into()));
        };
        let hw = h * w;
        let inv = T::from_usize(hw).recip();
        let gd = gy.data();
        let mut dx = vec![T::zero(); n_batch * channels * hw];
        for n in 0..n_batch {
            for c in 0..channels {
                let share = gd[n * channels + c] * inv;
                let start = idx4(channels, h, w, n, c, 0, 0);
                for v in &mut dx[start..start + hw] {
                    *v = share;
                }
            }
        }
        Tensor::new(dims.clone(), dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn vjp_before_forward_is_a_state_error() {
        let op = Pool2dOp::new(PoolSpec::same_size(PoolKind::Max, 3).unwrap());
        let gy = Tensor::<f64>::zeros(vec![1, 1, 2, 2]).unwrap();
        assert!(matches!(op.vjp(&gy), Err(Error::VjpBeforeForward)));

        let conv = Conv2dOp::<f64>::new(1, 0, 1);
        assert!(matches!(conv.vjp(&gy), Err(Error::VjpBeforeForward)));
    }

    #[test]
    fn add_vjp_passes_cotangent_through() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f64>::rand_uniform(vec![2, 3], -1.0, 1.0, &mut rng).unwrap();
        let y = Tensor::<f64>::rand_uniform(vec![2, 3], -1.0, 1.0, &mut rng).unwrap();
        let gy = Tensor::<f64>::rand_uniform(vec![2, 3], -1.0, 1.0, &mut rng).unwrap();
        let mut op = AddOp::new();
        op.forward(&x, &y).unwrap();
        let (dx, dy) = op.vjp(&gy).unwrap();
        assert_eq!(dx, gy);
        assert_eq!(dy, gy);
    }

    #[test]
    fn max_pool_vjp_is_one_hot_per_window() {
        // Strictly increasing values: the bottom-right element of each window
        // wins, and non-overlapping windows make the routing one-hot.
        let x = Tensor::<f64>::from_fn(vec![1, 1, 4, 4], |i| i as f64).unwrap();
        let spec = PoolSpec::new(PoolKind::Max, 3, 3, 1).unwrap();
        let mut op = Pool2dOp::new(spec);
        let y = op.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        let gy = Tensor::<f64>::full(vec![1, 1, 2, 2], 1.0).unwrap();
        let dx = op.vjp(&gy).unwrap();
        let ones: f64 = dx.data().iter().sum();
        assert_eq!(ones, 4.0);
        for &v in dx.data() {
            assert!(v == 0.0 || v == 1.0);
        }
    }
}
