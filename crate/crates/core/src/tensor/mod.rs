//! Dense row-major tensor of rank 1..=4.
//!
//! Layout conventions: activations are `[N, C, H, W]`, convolution weights
//! are `[Cout, Cin/groups, Kh, Kw]`, logits are `[N, classes]`, per-channel
//! vectors (bias, norm scale/shift) are `[C]`.
//!
//! Tensors are immutable values in the operation API: every op returns a new
//! tensor. They are `Send + Sync` and safe to share read-only across threads.

pub mod ops;
pub mod vjp;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

pub use ops::{PoolKind, PoolSpec};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, validating the shape invariants: rank 1..=4, every
    /// dim >= 1, and `product(dims) == data.len()`.
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::Dimension(format!(
                "rank must be 1..={MAX_RANK}, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized dim in {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {dims:?} implies {numel} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let numel = dims.iter().product();
        Tensor::new(dims, vec![T::zero(); numel])
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let dims = dims.into();
        let numel = dims.iter().product();
        Tensor::new(dims, vec![value; numel])
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let dims = dims.into();
        let numel = dims.iter().product();
        Tensor::new(dims, (0..numel).map(&mut f).collect())
    }

    /// Uniform samples in `[lo, hi)` drawn from `rng` in flat index order.
    pub fn rand_uniform(
        dims: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Tensor::from_fn(dims, |_| T::from_f64(rng.uniform(lo, hi)))
    }

    /// Truncated-normal samples (std `std`, clipped at two sigma).
    pub fn trunc_normal(dims: impl Into<Vec<usize>>, std: f64, rng: &mut Rng) -> Result<Self> {
        Tensor::from_fn(dims, |_| T::from_f64(rng.trunc_normal(std)))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn shape4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.dims[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Dimension(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.dims
            ))),
        }
    }

    /// Interprets the tensor as `[rows, cols]`.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.dims
            ))),
        }
    }

    pub fn get(&self, flat: usize) -> T {
        self.data[flat]
    }

    /// Converts every element to another scalar type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        debug_assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Debug-build guard: panics if the tensor holds NaN or infinity.
    /// Release builds skip the scan entirely.
    #[inline]
    pub fn debug_check_finite(&self, op: &str) {
        if cfg!(debug_assertions) {
            for &v in &self.data {
                assert!(v.is_finite(), "non-finite value produced by {op}");
            }
        }
    }
}

/// Flat offset of `[n, c, h, w]` in a `[N, C, H, W]` tensor.
#[inline(always)]
pub fn idx4(c_dim: usize, h_dim: usize, w_dim: usize, n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * c_dim + c) * h_dim + h) * w_dim + w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariants_enforced() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn rand_is_seed_deterministic() {
        let a = Tensor::<f64>::rand_uniform(vec![2, 3, 4, 5], -1.0, 1.0, &mut Rng::new(11)).unwrap();
        let b = Tensor::<f64>::rand_uniform(vec![2, 3, 4, 5], -1.0, 1.0, &mut Rng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let a = Tensor::<f32>::rand_uniform(vec![7], -3.0, 3.0, &mut Rng::new(5)).unwrap();
        let b: Tensor<f32> = a.cast::<f64>().cast();
        assert_eq!(a, b);
    }
}
