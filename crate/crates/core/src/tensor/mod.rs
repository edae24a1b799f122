//! Dense tensors, the gradient tape and the AdamW optimizer.
//!
//! Tensors are row-major and generic over [`Float`] so the same model code can
//! run in 32-bit for training and in 64-bit for finite-difference checks.
//! Every reduction runs sequentially in index order, which makes repeated
//! forward passes on identical inputs bitwise identical.

pub mod counter;
pub mod kernels;
pub mod optim;
pub mod tape;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
pub use tape::{Tape, Var};

/// Scalar element type for tensors.
pub trait Float:
    num_traits::Float
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable from the shapes and strides must lie inside the
    /// corresponding slice; [`kernels::gemm`] checks this before calling.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Float for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn of(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn of(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(T::one());
        t
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite standard deviation");
        Self::from_fn(shape, |_| T::of(normal.sample(rng)))
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a matrix view: all leading dimensions collapsed.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.numel() / self.cols().max(1)
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer; its length must match the data.
    pub fn set_grad(&mut self, grad: Option<Vec<T>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::Dimension {
                    op: "set_grad",
                    lhs: self.shape.clone(),
                    rhs: vec![g.len()],
                });
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Copies rows `start..start + len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let c = self.cols();
        if self.rank() != 2 || start + len > self.rows() {
            return Err(Error::Index {
                what: "rows",
                index: start + len,
                size: self.rows(),
            });
        }
        Tensor::new(vec![len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    /// Converts element type, dropping any gradient.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Standard matrix product without gradient tracking.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, n) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    kernels::matmul_into(&a.data, &b.data, &mut out, m, k, n, false, false, false);
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax without gradient tracking.
pub fn softmax_rows<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = x.data.clone();
    kernels::softmax_rows_inplace(&mut out, x.cols());
    let out = Tensor::new(x.shape.clone(), out)?;
    ensure_finite("softmax_rows", &out)?;
    Ok(out)
}

/// RMS normalization over the last dimension, scaled by `gain`.
pub fn rms_norm<T: Float>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    if gain.numel() != x.cols() {
        return Err(Error::Dimension {
            op: "rms_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let (out, _) = kernels::rms_norm_forward(&x.data, &gain.data, x.cols(), kernels::RMS_EPS);
    Tensor::new(x.shape.clone(), out)
}

pub(crate) fn matrix_dims<T: Float>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Dimension {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

pub(crate) fn ensure_finite<T: Float>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Tensor::<f32>::randn(&[3, 5], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &b).unwrap().data(), b.data());

        let a = Tensor::<f32>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &Tensor::eye(2)).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f32>::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[5, 3], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for p in 0..5 {
                    acc += a.data()[i * 5 + p] as f64 * b.data()[p * 3 + j] as f64;
                }
                assert!((c.data()[i * 3 + j] as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::<f32>::new(vec![2, 4], vec![0.0, 0.0, 0.0, 0.0, 1000.0, 0.0, 0.0, 0.0])
            .unwrap();
        let y = softmax_rows(&x).unwrap();
        for v in &y.data()[..4] {
            assert!((v - 0.25).abs() < 1e-6);
        }
        assert!((y.data()[4] - 1.0).abs() < 1e-6);
        assert!(y.data()[5].abs() < 1e-6);
    }

    #[test]
    fn softmax_matches_f64_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn(&[3, 7], 2.0, &mut rng);
        let y = softmax_rows(&x).unwrap();
        for r in 0..3 {
            let row: Vec<f64> = x.row(r).iter().map(|&v| v as f64).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..7 {
                assert!((y.row(r)[c] as f64 - row[c].exp() / z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rms_norm_cases() {
        let ones = Tensor::<f32>::ones(&[1, 8]);
        let g = Tensor::<f32>::ones(&[8]);
        let y = rms_norm(&ones, &g).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0).abs() < 1e-5));

        let zero = Tensor::<f32>::zeros(&[1, 8]);
        assert!(rms_norm(&zero, &g).unwrap().data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::randn(&[1, 16], 1.0, &mut rng);
        let g = Tensor::<f32>::randn(&[16], 1.0, &mut rng);
        let y = rms_norm(&x, &g).unwrap();
        let ms: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 16.0;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        for i in 0..16 {
            let want = x.data()[i] as f64 * inv * g.data()[i] as f64;
            assert!((y.data()[i] as f64 - want).abs() < 1e-6);
        }
    }
}
