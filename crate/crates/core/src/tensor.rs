//! Dense row-major tensors over `f32`/`f64`.
//!
//! Everything in the crate moves through [`Tensor`]: activations are
//! `(N, C, H, W)`, conv weights `(C_out, C_in, k_h, k_w)`, per-image
//! reductions `(N,)` and scalars `(1,)`. The element type is generic so the
//! same code path runs single precision for training and double precision
//! for the finite-difference suites.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar element type: the float operations the kernels need plus a GEMM hook.
pub trait Elem:
    Copy
    + Send
    + Sync
    + PartialOrd
    + PartialEq
    + Debug
    + Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INF: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;

    /// `C = alpha * A(m x k) * B(k x n) + beta * C` with explicit strides;
    /// the argument list mirrors the BLAS gemm convention.
    #[allow(clippy::too_many_arguments)]
    ///
    /// # Safety
    /// Pointers must cover the strided extents; this is a thin wrapper over
    /// `matrixmultiply`, which is single-threaded and therefore reproducible.
    unsafe fn gemm(
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
}

macro_rules! impl_elem {
    ($t:ty, $gemm:path) => {
        impl Elem for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INF: Self = <$t>::NEG_INFINITY;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }

            unsafe fn gemm(
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
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_elem!(f32, matrixmultiply::sgemm);
impl_elem!(f64, matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, E::ZERO)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros_like(other: &Tensor<E>) -> Self {
        Tensor::zeros(&other.shape)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Interpret as `(N, C, H, W)`; panics if the rank is not 4.
    #[inline]
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> E {
        let (_, cc, hh, ww) = self.dims4();
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    #[inline]
    pub fn set4(&mut self, n: usize, c: usize, h: usize, w: usize, v: E) {
        let (_, cc, hh, ww) = self.dims4();
        self.data[((n * cc + c) * hh + h) * ww + w] = v;
    }

    /// First element; panics on empty. Used for `(1,)` scalars.
    #[inline]
    pub fn item(&self) -> E {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }

    /// Largest absolute element difference, in f64. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

impl<E: Elem> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.numel())
        }
    }
}

/// Shapes are equal or a shape-mismatch description is produced.
pub fn same_shape<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> std::result::Result<(), String> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(format!("{:?} vs {:?}", a.shape(), b.shape()))
    }
}
