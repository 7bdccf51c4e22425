//! Scalar abstraction: the whole numeric core is generic over `f32`/`f64`.
//!
//! Training runs in `f32`; gradient verification runs the identical code in
//! `f64`, where central differences are trustworthy.

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar the tensor core is generic over.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + std::fmt::Debug + std::fmt::Display + Default + 'static
{
    /// Code stored in tensor dumps and checkpoints.
    const DTYPE_CODE: u8;

    fn from_f(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap()
    }

    fn to_f(self) -> f64;

    /// C = alpha * A(m×k) · B(k×n) + beta * C, row-major contiguous.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 1;

    fn to_f(self) -> f64 {
        self as f64
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 2;

    fn to_f(self) -> f64 {
        self
    }

    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}
