//! Scalar abstraction over the two supported precisions.
//!
//! Oracles and gradient checks run in f64, kernels and benchmarks in f32;
//! everything downstream is generic over this trait.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// General matrix multiply `C = alpha * A * B + beta * C` with explicit
    /// row/column strides, dispatching to the matrixmultiply microkernels.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing matrices of
    /// the given dimensions.
    #[allow(clippy::too_many_arguments)]
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

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn from_f64(v: f64) -> Self {
        num_traits::cast(v).unwrap()
    }

    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn to_f64(self) -> f64 {
        self
    }
}
