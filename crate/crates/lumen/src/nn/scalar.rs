//! Element type abstraction. Training runs in f32; gradient checking runs in
//! f64 so central differences at step 1e-4 are not drowned by rounding.

use faer::linalg::matmul::matmul;
use faer::{Accum, MatMut, MatRef, Par};
use ndarray::ScalarOperand;
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float
    + ScalarOperand
    + std::ops::AddAssign
    + Display
    + Debug
    + Sum
    + Send
    + Sync
    + 'static
{
    /// C(m,n) = A(m,k) * B(k,n), all row-major. `accumulate` adds into C.
    fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], accumulate: bool);
    /// C(m,n) = A(m,k) * B(n,k)^T, all row-major.
    fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], accumulate: bool);
    /// C(m,n) = A(k,m)^T * B(k,n), all row-major.
    fn gemm_tn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], accumulate: bool);

    fn of_f64(v: f64) -> Self;
    fn cast_f64(self) -> f64;
    fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn gemm_nn(m: usize, k: usize, n: usize, a: &[$t], b: &[$t], c: &mut [$t], accumulate: bool) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                // Row-major C = A*B is col-major C^T = B^T * A^T.
                let at = MatRef::from_column_major_slice(a, k, m);
                let bt = MatRef::from_column_major_slice(b, n, k);
                let ct = MatMut::from_column_major_slice_mut(c, n, m);
                let acc = if accumulate { Accum::Add } else { Accum::Replace };
                matmul(ct, acc, bt, at, 1.0 as $t, Par::Seq);
            }

            fn gemm_nt(m: usize, k: usize, n: usize, a: &[$t], b: &[$t], c: &mut [$t], accumulate: bool) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), n * k);
                debug_assert_eq!(c.len(), m * n);
                // C^T = B * A^T with B = (row-major b)^T^T viewed col-major.
                let at = MatRef::from_column_major_slice(a, k, m);
                let b_view = MatRef::from_column_major_slice(b, k, n); // = B^T
                let ct = MatMut::from_column_major_slice_mut(c, n, m);
                let acc = if accumulate { Accum::Add } else { Accum::Replace };
                matmul(ct, acc, b_view.transpose(), at, 1.0 as $t, Par::Seq);
            }

            fn gemm_tn(m: usize, k: usize, n: usize, a: &[$t], b: &[$t], c: &mut [$t], accumulate: bool) {
                debug_assert_eq!(a.len(), k * m);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                // C^T = B^T * A with A = (row-major a viewed col-major)^T.
                let a_view = MatRef::from_column_major_slice(a, m, k); // = A^T
                let bt = MatRef::from_column_major_slice(b, n, k);
                let ct = MatMut::from_column_major_slice_mut(c, n, m);
                let acc = if accumulate { Accum::Add } else { Accum::Replace };
                matmul(ct, acc, bt, a_view.transpose(), 1.0 as $t, Par::Seq);
            }

            fn of_f64(v: f64) -> $t {
                v as $t
            }

            fn cast_f64(self) -> f64 {
                self as f64
            }

            fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> $t {
                <StandardNormal as Distribution<$t>>::sample(&StandardNormal, rng)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_nn_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm_nn(2, 3, 2, &a, &b, &mut c, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        f64::gemm_nn(2, 3, 2, &a, &b, &mut c, true);
        assert_eq!(c, [8.0, 10.0, 20.0, 22.0]);
    }

    #[test]
    fn gemm_nt_matches_manual() {
        // A(2x3) * B(2x3)^T -> 2x2
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f32, 1.0, 1.0, 2.0, 0.0, 1.0];
        let mut c = [0.0f32; 4];
        f32::gemm_nt(2, 3, 2, &a, &b, &mut c, false);
        assert_eq!(c, [6.0, 5.0, 15.0, 14.0]);
    }

    #[test]
    fn gemm_tn_matches_manual() {
        // A(3x2)^T * B(3x2) -> 2x2
        let a = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0f32, 2.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f32; 4];
        f32::gemm_tn(2, 3, 2, &a, &b, &mut c, false);
        assert_eq!(c, [4.0, 7.0, 10.0, 19.0]);
    }
}
