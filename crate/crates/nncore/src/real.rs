//! Scalar abstraction so the same graph runs in `f32` (training) and `f64`
//! (finite-difference verification).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
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
    const NAME: &'static str;

    /// Raw strided GEMM: `C = alpha * A B + beta * C`.
    ///
    /// # Safety
    /// All pointers must be valid for the extents implied by the shapes and strides.
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

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided read-only matrix view: element `(i, j)` lives at `off + i*rs + j*cs`.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Row-major matrix with leading dimension `ld` starting at `off`.
    pub fn rows(data: &'a [T], off: usize, ld: usize) -> Self {
        View { data, off, rs: ld, cs: 1 }
    }

    /// Transposed view of a row-major matrix with leading dimension `ld`.
    pub fn trans(data: &'a [T], off: usize, ld: usize) -> Self {
        View { data, off, rs: 1, cs: ld }
    }

    fn check(&self, r: usize, c: usize) {
        if r == 0 || c == 0 {
            return;
        }
        let last = self.off + (r - 1) * self.rs + (c - 1) * self.cs;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// `C[m×n] (at c_off, leading dim ldc) = alpha * A[m×k] B[k×n] + beta * C`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    c_off: usize,
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!(c_off + (m - 1) * ldc + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[c_off + i * ldc..c_off + i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, alpha, a, b, beta, c, c_off, ldc);
        return;
    }
    // SAFETY: extents were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            ldc as isize,
            1,
        )
    }
}

/// Below this many multiply-adds, packing overhead dominates the blocked kernel.
const SMALL_GEMM: usize = 4096;

#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    c_off: usize,
    ldc: usize,
) {
    for i in 0..m {
        let row = &mut c[c_off + i * ldc..c_off + i * ldc + n];
        if beta == T::zero() {
            row.iter_mut().for_each(|v| *v = T::zero());
        } else if beta != T::one() {
            row.iter_mut().for_each(|v| *v *= beta);
        }
        for p in 0..k {
            let aip = alpha * a.data[a.off + i * a.rs + p * a.cs];
            let boff = b.off + p * b.rs;
            if b.cs == 1 {
                for (v, &bv) in row.iter_mut().zip(&b.data[boff..boff + n]) {
                    *v += aip * bv;
                }
            } else {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += aip * b.data[boff + j * b.cs];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        for (m, k, n) in [(3, 4, 5), (20, 17, 33)] {
            check_shape(m, k, n);
        }
    }

    fn check_shape(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..n * k).map(|i| (i as f64).sin()).collect();
        // b stored as [n×k], used transposed.
        let mut c = vec![1.0; m * n];
        gemm(m, k, n, 2.0, View::rows(&a, 0, k), View::trans(&b, 0, k), 1.0, &mut c, 0, n);
        for i in 0..m {
            for j in 0..n {
                let dot: f64 = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
                assert!((c[i * n + j] - (1.0 + 2.0 * dot)).abs() < 1e-12);
            }
        }
    }
}
