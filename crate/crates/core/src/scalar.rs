//! Scalar abstraction for the tensor engine.
//!
//! Everything numeric is generic over [`Scalar`] so the same model code runs
//! in f32 (training, inference, checkpoints) and f64 (finite-difference
//! gradient verification). Random draws happen in f64 and are converted, so
//! both precisions consume identical RNG streams.

use std::fmt::{Debug, Display};

/// Floating-point element type of tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;

    /// `c = alpha * op_a(a) @ op_b(b) + beta * c` with explicit strides.
    ///
    /// # Safety
    /// Pointers must be valid for `m x k`, `k x n`, `m x n` accesses under the
    /// given strides. Use [`matmul_slices`] instead of calling this directly.
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
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// `c = op_a(a) @ op_b(b) + beta * c` over row-major slices.
///
/// `op_a(a)` is `m x k`; when `ta` the slice is stored as `k x m` and read
/// transposed. Likewise `op_b(b)` is `k x n`, stored `n x k` when `tb`.
/// Backward passes use the transposed views so no gradient ever needs a
/// materialized transpose.
pub(crate) fn matmul_slices<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    beta: S,
    c: &mut [S],
) {
    assert_eq!(a.len(), m * k, "matmul_slices: lhs length");
    assert_eq!(b.len(), k * n, "matmul_slices: rhs length");
    assert_eq!(c.len(), m * n, "matmul_slices: out length");
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stable seed derivation: one master seed fans out into independent named
/// streams (dataset roster, clip noise, init, sampler, dropout). FNV-1a over
/// the tag plus a splitmix64 finalizer; the constants are part of the
/// determinism contract and must not change.
pub fn derive_seed(master: u64, tag: &str, idx: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ master.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for &byte in tag.as_bytes() {
        h = (h ^ byte as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= idx.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
