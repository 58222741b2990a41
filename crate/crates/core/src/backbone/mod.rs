//! Minimal differentiable substrate: dense tensors, the fixed layer set the
//! model needs (strided convolutions, dense, activations) with hand-written
//! reverse-mode gradients, a named parameter store with Adam, a
//! finite-difference gradient checker and a checkpoint archive.
//!
//! Everything is generic over [`Real`] so training runs in `f32` and
//! gradient checks run in `f64` against the same code path.

mod checkpoint;
mod gradcheck;
mod layers;
mod params;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub use checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointEntry, CheckpointHeader, NamedTensors,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{
    relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, Conv2d, ConvTranspose2d, Dense,
};
pub use params::{AdamConfig, Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Floating-point element type usable by the backbone.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    /// # Safety
    /// Pointers and strides must describe in-bounds `m×k`, `k×n` and `m×n`
    /// matrices; `c` must not alias `a` or `b`.
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
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

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
    const DTYPE: &'static str = "f64";

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

/// `c[m×n] = op(a)·op(b) + beta·c` on row-major buffers, where `op`
/// transposes its operand when the matching flag is set (`a` is then stored
/// as `k×m`, `b` as `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index the kernel touches and the
    // borrow rules guarantee `c` is disjoint from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Maps `f` over fixed-size index chunks of `0..n`, returning results in
/// chunk order. Chunk boundaries never depend on the thread count, so any
/// in-order reduction of the results is bitwise reproducible.
pub(crate) fn map_chunks<R, F>(n: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
{
    let n_chunks = n.div_ceil(chunk.max(1));
    let range = move |i: usize| i * chunk..((i + 1) * chunk).min(n);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n_chunks).into_par_iter().map(|i| f(range(i))).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n_chunks).map(|i| f(range(i))).collect()
    }
}
