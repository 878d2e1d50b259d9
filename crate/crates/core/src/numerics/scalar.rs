use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating point element type of a tensor. Implemented for `f32` (training)
/// and `f64` (gradient checks).
pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    const PRECISION: &'static str;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;

    /// `tanh` where a small absolute error is acceptable (activations).
    fn tanh_approx(self) -> Self {
        self.tanh()
    }
    fn is_finite(self) -> bool;
    fn to_le_bytes_vec(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;

    /// Replaces `row` with its softmax.
    fn softmax_row(row: &mut [Self]) {
        softmax_row_with(row, Self::exp);
    }

    /// Softmax backward for one row: turns the output gradient `g` into the
    /// input gradient `scale * p * (g - <g, p>)` in place.
    fn softmax_backward_row(g: &mut [Self], p: &[Self], scale: Self) {
        let mut dot = Self::ZERO;
        for (&a, &b) in g.iter().zip(p) {
            dot += a * b;
        }
        for (a, &b) in g.iter_mut().zip(p) {
            *a = b * (*a - dot) * scale;
        }
    }

    /// `C = alpha * A B + beta * C` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// `m x k`, `k x n` and `m x n` matrices.
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
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const PRECISION: &'static str = "f32";
    const BYTES: usize = 4;

    fn softmax_row(row: &mut [Self]) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            unsafe { avx2::softmax_row(row) };
            return;
        }
        softmax_row_f32(row);
    }

    fn softmax_backward_row(g: &mut [Self], p: &[Self], scale: Self) {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2.
            unsafe { avx2::softmax_backward_row(g, p, scale) };
            return;
        }
        softmax_backward_row_f32(g, p, scale);
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    #[inline(always)]
    fn tanh_approx(self) -> Self {
        1.0 - 2.0 / (fast_exp(2.0 * self) + 1.0)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
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
        matrixmultiply::sgemm(
            m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc,
        );
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const PRECISION: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
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
        matrixmultiply::dgemm(
            m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc,
        );
    }
}

/// Row-major `m x k` times `k x n`, optionally reading either operand
/// transposed, written into `out` (`m x n`) as `out = alpha * op(A) op(B) + beta * out`.
#[allow(clippy::too_many_arguments)]
fn softmax_row_with<T: Scalar>(row: &mut [T], exp: impl Fn(T) -> T) {
    let Some(&first) = row.first() else {
        return;
    };
    let max = row.iter().fold(first, |m, &x| if x > m { x } else { m });
    for x in row.iter_mut() {
        *x = exp(*x - max);
    }
    let total: T = row.iter().copied().sum();
    let inv = T::ONE / total;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

const LANES: usize = 8;

// The explicit 8-lane reductions give the same result whatever vector width
// the compiler picks, so the AVX2 copies are bit-identical to the baseline.
#[cfg(target_arch = "x86_64")]
mod avx2 {
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn softmax_row(row: &mut [f32]) {
        super::softmax_row_f32(row)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn softmax_backward_row(g: &mut [f32], p: &[f32], scale: f32) {
        super::softmax_backward_row_f32(g, p, scale)
    }
}

#[inline(always)]
fn softmax_backward_row_f32(g: &mut [f32], p: &[f32], scale: f32) {
    let mut sums = [0.0f32; LANES];
    let mut gc = g.chunks_exact(LANES);
    let mut pc = p.chunks_exact(LANES);
    for (a, b) in (&mut gc).zip(&mut pc) {
        for l in 0..LANES {
            sums[l] += a[l] * b[l];
        }
    }
    let tail: f32 = gc.remainder().iter().zip(pc.remainder()).map(|(a, b)| a * b).sum();
    let dot = sums.iter().sum::<f32>() + tail;
    for (a, &b) in g.iter_mut().zip(p) {
        *a = b * (*a - dot) * scale;
    }
}

/// `f32` softmax with fixed 8-lane reductions so the loops vectorize.
#[inline(always)]
fn softmax_row_f32(row: &mut [f32]) {
    if row.is_empty() {
        return;
    }
    let mut lanes = [f32::NEG_INFINITY; LANES];
    let mut chunks = row.chunks_exact(LANES);
    for c in &mut chunks {
        for (m, &x) in lanes.iter_mut().zip(c) {
            *m = if x > *m { x } else { *m };
        }
    }
    let mut max = chunks.remainder().iter().fold(f32::NEG_INFINITY, |m, &x| if x > m { x } else { m });
    for &m in &lanes {
        max = if m > max { m } else { max };
    }
    for x in row.iter_mut() {
        *x = fast_exp(*x - max);
    }
    let mut sums = [0.0f32; LANES];
    let mut chunks = row.chunks_exact(LANES);
    for c in &mut chunks {
        for (s, &x) in sums.iter_mut().zip(c) {
            *s += x;
        }
    }
    let total = sums.iter().sum::<f32>() + chunks.remainder().iter().sum::<f32>();
    let inv = 1.0 / total;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// `e^x` for `f32` in a branch-free form the compiler can vectorize: range
/// reduction `x = n ln2 + r` and a degree-6 polynomial for `e^r` (Cephes
/// `expf` coefficients), within 2 ulp of `f32::exp` on `[-87, 88]`.
/// Inputs are clamped to that range.
#[inline(always)]
fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // adding 1.5 * 2^23 rounds to the nearest integer, which then sits in
    // the low mantissa bits of `t`
    const ROUND: f32 = 12_582_912.0;
    let x = x.max(-87.0).min(88.0);
    let t = x * LOG2E + ROUND;
    let n = t - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 0.166_666_65;
    p = p * r + 0.5;
    let y = p * r * r + r + 1.0;
    let bias = ROUND.to_bits().wrapping_sub(127);
    let scale = f32::from_bits(t.to_bits().wrapping_sub(bias) << 23);
    y * scale
}

pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    alpha: T,
    beta: T,
    out: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // stored A is m x k (or k x m when transposed)
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
