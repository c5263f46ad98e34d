//! Slice-level numeric kernels shared by the tape and by plain inference code.

use crate::real::Real;

/// `c (+)= alpha * op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a` is stored `m x k` (or `k x m` when `a_t`), `b` is stored `k x n`
/// (or `n x k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = T::ZERO);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: the assertion above bounds every strided access.
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
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// In-place numerically stable softmax of one row. Entries flagged by
/// `masked` receive exactly zero weight; a fully masked row becomes all zeros.
pub fn softmax_in_place<T: Real>(row: &mut [T], masked: impl Fn(usize) -> bool) {
    let mut max = T::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if !masked(j) && x > max {
            max = x;
        }
    }
    if max == T::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = T::ZERO);
        return;
    }
    let mut sum = T::ZERO;
    for (j, x) in row.iter_mut().enumerate() {
        if masked(j) {
            *x = T::ZERO;
        } else {
            *x = (*x - max).exp();
            sum += *x;
        }
    }
    let inv = T::ONE / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

/// `log(sum(exp(row)))` with max subtraction.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::NEG_INFINITY, T::max);
    if max == T::NEG_INFINITY {
        return max;
    }
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `(1 + tanh(u)) / 2` with `u = c (x + a x^3)`, written as `sigmoid(2u)`
/// so it costs one `exp`. Saturates to 0 or 1 without overflow.
#[inline]
fn gelu_gate<T: Real>(x: T) -> T {
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    T::ONE / (T::ONE + (-(u + u)).exp())
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    x * gelu_gate(x)
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let s = gelu_gate(x);
    let du = T::from_f64(GELU_C) * (T::ONE + T::from_f64(3.0 * GELU_A) * x * x);
    s + x * (s + s) * (T::ONE - s) * du
}
