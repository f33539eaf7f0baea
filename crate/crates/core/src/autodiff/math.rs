//! Low-level f64 kernels behind the tape ops.
//!
//! The three gemm wrappers map row-major slices onto `matrixmultiply::dgemm`,
//! which picks SIMD kernels at runtime. Everything else is plain loops.

/// c = alpha * a(m x k) * b(k x n) + beta * c(m x n), all row-major.
pub fn gemm_nn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c = alpha * a(m x k) * b(n x k)^T + beta * c(m x n), all row-major.
pub fn gemm_nt(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c = alpha * a(k x m)^T * b(k x n) + beta * c(m x n), all row-major.
pub fn gemm_tn(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// d gelu / dx for the tanh approximation.
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row softmax over `row[..limit]`, stabilized by max subtraction.
/// Entries at and beyond `limit` are set to zero.
pub fn softmax_prefix(row: &mut [f64], limit: usize) {
    debug_assert!(limit >= 1 && limit <= row.len());
    let mut max = f64::NEG_INFINITY;
    for &v in &row[..limit] {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in &mut row[..limit] {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in &mut row[..limit] {
        *v *= inv;
    }
    for v in &mut row[limit..] {
        *v = 0.0;
    }
}

/// log(sum(exp(row))) with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_nn_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_nn(2, 3, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_nt_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0]; // 2x2
        let b = [5.0, 6.0, 7.0, 8.0]; // 2x2, used transposed
        let mut c = [0.0; 4];
        gemm_nt(2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        // a * b^T
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn gemm_tn_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0]; // 2x2, used transposed
        let b = [5.0, 6.0, 7.0, 8.0]; // 2x2
        let mut c = [0.0; 4];
        gemm_tn(2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        // a^T * b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn softmax_prefix_sums_to_one_and_zeroes_tail() {
        let mut row = [1.0, 2.0, 3.0, 999.0];
        softmax_prefix(&mut row, 3);
        let s: f64 = row[..3].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(row[3], 0.0);
    }

    #[test]
    fn log_sum_exp_handles_large_values() {
        let row = [1000.0, 1000.0];
        let lse = log_sum_exp(&row);
        assert!((lse - (1000.0 + 2.0_f64.ln())).abs() < 1e-9);
    }
}
