//! Thin safe wrappers over the `matrixmultiply` kernels.

/// Strides of a row-major `rows x cols` matrix, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// View of a row-major matrix with `cols` columns as its transpose.
    pub fn transposed(cols: usize) -> Self {
        Self {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = a·b + beta·c` where `a` is `m x k`, `b` is `k x n` and `c` is a
/// row-major `m x n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the slices cover every index addressed by the given strides:
    // `a` holds m*k values and `b` holds k*n values in row-major order and the
    // layouts only ever describe that buffer or its transpose.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sum in ascending value order, so the result does not depend on the order
/// in which the values are stored.
pub fn canonical_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    sorted.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_for_all_transpose_combinations() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, Layout::row_major(k), &b, Layout::row_major(n), &mut c, 0.0);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-14);
            }
        }
        // aᵀ·a through the transposed view.
        let mut ata = vec![0.0; k * k];
        gemm(k, m, k, &a, Layout::transposed(k), &a, Layout::row_major(k), &mut ata, 0.0);
        for i in 0..k {
            for j in 0..k {
                let want: f64 = (0..m).map(|l| a[l * k + i] * a[l * k + j]).sum();
                assert!((ata[i * k + j] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn canonical_sum_ignores_order() {
        let a = [1e16, 1.0, -1e16, 3.5, 1e-3];
        let b = [3.5, -1e16, 1e-3, 1.0, 1e16];
        assert_eq!(canonical_sum(&a).to_bits(), canonical_sum(&b).to_bits());
    }
}
