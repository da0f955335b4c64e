/// Strided matrix view used by [`gemm`]: `(data, row_stride, col_stride)`.
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }
}

/// `c = a (m x k) * b (k x n) + beta * c`, with `c` row-major `m x n`.
///
/// Single-threaded, so results are reproducible bit for bit.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        let last_a = (m - 1) * a.rs + (k - 1) * a.cs;
        let last_b = (k - 1) * b.rs + (n - 1) * b.cs;
        assert!(last_a < a.data.len(), "gemm: lhs view out of bounds");
        assert!(last_b < b.data.len(), "gemm: rhs view out of bounds");
    }
    // SAFETY: bounds of every strided view were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, MatRef::row_major(&a, 3), MatRef::row_major(&b, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|t| a[i * 3 + t] * b[t * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // a^T (3x2) * a (2x3)
        let mut d = vec![0.0; 9];
        gemm(3, 2, 3, MatRef::transposed(&a, 3), MatRef::row_major(&a, 3), 0.0, &mut d);
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..2).map(|t| a[t * 3 + i] * a[t * 3 + j]).sum();
                assert!((d[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }
}
