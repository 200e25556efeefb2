//! Thin wrappers over the `matrixmultiply` GEMM kernels.

/// Row-major strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols as isize, cs: 1 }
    }

    /// Transpose of a row-major `[rows, cols]` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols as isize }
    }
}

/// `c[m,n] = alpha * a[m,k] * b[k,n] + beta * c`, with `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the strides describe matrices that lie inside the provided slices;
    // callers construct views from row-major buffers of exactly these shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
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
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // [3,4]
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, View::row_major(&a, 3), View::row_major(&b, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-14);
            }
        }
        // a^T [3,2] * a [2,3]
        let mut d = vec![0.0; 9];
        gemm(3, 2, 3, 1.0, View::transposed(&a, 3), View::row_major(&a, 3), 0.0, &mut d);
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..2).map(|k| a[k * 3 + i] * a[k * 3 + j]).sum();
                assert!((d[i * 3 + j] - want).abs() < 1e-14);
            }
        }
    }
}
