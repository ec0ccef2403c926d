/// Strided view into a flat buffer, describing an `rows x cols` matrix.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        View { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c = alpha * a @ b + beta * c`, where `c` is row-major `a.rows x b.cols`.
pub fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "gemm inner dimension mismatch");
    assert_eq!(c.len(), m * n, "gemm output size mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_offset() < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.max_offset() < b.data.len(), "gemm rhs view out of bounds");
    // SAFETY: every element addressed by the two views lies inside its slice
    // (checked above) and `c` is exactly m*n contiguous elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
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
    fn gemm_matches_naive_with_overlapping_rows() {
        // rows overlap: row r starts at r*2 and spans 3 elements
        let data: Vec<f64> = (0..11).map(|v| v as f64 * 0.5 - 1.0).collect();
        let a = View { data: &data, rows: 4, cols: 3, row_stride: 2, col_stride: 1 };
        let bdat = [1.0, -2.0, 0.5, 3.0, 2.0, 1.0];
        let b = View::row_major(&bdat, 3, 2);
        let mut c = vec![1.0; 8];
        gemm(1.0, a, b, 1.0, &mut c);
        for r in 0..4 {
            for j in 0..2 {
                let mut acc = 1.0;
                for i in 0..3 {
                    acc += data[r * 2 + i] * bdat[i * 2 + j];
                }
                assert!((c[r * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_view_multiplies() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let mut c = vec![0.0; 9];
        let v = View::row_major(&a, 2, 3);
        gemm(1.0, v.t(), v, 0.0, &mut c); // 3x3 = a^T a
        assert_eq!(c, vec![17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }
}
