/// Strided read-only view of a row-major buffer.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Sub-block of a row-major matrix with `ld` columns.
    pub fn block(data: &'a [f64], ld: usize, row0: usize, col0: usize, rows: usize, cols: usize) -> Self {
        Mat {
            data: &data[row0 * ld + col0..],
            rows,
            cols,
            row_stride: ld as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = a · b + beta · c`, where `c` is row-major with leading dimension `ldc`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], ldc: usize, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * ldc + n);
    if k == 0 {
        for i in 0..m {
            for x in &mut c[i * ldc..i * ldc + n] {
                *x *= beta;
            }
        }
        return;
    }
    // SAFETY: every stride/extent pair above addresses memory inside the
    // borrowed slices (checked by the slice bounds and assertions).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
