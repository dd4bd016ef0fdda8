/// A strided view of a row-major matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct Strided {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Strided {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Strided {
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Strided {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn extent(&self) -> usize {
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
    }
}

/// `c = beta * c + a * b`.
pub(crate) fn gemm(a: &[f64], av: Strided, b: &[f64], bv: Strided, c: &mut [f64], cv: Strided, beta: f64) {
    assert_eq!(av.cols, bv.rows);
    assert_eq!(av.rows, cv.rows);
    assert_eq!(bv.cols, cv.cols);
    assert!(a.len() >= av.extent() && b.len() >= bv.extent() && c.len() >= cv.extent());
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            1.0,
            a.as_ptr(),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr(),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}
