//! Strided matrix views over flat buffers and the GEMM entry point.

/// A `rows x cols` matrix living in a flat buffer at `offset` with the given
/// row and column strides (in elements).
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
    pub offset: usize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize, offset: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
            offset,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            offset: self.offset,
        }
    }

    pub fn transposed_if(self, flag: bool) -> Self {
        if flag {
            self.t()
        } else {
            self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// `c = beta * c + a * b` for strided views.
///
/// Each output element is accumulated over the inner dimension in ascending
/// order, independent of how many rows or columns surround it, so results do
/// not depend on batch composition.
pub(crate) fn gemm(c: &mut [f64], cv: MatView, a: &[f64], av: MatView, b: &[f64], bv: MatView, beta: f64) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(cv.rows, av.rows, "gemm output rows");
    assert_eq!(cv.cols, bv.cols, "gemm output cols");
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.last_index() < c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.rs as usize + j * cv.cs as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(av.last_index() < a.len());
    assert!(bv.last_index() < b.len());
    // SAFETY: all three views were bounds-checked against their buffers above,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}
