use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of every tensor on the tape.
///
/// Implemented for `f64` (default, used by every gradient check) and `f32`
/// (faster training). The GEMM entry point dispatches to the matching
/// `matrixmultiply` kernel.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const NAME: &'static str;
    const BYTES: usize;

    /// `c = alpha * a . b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through the given dims and strides must lie inside
    /// the buffers behind the pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every Scalar")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("every Scalar converts to f64")
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

/// Row-major / transposed view of a matrix stored in a flat slice.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        MatView { rows, cols, rs: cols as isize, cs: 1 }
    }

    /// The transpose of a row-major `rows x cols` buffer, seen as `cols x rows`.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        MatView { rows: cols, cols: rows, rs: 1, cs: cols as isize }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// Safe wrapper: `c = a . b + beta * c`.
pub(crate) fn gemm<T: Scalar>(a: &[T], av: MatView, b: &[T], bv: MatView, beta: T, c: &mut [T], cv: MatView) {
    assert_eq!(av.cols, bv.rows, "gemm inner dims");
    assert_eq!(av.rows, cv.rows, "gemm rows");
    assert_eq!(bv.cols, cv.cols, "gemm cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        for v in c.iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    assert!(av.max_index() < a.len() && bv.max_index() < b.len() && cv.max_index() < c.len());
    // SAFETY: bounds of all three views checked above.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            T::one(),
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}
