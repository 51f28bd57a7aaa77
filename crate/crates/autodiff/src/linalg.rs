use crate::error::{invalid, Result};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::scalar::{gemm, MatView, Scalar};

impl<T: Scalar> Graph<T> {
    /// `a[.., k] . b[k, m] -> [.., m]`; leading dims of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash.is_empty() || bsh.len() != 2 || *ash.last().unwrap() != bsh[0] {
            return invalid(format!("matmul: incompatible shapes {ash:?} and {bsh:?}"));
        }
        let inner = bsh[0];
        let cols = bsh[1];
        let rows = self.value(a).len() / inner.max(1);
        let mut out = vec![T::zero(); rows * cols];
        gemm(
            self.value(a),
            MatView::row_major(rows, inner),
            self.value(b),
            MatView::row_major(inner, cols),
            T::zero(),
            &mut out,
            MatView::row_major(rows, cols),
        );
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(cols);
        Ok(self.push(out, shape, Op::MatMul { a, b, rows, inner, cols }))
    }

    /// Batched product over the leading dims: `a[.., n, k] . b[.., k, m]`, or
    /// `a[.., n, k] . b[.., m, k]^T` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() != ash.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return invalid(format!("bmm: incompatible shapes {ash:?} and {bsh:?}"));
        }
        let r = ash.len();
        let (n, k) = (ash[r - 2], ash[r - 1]);
        let (bk, m) = if transpose_b { (bsh[r - 1], bsh[r - 2]) } else { (bsh[r - 2], bsh[r - 1]) };
        if bk != k {
            return invalid(format!("bmm: inner dims {k} and {bk} differ"));
        }
        let groups: usize = ash[..r - 2].iter().product();
        let mut out = vec![T::zero(); groups * n * m];
        let bview = if transpose_b { MatView::transposed(m, k) } else { MatView::row_major(k, m) };
        {
            let (av, bv) = (self.value(a), self.value(b));
            for gi in 0..groups {
                gemm(
                    &av[gi * n * k..(gi + 1) * n * k],
                    MatView::row_major(n, k),
                    &bv[gi * k * m..(gi + 1) * k * m],
                    bview,
                    T::zero(),
                    &mut out[gi * n * m..(gi + 1) * n * m],
                    MatView::row_major(n, m),
                );
            }
        }
        let mut shape = ash[..r - 2].to_vec();
        shape.extend([n, m]);
        Ok(self.push(out, shape, Op::BatchMatMul { a, b, groups, n, k, m, transpose_b }))
    }
}

pub(crate) fn matmul_backward<T: Scalar>(
    g: &[T],
    a: Var,
    b: Var,
    rows: usize,
    inner: usize,
    cols: usize,
    acc: &mut GradSink<T>,
) {
    let (av, bv) = (acc.value(a), acc.value(b));
    // da = g . b^T
    acc.add(a, |d| {
        gemm(
            g,
            MatView::row_major(rows, cols),
            bv,
            MatView::transposed(inner, cols),
            T::one(),
            d,
            MatView::row_major(rows, inner),
        )
    });
    // db = a^T . g
    acc.add(b, |d| {
        gemm(
            av,
            MatView::transposed(rows, inner),
            g,
            MatView::row_major(rows, cols),
            T::one(),
            d,
            MatView::row_major(inner, cols),
        )
    });
}

pub(crate) fn bmm_backward<T: Scalar>(
    g: &[T],
    a: Var,
    b: Var,
    (groups, n, k, m): (usize, usize, usize, usize),
    transpose_b: bool,
    acc: &mut GradSink<T>,
) {
    let (av, bv) = (acc.value(a), acc.value(b));
    acc.add(a, |d| {
        // da = g . B^T, with B = b or b^T
        let bt = if transpose_b { MatView::row_major(m, k) } else { MatView::transposed(k, m) };
        for gi in 0..groups {
            gemm(
                &g[gi * n * m..(gi + 1) * n * m],
                MatView::row_major(n, m),
                &bv[gi * k * m..(gi + 1) * k * m],
                bt,
                T::one(),
                &mut d[gi * n * k..(gi + 1) * n * k],
                MatView::row_major(n, k),
            );
        }
    });
    acc.add(b, |d| {
        for gi in 0..groups {
            let ga = &av[gi * n * k..(gi + 1) * n * k];
            let gg = &g[gi * n * m..(gi + 1) * n * m];
            let db = &mut d[gi * k * m..(gi + 1) * k * m];
            if transpose_b {
                // b is [m, k]: db = g^T . a
                gemm(gg, MatView::transposed(n, m), ga, MatView::row_major(n, k), T::one(), db, MatView::row_major(m, k));
            } else {
                // b is [k, m]: db = a^T . g
                gemm(ga, MatView::transposed(n, k), gg, MatView::row_major(n, m), T::one(), db, MatView::row_major(k, m));
            }
        }
    });
}
