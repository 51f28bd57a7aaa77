use crate::error::{invalid, Result};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::numel;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (laid out as `shape`) into the axis order `perm`.
fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // stride in the source for each output axis
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    loop {
        // innermost axis as a tight loop
        let (n, st) = (out_shape[last], walk[last]);
        for j in 0..n {
            out.push(src[offset + j * st]);
        }
        // odometer increment over the outer axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= walk[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return invalid(format!("cannot reshape {:?} into {shape:?}", self.shape(x)));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(value, shape.to_vec(), Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return invalid(format!("{perm:?} is not a permutation of the axes of {shape:?}"));
        }
        if shape.is_empty() {
            return self.reshape(x, &[]);
        }
        let value = permute_data(self.value(x), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(value, out_shape, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return invalid("transpose_last2 needs at least two axes");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum::<T>();
        self.push(vec![total], vec![], Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return invalid(format!("axis {axis} out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let src = &xv[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(out, out_shape, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(x).get(axis).unwrap_or(&1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::of(1.0 / n as f64)))
    }
}

pub(crate) fn permute_backward<T: Scalar>(g: &[T], out_shape: &[usize], x: Var, perm: &[usize], acc: &mut GradSink<T>) {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    let back = permute_data(g, out_shape, &inv);
    acc.add(x, |d| crate::graph::add_into(d, &back));
}

pub(crate) fn sum_axis_backward<T: Scalar>(g: &[T], x: Var, axis: usize, acc: &mut GradSink<T>) {
    let shape = acc.shape(x);
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    acc.add(x, |d| {
        for o in 0..outer {
            let src = &g[o * inner..(o + 1) * inner];
            for k in 0..n {
                let dst = &mut d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
    });
}
