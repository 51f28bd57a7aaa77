use crate::error::{invalid, Result};
use crate::graph::{add_into, GradSink, Graph, Op, Var};
use crate::scalar::Scalar;

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return invalid(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, Op::Scale(a, c))
    }

    fn check_row(&self, x: Var, row: Var, what: &str) -> Result<usize> {
        let d = *self.shape(x).last().unwrap_or(&1);
        if self.shape(row).len() != 1 || self.shape(row)[0] != d {
            return invalid(format!(
                "{what}: row vector of shape {:?} does not match trailing dim of {:?}",
                self.shape(row),
                self.shape(x)
            ));
        }
        Ok(d)
    }

    /// `x[.., j] + row[j]`: bias broadcast over the trailing dimension.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.check_row(x, row, "add_row")?;
        let r = self.value(row);
        let value = self.value(x).chunks(d).flat_map(|c| c.iter().zip(r).map(|(&a, &b)| a + b)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(value, shape, Op::AddRow(x, row)))
    }

    /// `x[.., j] * row[j]`: per-channel gain broadcast over the trailing dimension.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.check_row(x, row, "mul_row")?;
        let r = self.value(row);
        let value = self.value(x).chunks(d).flat_map(|c| c.iter().zip(r).map(|(&a, &b)| a * b)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(value, shape, Op::MulRow(x, row)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = self.shape(x).to_vec();
        self.push(value, shape, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
        let shape = self.shape(x).to_vec();
        self.push(value, shape, Op::Sigmoid(x))
    }

    /// Inverted dropout with a caller-supplied keep mask.
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: f64) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return invalid("dropout mask length does not match input");
        }
        if !(0.0..1.0).contains(&p) {
            return invalid(format!("dropout probability {p} outside [0, 1)"));
        }
        let s = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = keep.iter().map(|&k| if k { s } else { T::zero() }).collect();
        let value = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(value, shape, Op::Dropout { x, mask }))
    }
}

pub(crate) fn add_backward<T: Scalar>(g: &[T], a: Var, b: Var, acc: &mut GradSink<T>) {
    acc.add(a, |d| add_into(d, g));
    acc.add(b, |d| add_into(d, g));
}

pub(crate) fn sub_backward<T: Scalar>(g: &[T], a: Var, b: Var, acc: &mut GradSink<T>) {
    acc.add(a, |d| add_into(d, g));
    acc.add(b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g));
}

pub(crate) fn mul_backward<T: Scalar>(g: &[T], a: Var, b: Var, acc: &mut GradSink<T>) {
    let (av, bv) = (acc.value(a), acc.value(b));
    acc.add(a, |d| {
        for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
            *d = *d + g * y;
        }
    });
    acc.add(b, |d| {
        for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
            *d = *d + g * x;
        }
    });
}

pub(crate) fn scale_backward<T: Scalar>(g: &[T], a: Var, c: T, acc: &mut GradSink<T>) {
    acc.add(a, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * c));
}

pub(crate) fn add_row_backward<T: Scalar>(g: &[T], x: Var, row: Var, acc: &mut GradSink<T>) {
    let n = acc.value(row).len();
    acc.add(x, |d| add_into(d, g));
    acc.add(row, |d| {
        for chunk in g.chunks(n) {
            add_into(d, chunk);
        }
    });
}

pub(crate) fn mul_row_backward<T: Scalar>(g: &[T], x: Var, row: Var, acc: &mut GradSink<T>) {
    let (xv, rv) = (acc.value(x), acc.value(row));
    let n = rv.len();
    acc.add(x, |d| {
        for (dc, gc) in d.chunks_mut(n).zip(g.chunks(n)) {
            for ((d, &g), &r) in dc.iter_mut().zip(gc).zip(rv) {
                *d = *d + g * r;
            }
        }
    });
    acc.add(row, |d| {
        for (gc, xc) in g.chunks(n).zip(xv.chunks(n)) {
            for ((d, &g), &x) in d.iter_mut().zip(gc).zip(xc) {
                *d = *d + g * x;
            }
        }
    });
}

pub(crate) fn relu_backward<T: Scalar>(g: &[T], x: Var, acc: &mut GradSink<T>) {
    let xv = acc.value(x);
    acc.add(x, |d| {
        for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
            if v > T::zero() {
                *d = *d + g;
            }
        }
    });
}

pub(crate) fn dropout_backward<T: Scalar>(g: &[T], x: Var, mask: &[T], acc: &mut GradSink<T>) {
    acc.add(x, |d| {
        for ((d, &g), &m) in d.iter_mut().zip(g).zip(mask) {
            *d = *d + g * m;
        }
    });
}

pub(crate) fn sigmoid_backward<T: Scalar>(g: &[T], y: &[T], x: Var, acc: &mut GradSink<T>) {
    acc.add(x, |d| {
        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
            *d = *d + g * y * (T::one() - y);
        }
    });
}
