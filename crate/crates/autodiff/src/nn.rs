use crate::error::{invalid, Result};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::scalar::Scalar;

/// Numerically stable softmax of one row, restricted to `row[..visible]`.
/// Entries at or beyond `visible` come out as exact zeros.
pub fn softmax_row<T: Scalar>(row: &[T], visible: usize, out: &mut [T]) {
    let max = row[..visible].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out[..visible].iter_mut().zip(&row[..visible]) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in &mut out[..visible] {
        *o = *o / sum;
    }
    for o in &mut out[visible..] {
        *o = T::zero();
    }
}

impl<T: Scalar> Graph<T> {
    /// Softmax over the trailing dimension. With `causal`, the input must end in a
    /// square `[.., n, n]` block and column `u` of row `t` is masked out for `u > t`.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&n) = shape.last() else {
            return invalid("softmax of a scalar");
        };
        if causal && (shape.len() < 2 || shape[shape.len() - 2] != n) {
            return invalid(format!("causal softmax needs a trailing square block, got {shape:?}"));
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for (r, (row, o)) in xv.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let visible = if causal { r % n + 1 } else { n };
            softmax_row(row, visible, o);
        }
        Ok(self.push(out, shape, Op::Softmax { x, causal }))
    }

    /// Layer normalisation over the trailing dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return invalid(format!(
                "layer_norm: gain {:?} / bias {:?} must match trailing dim of {shape:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(eps);
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (row, o) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                o[j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.push(out, shape, Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds }))
    }

    /// Row lookup `table[ids[i]]`; output shape `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let sh = self.shape(table);
        if sh.len() != 2 {
            return invalid(format!("embedding table must be 2-D, got {sh:?}"));
        }
        let (v, d) = (sh[0], sh[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return invalid(format!("embedding id {bad} out of range for table with {v} rows"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(out, vec![ids.len(), d], Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`, in nats.
    /// `logits` is `[.., V]` with one target per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        let Some(&v) = shape.last() else {
            return invalid("cross_entropy of a scalar");
        };
        let lv = self.value(logits);
        let rows = lv.len() / v.max(1);
        if rows != targets.len() || rows == 0 {
            return invalid(format!("cross_entropy: {rows} rows but {} targets", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return invalid(format!("target {bad} out of range for {v} classes"));
        }
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for ((row, p), &t) in lv.chunks(v).zip(probs.chunks_mut(v)).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[t]);
            softmax_row(row, v, p);
        }
        let loss = total / T::of(rows as f64);
        Ok(self.push(vec![loss], vec![], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Mean Huber loss between `pred` and a constant `target` of the same size.
    pub fn huber(&mut self, pred: Var, target: &[T], delta: T) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() || pv.is_empty() {
            return invalid(format!("huber: {} predictions vs {} targets", pv.len(), target.len()));
        }
        if delta <= T::zero() {
            return invalid("huber: delta must be positive");
        }
        let half = T::of(0.5);
        let total = pv
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let r = (p - y).abs();
                if r <= delta {
                    half * r * r
                } else {
                    delta * (r - half * delta)
                }
            })
            .sum::<T>();
        let loss = total / T::of(pv.len() as f64);
        Ok(self.push(vec![loss], vec![], Op::Huber { pred, target: target.to_vec(), delta }))
    }
}

pub(crate) fn softmax_backward<T: Scalar>(
    g: &[T],
    y: &[T],
    shape: &[usize],
    x: Var,
    _causal: bool,
    acc: &mut GradSink<T>,
) {
    let n = *shape.last().unwrap();
    // Masked entries have y = 0, so the generic formula already yields 0 there.
    acc.add(x, |d| {
        for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
            let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
            for j in 0..n {
                dr[j] = dr[j] + yr[j] * (gr[j] - dot);
            }
        }
    });
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    g: &[T],
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[T],
    rstd: &[T],
    acc: &mut GradSink<T>,
) {
    let (xv, gv) = (acc.value(x), acc.value(gamma));
    let d = gv.len();
    let inv_d = T::of(1.0 / d as f64);
    acc.add(x, |dx| {
        for r in 0..mean.len() {
            let xr = &xv[r * d..(r + 1) * d];
            let gr = &g[r * d..(r + 1) * d];
            let (mu, rs) = (mean[r], rstd[r]);
            let mut sum_gy = T::zero();
            let mut sum_gy_xhat = T::zero();
            for j in 0..d {
                let gy = gr[j] * gv[j];
                sum_gy = sum_gy + gy;
                sum_gy_xhat = sum_gy_xhat + gy * (xr[j] - mu) * rs;
            }
            for j in 0..d {
                let xhat = (xr[j] - mu) * rs;
                let gy = gr[j] * gv[j];
                dx[r * d + j] = dx[r * d + j] + rs * (gy - inv_d * sum_gy - xhat * inv_d * sum_gy_xhat);
            }
        }
    });
    acc.add(gamma, |dg| {
        for r in 0..mean.len() {
            for j in 0..d {
                let xhat = (xv[r * d + j] - mean[r]) * rstd[r];
                dg[j] = dg[j] + g[r * d + j] * xhat;
            }
        }
    });
    acc.add(beta, |db| {
        for gr in g.chunks(d) {
            for j in 0..d {
                db[j] = db[j] + gr[j];
            }
        }
    });
}

pub(crate) fn embedding_backward<T: Scalar>(g: &[T], table: Var, ids: &[usize], acc: &mut GradSink<T>) {
    let d = acc.shape(table)[1];
    acc.add(table, |dt| {
        for (row, &i) in g.chunks(d).zip(ids) {
            for j in 0..d {
                dt[i * d + j] = dt[i * d + j] + row[j];
            }
        }
    });
}

pub(crate) fn cross_entropy_backward<T: Scalar>(
    g: &[T],
    logits: Var,
    targets: &[usize],
    probs: &[T],
    acc: &mut GradSink<T>,
) {
    let rows = targets.len();
    let v = probs.len() / rows;
    let s = g[0] / T::of(rows as f64);
    acc.add(logits, |d| {
        for (r, &t) in targets.iter().enumerate() {
            for j in 0..v {
                let onehot = if j == t { T::one() } else { T::zero() };
                d[r * v + j] = d[r * v + j] + s * (probs[r * v + j] - onehot);
            }
        }
    });
}

pub(crate) fn huber_backward<T: Scalar>(g: &[T], pred: Var, target: &[T], delta: T, acc: &mut GradSink<T>) {
    let pv = acc.value(pred);
    let s = g[0] / T::of(pv.len() as f64);
    acc.add(pred, |d| {
        for ((d, &p), &y) in d.iter_mut().zip(pv).zip(target) {
            let r = p - y;
            let dr = if r.abs() <= delta { r } else { delta * r.signum() };
            *d = *d + s * dr;
        }
    });
}
