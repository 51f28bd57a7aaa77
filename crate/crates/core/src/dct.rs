//! Orthonormal DCT-II along the token axis and learned spectral reweighting.
//!
//! `X[k] = s_k sum_n x[n] cos(pi (n + 1/2) k / L)` with `s_0 = sqrt(1/L)` and
//! `s_k = sqrt(2/L)` otherwise. The basis matrix `C[k][n]` is orthogonal, so the
//! inverse is `x[n] = sum_k C[k][n] X[k]`.

use std::f64::consts::PI;

use splm_autodiff::{Graph, Scalar, Var};

use crate::error::{invalid, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};

/// Basis entry `s_k cos(pi (n + 1/2) k / L)`.
pub fn basis_entry(k: usize, n: usize, l: usize) -> f64 {
    let s = if k == 0 { (1.0 / l as f64).sqrt() } else { (2.0 / l as f64).sqrt() };
    s * (PI * (n as f64 + 0.5) * k as f64 / l as f64).cos()
}

/// Precomputed `C[k][n]` for one length.
#[derive(Debug, Clone, PartialEq)]
pub struct DctBasis<T> {
    len: usize,
    /// Row-major `[k][n]`.
    table: Vec<T>,
}

impl<T: Scalar> DctBasis<T> {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return invalid("DCT length must be at least 1");
        }
        let table = (0..len).flat_map(|k| (0..len).map(move |n| T::of(basis_entry(k, n, len)))).collect();
        Ok(DctBasis { len, table })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn table(&self) -> &[T] {
        &self.table
    }

    /// `C^T` laid out row-major, i.e. `[n][k]`.
    pub fn transposed(&self) -> Vec<T> {
        let l = self.len;
        (0..l).flat_map(|n| (0..l).map(move |k| self.table[k * l + n])).collect()
    }

    fn check(&self, x: &[T]) -> Result<()> {
        if x.len() != self.len {
            return invalid(format!("signal of length {} for a length-{} transform", x.len(), self.len));
        }
        Ok(())
    }

    pub fn dct2(&self, x: &[T]) -> Result<Vec<T>> {
        self.check(x)?;
        let l = self.len;
        Ok((0..l)
            .map(|k| {
                let row = &self.table[k * l..(k + 1) * l];
                let mut acc = T::zero();
                for n in 0..l {
                    acc = acc + row[n] * x[n];
                }
                acc
            })
            .collect())
    }

    pub fn idct2(&self, coeffs: &[T]) -> Result<Vec<T>> {
        self.check(coeffs)?;
        let l = self.len;
        Ok((0..l)
            .map(|n| {
                let mut acc = T::zero();
                for k in 0..l {
                    acc = acc + self.table[k * l + n] * coeffs[k];
                }
                acc
            })
            .collect())
    }

    /// `idct2(w * dct2(e))`.
    pub fn spectral_reweight(&self, e: &[T], w: &[T]) -> Result<Vec<T>> {
        if w.len() != self.len {
            return invalid(format!("{} weights for a length-{} transform", w.len(), self.len));
        }
        let x = self.dct2(e)?;
        let y: Vec<T> = x.iter().zip(w).map(|(&a, &b)| b * a).collect();
        self.idct2(&y)
    }
}

pub fn dct2<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    DctBasis::new(x.len())?.dct2(x)
}

pub fn idct2<T: Scalar>(coeffs: &[T]) -> Result<Vec<T>> {
    DctBasis::new(coeffs.len())?.idct2(coeffs)
}

pub fn spectral_reweight<T: Scalar>(e: &[T], w: &[T]) -> Result<Vec<T>> {
    DctBasis::new(e.len())?.spectral_reweight(e, w)
}

/// One reweighting site: per-coefficient weights shared by every coordinate.
/// The result replaces the input; there is no residual path.
#[derive(Debug, Clone)]
pub struct DctSite {
    pub weights: ParamId,
    pub len: usize,
}

impl DctSite {
    /// Weights start at one, making the site the identity up to rounding.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, len: usize, trainable: bool) -> Result<Self> {
        Ok(DctSite { weights: store.add(&format!("{name}.weights"), vec![len], Init::Ones, trainable)?, len })
    }

    /// Reweights every coordinate signal of `x [B, L, E]` along `L`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, basis: &DctBasis<T>, x: Var) -> Result<Var> {
        let &[b, l, e] = g.shape(x) else {
            return invalid(format!("spectral site input must be [B, L, E], got {:?}", g.shape(x)));
        };
        if l != self.len || basis.len() != l {
            return invalid(format!("sequence length {l} does not match the site length {}", self.len));
        }
        let fwd = g.constant(vec![l, l], basis.transposed())?;
        let inv = g.constant(vec![l, l], basis.table().to_vec())?;
        let s = g.permute(x, &[0, 2, 1])?;
        let s = g.reshape(s, &[b * e, l])?;
        let coeffs = g.matmul(s, fwd)?;
        let coeffs = g.mul_row(coeffs, p[self.weights])?;
        let back = g.matmul(coeffs, inv)?;
        let back = g.reshape(back, &[b, e, l])?;
        Ok(g.permute(back, &[0, 2, 1])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_signal_is_pure_dc() {
        let x = vec![1.5; 12];
        let c = dct2(&x).unwrap();
        assert!((c[0] - 1.5 * 12f64.sqrt()).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn basis_vector_has_one_coefficient() {
        let l = 20;
        let x: Vec<f64> = (0..l).map(|n| (PI * (n as f64 + 0.5) * 3.0 / l as f64).cos()).collect();
        let c = dct2(&x).unwrap();
        for (k, v) in c.iter().enumerate() {
            if k != 3 {
                assert!(v.abs() < 1e-12, "k={k}: {v}");
            }
        }
        assert!(c[3].abs() > 1.0);
    }

    #[test]
    fn scaled_dc_inverts_to_ones() {
        let l = 9;
        let mut c = vec![0.0; l];
        c[0] = (l as f64).sqrt();
        assert!(idct2(&c).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn dc_only_weights_keep_the_mean() {
        let e = [1.0, 4.0, -2.0, 3.0];
        let mut w = vec![0.0; 4];
        w[0] = 1.0;
        let out = spectral_reweight(&e, &w).unwrap();
        assert!(out.iter().all(|v: &f64| (v - 1.5).abs() < 1e-12));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(spectral_reweight(&[1.0, 2.0], &[1.0]).is_err());
        assert!(DctBasis::<f64>::new(0).is_err());
    }
}
