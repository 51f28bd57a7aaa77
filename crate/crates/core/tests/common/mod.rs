//! Brute-force references written straight from the definitions.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-a..a)).collect()
}

pub fn conv(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for t in 0..x.len() {
        let mut acc = 0.0;
        for j in 0..h.len() {
            if t >= j {
                acc += h[j] * x[t - j];
            }
        }
        out[t] = acc;
    }
    out
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// `sum_k w[t][k] relu((h_k * x)[t])`.
pub fn token_weighted(x: &[f64], kernels: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<f64> {
    let tf: Vec<Vec<f64>> = kernels.iter().map(|h| conv(x, h)).collect();
    let mut out = vec![0.0; x.len()];
    for t in 0..x.len() {
        let mut acc = 0.0;
        for k in 0..kernels.len() {
            acc += w[t][k] * relu(tf[k][t]);
        }
        out[t] = acc;
    }
    out
}

pub fn fixed(x: &[f64], kernels: &[Vec<f64>], mix: &[f64]) -> Vec<f64> {
    token_weighted(x, kernels, &vec![mix.to_vec(); x.len()])
}

pub fn dct_entry(k: usize, n: usize, l: usize) -> f64 {
    let s = if k == 0 { (1.0 / l as f64).sqrt() } else { (2.0 / l as f64).sqrt() };
    s * (std::f64::consts::PI * (n as f64 + 0.5) * k as f64 / l as f64).cos()
}

pub fn dct(x: &[f64]) -> Vec<f64> {
    let l = x.len();
    (0..l)
        .map(|k| {
            let mut acc = 0.0;
            for n in 0..l {
                acc += dct_entry(k, n, l) * x[n];
            }
            acc
        })
        .collect()
}

pub fn idct(c: &[f64]) -> Vec<f64> {
    let l = c.len();
    (0..l)
        .map(|n| {
            let mut acc = 0.0;
            for k in 0..l {
                acc += dct_entry(k, n, l) * c[k];
            }
            acc
        })
        .collect()
}

pub fn reweight(x: &[f64], w: &[f64]) -> Vec<f64> {
    let c = dct(x);
    let y: Vec<f64> = c.iter().zip(w).map(|(a, b)| b * a).collect();
    idct(&y)
}
