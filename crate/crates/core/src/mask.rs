//! Token-varying filter weights from a small causal decoder.
//!
//! The decoder reads the rectified `M`-channel decomposition of one coordinate
//! signal, token by token, and emits a weight per token and channel. It runs
//! with a causal mask, so the weights at token `t` see channels at `0..=t` only.

use splm_autodiff::{Graph, Scalar, Var};

use crate::config::{MaskActivation, MaskDecoderConfig, MaskMode};
use crate::error::{invalid, Result};
use crate::layers::{add_positions, Block, LayerNorm, Linear, INIT_STD};
use crate::params::{Init, ParamId, ParamStore};
use crate::filter::FilterBank;

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub channels: usize,
    pub dim: usize,
    pub in_proj: Linear,
    pub pos: Option<ParamId>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub out_proj: Linear,
    pub activation: MaskActivation,
}

impl MaskDecoder {
    /// The output bias starts at zero when the mask replaces the static weights
    /// and at one when it scales them. Positional embeddings start at zero.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: &MaskDecoderConfig,
        context_len: usize,
    ) -> Result<Self> {
        if cfg.dim == 0 || cfg.heads == 0 || !cfg.dim.is_multiple_of(cfg.heads) {
            return invalid(format!("mask width {} must be a positive multiple of {} heads", cfg.dim, cfg.heads));
        }
        let in_proj = Linear::new(store, &format!("{name}.in"), channels, cfg.dim, Init::Normal(INIT_STD), Some(Init::Zeros))?;
        let pos = if cfg.positional {
            Some(store.add(&format!("{name}.pos"), vec![context_len, cfg.dim], Init::Zeros, true)?)
        } else {
            None
        };
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, &format!("{name}.blocks.{i}"), cfg.dim, cfg.heads, cfg.d_ff, true))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), cfg.dim)?;
        let bias = match cfg.mode {
            MaskMode::Replace => Init::Zeros,
            MaskMode::Combine => Init::Ones,
        };
        let out_proj = Linear::new(store, &format!("{name}.out"), cfg.dim, channels, Init::Normal(INIT_STD), Some(bias))?;
        Ok(MaskDecoder { channels, dim: cfg.dim, in_proj, pos, blocks, ln_f, out_proj, activation: cfg.activation })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let lin = |l: &Linear| std::iter::once(l.w).chain(l.b);
        let mut ids: Vec<ParamId> = lin(&self.in_proj).collect();
        ids.extend(self.pos);
        for b in &self.blocks {
            ids.extend([b.ln1.gamma, b.ln1.beta, b.ln2.gamma, b.ln2.beta]);
            for l in [&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.ffn.up, &b.ffn.down] {
                ids.extend(lin(l));
            }
        }
        ids.extend([self.ln_f.gamma, self.ln_f.beta]);
        ids.extend(lin(&self.out_proj));
        ids
    }

    /// `tf [S, L, M]` to weights `[S, L, M]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &crate::params::Bound, tf: Var) -> Result<Var> {
        let &[_, l, m] = g.shape(tf) else {
            return invalid(format!("mask decoder input must be [S, L, M], got {:?}", g.shape(tf)));
        };
        if m != self.channels {
            return invalid(format!("mask decoder expects {} channels, got {m}", self.channels));
        }
        let mut h = self.in_proj.forward(g, p, tf)?;
        if let Some(pos) = self.pos {
            if l > g.shape(p[pos])[0] {
                return invalid(format!("sequence of {l} tokens exceeds mask positional table"));
            }
            h = add_positions(g, h, p[pos])?;
        }
        for b in &self.blocks {
            h = b.forward(g, p, h, &mut None)?;
        }
        let h = self.ln_f.forward(g, p, h)?;
        let w = self.out_proj.forward(g, p, h)?;
        Ok(match self.activation {
            MaskActivation::Linear => w,
            MaskActivation::Sigmoid => g.sigmoid(w),
        })
    }
}

/// Runs the decoder on one decomposition `tf_rep [M][L]`, returning `W [L][M]`.
pub fn compute_token_weights<T: Scalar>(tf_rep: &[Vec<T>], decoder: &MaskDecoder, store: &ParamStore<T>) -> Result<Vec<Vec<T>>> {
    let m = tf_rep.len();
    if m != decoder.channels {
        return invalid(format!("decomposition has {m} channels, decoder expects {}", decoder.channels));
    }
    let l = tf_rep[0].len();
    if l == 0 || tf_rep.iter().any(|r| r.len() != l) {
        return invalid("decomposition rows must share one non-zero length");
    }
    let flat: Vec<T> = (0..l).flat_map(|t| tf_rep.iter().map(move |row| row[t])).collect();
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(vec![1, l, m], flat)?;
    let w = decoder.forward(&mut g, &p, x)?;
    Ok(g.value(w).chunks(m).map(<[T]>::to_vec).collect())
}

/// `ft[t] = sum_k W[t][k] * max(0, (h_k * e)[t])`. The bank's mix weights are not used.
pub fn filter_adaptive<T: Scalar>(e: &[T], bank: &FilterBank<T>, weights: &[Vec<T>]) -> Result<Vec<T>> {
    let m = bank.channels();
    if weights.len() != e.len() || weights.iter().any(|r| r.len() != m) {
        return invalid(format!("token weights must be [{}][{m}]", e.len()));
    }
    let tf = crate::filter::decompose(e, bank);
    Ok((0..e.len())
        .map(|t| {
            let mut acc = T::zero();
            for k in 0..m {
                acc = acc + weights[t][k] * tf[k][t];
            }
            acc
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LN_EPS;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomized(m: usize, l: usize, positional: bool, seed: u64) -> (ParamStore<f64>, MaskDecoder) {
        let mut store = ParamStore::new(seed);
        let cfg = MaskDecoderConfig { dim: 8, heads: 2, d_ff: 16, positional, ..Default::default() };
        let dec = MaskDecoder::new(&mut store, "m", m, &cfg, l).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for p in store.iter_mut() {
            for v in p.tensor.data_mut() {
                *v = r.random_range(-0.6..0.6);
            }
        }
        (store, dec)
    }

    fn rand_tf(r: &mut ChaCha8Rng, m: usize, l: usize) -> Vec<Vec<f64>> {
        (0..m).map(|_| (0..l).map(|_| r.random_range(0.0..1.0)).collect()).collect()
    }

    fn dense(x: &[f64], w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
        let din = x.len();
        (0..dout).map(|j| b[j] + (0..din).map(|i| x[i] * w[i * dout + j]).sum::<f64>()).collect()
    }

    fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        x.iter().enumerate().map(|(j, v)| (v - mu) / (var + LN_EPS).sqrt() * g[j] + b[j]).collect()
    }

    /// Token-at-a-time decoder: position t only ever reads rows 0..=t.
    fn naive_weights(store: &ParamStore<f64>, dec: &MaskDecoder, tf: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let v = |id: ParamId| store.get(id).data().to_vec();
        let lin = |x: &[f64], l: &Linear| dense(x, &v(l.w), &v(l.b.unwrap()), l.d_out);
        let (m, l, d) = (tf.len(), tf[0].len(), dec.dim);
        let blk = &dec.blocks[0];
        let heads = blk.attn.heads;
        let dh = d / heads;
        let mut hs: Vec<Vec<f64>> = Vec::new();
        let mut keys: Vec<Vec<f64>> = Vec::new();
        let mut vals: Vec<Vec<f64>> = Vec::new();
        let mut out = Vec::new();
        for t in 0..l {
            let col: Vec<f64> = (0..m).map(|k| tf[k][t]).collect();
            let mut h = lin(&col, &dec.in_proj);
            if let Some(pos) = dec.pos {
                let pt = &v(pos)[t * d..(t + 1) * d];
                h.iter_mut().zip(pt).for_each(|(a, b)| *a += b);
            }
            hs.push(h.clone());
            let a_in = ln(&h, &v(blk.ln1.gamma), &v(blk.ln1.beta));
            let q = lin(&a_in, &blk.attn.q);
            keys.push(lin(&a_in, &blk.attn.k));
            vals.push(lin(&a_in, &blk.attn.v));
            let mut ctx = vec![0.0; d];
            for hd in 0..heads {
                let r = hd * dh..(hd + 1) * dh;
                let s: Vec<f64> = (0..=t)
                    .map(|u| q[r.clone()].iter().zip(&keys[u][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
                for u in 0..=t {
                    let a = (s[u] - mx).exp() / z;
                    for c in r.clone() {
                        ctx[c] += a * vals[u][c];
                    }
                }
            }
            let att = lin(&ctx, &blk.attn.o);
            let x1: Vec<f64> = h.iter().zip(&att).map(|(a, b)| a + b).collect();
            let f_in = ln(&x1, &v(blk.ln2.gamma), &v(blk.ln2.beta));
            let up: Vec<f64> = lin(&f_in, &blk.ffn.up).into_iter().map(|x| x.max(0.0)).collect();
            let down = lin(&up, &blk.ffn.down);
            let x2: Vec<f64> = x1.iter().zip(&down).map(|(a, b)| a + b).collect();
            let fin = ln(&x2, &v(dec.ln_f.gamma), &v(dec.ln_f.beta));
            out.push(lin(&fin, &dec.out_proj));
        }
        out
    }

    #[test]
    fn weights_match_token_at_a_time_reference() {
        let (store, dec) = randomized(8, 8, true, 21);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let tf = rand_tf(&mut r, 8, 8);
        let got = compute_token_weights(&tf, &dec, &store).unwrap();
        let want = naive_weights(&store, &dec, &tf);
        for (a, b) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn weights_are_causal_bit_for_bit() {
        let (store, dec) = randomized(6, 10, true, 8);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let tf = rand_tf(&mut r, 6, 10);
        let base = compute_token_weights(&tf, &dec, &store).unwrap();
        for t in 0..9 {
            let mut p = tf.clone();
            for row in &mut p {
                for v in &mut row[t + 1..] {
                    *v += r.random_range(0.0..3.0);
                }
            }
            let w = compute_token_weights(&p, &dec, &store).unwrap();
            for u in 0..=t {
                let same = w[u].iter().zip(&base[u]).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "token {u} changed after perturbing {t}+");
            }
        }
    }

    #[test]
    fn zero_input_gives_token_constant_weights_at_init_positions() {
        // positional table starts at zero; everything else random
        let (mut store, dec) = randomized(5, 6, true, 2);
        let pos = dec.pos.unwrap();
        let n = store.get(pos).len();
        store.set(pos, &vec![0.0; n]).unwrap();
        let w = compute_token_weights(&vec![vec![0.0; 6]; 5], &dec, &store).unwrap();
        // averaging t identical values rounds differently for each t
        for row in &w[1..] {
            for (a, b) in row.iter().zip(&w[0]) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_output_projection_gives_bias_weights() {
        for (mode, want) in [(MaskMode::Replace, 0.0), (MaskMode::Combine, 1.0)] {
            let mut store = ParamStore::<f64>::new(0);
            let cfg = MaskDecoderConfig { mode, ..Default::default() };
            let dec = MaskDecoder::new(&mut store, "m", 4, &cfg, 16).unwrap();
            let n = store.get(dec.out_proj.w).len();
            store.set(dec.out_proj.w, &vec![0.0; n]).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(6);
            let w = compute_token_weights(&rand_tf(&mut r, 4, 16), &dec, &store).unwrap();
            assert!(w.iter().flatten().all(|&v| v == want));
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let (store, dec) = randomized(4, 4, false, 0);
        assert!(compute_token_weights(&vec![vec![0.0; 4]; 3], &dec, &store).is_err());
    }

    #[test]
    fn adaptive_reductions() {
        let bank = FilterBank::new(vec![2, 3], vec![0.5, -0.4, 1.0, 0.3, -0.2], vec![1.0, 1.0]).unwrap();
        let e = [0.7, -1.2, 0.4, 2.0, -0.1];
        let ones = vec![vec![1.0; 2]; 5];
        assert_eq!(filter_adaptive(&e, &bank, &ones).unwrap(), crate::filter::filter_fixed(&e, &bank));
        let zeros = vec![vec![0.0; 2]; 5];
        assert!(filter_adaptive(&e, &bank, &zeros).unwrap().iter().all(|&v| v == 0.0));
        assert!(filter_adaptive(&e, &bank, &zeros[..4]).is_err());
    }
}
