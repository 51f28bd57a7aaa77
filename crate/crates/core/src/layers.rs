//! Transformer building blocks over the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use splm_autodiff::{Graph, Scalar, Var};

use crate::error::{invalid, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Training-time dropout source. `None` wherever a layer takes one means eval mode.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep: Vec<bool> = (0..g.value(x).len()).map(|_| self.rng.random::<f64>() >= self.p).collect();
        Ok(g.dropout(x, &keep, self.p)?)
    }
}

pub(crate) fn maybe_dropout<T: Scalar>(g: &mut Graph<T>, x: Var, drop: &mut Option<&mut Dropout<'_>>) -> Result<Var> {
    match drop {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weight stored `[d_in, d_out]`, so `y = x W + b`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        w_init: Init,
        b_init: Option<Init>,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), vec![d_in, d_out], w_init, true)?;
        let b = match b_init {
            Some(init) => Some(store.add(&format!("{name}.b"), vec![d_out], init, true)?),
            None => None,
        };
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        Ok(match self.b {
            Some(b) => g.add_row(y, p[b])?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), vec![d], Init::Ones, true)?,
            beta: store.add(&format!("{name}.beta"), vec![d], Init::Zeros, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)?)
    }
}

/// Multi-head self-attention with biased Q/K/V/O projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl Attention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize, causal: bool) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return invalid(format!("width {d} is not divisible by {heads} heads"));
        }
        let lin = |store: &mut ParamStore<T>, n: &str| {
            Linear::new(store, &format!("{name}.{n}"), d, d, Init::Normal(INIT_STD), Some(Init::Zeros))
        };
        Ok(Attention {
            q: lin(store, "q")?,
            k: lin(store, "k")?,
            v: lin(store, "v")?,
            o: lin(store, "o")?,
            heads,
            causal,
        })
    }

    fn split_heads<T: Scalar>(&self, g: &mut Graph<T>, x: Var, b: usize, l: usize, d: usize) -> Result<Var> {
        let dh = d / self.heads;
        let x = g.reshape(x, &[b, l, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[b * self.heads, l, dh])?)
    }

    /// `x [B, L, d]` to `(output [B, L, d], attention weights [B * heads, L, L])`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let &[b, l, d] = g.shape(x) else {
            return invalid(format!("attention input must be [B, L, d], got {:?}", g.shape(x)));
        };
        if d != self.q.d_in {
            return invalid(format!("attention width {} does not match input width {d}", self.q.d_in));
        }
        let dh = d / self.heads;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let q = self.split_heads(g, q, b, l, d)?;
        let k = self.split_heads(g, k, b, l, d)?;
        let v = self.split_heads(g, v, b, l, d)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        let att = g.softmax(scores, self.causal)?;
        let ctx = g.bmm(att, v, false)?;
        let ctx = g.reshape(ctx, &[b, self.heads, l, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, d])?;
        Ok((self.o.forward(g, p, ctx)?, att))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, d_ff: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, d_ff, Init::Normal(INIT_STD), Some(Init::Zeros))?,
            down: Linear::new(store, &format!("{name}.down"), d_ff, d, Init::Normal(INIT_STD), Some(Init::Zeros))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.relu(h);
        self.down.forward(g, p, h)
    }
}

/// Pre-norm block: `x + attn(ln1(x))`, then `+ ffn(ln2(.))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        causal: bool,
    ) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, causal)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d_ff)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, drop: &mut Option<&mut Dropout<'_>>) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let (a, _) = self.attn.forward(g, p, h)?;
        let a = maybe_dropout(g, a, drop)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        let f = maybe_dropout(g, f, drop)?;
        Ok(g.add(x, f)?)
    }
}

/// Adds learned absolute positions `table[0..L]` to every sequence of `x [B, L, d]`.
pub(crate) fn add_positions<T: Scalar>(g: &mut Graph<T>, x: Var, table: Var) -> Result<Var> {
    let &[b, l, d] = g.shape(x) else {
        return invalid(format!("expected [B, L, d], got {:?}", g.shape(x)));
    };
    let ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
    let pos = g.embedding(table, &ids)?;
    let pos = g.reshape(pos, &[b, l, d])?;
    Ok(g.add(x, pos)?)
}
