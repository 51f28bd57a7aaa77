//! Learnable causal filterbanks over token-axis signals.
//!
//! Each embedding coordinate of a `[B, L, E]` activation is a length-`L` signal.
//! A bank of `M` causal kernels decomposes it into `M` channels, ReLU keeps the
//! positive part, and mix weights fold the channels back into one signal that
//! is added to the input. One bank serves all `E` coordinates of a site.

use rand::Rng;
use splm_autodiff::{conv, Graph, Scalar, Var};

use crate::config::{FilterConfig, FilterVariant};
use crate::error::{invalid, Result};
use crate::mask::MaskDecoder;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::rng;

/// Plain-value filterbank: `M` kernels stored back to back plus `M` mix weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T> {
    pub lengths: Vec<usize>,
    pub kernels: Vec<T>,
    pub mix: Vec<T>,
}

impl<T: Scalar> FilterBank<T> {
    pub fn new(lengths: Vec<usize>, kernels: Vec<T>, mix: Vec<T>) -> Result<Self> {
        if lengths.is_empty() || lengths.contains(&0) {
            return invalid("a filterbank needs at least one channel and every kernel length >= 1");
        }
        if kernels.len() != lengths.iter().sum::<usize>() {
            return invalid(format!("{} kernel taps for lengths summing to {}", kernels.len(), lengths.iter().sum::<usize>()));
        }
        if mix.len() != lengths.len() {
            return invalid(format!("{} mix weights for {} channels", mix.len(), lengths.len()));
        }
        Ok(FilterBank { lengths, kernels, mix })
    }

    /// Concatenates sub-banks channel-wise.
    pub fn concat(banks: &[FilterBank<T>]) -> Result<Self> {
        let mut out = FilterBank { lengths: Vec::new(), kernels: Vec::new(), mix: Vec::new() };
        for b in banks {
            out.lengths.extend_from_slice(&b.lengths);
            out.kernels.extend_from_slice(&b.kernels);
            out.mix.extend_from_slice(&b.mix);
        }
        Self::new(out.lengths, out.kernels, out.mix)
    }

    pub fn channels(&self) -> usize {
        self.lengths.len()
    }

    pub fn kernel(&self, k: usize) -> &[T] {
        let off: usize = self.lengths[..k].iter().sum();
        &self.kernels[off..off + self.lengths[k]]
    }

    /// Trainable scalars: every tap plus one weight per channel.
    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.mix.len()
    }
}

/// `tf[k][t] = max(0, (h_k * e)[t])`, shape `[M][L]`.
pub fn decompose<T: Scalar>(e: &[T], bank: &FilterBank<T>) -> Vec<Vec<T>> {
    let m = bank.channels();
    let flat = conv::conv_bank_forward(e, &bank.kernels, &bank.lengths);
    (0..m)
        .map(|k| {
            (0..e.len())
                .map(|t| {
                    let v = flat[t * m + k];
                    if v > T::zero() {
                        v
                    } else {
                        T::zero()
                    }
                })
                .collect()
        })
        .collect()
}

/// `f[t] = sum_k w_k max(0, (h_k * e)[t])`.
pub fn filter_fixed<T: Scalar>(e: &[T], bank: &FilterBank<T>) -> Vec<T> {
    conv::filter_bank_mix_forward(e, &bank.kernels, &bank.lengths, &bank.mix)
}

/// Sum of the fixed filter over several sub-banks, one per kernel length.
pub fn filter_multiscale<T: Scalar>(e: &[T], banks: &[FilterBank<T>]) -> Result<Vec<T>> {
    if banks.is_empty() {
        return invalid("multi-scale filtering needs at least one sub-bank");
    }
    let m = banks[0].channels();
    if banks.iter().any(|b| b.channels() != m) {
        return invalid("multi-scale sub-banks must have equal channel counts");
    }
    Ok(filter_fixed(e, &FilterBank::concat(banks)?))
}

pub fn apply_residual<T: Scalar>(e: &[T], filtered: &[T]) -> Result<Vec<T>> {
    if e.len() != filtered.len() {
        return invalid(format!("residual of lengths {} and {}", e.len(), filtered.len()));
    }
    Ok(e.iter().zip(filtered).map(|(&a, &b)| a + b).collect())
}

/// Parameters one site adds: all taps, plus mix weights when present, plus the mask decoder.
pub fn site_param_count<T: Scalar>(store: &ParamStore<T>, site: &FilterSite) -> usize {
    site.param_ids().into_iter().map(|id| store.get(id).len()).sum()
}

/// One filter site on the tape.
#[derive(Debug, Clone)]
pub struct FilterSite {
    pub block: usize,
    pub lengths: Vec<usize>,
    pub kernels: ParamId,
    pub mix: Option<ParamId>,
    pub mask: Option<MaskDecoder>,
}

impl FilterSite {
    /// Kernels start as `U(-1/sqrt(K), 1/sqrt(K))` per channel and mix weights as
    /// zero, so a fresh site is the identity.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        block: usize,
        cfg: &FilterConfig,
        context_len: usize,
    ) -> Result<Self> {
        if cfg.variant == FilterVariant::None {
            return invalid("cannot build a filter site for variant none");
        }
        let lengths = cfg.kernel_lengths();
        let kname = format!("{name}.kernels");
        let mut r = rng::named(store.seed(), "param", &kname);
        let mut taps = Vec::with_capacity(lengths.iter().sum());
        for &k in &lengths {
            let a = 1.0 / (k as f64).sqrt();
            taps.extend((0..k).map(|_| T::of(r.random_range(-a..=a))));
        }
        let total = taps.len();
        let kernels = store.add_data(&kname, vec![total], taps, true)?;
        let mix = if cfg.has_mix_weights() {
            Some(store.add(&format!("{name}.mix"), vec![lengths.len()], Init::Zeros, true)?)
        } else {
            None
        };
        let mask = if cfg.variant == FilterVariant::TokenAdaptive {
            Some(MaskDecoder::new(store, &format!("{name}.mask"), lengths.len(), &cfg.mask, context_len)?)
        } else {
            None
        };
        Ok(FilterSite { block, lengths, kernels, mix, mask })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.kernels];
        ids.extend(self.mix);
        if let Some(m) = &self.mask {
            ids.extend(m.param_ids());
        }
        ids
    }

    /// Plain-value snapshot of the bank; a site without static weights reports ones.
    pub fn bank<T: Scalar>(&self, store: &ParamStore<T>) -> FilterBank<T> {
        let mix = match self.mix {
            Some(id) => store.get(id).data().to_vec(),
            None => vec![T::one(); self.lengths.len()],
        };
        FilterBank { lengths: self.lengths.clone(), kernels: store.get(self.kernels).data().to_vec(), mix }
    }

    /// Filtered residual update of `x [B, L, E]`, coordinate by coordinate.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.apply_traced(g, p, x)?.0)
    }

    /// As [`FilterSite::apply`], also returning the token weights `[B * E, L, M]`
    /// of an adaptive site.
    pub fn apply_traced<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Option<Var>)> {
        let &[b, l, e] = g.shape(x) else {
            return invalid(format!("filter site input must be [B, L, E], got {:?}", g.shape(x)));
        };
        let sig = g.permute(x, &[0, 2, 1])?;
        let sig = g.reshape(sig, &[b * e, l])?;
        let mut weights = None;
        let f = match &self.mask {
            None => {
                let Some(mix) = self.mix else {
                    return invalid("fixed filter site without mix weights");
                };
                g.filter_bank_mix(sig, p[self.kernels], p[mix], &self.lengths)?
            }
            Some(dec) => {
                let pre = g.conv_bank(sig, p[self.kernels], &self.lengths)?;
                let tf = g.relu(pre);
                let mut w = dec.forward(g, p, tf)?;
                weights = Some(w);
                if let Some(mix) = self.mix {
                    w = g.mul_row(w, p[mix])?;
                }
                let prod = g.mul(w, tf)?;
                g.sum_axis(prod, 2)?
            }
        };
        let f = g.reshape(f, &[b, e, l])?;
        let f = g.permute(f, &[0, 2, 1])?;
        Ok((g.add(x, f)?, weights))
    }
}
