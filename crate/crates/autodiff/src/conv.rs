//! Causal 1-D convolution kernels.
//!
//! Orientation is true convolution with zero left-padding of `K - 1`:
//! `out[t] = sum_{j<K} kernel[j] * signal[t - j]`, with `signal[n] = 0` for `n < 0`.
//! The output keeps the signal length and position `t` never reads past `t`.
//!
//! Every sum runs in ascending tap order, then ascending channel order, so
//! results are reproducible bit for bit.

use crate::error::{invalid, Result};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::scalar::Scalar;

/// One causal convolution, written into `out` (same length as `signal`).
pub fn causal_conv1d_into<T: Scalar>(signal: &[T], kernel: &[T], out: &mut [T]) {
    let l = signal.len();
    out.iter_mut().for_each(|o| *o = T::zero());
    for (j, &h) in kernel.iter().enumerate().take(l) {
        for t in j..l {
            out[t] = out[t] + h * signal[t - j];
        }
    }
}

pub fn causal_conv1d<T: Scalar>(signal: &[T], kernel: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); signal.len()];
    causal_conv1d_into(signal, kernel, &mut out);
    out
}

/// Start offset of each channel's kernel in a flat kernel buffer.
fn offsets(lengths: &[usize]) -> Vec<usize> {
    let mut off = Vec::with_capacity(lengths.len());
    let mut acc = 0;
    for &k in lengths {
        off.push(acc);
        acc += k;
    }
    off
}

/// Channel-major pre-activations of a bank of causal kernels on one signal,
/// returned token-major: `out[t * M + k] = (h_k * signal)[t]`.
pub fn conv_bank_forward<T: Scalar>(signal: &[T], kernels: &[T], lengths: &[usize]) -> Vec<T> {
    let l = signal.len();
    let m = lengths.len();
    let mut out = vec![T::zero(); l * m];
    let mut tmp = vec![T::zero(); l];
    for (k, (&off, &len)) in offsets(lengths).iter().zip(lengths).enumerate() {
        causal_conv1d_into(signal, &kernels[off..off + len], &mut tmp);
        for t in 0..l {
            out[t * m + k] = tmp[t];
        }
    }
    out
}

/// `out[t] = sum_k weights[k] * max(0, (h_k * signal)[t])` for one signal.
pub fn filter_bank_mix_forward<T: Scalar>(signal: &[T], kernels: &[T], lengths: &[usize], weights: &[T]) -> Vec<T> {
    let l = signal.len();
    let mut out = vec![T::zero(); l];
    let mut tmp = vec![T::zero(); l];
    for ((&off, &len), &w) in offsets(lengths).iter().zip(lengths).zip(weights) {
        causal_conv1d_into(signal, &kernels[off..off + len], &mut tmp);
        for t in 0..l {
            let r = if tmp[t] > T::zero() { tmp[t] } else { T::zero() };
            out[t] = out[t] + w * r;
        }
    }
    out
}

/// Adds the signal and kernel gradients of one causal convolution given the
/// output gradient `dpre`.
fn conv_grads_into<T: Scalar>(signal: &[T], kernel: &[T], dpre: &[T], dsignal: Option<&mut [T]>, dkernel: Option<&mut [T]>) {
    let l = signal.len();
    let k = kernel.len().min(l);
    if let Some(dk) = dkernel {
        for j in 0..k {
            let mut s = T::zero();
            for t in j..l {
                s = s + dpre[t] * signal[t - j];
            }
            dk[j] = dk[j] + s;
        }
    }
    if let Some(ds) = dsignal {
        for (j, &h) in kernel.iter().enumerate().take(k) {
            for t in j..l {
                ds[t - j] = ds[t - j] + dpre[t] * h;
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    fn signal_dims(&self, signal: Var) -> Result<(usize, usize)> {
        let sh = self.shape(signal);
        let Some(&l) = sh.last() else {
            return invalid("convolution input must have a time axis");
        };
        if l == 0 {
            return invalid("empty signal");
        }
        Ok((self.value(signal).len() / l, l))
    }

    fn check_bank(&self, kernels: Var, lengths: &[usize]) -> Result<()> {
        if lengths.is_empty() || lengths.contains(&0) {
            return invalid("filter bank needs at least one channel and every kernel length >= 1");
        }
        let total: usize = lengths.iter().sum();
        if self.shape(kernels).len() != 1 || self.value(kernels).len() != total {
            return invalid(format!(
                "flat kernel buffer of shape {:?} does not hold {total} taps",
                self.shape(kernels)
            ));
        }
        Ok(())
    }

    /// Applies one causal kernel `[K]` along the trailing axis of `signal [.., L]`.
    pub fn causal_conv1d(&mut self, signal: Var, kernel: Var) -> Result<Var> {
        let (_, l) = self.signal_dims(signal)?;
        if self.shape(kernel).len() != 1 || self.value(kernel).is_empty() {
            return invalid(format!("kernel must be a non-empty vector, got {:?}", self.shape(kernel)));
        }
        let (sv, kv) = (self.value(signal), self.value(kernel));
        let mut out = vec![T::zero(); sv.len()];
        for (s, o) in sv.chunks(l).zip(out.chunks_mut(l)) {
            causal_conv1d_into(s, kv, o);
        }
        let shape = self.shape(signal).to_vec();
        Ok(self.push(out, shape, Op::CausalConv1d { signal, kernel }))
    }

    /// Bank of `M` causal kernels (concatenated in `kernels`, lengths in `lengths`)
    /// over `signal [S, L]`. Output `[S, L, M]`, pre-activation.
    pub fn conv_bank(&mut self, signal: Var, kernels: Var, lengths: &[usize]) -> Result<Var> {
        let (s, l) = self.signal_dims(signal)?;
        self.check_bank(kernels, lengths)?;
        let (sv, kv) = (self.value(signal), self.value(kernels));
        let mut out = Vec::with_capacity(s * l * lengths.len());
        for sig in sv.chunks(l) {
            out.extend(conv_bank_forward(sig, kv, lengths));
        }
        Ok(self.push(out, vec![s, l, lengths.len()], Op::ConvBank { signal, kernels, lengths: lengths.to_vec() }))
    }

    /// Fused `sum_k w_k relu(h_k * x)` over every row of `signal [S, L]`.
    /// Never materialises the `[S, L, M]` decomposition; backward recomputes it.
    pub fn filter_bank_mix(&mut self, signal: Var, kernels: Var, weights: Var, lengths: &[usize]) -> Result<Var> {
        let (s, l) = self.signal_dims(signal)?;
        self.check_bank(kernels, lengths)?;
        if self.shape(weights) != [lengths.len()] {
            return invalid(format!(
                "mix weights of shape {:?} do not match {} channels",
                self.shape(weights),
                lengths.len()
            ));
        }
        let (sv, kv, wv) = (self.value(signal), self.value(kernels), self.value(weights));
        let mut out = Vec::with_capacity(s * l);
        for sig in sv.chunks(l) {
            out.extend(filter_bank_mix_forward(sig, kv, lengths, wv));
        }
        Ok(self.push(out, vec![s, l], Op::FilterBankMix { signal, kernels, weights, lengths: lengths.to_vec() }))
    }
}

pub(crate) fn causal_conv1d_backward<T: Scalar>(g: &[T], signal: Var, kernel: Var, acc: &mut GradSink<T>) {
    let (sv, kv) = (acc.value(signal), acc.value(kernel));
    let l = *acc.shape(signal).last().unwrap();
    acc.add(kernel, |dk| {
        for (s, gs) in sv.chunks(l).zip(g.chunks(l)) {
            conv_grads_into(s, kv, gs, None, Some(dk));
        }
    });
    acc.add(signal, |ds| {
        for ((s, gs), d) in sv.chunks(l).zip(g.chunks(l)).zip(ds.chunks_mut(l)) {
            conv_grads_into(s, kv, gs, Some(d), None);
        }
    });
}

pub(crate) fn conv_bank_backward<T: Scalar>(g: &[T], signal: Var, kernels: Var, lengths: &[usize], acc: &mut GradSink<T>) {
    let (sv, kv) = (acc.value(signal), acc.value(kernels));
    let l = *acc.shape(signal).last().unwrap();
    let m = lengths.len();
    let offs = offsets(lengths);
    let want_s = acc.wants(signal);
    let want_k = acc.wants(kernels);
    let mut dsig = if want_s { vec![T::zero(); sv.len()] } else { Vec::new() };
    let mut dker = if want_k { vec![T::zero(); kv.len()] } else { Vec::new() };
    let mut dpre = vec![T::zero(); l];
    for (si, sig) in sv.chunks(l).enumerate() {
        let gs = &g[si * l * m..(si + 1) * l * m];
        for (k, (&off, &len)) in offs.iter().zip(lengths).enumerate() {
            for t in 0..l {
                dpre[t] = gs[t * m + k];
            }
            let ds = if want_s { Some(&mut dsig[si * l..(si + 1) * l]) } else { None };
            let dk = if want_k { Some(&mut dker[off..off + len]) } else { None };
            conv_grads_into(sig, &kv[off..off + len], &dpre, ds, dk);
        }
    }
    if want_s {
        acc.add(signal, |d| crate::graph::add_into(d, &dsig));
    }
    if want_k {
        acc.add(kernels, |d| crate::graph::add_into(d, &dker));
    }
}

pub(crate) fn filter_bank_mix_backward<T: Scalar>(
    g: &[T],
    signal: Var,
    kernels: Var,
    weights: Var,
    lengths: &[usize],
    acc: &mut GradSink<T>,
) {
    let (sv, kv, wv) = (acc.value(signal), acc.value(kernels), acc.value(weights));
    let l = *acc.shape(signal).last().unwrap();
    let offs = offsets(lengths);
    let (want_s, want_k, want_w) = (acc.wants(signal), acc.wants(kernels), acc.wants(weights));
    let mut dsig = if want_s { vec![T::zero(); sv.len()] } else { Vec::new() };
    let mut dker = if want_k { vec![T::zero(); kv.len()] } else { Vec::new() };
    let mut dw = vec![T::zero(); wv.len()];
    let mut pre = vec![T::zero(); l];
    let mut dpre = vec![T::zero(); l];
    for (si, sig) in sv.chunks(l).enumerate() {
        let gs = &g[si * l..(si + 1) * l];
        for (k, (&off, &len)) in offs.iter().zip(lengths).enumerate() {
            let h = &kv[off..off + len];
            causal_conv1d_into(sig, h, &mut pre);
            let mut any = false;
            for t in 0..l {
                if pre[t] > T::zero() {
                    dw[k] = dw[k] + gs[t] * pre[t];
                    dpre[t] = gs[t] * wv[k];
                    any = true;
                } else {
                    dpre[t] = T::zero();
                }
            }
            if any && (want_s || want_k) {
                let ds = if want_s { Some(&mut dsig[si * l..(si + 1) * l]) } else { None };
                let dk = if want_k { Some(&mut dker[off..off + len]) } else { None };
                conv_grads_into(sig, h, &dpre, ds, dk);
            }
        }
    }
    if want_s {
        acc.add(signal, |d| crate::graph::add_into(d, &dsig));
    }
    if want_k {
        acc.add(kernels, |d| crate::graph::add_into(d, &dker));
    }
    if want_w {
        acc.add(weights, |d| crate::graph::add_into(d, &dw));
    }
}
