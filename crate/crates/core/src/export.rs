//! CSV dumps of learned filters and token weights.

use std::fmt::Write;

use splm_autodiff::{Graph, Scalar};

use crate::corpus::BatchIter;
use crate::error::{invalid, Result};
use crate::gpt::Gpt;

/// One row per kernel tap: `site,channel,kernel_length,tap_index,value`.
/// Channels keep bank order, which groups them by kernel length.
pub fn kernel_csv<T: Scalar>(model: &Gpt<T>) -> Result<String> {
    if model.sites.is_empty() {
        return invalid("model has no filter sites (variant none); nothing to export");
    }
    let mut out = String::from("site,channel,kernel_length,tap_index,value\n");
    for site in &model.sites {
        let bank = site.bank(&model.store);
        for k in 0..bank.channels() {
            for (j, v) in bank.kernel(k).iter().enumerate() {
                writeln!(out, "{},{},{},{},{}", site.block, k, bank.lengths[k], j, v.as_f64()).unwrap();
            }
        }
    }
    Ok(out)
}

/// Mean `|W[t][k]|` over every coordinate signal of the first `max_windows`
/// sequential windows: `site,token,channel,mean_abs_weight`.
pub fn mask_csv<T: Scalar>(model: &Gpt<T>, data: &[u8], max_windows: usize) -> Result<String> {
    if !model.sites.iter().any(|s| s.mask.is_some()) {
        return invalid("model has no token-adaptive sites");
    }
    let context = model.config.context_len.min(data.len().saturating_sub(1));
    let Some(batch) = BatchIter::sequential(data, context, max_windows.max(1))?.next() else {
        return invalid("split too short for one window");
    };
    let mut g = Graph::new();
    let p = model.store.bind_frozen(&mut g);
    let mut masks = Vec::new();
    model.hidden_traced(&mut g, &p, &batch.inputs, batch.batch, None, &mut masks)?;
    let mut out = String::from("site,token,channel,mean_abs_weight\n");
    for (site, w) in masks {
        let &[s, l, m] = g.shape(w) else { unreachable!("token weights are [S, L, M]") };
        let vals = g.value(w);
        for t in 0..l {
            for k in 0..m {
                let mean = (0..s).map(|i| vals[(i * l + t) * m + k].as_f64().abs()).sum::<f64>() / s as f64;
                writeln!(out, "{site},{t},{k},{mean}").unwrap();
            }
        }
    }
    Ok(out)
}
