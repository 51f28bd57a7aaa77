//! Decoder-only character model with optional filter sites between blocks.

use splm_autodiff::{Graph, Scalar, Var};

use crate::config::{FilterConfig, FilterVariant, ModelConfig};
use crate::error::{invalid, Result};
use crate::filter::FilterSite;
use crate::layers::{add_positions, Block, Dropout, LayerNorm, Linear, INIT_STD};
use crate::params::{Bound, Init, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Gpt<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    /// Sorted by block index.
    pub sites: Vec<FilterSite>,
    pub ln_f: LayerNorm,
    pub head_fc: Linear,
    pub head_out: Linear,
}

impl<T: Scalar> Gpt<T> {
    /// Builds the model described by `config`, filters included. Every parameter
    /// draws from its own seed stream keyed by name, so a filtered model and its
    /// baseline share all common parameter values.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let filter = config.filter.clone();
        let mut base = config;
        base.filter.variant = FilterVariant::None;
        let c = &base;
        let mut store = ParamStore::new(seed);
        let tok_emb = store.add("tok_emb", vec![c.vocab, c.d_model], Init::Normal(INIT_STD), true)?;
        let pos_emb = store.add("pos_emb", vec![c.context_len, c.d_model], Init::Normal(INIT_STD), true)?;
        let blocks = (0..c.n_layers)
            .map(|i| Block::new(&mut store, &format!("blocks.{i}"), c.d_model, c.n_heads, c.d_ff, true))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(&mut store, "ln_f", c.d_model)?;
        let head_fc = Linear::new(&mut store, "head.fc", c.d_model, c.head_hidden, Init::Normal(INIT_STD), Some(Init::Zeros))?;
        let head_out = Linear::new(&mut store, "head.out", c.head_hidden, c.vocab, Init::Zeros, Some(Init::Zeros))?;
        let model = Gpt { config: base, store, tok_emb, pos_emb, blocks, sites: Vec::new(), ln_f, head_fc, head_out };
        if filter.variant == FilterVariant::None {
            let mut model = model;
            model.config.filter = filter;
            Ok(model)
        } else {
            model.insert_filters(&filter)
        }
    }

    /// Adds one filter site after each placed block. Only valid on a model without filters.
    pub fn insert_filters(mut self, filter: &FilterConfig) -> Result<Self> {
        if !self.sites.is_empty() {
            return invalid("model already has filter sites");
        }
        filter.validate(self.config.n_layers)?;
        if filter.variant != FilterVariant::None {
            let mut blocks = filter.placement.sites(self.config.n_layers);
            blocks.sort_unstable();
            for b in blocks {
                let site = FilterSite::new(&mut self.store, &format!("filters.{b}"), b, filter, self.config.context_len)?;
                self.sites.push(site);
            }
        }
        self.config.filter = filter.clone();
        Ok(self)
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// Trainable scalars owned by filter sites.
    pub fn filter_param_count(&self) -> usize {
        self.sites.iter().map(|s| crate::filter::site_param_count(&self.store, s)).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.store.bind(g)
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize) -> Result<usize> {
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return invalid(format!("{} tokens do not split into {batch} sequences", tokens.len()));
        }
        let l = tokens.len() / batch;
        if l > self.config.context_len {
            return invalid(format!("sequence length {l} exceeds context length {}", self.config.context_len));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return invalid(format!("token id {bad} >= vocabulary size {}", self.config.vocab));
        }
        Ok(l)
    }

    /// Final hidden states `[B, L, d]`, after the last norm.
    pub fn hidden(&self, g: &mut Graph<T>, p: &Bound, tokens: &[usize], batch: usize, drop: Option<&mut Dropout<'_>>) -> Result<Var> {
        self.hidden_traced(g, p, tokens, batch, drop, &mut Vec::new())
    }

    /// As [`Gpt::hidden`], collecting `(block, token weights)` of every adaptive site.
    pub fn hidden_traced(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        tokens: &[usize],
        batch: usize,
        mut drop: Option<&mut Dropout<'_>>,
        masks: &mut Vec<(usize, Var)>,
    ) -> Result<Var> {
        let l = self.check_tokens(tokens, batch)?;
        let d = self.config.d_model;
        let x = g.embedding(p[self.tok_emb], tokens)?;
        let x = g.reshape(x, &[batch, l, d])?;
        let mut x = add_positions(g, x, p[self.pos_emb])?;
        let mut sites = self.sites.iter().peekable();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, p, x, &mut drop)?;
            while let Some(site) = sites.next_if(|s| s.block == i) {
                let (y, w) = site.apply_traced(g, p, x)?;
                x = y;
                if let Some(w) = w {
                    masks.push((site.block, w));
                }
            }
        }
        self.ln_f.forward(g, p, x)
    }

    /// Two dense layers with a ReLU between: `[.., d]` to `[.., vocab]`.
    pub fn lm_head(&self, g: &mut Graph<T>, p: &Bound, h: Var) -> Result<Var> {
        let z = self.head_fc.forward(g, p, h)?;
        let z = g.relu(z);
        self.head_out.forward(g, p, z)
    }

    /// Logits `[B, L, vocab]` for `tokens` laid out `[B][L]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, tokens: &[usize], batch: usize, drop: Option<&mut Dropout<'_>>) -> Result<Var> {
        let h = self.hidden(g, p, tokens, batch, drop)?;
        self.lm_head(g, p, h)
    }

    /// Evaluation-mode logits as plain values.
    pub fn logits(&self, tokens: &[usize], batch: usize) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let y = self.forward(&mut g, &p, tokens, batch, None)?;
        Ok(g.value(y).to_vec())
    }

    /// Mean next-token NLL (nats) of `targets` given `tokens`, evaluation mode.
    pub fn nll(&self, tokens: &[usize], targets: &[usize], batch: usize) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let y = self.forward(&mut g, &p, tokens, batch, None)?;
        let loss = g.cross_entropy(y, targets)?;
        Ok(g.item(loss).as_f64())
    }
}
