//! Encoder-style sequence classifier with spectral reweighting after every block.

use rand::seq::SliceRandom;
use splm_autodiff::{Graph, Scalar, Var};

use crate::config::{parse_kv, parse_value, string_enum};
use crate::dct::{DctBasis, DctSite};
use crate::error::{invalid, Error, Result};
use crate::layers::{add_positions, Block, LayerNorm, Linear, INIT_STD};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::rng;
use crate::synth::{SynthConfig, SynthDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DctMode {
    /// No spectral sites.
    Off,
    /// Sites with weights fixed at one.
    Frozen,
    Trainable,
}
string_enum!(DctMode { Off => "off", Frozen => "frozen", Trainable => "trainable" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassLoss {
    /// Huber (delta 1) between the logits and the one-hot label.
    Huber,
    CrossEntropy,
}
string_enum!(ClassLoss { Huber => "huber", CrossEntropy => "cross_entropy" });

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub tokens: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub dct: DctMode,
    pub loss: ClassLoss,
}

impl ClassifierConfig {
    /// 6 blocks of width 64 with 8 heads over 40 tokens.
    pub fn paper(input_dim: usize, classes: usize) -> Self {
        ClassifierConfig {
            n_layers: 6,
            d_model: 64,
            n_heads: 8,
            d_ff: 256,
            tokens: 40,
            input_dim,
            classes,
            dct: DctMode::Trainable,
            loss: ClassLoss::Huber,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_layers, self.d_model, self.n_heads, self.d_ff, self.tokens, self.input_dim, self.classes];
        if dims.contains(&0) || !self.d_model.is_multiple_of(self.n_heads) {
            return invalid(format!("invalid classifier dimensions {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Classifier<T> {
    pub config: ClassifierConfig,
    pub store: ParamStore<T>,
    pub in_proj: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub sites: Vec<DctSite>,
    pub basis: DctBasis<T>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new(seed);
        let in_proj = Linear::new(&mut store, "in", c.input_dim, c.d_model, Init::Normal(INIT_STD), Some(Init::Zeros))?;
        // learned, but started from a sinusoid table so attention can find offsets early
        let pos = store.add("pos", vec![c.tokens, c.d_model], Init::Zeros, true)?;
        let blocks = (0..c.n_layers)
            .map(|i| Block::new(&mut store, &format!("blocks.{i}"), c.d_model, c.n_heads, c.d_ff, false))
            .collect::<Result<Vec<_>>>()?;
        let sites = match c.dct {
            DctMode::Off => Vec::new(),
            mode => (0..c.n_layers)
                .map(|i| DctSite::new(&mut store, &format!("dct.{i}"), c.tokens, mode == DctMode::Trainable))
                .collect::<Result<Vec<_>>>()?,
        };
        let ln_f = LayerNorm::new(&mut store, "ln_f", c.d_model)?;
        let head = Linear::new(&mut store, "head", c.d_model, c.classes, Init::Normal(INIT_STD), Some(Init::Zeros))?;
        let basis = DctBasis::new(c.tokens)?;
        store.set(pos, &sinusoid_table::<T>(c.tokens, c.d_model))?;
        Ok(Classifier { config, store, in_proj, pos, blocks, sites, basis, ln_f, head })
    }

    /// `x` is row-major `[B, tokens, input_dim]`; returns logits `[B, classes]`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: &[T], batch: usize) -> Result<Var> {
        let c = &self.config;
        if batch == 0 || x.len() != batch * c.tokens * c.input_dim {
            return invalid(format!("input of {} values is not [{batch}, {}, {}]", x.len(), c.tokens, c.input_dim));
        }
        let x = g.constant(vec![batch, c.tokens, c.input_dim], x.to_vec())?;
        let h = self.in_proj.forward(g, p, x)?;
        let mut h = add_positions(g, h, p[self.pos])?;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(g, p, h, &mut None)?;
            if let Some(site) = self.sites.get(i) {
                h = site.apply(g, p, &self.basis, h)?;
            }
        }
        let h = self.ln_f.forward(g, p, h)?;
        let pooled = g.mean_axis(h, 1)?;
        self.head.forward(g, p, pooled)
    }

    pub fn loss(&self, g: &mut Graph<T>, logits: Var, labels: &[u32]) -> Result<Var> {
        let k = self.config.classes;
        match self.config.loss {
            ClassLoss::CrossEntropy => {
                let t: Vec<usize> = labels.iter().map(|&c| c as usize).collect();
                Ok(g.cross_entropy(logits, &t)?)
            }
            ClassLoss::Huber => {
                let mut onehot = vec![T::zero(); labels.len() * k];
                for (i, &c) in labels.iter().enumerate() {
                    onehot[i * k + c as usize] = T::one();
                }
                Ok(g.huber(logits, &onehot, T::one())?)
            }
        }
    }

    pub fn logits(&self, x: &[T], batch: usize) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let y = self.forward(&mut g, &p, x, batch)?;
        Ok(g.value(y).to_vec())
    }

    /// Fraction of samples whose arg-max logit is the label.
    pub fn accuracy(&self, ds: &SynthDataset, batch: usize) -> Result<f64> {
        let k = self.config.classes;
        let mut correct = 0;
        for start in (0..ds.len()).step_by(batch.max(1)) {
            let end = (start + batch).min(ds.len());
            let x: Vec<T> = (start..end).flat_map(|i| ds.sample(i).iter().map(|&v| T::of(v))).collect();
            let y = self.logits(&x, end - start)?;
            for (row, &label) in y.chunks(k).zip(&ds.labels[start..end]) {
                let pred = (0..k).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal)).unwrap();
                correct += (pred == label as usize) as usize;
            }
        }
        Ok(correct as f64 / ds.len() as f64)
    }
}

/// Interleaved unit-amplitude sine/cosine position table.
fn sinusoid_table<T: Scalar>(tokens: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(tokens * d);
    for t in 0..tokens {
        for i in 0..d {
            let rate = 10_000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = t as f64 * rate;
            out.push(T::of(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { epochs: 20, batch: 32, adam: AdamConfig { lr: 3e-3, warmup: 50, ..Default::default() }, seed: 0 }
    }
}

/// Mini-batch training with a fresh shuffle per epoch. Returns mean loss per epoch.
pub fn fit<T: Scalar>(model: &mut Classifier<T>, ds: &SynthDataset, cfg: &FitConfig) -> Result<Vec<f64>> {
    let mut opt = Adam::new(&model.store, cfg.adam.clone());
    let per = ds.length * ds.dim;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "shuffle", epoch as u64));
        let (mut total, mut n) = (0.0, 0);
        for chunk in order.chunks(cfg.batch) {
            let mut x = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                x.extend(ds.sample(i).iter().map(|&v| T::of(v)));
            }
            let labels: Vec<u32> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let y = model.forward(&mut g, &p, &x, chunk.len())?;
            let loss = model.loss(&mut g, y, &labels)?;
            let v = g.item(loss).as_f64();
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite classifier loss in epoch {epoch}")));
            }
            g.backward(loss)?;
            model.store.collect_grads(&g, &p);
            opt.step(&mut model.store);
            total += v;
            n += 1;
        }
        losses.push(total / n as f64);
    }
    Ok(losses)
}

/// Trainable-versus-frozen spectral weights on the planted-frequency task.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthExperiment {
    pub data: SynthConfig,
    pub test_samples: usize,
    pub model: ClassifierConfig,
    pub fit: FitConfig,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub trainable: f64,
    pub frozen: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthReport {
    pub majority: f64,
    pub chance: f64,
    pub runs: Vec<SeedResult>,
}

impl SynthReport {
    pub fn mean_trainable(&self) -> f64 {
        self.runs.iter().map(|r| r.trainable).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_frozen(&self) -> f64 {
        self.runs.iter().map(|r| r.frozen).sum::<f64>() / self.runs.len() as f64
    }
}

impl SynthExperiment {
    /// Small single-CPU setting: two blocks of width 32 over 40 tokens.
    pub fn desk() -> Self {
        let data = SynthConfig::default();
        let mut model = ClassifierConfig::paper(data.dim, data.classes);
        model.n_layers = 2;
        model.d_model = 32;
        model.n_heads = 4;
        model.d_ff = 64;
        model.tokens = data.length;
        SynthExperiment { data, test_samples: 500, model, fit: FitConfig::default(), seeds: vec![0, 1, 2] }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut e = Self::desk();
        for (k, v) in parse_kv(text)? {
            e.set(&k, &v)?;
        }
        Ok(e)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "synth.classes" => self.data.classes = parse_value(key, v)?,
            "synth.length" => self.data.length = parse_value(key, v)?,
            "synth.dim" => self.data.dim = parse_value(key, v)?,
            "synth.noise" => self.data.noise = parse_value(key, v)?,
            "synth.samples" => self.data.samples = parse_value(key, v)?,
            "synth.test_samples" => self.test_samples = parse_value(key, v)?,
            "synth.signal_amp" => self.data.signal_amp = parse_value(key, v)?,
            "synth.distractor_amp" => self.data.distractor_amp = parse_value(key, v)?,
            "synth.distractors" => self.data.distractors = parse_value(key, v)?,
            "cls.n_layers" => self.model.n_layers = parse_value(key, v)?,
            "cls.d_model" => self.model.d_model = parse_value(key, v)?,
            "cls.n_heads" => self.model.n_heads = parse_value(key, v)?,
            "cls.d_ff" => self.model.d_ff = parse_value(key, v)?,
            "cls.loss" => self.model.loss = v.parse()?,
            "fit.epochs" => self.fit.epochs = parse_value(key, v)?,
            "fit.batch" => self.fit.batch = parse_value(key, v)?,
            "fit.lr" => self.fit.adam.lr = parse_value(key, v)?,
            "fit.warmup" => self.fit.adam.warmup = parse_value(key, v)?,
            "fit.clip" => self.fit.adam.clip = parse_value(key, v)?,
            "seeds" => {
                self.seeds = v.split(',').map(|s| parse_value(key, s.trim())).collect::<Result<Vec<u64>>>()?;
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// One dataset per seed (train and test drawn from disjoint streams), two
    /// models per seed that differ only in whether the spectral weights train.
    pub fn run<T: Scalar>(&self, mut progress: impl FnMut(&SeedResult)) -> Result<SynthReport> {
        if self.seeds.is_empty() {
            return invalid("at least one seed is required");
        }
        let mut model_cfg = self.model.clone();
        model_cfg.tokens = self.data.length;
        model_cfg.input_dim = self.data.dim;
        model_cfg.classes = self.data.classes;
        let mut runs = Vec::new();
        let mut majority = 0.0;
        for &seed in &self.seeds {
            let train = SynthConfig { seed: seed.wrapping_mul(2), ..self.data.clone() }.generate()?;
            let test = SynthConfig { seed: seed.wrapping_mul(2) + 1, samples: self.test_samples, ..self.data.clone() }.generate()?;
            majority = test.majority_rate();
            let mut acc = [0.0; 2];
            for (slot, mode) in [DctMode::Trainable, DctMode::Frozen].into_iter().enumerate() {
                let mut m = Classifier::<T>::new(ClassifierConfig { dct: mode, ..model_cfg.clone() }, seed)?;
                fit(&mut m, &train, &FitConfig { seed, ..self.fit.clone() })?;
                acc[slot] = m.accuracy(&test, 128)?;
            }
            let r = SeedResult { seed, trainable: acc[0], frozen: acc[1] };
            progress(&r);
            runs.push(r);
        }
        Ok(SynthReport { majority, chance: 1.0 / self.data.classes as f64, runs })
    }
}
