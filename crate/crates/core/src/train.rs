//! Next-token training loop, evaluation, and convergence comparison.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use splm_autodiff::{Graph, Scalar};

use crate::config::{parse_value, push, ModelConfig};
use crate::corpus::{BatchIter, CorpusSplit};
use crate::error::{invalid, Error, Result};
use crate::gpt::Gpt;
use crate::layers::Dropout;
use crate::optim::{Adam, AdamConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    /// Sequences per forward/backward pass; gradients of the passes are summed
    /// into one update. 0 runs the whole batch at once.
    pub micro_batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip: f64,
    pub eval_interval: u64,
    /// Cap on tokens per evaluation pass; 0 means the whole split.
    pub eval_tokens: usize,
    pub eval_batch: usize,
    pub seed: u64,
    pub target_nll: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch: 32,
            micro_batch: 0,
            lr: 3e-4,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip: 1.0,
            eval_interval: 250,
            eval_tokens: 0,
            eval_batch: 32,
            seed: 0,
            target_nll: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps, warmup: self.warmup, clip: self.clip }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.eval_batch == 0 || self.eval_interval == 0 {
            return Err(Error::Config("train.batch, train.eval_batch and train.eval_interval must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("learning rate must be positive and betas in [0, 1)".into()));
        }
        Ok(())
    }

    pub(crate) fn write_kv(&self, out: &mut Vec<(String, String)>) {
        push(out, "seed", self.seed);
        push(out, "train.steps", self.steps);
        push(out, "train.batch", self.batch);
        push(out, "train.micro_batch", self.micro_batch);
        push(out, "train.lr", self.lr);
        push(out, "train.warmup", self.warmup);
        push(out, "train.beta1", self.beta1);
        push(out, "train.beta2", self.beta2);
        push(out, "train.adam_eps", self.adam_eps);
        push(out, "train.clip", self.clip);
        push(out, "train.eval_interval", self.eval_interval);
        push(out, "train.eval_tokens", self.eval_tokens);
        push(out, "train.eval_batch", self.eval_batch);
        push(out, "train.target_nll", self.target_nll.map_or("none".to_string(), |v| v.to_string()));
    }

    pub(crate) fn apply_kv(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "train.steps" => self.steps = parse_value(key, v)?,
            "train.batch" => self.batch = parse_value(key, v)?,
            "train.micro_batch" => self.micro_batch = parse_value(key, v)?,
            "train.lr" => self.lr = parse_value(key, v)?,
            "train.warmup" => self.warmup = parse_value(key, v)?,
            "train.beta1" => self.beta1 = parse_value(key, v)?,
            "train.beta2" => self.beta2 = parse_value(key, v)?,
            "train.adam_eps" => self.adam_eps = parse_value(key, v)?,
            "train.clip" => self.clip = parse_value(key, v)?,
            "train.eval_interval" => self.eval_interval = parse_value(key, v)?,
            "train.eval_tokens" => self.eval_tokens = parse_value(key, v)?,
            "train.eval_batch" => self.eval_batch = parse_value(key, v)?,
            "train.target_nll" => self.target_nll = if v == "none" { None } else { Some(parse_value(key, v)?) },
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.apply_kv(k, v)?;
        }
        Ok(cfg)
    }
}

/// One line of the metrics log. `nll_nats` is a mean per-token NLL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub split: String,
    pub nll_nats: f64,
    pub tokens_seen: u64,
    pub wall_ms: u64,
}

impl MetricRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records always serialise")
    }
}

/// Mean per-token NLL over sequential non-overlapping windows of `data`.
/// Windows are the model context, or shorter when the split is small.
pub fn evaluate<T: Scalar>(model: &Gpt<T>, data: &[u8], max_tokens: usize, batch: usize) -> Result<f64> {
    if data.len() < 2 {
        return invalid("evaluation split needs at least two symbols");
    }
    let context = model.config.context_len.min(data.len() - 1);
    let windows = if max_tokens == 0 { usize::MAX } else { max_tokens.div_ceil(context) };
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut seen = 0usize;
    for b in BatchIter::sequential(data, context, batch)? {
        if seen >= windows {
            break;
        }
        let take = b.batch.min(windows - seen);
        let n = take * context;
        let nll = model.nll(&b.inputs[..n], &b.targets[..n], take)?;
        total += nll * n as f64;
        count += n;
        seen += take;
    }
    Ok(total / count as f64)
}

/// Model, optimiser and progress counters of one training run.
#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub model: Gpt<T>,
    pub optim: Adam<T>,
    pub config: TrainConfig,
    pub step: u64,
    pub tokens_seen: u64,
    pub log: Vec<MetricRecord>,
}

impl<T: Scalar> TrainRun<T> {
    /// Fresh model initialised from `train.seed`.
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let model = Gpt::new(model, train.seed)?;
        Ok(Self::from_model(model, train))
    }

    pub fn from_model(model: Gpt<T>, train: TrainConfig) -> Self {
        let optim = Adam::new(&model.store, train.adam());
        TrainRun { model, optim, config: train, step: 0, tokens_seen: 0, log: Vec::new() }
    }

    /// Loss of the batch that update `step` would use, without updating.
    pub fn peek_loss(&self, data: &[u8]) -> Result<f64> {
        let ctx = self.model.config.context_len;
        let b = BatchIter::random_at(data, ctx, self.config.batch, self.config.seed, self.step)?.next().unwrap();
        self.model.nll(&b.inputs, &b.targets, b.batch)
    }

    /// One optimiser update on a random batch; returns the pre-update loss.
    pub fn step_once(&mut self, data: &[u8]) -> Result<f64> {
        let ctx = self.model.config.context_len;
        let b = BatchIter::random_at(data, ctx, self.config.batch, self.config.seed, self.step)?.next().unwrap();
        let chunk = match self.config.micro_batch {
            0 => b.batch,
            m => m.min(b.batch),
        };
        let mut drng = rng::stream(self.config.seed, "dropout", self.step);
        let mut value = 0.0;
        for start in (0..b.batch).step_by(chunk) {
            let n = chunk.min(b.batch - start);
            let span = start * ctx..(start + n) * ctx;
            let mut g = Graph::new();
            let p = self.model.bind(&mut g);
            let mut drop = Dropout { p: self.model.config.dropout, rng: &mut drng };
            let drop = (self.model.config.dropout > 0.0).then_some(&mut drop);
            let logits = self.model.forward(&mut g, &p, &b.inputs[span.clone()], n, drop)?;
            let mut loss = g.cross_entropy(logits, &b.targets[span])?;
            if n < b.batch {
                loss = g.scale(loss, T::of(n as f64 / b.batch as f64));
            }
            value += g.item(loss).as_f64();
            if !value.is_finite() {
                self.model.store.zero_grads();
                return Ok(value);
            }
            g.backward(loss)?;
            self.model.store.collect_grads(&g, &p);
        }
        self.optim.step(&mut self.model.store);
        self.step += 1;
        self.tokens_seen += b.tokens() as u64;
        Ok(value)
    }

    fn eval_record(&self, corpus: &CorpusSplit, started: Instant) -> Result<MetricRecord> {
        let nll = evaluate(&self.model, &corpus.dev, self.config.eval_tokens, self.config.eval_batch)?;
        Ok(MetricRecord {
            step: self.step,
            split: "dev".into(),
            nll_nats: nll,
            tokens_seen: self.tokens_seen,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// Runs `steps` updates, evaluating on dev at step 0 (fresh runs), every
    /// `eval_interval` updates, and at the end. Every record is appended to the
    /// log and passed to `sink`. Returns the final dev record.
    pub fn train(&mut self, corpus: &CorpusSplit, steps: u64, sink: &mut dyn FnMut(&MetricRecord)) -> Result<MetricRecord> {
        let started = Instant::now();
        let mut emit = |run: &mut Self, r: MetricRecord| {
            sink(&r);
            run.log.push(r);
        };
        if self.step == 0 && self.log.is_empty() {
            let r = self.eval_record(corpus, started)?;
            emit(self, r);
        }
        let (mut acc, mut n) = (0.0, 0u64);
        for _ in 0..steps {
            let loss = self.step_once(&corpus.train)?;
            if !loss.is_finite() {
                let r = MetricRecord {
                    step: self.step,
                    split: "train".into(),
                    nll_nats: loss,
                    tokens_seen: self.tokens_seen,
                    wall_ms: started.elapsed().as_millis() as u64,
                };
                emit(self, r.clone());
                return Err(Error::NonFiniteLoss(Box::new(r)));
            }
            acc += loss;
            n += 1;
            if self.step.is_multiple_of(self.config.eval_interval) {
                let t = MetricRecord {
                    step: self.step,
                    split: "train".into(),
                    nll_nats: acc / n as f64,
                    tokens_seen: self.tokens_seen,
                    wall_ms: started.elapsed().as_millis() as u64,
                };
                emit(self, t);
                (acc, n) = (0.0, 0);
                let r = self.eval_record(corpus, started)?;
                emit(self, r);
            }
        }
        match self.log.last() {
            Some(r) if r.split == "dev" && r.step == self.step => Ok(r.clone()),
            _ => {
                let r = self.eval_record(corpus, started)?;
                emit(self, r.clone());
                Ok(r)
            }
        }
    }
}

/// First step at which the dev curve reaches `target`, interpolating linearly
/// between evaluation points.
pub fn first_crossing(log: &[MetricRecord], target: f64) -> Option<f64> {
    let dev: Vec<&MetricRecord> = log.iter().filter(|r| r.split == "dev").collect();
    for (i, r) in dev.iter().enumerate() {
        if r.nll_nats <= target {
            if i == 0 {
                return Some(r.step as f64);
            }
            let prev = dev[i - 1];
            let frac = (prev.nll_nats - target) / (prev.nll_nats - r.nll_nats);
            return Some(prev.step as f64 + frac * (r.step - prev.step) as f64);
        }
    }
    None
}

/// Percentage fewer steps the variant needs to first reach `target`.
pub fn speedup(baseline: &[MetricRecord], variant: &[MetricRecord], target: f64) -> Result<f64> {
    let b = first_crossing(baseline, target).ok_or_else(|| Error::NotComparable(format!("baseline never reaches {target}")))?;
    let v = first_crossing(variant, target).ok_or_else(|| Error::NotComparable(format!("variant never reaches {target}")))?;
    if b <= 0.0 {
        return Err(Error::NotComparable(format!("baseline already starts at or below {target}")));
    }
    Ok(100.0 * (b - v) / b)
}

pub fn param_count<T: Scalar>(model: &Gpt<T>) -> usize {
    model.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, nll: f64) -> MetricRecord {
        MetricRecord { step, split: "dev".into(), nll_nats: nll, tokens_seen: 0, wall_ms: 0 }
    }

    #[test]
    fn speedup_examples() {
        let base = vec![rec(0, 3.0), rec(500, 2.0), rec(1000, 1.5), rec(1500, 1.2)];
        assert_eq!(speedup(&base, &base, 1.5).unwrap(), 0.0);
        assert_eq!(speedup(&base, &base, 1.7).unwrap(), 0.0);
        let var = vec![rec(0, 3.0), rec(500, 1.6), rec(1000, 1.2)];
        // variant crosses 1.5 at 500 + 0.1 / 0.4 * 500 = 625
        assert!((speedup(&base, &var, 1.5).unwrap() - 37.5).abs() < 1e-12);
        let at560 = vec![rec(0, 3.0), rec(560, 1.5)];
        assert!((speedup(&base, &at560, 1.5).unwrap() - 44.0).abs() < 1e-12);
        assert!(matches!(speedup(&base, &var, 0.5), Err(Error::NotComparable(_))));
        assert!(matches!(speedup(&base, &var, 3.5), Err(Error::NotComparable(_))));
    }

    #[test]
    fn records_serialise_as_one_json_line() {
        let line = rec(250, 1.25).to_json();
        assert!(!line.contains('\n'));
        let back: MetricRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec(250, 1.25));
    }

    #[test]
    fn train_config_kv_round_trip() {
        let mut c = TrainConfig { target_nll: Some(1.3), seed: 4, ..Default::default() };
        c.eval_tokens = 1000;
        let mut kv = Vec::new();
        c.write_kv(&mut kv);
        assert_eq!(TrainConfig::from_kv(&kv).unwrap(), c);
    }
}
