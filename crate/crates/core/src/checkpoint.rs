//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPCK"  u8 version  u64 header_len  header (key=value lines, UTF-8)
//! [32] SHA-256 of the payload
//! payload: u64 record_count, then per record
//!     u32 name_len  name  u32 rank  rank x u64 dims  raw floats (precision from the header)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use splm_autodiff::Scalar;

use crate::config::{format_kv, parse_kv, parse_value, ModelConfig, Precision};
use crate::error::{Error, Result};
use crate::gpt::Gpt;
use crate::train::{TrainConfig, TrainRun};

const MAGIC: &[u8; 4] = b"SPCK";
const VERSION: u8 = 1;
const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub precision: Precision,
    pub records: Vec<Record>,
}

fn fmt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return fmt_err("checkpoint is truncated");
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn write_floats<T: Scalar>(out: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        T::of(v).write_le(out);
    }
}

fn read_floats<T: Scalar>(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks(T::BYTES).map(|c| T::read_le(c).as_f64()).collect()
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn record(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match self.precision {
                Precision::F32 => write_floats::<f32>(&mut out, &r.data),
                Precision::F64 => write_floats::<f64>(&mut out, &r.data),
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        header.retain(|(k, _)| k != "precision");
        header.insert(0, ("precision".into(), self.precision.to_string()));
        let header = format_kv(&header);
        let payload = self.payload();
        let mut out = Vec::with_capacity(header.len() + payload.len() + 64);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&Sha256::digest(&payload));
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        if r.take(4)? != MAGIC {
            return fmt_err("not a checkpoint (bad magic)");
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return fmt_err(format!("unsupported checkpoint version {version}"));
        }
        let hlen = r.u64()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let header = parse_kv(header)?;
        let digest = r.take(32)?.to_vec();
        let payload = &buf[r.at..];
        if Sha256::digest(payload).as_slice() != digest.as_slice() {
            return fmt_err("payload checksum mismatch");
        }
        let precision: Precision = header
            .iter()
            .find(|(k, _)| k == "precision")
            .map(|(_, v)| v.parse())
            .transpose()?
            .ok_or_else(|| Error::Format("header lacks precision".into()))?;
        let bytes = match precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let mut p = Reader { buf: payload, at: 0 };
        let count = p.u64()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let nlen = p.u32()? as usize;
            let name = String::from_utf8(p.take(nlen)?.to_vec()).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let rank = p.u32()? as usize;
            let shape = (0..rank).map(|_| p.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = p.take(n * bytes)?;
            let data = match precision {
                Precision::F32 => read_floats::<f32>(raw),
                Precision::F64 => read_floats::<f64>(raw),
            };
            records.push(Record { name, shape, data });
        }
        if p.at != payload.len() {
            return fmt_err("trailing bytes after the last record");
        }
        Ok(Checkpoint { header, precision, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_kv(&self.header)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        TrainConfig::from_kv(&self.header)
    }

    fn counter(&self, key: &str) -> Result<u64> {
        self.get(key).map_or(Ok(0), |v| parse_value(key, v))
    }

    /// Snapshot of a run. Optimiser moments are included when `with_optimizer`.
    pub fn from_run<T: Scalar>(run: &TrainRun<T>, with_optimizer: bool) -> Self {
        let mut header = run.model.config.to_kv();
        run.config.write_kv(&mut header);
        header.push(("run.step".into(), run.step.to_string()));
        header.push(("run.tokens_seen".into(), run.tokens_seen.to_string()));
        header.push(("optim.t".into(), run.optim.t.to_string()));
        let mut records = Vec::new();
        for p in run.model.store.iter() {
            let rec = |name: String, data: &[T]| Record {
                name,
                shape: p.tensor.shape().to_vec(),
                data: data.iter().map(|v| v.as_f64()).collect(),
            };
            records.push(rec(p.name.clone(), p.tensor.data()));
        }
        if with_optimizer {
            for ((p, m), v) in run.model.store.iter().zip(&run.optim.m).zip(&run.optim.v) {
                if p.trainable() {
                    let shape = p.tensor.shape().to_vec();
                    let f = |d: &[T]| d.iter().map(|x| x.as_f64()).collect();
                    records.push(Record { name: format!("{M_PREFIX}{}", p.name), shape: shape.clone(), data: f(m) });
                    records.push(Record { name: format!("{V_PREFIX}{}", p.name), shape, data: f(v) });
                }
            }
        }
        Checkpoint { header, precision: if T::BYTES == 4 { Precision::F32 } else { Precision::F64 }, records }
    }

    /// Rebuilds the model and copies every stored parameter into it.
    pub fn to_model<T: Scalar>(&self) -> Result<Gpt<T>> {
        let seed = self.counter("seed")?;
        let mut model = Gpt::new(self.model_config()?, seed)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let rec = self.record(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if rec.shape != model.store.get(id).shape() {
                return fmt_err(format!("{name}: stored shape {:?} vs model {:?}", rec.shape, model.store.get(id).shape()));
            }
            let data: Vec<T> = rec.data.iter().map(|&v| T::of(v)).collect();
            model.store.set(id, &data)?;
        }
        Ok(model)
    }

    /// Rebuilds a resumable run; optimiser moments must be present.
    pub fn to_run<T: Scalar>(&self) -> Result<TrainRun<T>> {
        let model = self.to_model::<T>()?;
        let mut run = TrainRun::from_model(model, self.train_config()?);
        run.step = self.counter("run.step")?;
        run.tokens_seen = self.counter("run.tokens_seen")?;
        run.optim.t = self.counter("optim.t")?;
        let names: Vec<(usize, String, bool)> =
            run.model.store.iter().enumerate().map(|(i, p)| (i, p.name.clone(), p.trainable())).collect();
        for (i, name, trainable) in names {
            if !trainable {
                continue;
            }
            for (prefix, slot) in [(M_PREFIX, &mut run.optim.m[i]), (V_PREFIX, &mut run.optim.v[i])] {
                let rec = self
                    .record(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks optimiser state for {name}")))?;
                *slot = rec.data.iter().map(|&v| T::of(v)).collect();
            }
        }
        Ok(run)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FilterVariant;

    fn tiny() -> ModelConfig {
        ModelConfig { n_layers: 1, d_model: 4, d_ff: 8, n_heads: 2, context_len: 8, head_hidden: 6, ..ModelConfig::paper() }
            .with_variant(FilterVariant::MultiScale)
    }

    #[test]
    fn round_trip_and_corruption() {
        let run = TrainRun::<f64>::new(tiny(), TrainConfig { seed: 3, ..Default::default() }).unwrap();
        let ck = Checkpoint::from_run(&run, true);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"SPCK");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.records, ck.records);
        let model = back.to_model::<f64>().unwrap();
        for (a, b) in model.store.iter().zip(run.model.store.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn f32_checkpoints_store_four_byte_floats() {
        let run = TrainRun::<f32>::new(tiny(), TrainConfig::default()).unwrap();
        let a = Checkpoint::from_run(&run, false).to_bytes();
        let run64 = TrainRun::<f64>::new(tiny(), TrainConfig::default()).unwrap();
        let b = Checkpoint::from_run(&run64, false).to_bytes();
        assert!(a.len() < b.len());
        assert_eq!(Checkpoint::from_bytes(&a).unwrap().precision, Precision::F32);
    }
}
