//! 27-symbol character corpus: normalisation, tokenisation, splits and batching.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::rng;

pub const VOCAB_SIZE: usize = 27;
pub const SPACE_ID: u8 = 26;

const SPLIT_MAGIC: &[u8; 4] = b"SPLM";
const SPLIT_VERSION: u8 = 1;

/// Fixed alphabet: `a..z` map to `0..25`, space to 26.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn len(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbols(&self) -> impl Iterator<Item = char> {
        (b'a'..=b'z').map(char::from).chain(std::iter::once(' '))
    }

    pub fn id(&self, c: char) -> Option<u8> {
        match c {
            'a'..='z' => Some(c as u8 - b'a'),
            ' ' => Some(SPACE_ID),
            _ => None,
        }
    }

    pub fn symbol(&self, id: u8) -> Option<char> {
        match id {
            0..=25 => Some(char::from(b'a' + id)),
            SPACE_ID => Some(' '),
            _ => None,
        }
    }
}

/// Lowercases and maps every character outside `a..z` to a single space.
/// Invalid UTF-8 sequences become one space each. Digits are not spelled out.
pub fn normalize(raw: &[u8]) -> String {
    String::from_utf8_lossy(raw)
        .chars()
        .map(|c| {
            let c = c.to_ascii_lowercase();
            if c.is_ascii_lowercase() {
                c
            } else {
                ' '
            }
        })
        .collect()
}

pub fn encode(text: &str) -> Result<Vec<u8>> {
    text.chars()
        .enumerate()
        .map(|(i, c)| {
            Vocabulary
                .id(c)
                .ok_or_else(|| Error::InvalidArgument(format!("symbol {c:?} at {i} is outside the alphabet; normalize first")))
        })
        .collect()
}

pub fn decode(ids: &[u8]) -> Result<String> {
    ids.iter()
        .map(|&id| Vocabulary.symbol(id).ok_or_else(|| Error::InvalidArgument(format!("token id {id} >= {VOCAB_SIZE}"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.9, dev: 0.05, test: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => invalid(format!("unknown split {s:?} (train|dev|test)")),
        }
    }
}

/// Contiguous train/dev/test slices of one normalised corpus, in that order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<u8>,
    pub dev: Vec<u8>,
    pub test: Vec<u8>,
    /// Hex SHA-256 of the raw source bytes.
    pub source_checksum: String,
}

impl CorpusSplit {
    /// Each split gets `round(n * ratio)` symbols; with ratios summing to 1 the
    /// train split takes whatever rounding leaves over.
    pub fn from_raw(raw: &[u8], ratios: SplitRatios) -> Result<Self> {
        let r = [ratios.train, ratios.dev, ratios.test];
        if r.iter().any(|&v| !(0.0..=1.0).contains(&v)) || r.iter().sum::<f64>() > 1.0 + 1e-9 {
            return invalid(format!("split ratios {r:?} must be in [0, 1] and sum to at most 1"));
        }
        let ids = encode(&normalize(raw))?;
        let n = ids.len();
        let dev = (n as f64 * ratios.dev).round() as usize;
        let test = (n as f64 * ratios.test).round() as usize;
        let train = if (r.iter().sum::<f64>() - 1.0).abs() < 1e-9 {
            n.saturating_sub(dev + test)
        } else {
            (n as f64 * ratios.train).round() as usize
        };
        if train + dev + test > n {
            return invalid("split sizes exceed corpus length");
        }
        if train < 2 || dev < 2 || test < 2 {
            return invalid(format!("corpus of {n} symbols is too short to split into {train}/{dev}/{test}"));
        }
        Ok(CorpusSplit {
            train: ids[..train].to_vec(),
            dev: ids[train..train + dev].to_vec(),
            test: ids[train + dev..train + dev + test].to_vec(),
            source_checksum: hex::encode(Sha256::digest(raw)),
        })
    }

    pub fn get(&self, which: Split) -> &[u8] {
        match which {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Hex SHA-256 of the serialised split file.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 1 + 24 + self.train.len() + self.dev.len() + self.test.len());
        out.extend_from_slice(SPLIT_MAGIC);
        out.push(SPLIT_VERSION);
        for s in [&self.train, &self.dev, &self.test] {
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
        }
        for s in [&self.train, &self.dev, &self.test] {
            out.extend_from_slice(s);
        }
        out
    }

    /// Parses a split file. The source checksum is not stored, so it is left empty.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 29 || &bytes[..4] != SPLIT_MAGIC {
            return Err(Error::Format("not a split file (bad magic)".into()));
        }
        if bytes[4] != SPLIT_VERSION {
            return Err(Error::Format(format!("unsupported split file version {}", bytes[4])));
        }
        let mut lens = [0usize; 3];
        for (i, l) in lens.iter_mut().enumerate() {
            let at = 5 + 8 * i;
            *l = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
        }
        let body = &bytes[29..];
        if body.len() != lens.iter().sum::<usize>() {
            return Err(Error::Format(format!("split file body holds {} bytes, header says {lens:?}", body.len())));
        }
        if let Some(&bad) = body.iter().find(|&&b| b as usize >= VOCAB_SIZE) {
            return Err(Error::Format(format!("token id {bad} out of range")));
        }
        let (train, rest) = body.split_at(lens[0]);
        let (dev, test) = rest.split_at(lens[1]);
        Ok(CorpusSplit { train: train.to_vec(), dev: dev.to_vec(), test: test.to_vec(), source_checksum: String::new() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// One batch of context windows, row-major `[batch][context]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub context: usize,
}

impl Batch {
    fn from_starts(data: &[u8], starts: &[usize], context: usize) -> Batch {
        let mut inputs = Vec::with_capacity(starts.len() * context);
        let mut targets = Vec::with_capacity(starts.len() * context);
        for &s in starts {
            inputs.extend(data[s..s + context].iter().map(|&v| v as usize));
            targets.extend(data[s + 1..s + context + 1].iter().map(|&v| v as usize));
        }
        Batch { inputs, targets, batch: starts.len(), context }
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.context
    }
}

enum Order {
    Random { seed: u64, step: u64 },
    Sequential { next: usize },
}

/// Window sampler over one split. Random mode draws uniform offsets forever;
/// sequential mode walks non-overlapping windows once and stops, with a
/// possibly short final batch.
pub struct BatchIter<'a> {
    data: &'a [u8],
    context: usize,
    batch: usize,
    order: Order,
}

impl<'a> BatchIter<'a> {
    fn check(data: &[u8], context: usize, batch: usize) -> Result<()> {
        if context == 0 || batch == 0 {
            return invalid("context length and batch size must be positive");
        }
        if context >= data.len() {
            return invalid(format!("context length {context} needs a split longer than {} symbols", data.len()));
        }
        Ok(())
    }

    /// Random-offset training windows. Batch `i` uses the stream `(seed, "batch", i)`.
    pub fn random(data: &'a [u8], context: usize, batch: usize, seed: u64) -> Result<Self> {
        Self::check(data, context, batch)?;
        Ok(BatchIter { data, context, batch, order: Order::Random { seed, step: 0 } })
    }

    /// Same stream, positioned at batch index `step`.
    pub fn random_at(data: &'a [u8], context: usize, batch: usize, seed: u64, step: u64) -> Result<Self> {
        Self::check(data, context, batch)?;
        Ok(BatchIter { data, context, batch, order: Order::Random { seed, step } })
    }

    pub fn sequential(data: &'a [u8], context: usize, batch: usize) -> Result<Self> {
        Self::check(data, context, batch)?;
        Ok(BatchIter { data, context, batch, order: Order::Sequential { next: 0 } })
    }

    /// Number of non-overlapping windows a sequential pass visits.
    pub fn window_count(len: usize, context: usize) -> usize {
        if context == 0 || len <= context {
            0
        } else {
            (len - 1) / context
        }
    }
}

fn random_starts(r: &mut ChaCha8Rng, max_start: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..=max_start)).collect()
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let (data, context, batch) = (self.data, self.context, self.batch);
        match &mut self.order {
            Order::Random { seed, step } => {
                let mut r = rng::stream(*seed, "batch", *step);
                *step += 1;
                let starts = random_starts(&mut r, data.len() - context - 1, batch);
                Some(Batch::from_starts(data, &starts, context))
            }
            Order::Sequential { next } => {
                let total = Self::window_count(data.len(), context);
                if *next >= total {
                    return None;
                }
                let end = (*next + batch).min(total);
                let starts: Vec<usize> = (*next..end).map(|w| w * context).collect();
                *next = end;
                Some(Batch::from_starts(data, &starts, context))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(b"Hello, World!"), "hello  world ");
        assert_eq!(normalize(b"abc"), "abc");
        assert_eq!(normalize(b"R2D2"), "r d ");
        assert_eq!(normalize("caf\u{e9}".as_bytes()), "caf ");
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode(" ").unwrap(), vec![26]);
        assert_eq!(decode(&[26]).unwrap(), " ");
        assert_eq!(encode("ab").unwrap(), vec![0, 1]);
        assert!(matches!(encode("aB"), Err(Error::InvalidArgument(_))));
        assert!(matches!(decode(&[27]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn vocabulary_has_27_symbols_in_id_order() {
        let v = Vocabulary;
        assert_eq!(v.len(), 27);
        for (i, c) in v.symbols().enumerate() {
            assert_eq!(v.id(c), Some(i as u8));
            assert_eq!(v.symbol(i as u8), Some(c));
        }
    }

    #[test]
    fn split_of_1000_chars_is_900_50_50() {
        let raw: Vec<u8> = (0..1000).map(|i| b'a' + (i % 26) as u8).collect();
        let s = CorpusSplit::from_raw(&raw, SplitRatios::default()).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (900, 50, 50));
        assert_eq!(s.train[..3], [0, 1, 2]);
        assert_eq!(s.dev[0], (900 % 26) as u8);
        let again = CorpusSplit::from_raw(&raw, SplitRatios::default()).unwrap();
        assert_eq!(s.checksum(), again.checksum());
        assert_eq!(s.source_checksum, again.source_checksum);
    }

    #[test]
    fn split_sizes_scale_to_text8() {
        // same arithmetic as from_raw without materialising 100M symbols
        let n = 100_000_000f64;
        let dev = (n * 0.05).round() as usize;
        let test = (n * 0.05).round() as usize;
        assert_eq!((100_000_000 - dev - test, dev, test), (90_000_000, 5_000_000, 5_000_000));
    }

    #[test]
    fn short_corpus_is_rejected() {
        assert!(matches!(CorpusSplit::from_raw(b"abc", SplitRatios::default()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn split_file_round_trips_and_rejects_garbage() {
        let raw: Vec<u8> = b"the quick brown fox jumps over the lazy dog ".repeat(10);
        let s = CorpusSplit::from_raw(&raw, SplitRatios::default()).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"SPLM");
        let back = CorpusSplit::from_bytes(&bytes).unwrap();
        assert_eq!((back.train, back.dev, back.test), (s.train.clone(), s.dev.clone(), s.test.clone()));
        assert!(matches!(CorpusSplit::from_bytes(b"NOPE"), Err(Error::Format(_))));
        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(matches!(CorpusSplit::from_bytes(&truncated), Err(Error::Format(_))));
    }

    #[test]
    fn abcde_context_3_gives_one_window() {
        let data = encode("abcde").unwrap();
        let batches: Vec<Batch> = BatchIter::sequential(&data, 3, 8).unwrap().collect();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].inputs, vec![0, 1, 2]);
        assert_eq!(batches[0].targets, vec![1, 2, 3]);
    }

    #[test]
    fn context_not_shorter_than_split_is_rejected() {
        let data = encode("abc").unwrap();
        assert!(matches!(BatchIter::random(&data, 3, 1, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(BatchIter::sequential(&data, 4, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn random_batches_are_seed_deterministic() {
        let data: Vec<u8> = (0..500).map(|i| (i % 27) as u8).collect();
        let a: Vec<Batch> = BatchIter::random(&data, 16, 4, 11).unwrap().take(5).collect();
        let b: Vec<Batch> = BatchIter::random(&data, 16, 4, 11).unwrap().take(5).collect();
        let c: Vec<Batch> = BatchIter::random(&data, 16, 4, 12).unwrap().take(5).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let resumed: Vec<Batch> = BatchIter::random_at(&data, 16, 4, 11, 3).unwrap().take(2).collect();
        assert_eq!(resumed, a[3..5]);
    }

    #[test]
    fn sequential_pass_samples_each_position_at_most_once() {
        let data: Vec<u8> = (0..103).map(|i| (i % 27) as u8).collect();
        let mut seen = vec![0usize; data.len()];
        let mut window = 0;
        for b in BatchIter::sequential(&data, 10, 3).unwrap() {
            for w in 0..b.batch {
                let start = window * 10;
                let expect: Vec<usize> = data[start..start + 10].iter().map(|&v| v as usize).collect();
                assert_eq!(b.inputs[w * 10..(w + 1) * 10], expect[..]);
                for s in &mut seen[start..start + 10] {
                    *s += 1;
                }
                window += 1;
            }
        }
        assert!(seen.iter().all(|&c| c <= 1));
        assert_eq!(seen.iter().sum::<usize>(), 100);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_encodable(raw in proptest::collection::vec(any::<u8>(), 0..300)) {
            let once = normalize(&raw);
            prop_assert_eq!(normalize(once.as_bytes()), once.clone());
            prop_assert!(encode(&once).unwrap().iter().all(|&id| (id as usize) < VOCAB_SIZE));
        }

        #[test]
        fn thousand_char_round_trip(ids in proptest::collection::vec(0u8..27, 1000)) {
            let text = decode(&ids).unwrap();
            prop_assert_eq!(encode(&text).unwrap(), ids);
        }

        #[test]
        fn targets_are_inputs_shifted_by_one(seed in any::<u64>(), ctx in 1usize..20) {
            let data: Vec<u8> = (0..200u32).map(|i| (i.wrapping_mul(7919) % 27) as u8).collect();
            for b in BatchIter::random(&data, ctx, 4, seed).unwrap().take(3) {
                for w in 0..b.batch {
                    let inp = &b.inputs[w * ctx..(w + 1) * ctx];
                    let tgt = &b.targets[w * ctx..(w + 1) * ctx];
                    prop_assert_eq!(&inp[1..], &tgt[..ctx - 1]);
                    // locate the window and check the appended successor symbol
                    let found = (0..data.len() - ctx).any(|s| {
                        data[s..s + ctx].iter().map(|&v| v as usize).eq(inp.iter().copied())
                            && data[s + ctx] as usize == tgt[ctx - 1]
                    });
                    prop_assert!(found);
                }
            }
        }
    }
}
