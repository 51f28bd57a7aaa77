//! Character-level language models with learned causal filterbanks between
//! decoder blocks, a token-adaptive mask, and a DCT reweighting classifier.

pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod dct;
pub mod error;
pub mod export;
pub mod filter;
pub mod gpt;
pub mod gradcheck_suite;
pub mod layers;
pub mod mask;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use classifier::{Classifier, ClassifierConfig, SynthExperiment, SynthReport};
pub use config::{FilterConfig, FilterVariant, ModelConfig, Precision, RunConfig};
pub use corpus::{Batch, BatchIter, CorpusSplit, Split, Vocabulary};
pub use error::{Error, Result};
pub use filter::{FilterBank, FilterSite};
pub use gpt::Gpt;
pub use mask::MaskDecoder;
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use synth::{SynthConfig, SynthDataset};
pub use train::{MetricRecord, TrainConfig, TrainRun};
pub use splm_autodiff::{Graph, Scalar, Tensor, Var};
