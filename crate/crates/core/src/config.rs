//! Model, filter and run configuration, with a flat `key=value` text codec.
//!
//! The text format is one `key=value` pair per line; blank lines and lines
//! starting with `#` are ignored. Unknown keys are errors.

use std::fmt::{self, Display};
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub(crate) fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

/// Parses `key=value` lines, keeping their order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return cfg_err(format!("line {}: expected key=value, got {line:?}", n + 1));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

pub(crate) fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn push(out: &mut Vec<(String, String)>, key: &str, value: impl Display) {
    out.push((key.to_string(), value.to_string()));
}

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl std::str::FromStr for $name {
            type Err = $crate::error::Error;
            fn from_str(s: &str) -> $crate::error::Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => $crate::config::cfg_err(format!("unknown {} {s:?}", stringify!($name))),
                }
            }
        }
    };
}
pub(crate) use string_enum;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVariant {
    None,
    SingleScale,
    MultiScale,
    TokenAdaptive,
}
string_enum!(FilterVariant { None => "none", SingleScale => "single_scale", MultiScale => "multi_scale", TokenAdaptive => "token_adaptive" });

impl FilterVariant {
    pub const ALL: [FilterVariant; 4] =
        [FilterVariant::None, FilterVariant::SingleScale, FilterVariant::MultiScale, FilterVariant::TokenAdaptive];
}

/// Kernel layout underneath the token-adaptive mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptiveBase {
    SingleScale,
    MultiScale,
}
string_enum!(AdaptiveBase { SingleScale => "single_scale", MultiScale => "multi_scale" });

/// How the per-token mask meets the static mix weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// `W[t][k]` supersedes `w_k`; no static weights are allocated.
    Replace,
    /// `W[t][k] * w_k`.
    Combine,
}
string_enum!(MaskMode { Replace => "replace", Combine => "combine" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskActivation {
    Linear,
    Sigmoid,
}
string_enum!(MaskActivation { Linear => "linear", Sigmoid => "sigmoid" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}
string_enum!(Precision { F32 => "f32", F64 => "f64" });

/// Filter sites, as indices of the blocks whose output they follow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placement {
    AllBlocks,
    Blocks(Vec<usize>),
}

impl Placement {
    pub fn sites(&self, n_layers: usize) -> Vec<usize> {
        match self {
            Placement::AllBlocks => (0..n_layers).collect(),
            Placement::Blocks(v) => v.clone(),
        }
    }
}

impl Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::AllBlocks => f.write_str("all"),
            Placement::Blocks(v) => f.write_str(&join(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskDecoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub mode: MaskMode,
    pub activation: MaskActivation,
    pub positional: bool,
}

impl Default for MaskDecoderConfig {
    fn default() -> Self {
        MaskDecoderConfig {
            dim: 32,
            heads: 4,
            d_ff: 128,
            layers: 1,
            mode: MaskMode::Replace,
            activation: MaskActivation::Linear,
            positional: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterConfig {
    pub variant: FilterVariant,
    /// Channel count M.
    pub channels: usize,
    /// Single-scale kernel length.
    pub kernel_len: usize,
    /// Multi-scale kernel lengths; M is split evenly across them.
    pub scales: Vec<usize>,
    pub placement: Placement,
    pub adaptive_base: AdaptiveBase,
    pub mask: MaskDecoderConfig,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            variant: FilterVariant::None,
            channels: 144,
            kernel_len: 7,
            scales: vec![3, 7, 15, 31],
            placement: Placement::AllBlocks,
            adaptive_base: AdaptiveBase::SingleScale,
            mask: MaskDecoderConfig::default(),
        }
    }
}

impl FilterConfig {
    pub fn with_variant(variant: FilterVariant) -> Self {
        FilterConfig { variant, ..Default::default() }
    }

    fn multi_scale(&self) -> bool {
        match self.variant {
            FilterVariant::MultiScale => true,
            FilterVariant::TokenAdaptive => self.adaptive_base == AdaptiveBase::MultiScale,
            _ => false,
        }
    }

    /// Per-channel kernel lengths, grouped by length in `scales` order. Empty for `none`.
    pub fn kernel_lengths(&self) -> Vec<usize> {
        if self.variant == FilterVariant::None {
            return Vec::new();
        }
        if self.multi_scale() {
            let per = self.channels / self.scales.len().max(1);
            self.scales.iter().flat_map(|&k| std::iter::repeat_n(k, per)).collect()
        } else {
            vec![self.kernel_len; self.channels]
        }
    }

    /// Whether sites carry static mix weights `w_k`.
    pub fn has_mix_weights(&self) -> bool {
        match self.variant {
            FilterVariant::None => false,
            FilterVariant::TokenAdaptive => self.mask.mode == MaskMode::Combine,
            _ => true,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.variant == FilterVariant::None {
            return Ok(());
        }
        if self.channels == 0 {
            return cfg_err("filter.channels must be positive");
        }
        if self.multi_scale() {
            if self.scales.is_empty() || self.scales.contains(&0) {
                return cfg_err("filter.scales must be non-empty with every length >= 1");
            }
            if !self.channels.is_multiple_of(self.scales.len()) {
                return Err(Error::InvalidArgument(format!(
                    "multi-scale bank of {} channels cannot be split evenly across {} scales",
                    self.channels,
                    self.scales.len()
                )));
            }
        } else if self.kernel_len == 0 {
            return cfg_err("filter.kernel_len must be >= 1");
        }
        let sites = self.placement.sites(n_layers);
        if let Some(&bad) = sites.iter().find(|&&s| s >= n_layers) {
            return Err(Error::InvalidArgument(format!("placement index {bad} out of range for {n_layers} blocks")));
        }
        let mut sorted = sites.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != sites.len() {
            return cfg_err("filter.placement lists a block twice");
        }
        if self.variant == FilterVariant::TokenAdaptive {
            let m = &self.mask;
            if m.dim == 0 || m.heads == 0 || !m.dim.is_multiple_of(m.heads) {
                return cfg_err(format!("mask.dim {} must be a positive multiple of mask.heads {}", m.dim, m.heads));
            }
            if m.layers == 0 || m.d_ff == 0 {
                return cfg_err("mask.layers and mask.d_ff must be positive");
            }
        }
        Ok(())
    }

    /// Number of sites a model with `n_layers` blocks gets.
    pub fn site_count(&self, n_layers: usize) -> usize {
        if self.variant == FilterVariant::None {
            0
        } else {
            self.placement.sites(n_layers).len()
        }
    }

    pub(crate) fn write_kv(&self, out: &mut Vec<(String, String)>) {
        push(out, "filter.variant", self.variant);
        push(out, "filter.channels", self.channels);
        push(out, "filter.kernel_len", self.kernel_len);
        push(out, "filter.scales", join(&self.scales));
        push(out, "filter.placement", &self.placement);
        push(out, "filter.adaptive_base", self.adaptive_base);
        push(out, "mask.dim", self.mask.dim);
        push(out, "mask.heads", self.mask.heads);
        push(out, "mask.d_ff", self.mask.d_ff);
        push(out, "mask.layers", self.mask.layers);
        push(out, "mask.mode", self.mask.mode);
        push(out, "mask.activation", self.mask.activation);
        push(out, "mask.positional", self.mask.positional);
    }

    pub(crate) fn apply_kv(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "filter.variant" => self.variant = v.parse()?,
            "filter.channels" => self.channels = parse_value(key, v)?,
            "filter.kernel_len" => self.kernel_len = parse_value(key, v)?,
            "filter.scales" => self.scales = parse_list(key, v)?,
            "filter.placement" => {
                self.placement = if v == "all" { Placement::AllBlocks } else { Placement::Blocks(parse_list(key, v)?) }
            }
            "filter.adaptive_base" => self.adaptive_base = v.parse()?,
            "mask.dim" => self.mask.dim = parse_value(key, v)?,
            "mask.heads" => self.mask.heads = parse_value(key, v)?,
            "mask.d_ff" => self.mask.d_ff = parse_value(key, v)?,
            "mask.layers" => self.mask.layers = parse_value(key, v)?,
            "mask.mode" => self.mask.mode = v.parse()?,
            "mask.activation" => self.mask.activation = v.parse()?,
            "mask.positional" => self.mask.positional = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub vocab: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub filter: FilterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// 8 blocks, width 128, feed-forward 512, 8 heads, context 256, 2048-unit head.
    pub fn paper() -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 128,
            d_ff: 512,
            n_heads: 8,
            context_len: 256,
            vocab: crate::corpus::VOCAB_SIZE,
            head_hidden: 2048,
            dropout: 0.0,
            filter: FilterConfig::default(),
        }
    }

    /// Two-block, width-64 model used for the single-CPU comparisons.
    pub fn desk() -> Self {
        ModelConfig { n_layers: 2, d_model: 64, d_ff: 256, n_heads: 4, context_len: 128, head_hidden: 256, ..Self::paper() }
    }

    pub fn with_variant(mut self, variant: FilterVariant) -> Self {
        self.filter.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_layers, self.d_model, self.d_ff, self.n_heads, self.context_len, self.vocab, self.head_hidden];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("model dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return cfg_err(format!("model.dropout {} outside [0, 1)", self.dropout));
        }
        self.filter.validate(self.n_layers)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        push(&mut out, "model.n_layers", self.n_layers);
        push(&mut out, "model.d_model", self.d_model);
        push(&mut out, "model.d_ff", self.d_ff);
        push(&mut out, "model.n_heads", self.n_heads);
        push(&mut out, "model.context_len", self.context_len);
        push(&mut out, "model.vocab", self.vocab);
        push(&mut out, "model.head_hidden", self.head_hidden);
        push(&mut out, "model.dropout", self.dropout);
        self.filter.write_kv(&mut out);
        out
    }

    pub(crate) fn apply_kv(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "model.n_layers" => self.n_layers = parse_value(key, v)?,
            "model.d_model" => self.d_model = parse_value(key, v)?,
            "model.d_ff" => self.d_ff = parse_value(key, v)?,
            "model.n_heads" => self.n_heads = parse_value(key, v)?,
            "model.context_len" => self.context_len = parse_value(key, v)?,
            "model.vocab" => self.vocab = parse_value(key, v)?,
            "model.head_hidden" => self.head_hidden = parse_value(key, v)?,
            "model.dropout" => self.dropout = parse_value(key, v)?,
            _ => return self.filter.apply_kv(key, v),
        }
        Ok(true)
    }

    /// Rebuilds a config from `model.*`, `filter.*` and `mask.*` pairs; other keys are ignored.
    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::paper();
        for (k, v) in pairs {
            cfg.apply_kv(k, v)?;
        }
        Ok(cfg)
    }
}

/// Everything one `train` invocation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    /// Prepared split file; relative paths fall back to `$SPLM_DATA_DIR`.
    pub data: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/metrics.jsonl`.
    pub metrics: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::paper(),
            train: TrainConfig::default(),
            precision: Precision::F32,
            data: PathBuf::from("text8.splm"),
            out_dir: PathBuf::from("run"),
            metrics: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Applies one override; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "precision" => self.precision = v.parse()?,
            "data" => self.data = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "metrics" => self.metrics = Some(PathBuf::from(v)),
            "seed" => self.train.seed = parse_value(key, v)?,
            _ => {
                if !self.model.apply_kv(key, v)? && !self.train.apply_kv(key, v)? {
                    return cfg_err(format!("unknown key {key:?}"));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics.clone().unwrap_or_else(|| self.out_dir.join("metrics.jsonl"))
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        push(&mut out, "precision", self.precision);
        push(&mut out, "data", self.data.display());
        push(&mut out, "out_dir", self.out_dir.display());
        push(&mut out, "metrics", self.metrics_path().display());
        out.extend(self.model.to_kv());
        self.train.write_kv(&mut out);
        out
    }

    pub fn to_text(&self) -> String {
        format_kv(&self.to_kv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = ModelConfig::paper();
        assert_eq!((c.n_layers, c.d_model, c.d_ff, c.n_heads, c.context_len, c.vocab, c.head_hidden), (8, 128, 512, 8, 256, 27, 2048));
        assert_eq!(c.filter.channels, 144);
        c.validate().unwrap();
    }

    #[test]
    fn kernel_layouts() {
        let single = FilterConfig::with_variant(FilterVariant::SingleScale);
        assert_eq!(single.kernel_lengths(), vec![7; 144]);
        let multi = FilterConfig::with_variant(FilterVariant::MultiScale).kernel_lengths();
        assert_eq!(multi.len(), 144);
        for (i, k) in [3, 7, 15, 31].into_iter().enumerate() {
            assert!(multi[i * 36..(i + 1) * 36].iter().all(|&v| v == k));
        }
        assert!(FilterConfig::default().kernel_lengths().is_empty());
        let mut adaptive = FilterConfig::with_variant(FilterVariant::TokenAdaptive);
        assert_eq!(adaptive.kernel_lengths(), vec![7; 144]);
        assert!(!adaptive.has_mix_weights());
        adaptive.adaptive_base = AdaptiveBase::MultiScale;
        adaptive.mask.mode = MaskMode::Combine;
        assert_eq!(adaptive.kernel_lengths(), multi);
        assert!(adaptive.has_mix_weights());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::paper().with_variant(FilterVariant::MultiScale);
        c.filter.channels = 142;
        assert!(matches!(c.validate(), Err(Error::InvalidArgument(_))));
        let mut c = ModelConfig::paper().with_variant(FilterVariant::SingleScale);
        c.filter.placement = Placement::Blocks(vec![8]);
        assert!(matches!(c.validate(), Err(Error::InvalidArgument(_))));
        let mut c = ModelConfig::paper();
        c.n_heads = 7;
        assert!(matches!(c.validate(), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn run_config_round_trips_and_rejects_unknown_keys() {
        let text = "# comment\nmodel.n_layers = 2\nfilter.variant=multi_scale\nfilter.placement=0,1\ntrain.lr=0.001\nseed=9\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.model.n_layers, 2);
        assert_eq!(cfg.model.filter.variant, FilterVariant::MultiScale);
        assert_eq!(cfg.model.filter.placement, Placement::Blocks(vec![0, 1]));
        assert_eq!(cfg.train.seed, 9);
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, RunConfig { metrics: Some(cfg.metrics_path()), ..cfg });
        assert!(matches!(RunConfig::parse("model.layers=3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("no equals sign"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("filter.variant=fancy"), Err(Error::Config(_))));
    }

    #[test]
    fn variants_differ_only_in_filter_keys() {
        let a = ModelConfig::paper().to_kv();
        let b = ModelConfig::paper().with_variant(FilterVariant::MultiScale).to_kv();
        let diff: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
        assert_eq!(diff, vec!["filter.variant"]);
    }
}
