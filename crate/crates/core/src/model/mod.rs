//! Encoder-decoder transformer over tokenized two-channel sequences.
//!
//! How a sequence becomes tokens is a [`Tokenizer`] chosen by name from
//! [`TOKENIZERS`]: `patch` projects overlapping channel-mixed patches,
//! `vanilla` projects every timestep on its own.

mod transformer;

pub use transformer::{Model, ParamLayout};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub l: usize,
    pub p: usize,
    pub s: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { l: 1024, p: 64, s: 32 }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.s && self.s <= self.p && self.p <= self.l) {
            return Err(Error::Config(format!("patching needs 1 <= s <= p <= l, got {self:?}")));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.l - self.p) / self.s + 1
    }

    pub fn starts(&self) -> Vec<usize> {
        (0..self.n_patches()).map(|i| i * self.s).collect()
    }

    /// True when the last patch ends exactly at `l`, so every timestep is
    /// covered by at least one patch.
    pub fn covers_sequence(&self) -> bool {
        (self.l - self.p).is_multiple_of(self.s)
    }
}

/// Turns a `[l x D]` sequence into tokens, each a contiguous window of
/// timesteps flattened channel-interleaved.
pub trait Tokenizer: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn seq_len(&self) -> usize;
    /// Timesteps per token; also the number of outputs each decoder token emits.
    fn width(&self) -> usize;
    fn starts(&self) -> Vec<usize>;

    fn n_tokens(&self) -> usize {
        self.starts().len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PatchTokenizer(pub PatchConfig);

impl Tokenizer for PatchTokenizer {
    fn name(&self) -> &'static str {
        "patch"
    }
    fn seq_len(&self) -> usize {
        self.0.l
    }
    fn width(&self) -> usize {
        self.0.p
    }
    fn starts(&self) -> Vec<usize> {
        self.0.starts()
    }
}

/// One token per timestep.
#[derive(Debug, Clone, Copy)]
pub struct TimestepTokenizer {
    pub l: usize,
}

impl Tokenizer for TimestepTokenizer {
    fn name(&self) -> &'static str {
        "vanilla"
    }
    fn seq_len(&self) -> usize {
        self.l
    }
    fn width(&self) -> usize {
        1
    }
    fn starts(&self) -> Vec<usize> {
        (0..self.l).collect()
    }
}

type TokenizerCtor = fn(&PatchConfig) -> Result<Box<dyn Tokenizer>>;

fn build_patch(cfg: &PatchConfig) -> Result<Box<dyn Tokenizer>> {
    cfg.validate()?;
    if !cfg.covers_sequence() {
        return Err(Error::Config(format!(
            "patches do not reach the end of the sequence: (l - p) % s != 0 for {cfg:?}"
        )));
    }
    Ok(Box::new(PatchTokenizer(*cfg)))
}

fn build_vanilla(cfg: &PatchConfig) -> Result<Box<dyn Tokenizer>> {
    if cfg.l == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    Ok(Box::new(TimestepTokenizer { l: cfg.l }))
}

/// Registered model variants, selected by `ModelConfig::variant`.
pub const TOKENIZERS: &[(&str, TokenizerCtor)] = &[("patch", build_patch), ("vanilla", build_vanilla)];

pub fn variant_names() -> Vec<&'static str> {
    TOKENIZERS.iter().map(|(n, _)| *n).collect()
}

pub fn tokenizer(variant: &str, patch: &PatchConfig) -> Result<Box<dyn Tokenizer>> {
    let (_, ctor) = TOKENIZERS
        .iter()
        .find(|(n, _)| *n == variant)
        .ok_or_else(|| Error::Config(format!("unknown model variant {variant:?}; known: {:?}", variant_names())))?;
    ctor(patch)
}

/// Gathers the tokens of an interleaved `[l x channels]` sequence into
/// `[n_tokens x (width * channels)]`.
pub fn patchify<T: Scalar>(seq: &[T], channels: usize, tok: &dyn Tokenizer) -> Result<Tensor<T>> {
    let l = tok.seq_len();
    if seq.len() != l * channels {
        return Err(Error::shape("patchify", &[seq.len()], &[l, channels]));
    }
    let row = tok.width() * channels;
    let starts = tok.starts();
    let mut data = Vec::with_capacity(starts.len() * row);
    for s in &starts {
        data.extend_from_slice(&seq[s * channels..s * channels + row]);
    }
    Tensor::new(&[starts.len(), row], data)
}

/// Sinusoidal position encoding `[n x d]`.
pub fn positional_encoding(n: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            pe[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    pe
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Registered tokenizer name: `patch` or `vanilla`.
    pub variant: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub channels: usize,
    pub patch: PatchConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: "patch".into(),
            d_model: 128,
            n_heads: 4,
            n_enc_layers: 3,
            n_dec_layers: 3,
            d_ff: 256,
            dropout: 0.0,
            channels: 2,
            patch: PatchConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.channels == 0 {
            return Err(Error::Config("d_ff and channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        self.tokenizer().map(|_| ())
    }

    pub fn tokenizer(&self) -> Result<Box<dyn Tokenizer>> {
        tokenizer(&self.variant, &self.patch)
    }

    /// Hex SHA-256 of the canonical JSON form; stored in checkpoints and
    /// checked on load.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
