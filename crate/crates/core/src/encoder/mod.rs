//! Hashed n-gram dual encoder: a linear projection over feature-hashed
//! text, trained with a margin contrastive loss, producing unit vectors on
//! the sphere. One encoder serves both the instruction side and the
//! element-document side.

mod remote;
mod train;

pub use remote::{remote_embed, EndpointConfig, RemoteError};
pub use train::{lr_at, train, DualEncoderF64, ScheduleError, TrainConfig, TrainError};

use crate::corpus::ElementCatalog;
use crate::dataset::{InstructionPair, Label};
use crate::hash::fnv1a64;
use crate::rng::SplitMix64;
use crate::text::tokenize;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

/// Feature extraction settings: which n-gram kinds are active and how many
/// hash buckets they map into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizerConfig {
    pub hash_dim: u32,
    pub word_unigrams: bool,
    pub word_bigrams: bool,
    pub char_trigrams: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            hash_dim: 1 << 18,
            word_unigrams: true,
            word_bigrams: true,
            char_trigrams: true,
        }
    }
}

impl FeaturizerConfig {
    pub fn flags(&self) -> u32 {
        (self.word_unigrams as u32)
            | (self.word_bigrams as u32) << 1
            | (self.char_trigrams as u32) << 2
    }

    pub fn from_flags(hash_dim: u32, flags: u32) -> Self {
        Self {
            hash_dim,
            word_unigrams: flags & 1 != 0,
            word_bigrams: flags & 2 != 0,
            char_trigrams: flags & 4 != 0,
        }
    }
}

/// Featurize text into a sorted sparse (bucket, weight) vector: tokens are
/// lowercased alphanumeric runs; features are word unigrams, adjacent-word
/// bigrams ("a b") and within-word character trigrams ("#abc"); each
/// feature contributes log(1 + count) (natural log) to the FNV-1a bucket
/// of its string, weights adding when distinct features collide.
pub fn featurize(config: &FeaturizerConfig, text: &str) -> Vec<(u32, f64)> {
    let tokens = tokenize(text);
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    if config.word_unigrams {
        for token in &tokens {
            *counts.entry(token.clone()).or_default() += 1;
        }
    }
    if config.word_bigrams {
        for window in tokens.windows(2) {
            *counts.entry(format!("{} {}", window[0], window[1])).or_default() += 1;
        }
    }
    if config.char_trigrams {
        for token in &tokens {
            let chars: Vec<char> = token.chars().collect();
            for tri in chars.windows(3) {
                let feature: String = std::iter::once('#').chain(tri.iter().copied()).collect();
                *counts.entry(feature).or_default() += 1;
            }
        }
    }
    let mut buckets: BTreeMap<u32, f64> = BTreeMap::new();
    for (feature, count) in counts {
        let bucket = (fnv1a64(feature.as_bytes()) % u64::from(config.hash_dim)) as u32;
        *buckets.entry(bucket).or_default() += (1.0 + count as f64).ln();
    }
    buckets.into_iter().collect()
}

pub const MODEL_MAGIC: &[u8; 5] = b"FRAG1";
pub const MODEL_VERSION: u16 = 1;

/// The encoder: a dense `embed_dim x hash_dim` projection over hashed
/// features, stored in f32. Embeddings are the L2-normalized projection of
/// the feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub featurizer: FeaturizerConfig,
    pub embed_dim: usize,
    /// Row-major `embed_dim x hash_dim`.
    pub weights: Vec<f32>,
}

impl EncoderModel {
    /// Gaussian random init, deterministic in the seed.
    pub fn random_init(featurizer: FeaturizerConfig, embed_dim: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::stream(seed, "encoder/init");
        let n = embed_dim * featurizer.hash_dim as usize;
        let scale = 1.0 / (embed_dim as f64).sqrt();
        let weights = (0..n)
            .map(|_| (rng.next_gaussian() * scale) as f32)
            .collect();
        Self {
            featurizer,
            embed_dim,
            weights,
        }
    }

    /// Embed one text to a unit vector. Texts with no features map to the
    /// first basis vector so every embedding lies on the sphere.
    pub fn embed(&self, text: &str) -> Vec<f32> {
        let features = featurize(&self.featurizer, text);
        let hash_dim = self.featurizer.hash_dim as usize;
        let mut projected = vec![0.0f64; self.embed_dim];
        for &(bucket, weight) in &features {
            let bucket = bucket as usize;
            for (row, out) in projected.iter_mut().enumerate() {
                *out += weight * f64::from(self.weights[row * hash_dim + bucket]);
            }
        }
        normalize_or_basis(&projected)
    }

    /// FNV-1a fingerprint of the serialized model, used to tie dense
    /// indexes to the model that produced them.
    pub fn fingerprint(&self) -> u64 {
        fnv1a64(&self.to_bytes())
    }

    /// Serialize: magic, version, hash_dim, embed_dim, featurizer flags,
    /// then the projection row-major as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(19 + self.weights.len() * 4);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&self.featurizer.hash_dim.to_le_bytes());
        out.extend_from_slice(&(self.embed_dim as u32).to_le_bytes());
        out.extend_from_slice(&self.featurizer.flags().to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 19 {
            return Err(FormatError::Truncated);
        }
        if &bytes[..5] != MODEL_MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[5], bytes[6]]);
        if version != MODEL_VERSION {
            return Err(FormatError::BadVersion(version));
        }
        let hash_dim = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
        let embed_dim = u32::from_le_bytes(bytes[11..15].try_into().unwrap()) as usize;
        let flags = u32::from_le_bytes(bytes[15..19].try_into().unwrap());
        if hash_dim == 0 {
            return Err(FormatError::BadHeader("hash_dim is zero"));
        }
        let expected = embed_dim
            .checked_mul(hash_dim as usize)
            .and_then(|n| n.checked_mul(4))
            .ok_or(FormatError::BadHeader("dimensions overflow"))?;
        let body = &bytes[19..];
        if body.len() < expected {
            return Err(FormatError::Truncated);
        }
        if body.len() > expected {
            return Err(FormatError::TrailingBytes);
        }
        let weights = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            featurizer: FeaturizerConfig::from_flags(hash_dim, flags),
            embed_dim,
            weights,
        })
    }
}

/// Normalize to unit length in f64, falling back to the first basis
/// vector for the zero vector.
fn normalize_or_basis(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        let mut basis = vec![0.0f32; v.len()];
        if let Some(first) = basis.first_mut() {
            *first = 1.0;
        }
        return basis;
    }
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// Euclidean distance between unit vectors via their dot product:
/// sqrt(max(0, 2 - 2*dot)), in [0, 2].
pub fn pair_distance(u: &[f32], v: &[f32]) -> f64 {
    let dot: f64 = u
        .iter()
        .zip(v)
        .map(|(a, b)| f64::from(*a) * f64::from(*b))
        .sum();
    (2.0 - 2.0 * dot).max(0.0).sqrt()
}

/// Margin contrastive loss: positives pay distance squared, negatives pay
/// the squared shortfall inside the margin.
pub fn contrastive_loss(distance: f64, positive: bool, margin: f64) -> f64 {
    if positive {
        distance * distance
    } else {
        let shortfall = (margin - distance).max(0.0);
        shortfall * shortfall
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("model io: {0}")]
    Io(#[from] io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model version {0}")]
    BadVersion(u16),
    #[error("model file truncated")]
    Truncated,
    #[error("model file has trailing bytes")]
    TrailingBytes,
    #[error("bad model header: {0}")]
    BadHeader(&'static str),
}

pub fn save_model(model: &EncoderModel, path: &Path) -> Result<(), FormatError> {
    fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<EncoderModel, FormatError> {
    EncoderModel::from_bytes(&fs::read(path)?)
}

/// One contrastive training example: instruction text, element document
/// text, and whether they belong together.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub query: String,
    pub document: String,
    pub positive: bool,
}

/// Resolve instruction pairs against a catalog into text pairs: the query
/// side is the stored instruction, the document side the target element's
/// canonical rendering. Pairs whose target is missing from the catalog are
/// dropped.
pub fn training_pairs(pairs: &[InstructionPair], catalog: &ElementCatalog) -> Vec<TrainPair> {
    pairs
        .iter()
        .filter_map(|pair| {
            let element = catalog.get(&pair.target.key())?;
            Some(TrainPair {
                query: pair.instruction.clone(),
                document: element.document_text(),
                positive: pair.label == Label::Positive,
            })
        })
        .collect()
}
