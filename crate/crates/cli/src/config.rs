//! Application configuration. One JSON file drives every subcommand;
//! every field has a default, so an absent file means default settings.
//! Validation runs once at startup and reports all problems together.

use crate::error::CliError;
use flowrag_core::dataset::{DownsamplePolicy, NegativesPerPositive};
use flowrag_core::encoder::{FeaturizerConfig, TrainConfig};
use flowrag_core::retrieval::Bm25Params;
use flowrag_core::synth::CorpusConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Root directory all pipeline artifacts live under.
    pub data_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub dataset: DatasetSettings,
    pub encoder: EncoderSettings,
    pub train: TrainConfig,
    pub bm25: Bm25Params,
    pub service: ServiceSettings,
    pub log_level: String,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            corpus: CorpusConfig::default(),
            dataset: DatasetSettings::default(),
            encoder: EncoderSettings::default(),
            train: TrainConfig::default(),
            bm25: Bm25Params::default(),
            service: ServiceSettings::default(),
            log_level: "info".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSettings {
    pub negatives: NegativesPerPositive,
    /// Apply the downsampling policy to the primary dataset build.
    pub downsample: bool,
    pub policy: DownsamplePolicy,
    pub seed: u64,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        Self {
            negatives: NegativesPerPositive::default(),
            downsample: false,
            policy: DownsamplePolicy::default(),
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub featurizer: FeaturizerConfig,
    pub embed_dim: usize,
    pub init_seed: u64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            featurizer: FeaturizerConfig::default(),
            embed_dim: 64,
            init_seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSettings {
    pub bind: String,
    /// Which split's catalog and index the service (and `retrieve`) query.
    pub split: String,
    /// Name of an environment variable holding a static bearer token; when
    /// set, every /v1 request must carry it.
    pub auth_token_env: Option<String>,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".to_string(),
            split: "train".to_string(),
            auth_token_env: None,
        }
    }
}

impl AppConfig {
    /// Load from a JSON file (defaults when `path` is None), apply the
    /// data-dir override, and validate.
    pub fn load(path: Option<&Path>, data_dir: Option<PathBuf>) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    CliError::config(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::config(format!("cannot parse config {}: {e}", p.display()))
                })?
            }
            None => Self::default(),
        };
        if let Some(dir) = data_dir {
            config.data_dir = dir;
        }
        config.validate()?;
        Ok(config)
    }

    /// Check every field, collecting all problems into one diagnostic.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        if let Err(e) = self.corpus.validate() {
            problems.push(format!("corpus: {e}"));
        }
        if self.encoder.embed_dim == 0 {
            problems.push("encoder.embed_dim must be positive".to_string());
        }
        let f = &self.encoder.featurizer;
        if f.hash_dim == 0 {
            problems.push("encoder.featurizer.hash_dim must be positive".to_string());
        }
        if !(f.word_unigrams || f.word_bigrams || f.char_trigrams) {
            problems.push("encoder.featurizer enables no feature family".to_string());
        }
        if self.train.total_steps == 0 || self.train.batch_size == 0 || self.train.grad_accum == 0
        {
            problems.push(
                "train.total_steps, train.batch_size, and train.grad_accum must be positive"
                    .to_string(),
            );
        }
        if self.train.warmup_steps > self.train.total_steps {
            problems.push(format!(
                "train.warmup_steps ({}) exceeds train.total_steps ({})",
                self.train.warmup_steps, self.train.total_steps
            ));
        }
        if !(self.bm25.k1 >= 0.0) {
            problems.push(format!("bm25.k1 must be nonnegative, got {}", self.bm25.k1));
        }
        if !(0.0..=1.0).contains(&self.bm25.b) {
            problems.push(format!("bm25.b must lie in [0, 1], got {}", self.bm25.b));
        }
        let p = &self.dataset.policy;
        if !(p.anchor > 0.0) || !(p.base > 1.0) || !(p.cap >= 1.0) {
            problems.push(format!(
                "dataset.policy needs anchor > 0, base > 1, cap >= 1; got anchor {}, base {}, cap {}",
                p.anchor, p.base, p.cap
            ));
        }
        if self.service.split.is_empty() {
            problems.push("service.split must name a split".to_string());
        }
        if self.service.bind.parse::<SocketAddr>().is_err() {
            problems.push(format!(
                "service.bind {:?} is not an address:port",
                self.service.bind
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(format!(
                "invalid configuration:\n  - {}",
                problems.join("\n  - ")
            )))
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.data_dir.join("corpus")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.data_dir.join("dataset")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.data_dir.join("model")
    }

    pub fn model_path(&self) -> PathBuf {
        self.model_dir().join("encoder.frag")
    }

    pub fn index_dir(&self) -> PathBuf {
        self.data_dir.join("index")
    }

    pub fn index_path(&self, split: &str) -> PathBuf {
        self.index_dir().join(format!("{split}.fragix"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.data_dir.join("eval")
    }

    pub fn ablations_dir(&self) -> PathBuf {
        self.data_dir.join("ablations")
    }
}
