//! Run configuration: one JSON-serializable bundle covering corpus
//! synthesis, model shape, training, the LLM endpoint, and output paths.
//!
//! Resolution layers, weakest first: profile defaults, then the config
//! file, then command-line flags. The file overlays field-by-field via a
//! deep JSON merge, so a partial file only touches the keys it names.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::SynthConfig;
use crate::encoder::EncoderConfig;
use crate::planner::PlannerConfig;
use crate::responder::LlmEndpointConfig;
use crate::training::TrainConfig;

/// Named default bundles. `desk` runs end-to-end on a laptop CPU; `paper`
/// records the original large-scale hyperparameters (768-dim, 12 layers,
/// batch 4, lr 1e-5) and is not meant to finish at desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(format!("unknown profile {other:?} (expected desk|paper)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Corpus JSONL: written by synth, read by train/eval.
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    /// Directory for JSON and text-table reports.
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: PathBuf::from("corpus.jsonl"),
            checkpoint: PathBuf::from("model.ckpt"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub profile: Profile,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub planner: PlannerConfig,
    pub train: TrainConfig,
    pub llm: LlmEndpointConfig,
    pub paths: PathsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config::for_profile(Profile::Desk)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {detail}")]
    Io { path: PathBuf, detail: String },
    #[error("config file {path} is not valid JSON: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("config does not match the schema: {0}")]
    Schema(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl Config {
    /// The complete default bundle for a profile.
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Config {
                profile,
                synth: SynthConfig::default(),
                encoder: EncoderConfig::default(),
                planner: PlannerConfig::default(),
                train: TrainConfig::default(),
                llm: LlmEndpointConfig::default(),
                paths: PathsConfig::default(),
            },
            Profile::Paper => Config {
                profile,
                synth: SynthConfig {
                    n_conversations: 5000,
                    n_topics: 300,
                    max_pairs: 14,
                    ..SynthConfig::default()
                },
                encoder: EncoderConfig {
                    hidden_dim: 768,
                    n_layers: 12,
                    n_heads: 12,
                    max_knowledge_items: 32,
                    max_seq_len: 128,
                    dropout: 0.1,
                    ..EncoderConfig::default()
                },
                planner: PlannerConfig {
                    hidden_dim: 768,
                    n_decoder_layers: 12,
                    n_heads: 12,
                    max_pairs: 14,
                    ..PlannerConfig::default()
                },
                train: TrainConfig::paper(),
                llm: LlmEndpointConfig::default(),
                paths: PathsConfig::default(),
            },
        }
    }

    /// Resolve a config: profile defaults, overlaid by the optional file.
    /// `profile_flag` is the command-line profile, which outranks the
    /// file's own `profile` field.
    pub fn resolve(
        file: Option<&Path>,
        profile_flag: Option<Profile>,
    ) -> Result<Self, ConfigError> {
        let file_value = match file {
            None => None,
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
                    path: path.to_path_buf(),
                    detail: e.to_string(),
                })?;
                let value: Value =
                    serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                        path: path.to_path_buf(),
                        detail: e.to_string(),
                    })?;
                Some(value)
            }
        };
        let file_profile = file_value
            .as_ref()
            .and_then(|v| v.get("profile"))
            .map(|p| {
                serde_json::from_value::<Profile>(p.clone())
                    .map_err(|e| ConfigError::Schema(format!("profile: {e}")))
            })
            .transpose()?;
        let profile = profile_flag.or(file_profile).unwrap_or(Profile::Desk);
        let mut merged = serde_json::to_value(Config::for_profile(profile))
            .expect("config serializes");
        if let Some(overlay) = file_value {
            check_known_keys(&overlay, &merged, "")?;
            deep_merge(&mut merged, overlay);
        }
        // The flag-selected profile wins even when the file names another.
        if profile_flag.is_some() {
            merged["profile"] = serde_json::to_value(profile).expect("profile serializes");
        }
        let cfg: Config =
            serde_json::from_value(merged).map_err(|e| ConfigError::Schema(e.to_string()))?;
        Ok(cfg)
    }

    /// Cross-section coherence on top of the per-section validators.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.encoder.validate().map_err(ConfigError::Invalid)?;
        self.planner.validate().map_err(ConfigError::Invalid)?;
        self.train.validate().map_err(ConfigError::Invalid)?;
        if self.encoder.hidden_dim != self.planner.hidden_dim {
            return Err(ConfigError::Invalid(format!(
                "encoder.hidden_dim ({}) must equal planner.hidden_dim ({})",
                self.encoder.hidden_dim, self.planner.hidden_dim
            )));
        }
        if self.planner.max_pairs < self.synth.max_pairs {
            return Err(ConfigError::Invalid(format!(
                "planner.max_pairs ({}) must cover synth.max_pairs ({}) so gold paths fit",
                self.planner.max_pairs, self.synth.max_pairs
            )));
        }
        Ok(())
    }

    /// One seed steers both corpus synthesis and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.train.seed = seed;
    }
}

/// Recursively merge `overlay` into `base`: objects merge key-by-key,
/// everything else replaces.
fn deep_merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reject file keys that the schema does not know, so typos fail loudly
/// instead of silently keeping a default.
fn check_known_keys(overlay: &Value, schema: &Value, prefix: &str) -> Result<(), ConfigError> {
    if let (Value::Object(o), Value::Object(s)) = (overlay, schema) {
        for (k, v) in o {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match s.get(k) {
                None => return Err(ConfigError::UnknownKey { key: path }),
                Some(sub) => check_known_keys(v, sub, &path)?,
            }
        }
    }
    Ok(())
}
