//! Unified run configuration, its content hash and the resolved-config
//! snapshot written into every output directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::AdamConfig;
use crate::corpus::write_atomic;
use crate::error::{Error, Result};
use crate::features::SpectrogramConfig;
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::synthesis::SynthConfig;

pub const SNAPSHOT_FILE: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds initialization, shuffling and reparameterization noise.
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0
            && a.eps > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2))
        {
            return Err(Error::Config(format!("invalid optimizer settings {a:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Equal-frequency bins per latent dimension for the MI estimate.
    pub mi_bins: usize,
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub probe_train_fraction: f64,
    pub probe_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mi_bins: 20,
            probe_steps: 500,
            probe_lr: 0.01,
            probe_train_fraction: 0.8,
            probe_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mi_bins < 2 {
            return Err(Error::Config("mi_bins must be at least 2".into()));
        }
        if !(self.probe_lr > 0.0)
            || !(self.probe_train_fraction > 0.0 && self.probe_train_fraction < 1.0)
        {
            return Err(Error::Config(
                "probe_lr must be positive and probe_train_fraction in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Everything that determines a run. Unknown keys are rejected at every level.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub features: SpectrogramConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub training: TrainConfig,
    pub evaluation: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.features.validate()?;
        self.model.validate()?;
        self.objective.weights.validate()?;
        self.training.validate()?;
        self.evaluation.validate()?;
        let (rows, cols) = self.features.target_shape();
        if rows != self.model.input_size || cols != self.model.input_size {
            return Err(Error::Config(format!(
                "spectrogram {rows}×{cols} does not match model input {}",
                self.model.input_size
            )));
        }
        Ok(())
    }

    /// Parses a config document, or a snapshot written by
    /// [`RunConfig::write_snapshot`] whose hash must still match.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let bad = |e: serde_json::Error| Error::Config(e.to_string());
        let doc: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
        let cfg: RunConfig = match doc.get("config_hash") {
            Some(hash) => {
                let snap: Snapshot = serde_json::from_value(doc.clone()).map_err(bad)?;
                if snap.config.hash() != snap.config_hash {
                    return Err(Error::Config(format!(
                        "snapshot hash {hash} does not match its config"
                    )));
                }
                snap.config
            }
            None => serde_json::from_value(doc).map_err(bad)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Hex SHA-256 of the canonical (compact, declaration-ordered) JSON form.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Writes `resolved_config.json` holding the hash and the full config.
    pub fn write_snapshot(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hash = self.hash();
        let doc = serde_json::json!({ "config_hash": hash, "config": self });
        write_atomic(&dir.join(SNAPSHOT_FILE), &serde_json::to_vec_pretty(&doc)?)?;
        Ok(hash)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    config_hash: String,
    config: RunConfig,
}

pub(crate) fn hash_json(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
