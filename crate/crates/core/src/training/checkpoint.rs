use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::Stage;
use crate::datasets::Vocab;
use crate::error::{Error, Result};
use crate::features::ProviderManifest;
use crate::model::{InstructionModel, ModelConfig};

pub const CHECKPOINT_FORMAT: &str = "mmig-checkpoint/1";

/// SHA-256 (hex) of a value's canonical JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredArray {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Named parameters plus everything needed to rebuild the model and to
/// enforce stage ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub stage: Stage,
    pub completed_stages: Vec<Stage>,
    pub epoch: usize,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub manifest: ProviderManifest,
    pub params: BTreeMap<String, StoredArray>,
}

/// Outcome of comparing a checkpoint's config hash with the current one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HashCheck {
    Match,
    Mismatch { stored: String, current: String },
}

impl Checkpoint {
    pub fn from_model(
        model: &InstructionModel,
        stage: Stage,
        completed_stages: Vec<Stage>,
        epoch: usize,
        config_hash: String,
        metrics: BTreeMap<String, f64>,
    ) -> Self {
        let params = model
            .params
            .named()
            .map(|(name, a)| {
                let (r, c) = a.dim();
                (
                    name.to_string(),
                    StoredArray {
                        shape: [r, c],
                        data: a.iter().copied().collect(),
                    },
                )
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            stage,
            completed_stages,
            epoch,
            config_hash,
            metrics,
            model: model.config.clone(),
            vocab: model.vocab.clone(),
            manifest: model.manifest.clone(),
            params,
        }
    }

    pub fn has_completed(&self, stage: Stage) -> bool {
        self.completed_stages.contains(&stage)
    }

    /// Rebuilds the model and loads every parameter by name.
    pub fn to_model(&self) -> Result<InstructionModel> {
        let mut model = InstructionModel::new(self.model.clone(), self.vocab.clone(), self.manifest.clone(), 0);
        let mut named = BTreeMap::new();
        for (name, stored) in &self.params {
            let [r, c] = stored.shape;
            let a = Array2::from_shape_vec((r, c), stored.data.clone())
                .map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
            named.insert(name.clone(), a);
        }
        model.params.load_named(&named)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some((k, v)) = self.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Config(format!("metric {k} is not finite ({v})")));
        }
        serde_json::to_vec(self).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(bytes).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::CorruptCheckpoint(format!("unknown format {:?}", ckpt.format)));
        }
        Ok(ckpt)
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::CorruptCheckpoint(m) => Error::CorruptCheckpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Compares hashes; a mismatch is logged as a warning, not an error.
    pub fn check_config_hash(&self, current: &str) -> HashCheck {
        if self.config_hash == current {
            HashCheck::Match
        } else {
            log::warn!(
                "checkpoint config hash {} differs from current config {}",
                self.config_hash,
                current
            );
            HashCheck::Mismatch {
                stored: self.config_hash.clone(),
                current: current.to_string(),
            }
        }
    }
}
