use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datapipe::NormStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{read_checkpoint, write_checkpoint, AdamState, Checkpoint, Scalar};

/// A model together with the normalization it was trained under.
#[derive(Debug)]
pub struct TrainedModel<T> {
    pub model: Model<T>,
    pub stats: NormStats,
    pub epoch: usize,
}

impl<T: Scalar> Clone for TrainedModel<T> {
    fn clone(&self) -> Self {
        Self::new(self.model.clone(), self.stats, self.epoch)
    }
}

impl<T: Scalar> TrainedModel<T> {
    pub fn new(model: Model<T>, stats: NormStats, epoch: usize) -> Self {
        Self { model, stats, epoch }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    model: ModelConfig,
    config_hash: String,
    norm_stats: NormStats,
    epoch: usize,
}

pub fn save_trained<T: Scalar>(path: &Path, tm: &TrainedModel<T>, adam: Option<&AdamState>) -> Result<()> {
    let meta = Metadata {
        model: tm.model.config().clone(),
        config_hash: tm.model.config().hash(),
        norm_stats: tm.stats,
        epoch: tm.epoch,
    };
    let ckpt = Checkpoint {
        params: tm.model.params.clone(),
        metadata: serde_json::to_value(meta).map_err(|e| Error::format(path, e.to_string()))?,
        adam: adam.cloned(),
    };
    write_checkpoint(path, &ckpt)
}

/// Loads a trained checkpoint. The stored hash must match the stored
/// config, and `expected` (when given) must hash to the same value.
pub fn load_trained<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<TrainedModel<T>> {
    let ckpt: Checkpoint<T> = read_checkpoint(path)?;
    let meta: Metadata =
        serde_json::from_value(ckpt.metadata).map_err(|e| Error::format(path, format!("checkpoint metadata: {e}")))?;
    let hash = meta.model.hash();
    if hash != meta.config_hash {
        return Err(Error::Config(format!(
            "{}: stored config hash {} does not match its config ({hash})",
            path.display(),
            meta.config_hash
        )));
    }
    if let Some(want) = expected {
        if want.hash() != hash {
            return Err(Error::Config(format!(
                "{}: checkpoint was trained with config {hash}, requested {}",
                path.display(),
                want.hash()
            )));
        }
    }
    let model = Model::from_params(meta.model, ckpt.params)?;
    Ok(TrainedModel::new(model, meta.norm_stats, meta.epoch))
}
