//! Versioned JSON checkpoints.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GsanError, Result};
use crate::model::Model;
use crate::train::{FitResult, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "gsan-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub in_width: usize,
    pub classes: usize,
    pub dataset_name: String,
    pub dataset_fingerprint: String,
    pub best_epoch: usize,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(model: &Model, config: &TrainConfig, dataset: &Dataset, best_epoch: usize) -> Self {
        let params = model
            .named_params()
            .into_iter()
            .map(|(name, p)| NamedTensor {
                name,
                rows: p.nrows(),
                cols: p.ncols(),
                data: p.iter().copied().collect(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            in_width: dataset.num_features(),
            classes: dataset.num_classes(),
            dataset_name: dataset.name.clone(),
            dataset_fingerprint: dataset.fingerprint(),
            best_epoch,
            params,
        }
    }

    pub fn from_fit(result: &FitResult, dataset: &Dataset) -> Self {
        Self::new(&result.model, &result.config, dataset, result.best_epoch)
    }

    /// Rebuilds the model, checking every parameter name and shape.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::zeros(&self.config.model, self.in_width, self.classes)?;
        let expected = model.named_params();
        if expected.len() != self.params.len() {
            return Err(GsanError::InvalidCheckpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        let mut values = Vec::with_capacity(self.params.len());
        for ((name, slot), stored) in expected.iter().zip(&self.params) {
            if *name != stored.name || slot.dim() != (stored.rows, stored.cols) {
                return Err(GsanError::InvalidCheckpoint(format!(
                    "expected {name} {:?}, found {} ({}, {})",
                    slot.dim(),
                    stored.name,
                    stored.rows,
                    stored.cols
                )));
            }
            let arr = Array2::from_shape_vec((stored.rows, stored.cols), stored.data.clone())
                .map_err(|e| GsanError::InvalidCheckpoint(format!("{}: {e}", stored.name)))?;
            values.push(arr);
        }
        drop(expected);
        model.set_params(&values)?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| GsanError::InvalidCheckpoint(e.to_string()))?;
        let format = value.get("format").and_then(|v| v.as_str());
        if format != Some(CHECKPOINT_FORMAT) {
            return Err(GsanError::InvalidCheckpoint(format!(
                "not a {CHECKPOINT_FORMAT} file"
            )));
        }
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_VERSION as u64) {
            return Err(GsanError::InvalidCheckpoint(format!(
                "unsupported version {version:?}, expected {CHECKPOINT_VERSION}"
            )));
        }
        serde_json::from_value(value).map_err(|e| GsanError::InvalidCheckpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(GsanError::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }
}
