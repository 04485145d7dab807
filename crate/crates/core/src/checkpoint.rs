//! Versioned JSON checkpoints.
//!
//! Parameters are stored by name and shape as plain decimal arrays. Floats
//! are written in shortest round-trip form and parsed exactly, so a loaded
//! model reproduces the saved one bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiExitModel};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub model: ModelConfig,
    pub epochs_trained: usize,
    pub seed: u64,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn new(model: &MultiExitModel, config: &RunConfig, epochs_trained: usize) -> Self {
        let mut config = config.clone();
        config.train.alphas = Some(config.alphas());
        Self {
            format_version: FORMAT_VERSION,
            seed: config.seed,
            config,
            model: model.config().clone(),
            epochs_trained,
            params: model
                .params()
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: [p.value.rows(), p.value.cols()],
                    values: p.value.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    /// Parses a checkpoint, checking the format version before anything else.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct VersionProbe {
            format_version: Option<u32>,
        }
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        match probe.format_version {
            Some(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "format version {v} is not supported (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("missing format_version".into())),
        }
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Rebuilds the model and installs the stored weights.
    pub fn to_model(&self) -> Result<MultiExitModel> {
        let mut model = MultiExitModel::new(self.model.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if self.params.len() != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                self.params.len(),
                model.params().len()
            )));
        }
        let mut values = Vec::with_capacity(self.params.len());
        for (rec, p) in self.params.iter().zip(model.params().iter()) {
            if rec.name != p.name {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` found where `{}` was expected",
                    rec.name, p.name
                )));
            }
            let m = Matrix::new(rec.shape[0], rec.shape[1], rec.values.clone())
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", rec.name)))?;
            values.push(m);
        }
        model
            .params_mut()
            .load_values(values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MultiExitModel {
        MultiExitModel::new(ModelConfig {
            input_dim: 3,
            num_classes: 2,
            block_widths: vec![4, 4],
            head_hidden: 3,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let ck = Checkpoint::new(&m, &RunConfig::default(), 0);
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), m);
    }

    #[test]
    fn version_mismatch_detected_first() {
        let ck = Checkpoint::new(&model(), &RunConfig::default(), 0);
        let text = ck.to_json().replace("\"format_version\": 1", "\"format_version\": 99");
        let err = Checkpoint::from_json(&text).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
        // weights need not even parse once the version is wrong
        let err = Checkpoint::from_json("{\"format_version\": 2, \"params\": \"garbage\"}").unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn renamed_parameter_rejected() {
        let mut ck = Checkpoint::new(&model(), &RunConfig::default(), 0);
        ck.params[0].name = "other".into();
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
    }
}
