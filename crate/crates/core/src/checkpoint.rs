//! JSON checkpoints: the training configuration (which fixes the
//! architecture), the class count and every named parameter.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::netcore::Module;
use crate::trainer::{PldaModel, TrainConfig};

pub const FORMAT: &str = "plda-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub num_classes: usize,
    pub config: TrainConfig,
    pub params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &PldaModel, cfg: &TrainConfig) -> Self {
        let params = model
            .named_params()
            .into_iter()
            .map(|(name, t)| {
                (
                    name,
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        data: t.iter().copied().collect(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            num_classes: model.num_classes(),
            config: cfg.clone(),
            params,
        }
    }

    /// Rebuilds the model; every parameter must be present with its exact shape.
    pub fn to_model(&self) -> Result<PldaModel> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format {} v{}", self.format, self.version)));
        }
        let mut model = PldaModel::new(&self.config, self.num_classes)?;
        let mut seen = 0;
        for (name, t) in model.named_params_mut() {
            let stored = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if stored.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} vs expected {:?}",
                    stored.shape,
                    t.shape()
                )));
            }
            *t = Tensor::from_shape_vec(IxDyn(&stored.shape), stored.data.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(Error::Checkpoint(format!("{} unexpected parameters", self.params.len() - seen)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = TrainConfig {
            widths: vec![4, 6],
            strides: vec![2, 2],
            seed: 3,
            ..TrainConfig::default()
        };
        let model = PldaModel::new(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        Checkpoint::from_model(&model, &cfg).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
        assert_eq!(back, model);

        let mut ck = Checkpoint::from_model(&model, &cfg);
        ck.params.remove("cam_head.weight");
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
    }
}
