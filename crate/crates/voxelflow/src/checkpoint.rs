//! Model parameters as JSON: `{"model": ModelConfig, "params": {name: {shape, values}}}`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use voxelflow_core::model::{Model, ModelConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: BTreeMap<String, TensorEntry>,
}

impl Checkpoint {
    pub fn from_model(m: &Model) -> Self {
        let params = m
            .store
            .ids()
            .map(|id| {
                let entry = TensorEntry {
                    shape: m.store.shape(id).to_vec(),
                    values: m.store.get(id).to_vec(),
                };
                (m.store.name(id).to_string(), entry)
            })
            .collect();
        Checkpoint {
            model: m.cfg.clone(),
            params,
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn into_model(self) -> Result<Model> {
        let mut m = Model::new(self.model)?;
        if self.params.len() != m.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                m.store.len()
            )));
        }
        let mut params = self.params;
        let mut values = Vec::with_capacity(m.store.len());
        for id in m.store.ids() {
            let name = m.store.name(id);
            let e = params
                .remove(name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor '{name}'")))?;
            if e.shape != m.store.shape(id) {
                return Err(Error::Config(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    e.shape,
                    m.store.shape(id)
                )));
            }
            values.push(e.values);
        }
        m.load_values(values)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub fn save_model(m: &Model, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(m).save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Checkpoint::load(path)?.into_model()
}
