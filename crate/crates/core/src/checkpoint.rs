//! JSON checkpoints of model parameters.
//!
//! Layout:
//!
//! ```json
//! {
//!   "format": "modbal-checkpoint",
//!   "version": 1,
//!   "model": { ...ModelConfig... },
//!   "params": { "enc_a.w1": { "shape": [8, 16], "data": [...] }, ... }
//! }
//! ```
//!
//! Floats are written with round-trip precision, so a save/load cycle is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{init_model, ModelConfig, ModelError, ModelParams};

pub const FORMAT: &str = "modbal-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint {path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("checkpoint {path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: ModelError,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SavedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub params: BTreeMap<String, SavedTensor>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            model: params.config().clone(),
            params: params
                .params()
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        SavedTensor {
                            shape: p.tensor.shape().to_vec(),
                            data: p.tensor.data().to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Rebuilds the parameter set. Every parameter of the configured model
    /// must be present with the right shape, and nothing else.
    pub fn into_params(self, path: &Path) -> Result<ModelParams, CheckpointError> {
        let invalid = |message: String| CheckpointError::Invalid {
            path: path.to_path_buf(),
            message,
        };
        if self.format != FORMAT {
            return Err(invalid(format!("format is `{}`, expected `{FORMAT}`", self.format)));
        }
        if self.version != VERSION {
            return Err(invalid(format!("unsupported version {}", self.version)));
        }
        let mut model = init_model(&self.model, 0).map_err(|source| CheckpointError::Model {
            path: path.to_path_buf(),
            source,
        })?;
        let mut saved = self.params;
        let mut values = Vec::with_capacity(model.len());
        for p in model.params() {
            let t = saved
                .remove(&p.name)
                .ok_or_else(|| invalid(format!("missing parameter `{}`", p.name)))?;
            if t.shape != p.tensor.shape() {
                return Err(invalid(format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape,
                    p.tensor.shape()
                )));
            }
            let tensor = Tensor::new(t.shape, t.data).map_err(|e| invalid(format!("parameter `{}`: {e}", p.name)))?;
            values.push(tensor);
        }
        if let Some(extra) = saved.keys().next() {
            return Err(invalid(format!("unexpected parameter `{extra}`")));
        }
        model.set_values(&values).map_err(|source| CheckpointError::Model {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(model)
    }
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let json = serde_json::to_string(&Checkpoint::from_params(params)).map_err(|source| CheckpointError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, json).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    ck.into_params(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let m = init_model(&ModelConfig::default(), 11).unwrap();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn rejects_tampered_files() {
        let m = init_model(&ModelConfig::default(), 1).unwrap();
        let p = Path::new("x.json");

        let mut ck = Checkpoint::from_params(&m);
        ck.params.remove("enc_a.w_mu");
        let err = ck.into_params(p).unwrap_err().to_string();
        assert!(err.contains("missing parameter `enc_a.w_mu`"), "{err}");

        let mut ck = Checkpoint::from_params(&m);
        ck.params.get_mut("uni.t.b").unwrap().shape = vec![2];
        assert!(ck.into_params(p).is_err());

        let mut ck = Checkpoint::from_params(&m);
        ck.params.insert(
            "bogus".into(),
            SavedTensor {
                shape: vec![1],
                data: vec![0.0],
            },
        );
        assert!(ck.into_params(p).unwrap_err().to_string().contains("bogus"));

        let mut ck = Checkpoint::from_params(&m);
        ck.version = 9;
        assert!(ck.into_params(p).is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_checkpoint(Path::new("/nonexistent/ck.json")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ck.json"));
    }
}
