//! Self-describing model checkpoints: config echo plus named parameter and
//! batch-norm-state blobs. JSON with shortest-round-trip floats, so a
//! save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{build_model, Architecture, ModelConfig, ModelError, TaskSpec};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint schema version {0}")]
    Schema(u32),
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint has unknown parameter {0}")]
    UnknownParam(String),
    #[error("shape mismatch for {name}: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnBlob {
    pub name: String,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub tasks: Vec<TaskSpec>,
    pub params: Vec<ParamBlob>,
    pub bn_states: Vec<BnBlob>,
}

pub fn snapshot(model: &mut dyn Architecture) -> Checkpoint {
    let mut params = Vec::new();
    model.visit_params(&mut |p| {
        params.push(ParamBlob {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        });
    });
    let mut bn_states = Vec::new();
    model.visit_bn_states(&mut |name, st| {
        bn_states.push(BnBlob {
            name: name.to_string(),
            running_mean: st.running_mean.clone(),
            running_var: st.running_var.clone(),
            momentum: st.momentum,
            eps: st.eps,
        });
    });
    Checkpoint {
        schema_version: SCHEMA_VERSION,
        model: model.config().clone(),
        tasks: model.tasks().to_vec(),
        params,
        bn_states,
    }
}

/// Rebuild the architecture from the config echo and restore every blob.
pub fn restore(ckpt: &Checkpoint) -> Result<Box<dyn Architecture>, CheckpointError> {
    if ckpt.schema_version != SCHEMA_VERSION {
        return Err(CheckpointError::Schema(ckpt.schema_version));
    }
    let mut model = build_model(&ckpt.model, &ckpt.tasks)?;

    let mut expected = Vec::new();
    model.visit_params(&mut |p| expected.push(p.name.clone()));
    for blob in &ckpt.params {
        if !expected.contains(&blob.name) {
            return Err(CheckpointError::UnknownParam(blob.name.clone()));
        }
    }

    let mut result: Result<(), CheckpointError> = Ok(());
    model.visit_params(&mut |p| {
        if result.is_err() {
            return;
        }
        match ckpt.params.iter().find(|b| b.name == p.name) {
            None => result = Err(CheckpointError::MissingParam(p.name.clone())),
            Some(blob) => {
                if blob.shape != p.value.shape() {
                    result = Err(CheckpointError::ShapeMismatch {
                        name: p.name.clone(),
                        found: blob.shape.clone(),
                        expected: p.value.shape().to_vec(),
                    });
                } else {
                    p.value = Tensor::from_vec(blob.shape.clone(), blob.data.clone());
                }
            }
        }
    });
    result?;

    let mut bn_result: Result<(), CheckpointError> = Ok(());
    model.visit_bn_states(&mut |name, st| {
        if bn_result.is_err() {
            return;
        }
        match ckpt.bn_states.iter().find(|b| b.name == name) {
            None => bn_result = Err(CheckpointError::MissingParam(name.to_string())),
            Some(blob) => {
                st.running_mean = blob.running_mean.clone();
                st.running_var = blob.running_var.clone();
                st.momentum = blob.momentum;
                st.eps = blob.eps;
            }
        }
    });
    bn_result?;
    Ok(model)
}

pub fn save_to_file(model: &mut dyn Architecture, path: &Path) -> Result<(), CheckpointError> {
    let ckpt = snapshot(model);
    fs::write(path, serde_json::to_string(&ckpt)?)?;
    Ok(())
}

pub fn load_from_file(path: &Path) -> Result<Box<dyn Architecture>, CheckpointError> {
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    restore(&ckpt)
}
