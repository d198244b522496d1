//! JSON checkpoints: `{version, config, node_types, raw_dims, target_type,
//! views, tensors: {name: {shape, data}}}` with row-major payloads.
//! Floats are written with shortest round-trip formatting, so save then load
//! is bitwise exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams};
use crate::error::{HgotError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    config: EncoderConfig,
    node_types: Vec<String>,
    raw_dims: Vec<usize>,
    target_type: usize,
    views: Vec<String>,
    tensors: BTreeMap<String, Tensor>,
}

pub fn save_checkpoint(params: &EncoderParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let doc = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        node_types: params.node_types.clone(),
        raw_dims: params.raw_dims.clone(),
        target_type: params.target_type,
        views: params.views.clone(),
        tensors: params
            .tensors
            .iter()
            .map(|(name, t)| {
                let (r, c) = t.dim();
                (
                    name.clone(),
                    Tensor {
                        shape: [r, c],
                        data: t.iter().copied().collect(),
                    },
                )
            })
            .collect(),
    };
    let text = serde_json::to_string(&doc)
        .map_err(|e| HgotError::Numerical(format!("cannot serialize checkpoint: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| HgotError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| HgotError::io(path, e))?;
    let doc: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| HgotError::data(path, e.line(), e.to_string()))?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(HgotError::data(
            path,
            1,
            format!("unsupported checkpoint version {}", doc.version),
        ));
    }
    let mut tensors = BTreeMap::new();
    for (name, t) in doc.tensors {
        let [r, c] = t.shape;
        let a = Array2::from_shape_vec((r, c), t.data).map_err(|_| {
            HgotError::data(path, 1, format!("tensor {name} payload does not match shape {r}x{c}"))
        })?;
        tensors.insert(name, a);
    }
    let params = EncoderParams {
        config: doc.config,
        node_types: doc.node_types,
        raw_dims: doc.raw_dims,
        target_type: doc.target_type,
        views: doc.views,
        tensors,
    };
    params.validate()?;
    Ok(params)
}
