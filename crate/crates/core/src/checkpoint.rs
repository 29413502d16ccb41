//! Model checkpoints: a directory holding `manifest.json` and `params.adt1`.
//!
//! All parameter tensors are flattened and concatenated in spec order into a
//! single `1×1×P` `ADT1` tensor, so stored values have f32 precision.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub spec_hash: String,
    pub spec: ModelSpec,
    pub step: u64,
    pub val_acc: f64,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    spec: &ModelSpec,
    params: &ModelParams,
    step: u64,
    val_acc: f64,
) -> Result<CheckpointManifest> {
    params.check(spec)?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let flat: Vec<f64> = params.tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = flat.len();
    Tensor::new(vec![1, 1, n], flat)?.write_adt1(dir.join("params.adt1"))?;
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        spec_hash: spec.hash(),
        spec: spec.clone(),
        step,
        val_acc,
        tensors: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Loads a checkpoint and verifies it against its own recorded spec.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(CheckpointManifest, ModelParams)> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::data(format!("cannot read {}/manifest.json: {e}", dir.display())))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("bad checkpoint manifest: {e}")))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::data(format!("unsupported checkpoint schema {}", manifest.schema_version)));
    }
    if manifest.spec.hash() != manifest.spec_hash {
        return Err(Error::data("checkpoint spec hash does not match its spec"));
    }
    let flat = Tensor::read_adt1(dir.join("params.adt1"))?;
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let chunk = flat
            .data()
            .get(offset..offset + n)
            .ok_or_else(|| Error::data(format!("params.adt1 too short for `{}`", e.name)))?;
        tensors.push(Tensor::new(e.shape.clone(), chunk.to_vec())?);
        offset += n;
    }
    if offset != flat.len() {
        return Err(Error::data(format!("params.adt1 has {} values, manifest lists {offset}", flat.len())));
    }
    let params = ModelParams { names: manifest.tensors.iter().map(|e| e.name.clone()).collect(), tensors };
    params.check(&manifest.spec).map_err(|e| Error::data(e.to_string()))?;
    Ok((manifest, params))
}
