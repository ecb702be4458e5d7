use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::{Architecture, ModelParams, ParamSet};
use super::train::{Pipeline, TrainedModel};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const BASIS_TENSOR: &str = "inference.basis";

/// Location of one tensor inside the flat data file, in `f64` elements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

/// JSON side of a checkpoint; tensors are stored row-major as little-endian
/// `f64` in `data`, which is resolved relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub pipeline: Pipeline,
    pub architecture: Architecture,
    pub data: PathBuf,
    pub tensors: Vec<TensorEntry>,
}

fn named_tensors(model: &TrainedModel) -> Vec<(&str, &Matrix)> {
    match model {
        TrainedModel::CpcaNet { params, basis } => {
            let mut t = params.tensors();
            t.push((BASIS_TENSOR, basis));
            t
        }
        TrainedModel::Erm(p) => p.tensors(),
    }
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`; returns the manifest path.
pub fn save_checkpoint(model: &TrainedModel, arch: &Architecture, dir: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let data_name = PathBuf::from(format!("{stem}.bin"));
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, m) in named_tensors(model) {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.as_slice().len();
        bytes.extend(m.as_slice().iter().flat_map(|v| v.to_le_bytes()));
    }
    let manifest = CheckpointManifest {
        pipeline: match model {
            TrainedModel::CpcaNet { .. } => Pipeline::CpcaNet,
            TrainedModel::Erm(_) => Pipeline::Erm,
        },
        architecture: *arch,
        data: data_name.clone(),
        tensors,
    };
    std::fs::write(dir.join(&data_name), bytes)?;
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<(TrainedModel, Architecture)> {
    let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let bytes = std::fs::read(base.join(&manifest.data))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidValue(format!("checkpoint data is {} bytes, not whole f64s", bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut tensors = BTreeMap::new();
    for t in &manifest.tensors {
        let end = t.offset + t.rows * t.cols;
        let slice = values.get(t.offset..end).ok_or_else(|| {
            Error::InvalidValue(format!("tensor {} runs past the end of the data file", t.name))
        })?;
        tensors.insert(t.name.clone(), Matrix::from_vec(t.rows, t.cols, slice.to_vec())?);
    }
    let arch = manifest.architecture;
    let params = ModelParams::from_named(&arch, |name| tensors.get(name).cloned());
    let model = match manifest.pipeline {
        Pipeline::CpcaNet => {
            let basis = tensors
                .remove(BASIS_TENSOR)
                .ok_or_else(|| Error::InvalidValue(format!("missing tensor {BASIS_TENSOR}")))?;
            TrainedModel::CpcaNet { params: params?, basis }
        }
        Pipeline::Erm => {
            let mut erm = ModelParams::zeroed(&arch).base;
            for (name, slot) in erm.tensors_mut() {
                let m = tensors
                    .remove(name)
                    .ok_or_else(|| Error::InvalidValue(format!("missing tensor {name}")))?;
                if m.shape() != slot.shape() {
                    return Err(crate::error::shape_err(
                        "checkpoint",
                        format!("{name} is {:?}, expected {:?}", m.shape(), slot.shape()),
                    ));
                }
                *slot = m;
            }
            TrainedModel::Erm(erm)
        }
    };
    Ok((model, arch))
}
