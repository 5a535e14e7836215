//! JSON checkpoints: a version tag, the config, the standardization and
//! every tensor as `{name, shape, data}` in column-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NfIvaeConfig, NfIvaeModel, Params};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "exonode-nfivae";

#[derive(Serialize, Deserialize)]
struct Tensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    layout: String,
    config: NfIvaeConfig,
    nodes: Vec<String>,
    n_subjects: usize,
    z_mean: Vec<f64>,
    z_scale: Vec<f64>,
    tensors: Vec<Tensor>,
}

pub fn save_checkpoint(model: &NfIvaeModel, path: &Path) -> Result<()> {
    let tensors = model
        .params
        .shapes()
        .into_iter()
        .zip(model.params.tensors())
        .map(|((name, r, c), data)| Tensor {
            name,
            shape: [r, c],
            data: data.to_vec(),
        })
        .collect();
    let ck = Checkpoint {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        layout: "column-major".into(),
        config: model.config.clone(),
        nodes: model.nodes.clone(),
        n_subjects: model.n_subjects(),
        z_mean: model.z_mean.clone(),
        z_scale: model.z_scale.clone(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&ck)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NfIvaeModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    let bad = |detail: String| Error::MalformedData {
        file: path.to_path_buf(),
        detail,
    };
    if ck.format != FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
    }
    let mut model = NfIvaeModel::initialize(&ck.config, ck.nodes, ck.n_subjects)?;
    if ck.z_mean.len() != model.n_observed() || ck.z_scale.len() != model.n_observed() {
        return Err(bad("standardization length does not match node count".into()));
    }
    model.z_mean = ck.z_mean;
    model.z_scale = ck.z_scale;
    let shapes = model.params.shapes();
    if shapes.len() != ck.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, found {}",
            shapes.len(),
            ck.tensors.len()
        )));
    }
    let mut params: Params = model.params.clone();
    for (((name, r, c), dst), t) in shapes.into_iter().zip(params.tensors_mut()).zip(&ck.tensors) {
        if t.name != name || t.shape != [r, c] || t.data.len() != dst.len() {
            return Err(bad(format!(
                "tensor `{}` does not match expected `{name}` [{r}, {c}]",
                t.name
            )));
        }
        dst.copy_from_slice(&t.data);
    }
    model.params = params;
    Ok(model)
}
