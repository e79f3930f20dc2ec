use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{read_json, read_tensor, write_json, write_tensor};
use crate::nncore::{DType, ParamSet, Real};
use crate::pipeline::config::{Mode, ModelConfig, ModelShape};
use crate::pipeline::model::Model;

pub const CHECKPOINT_SCHEMA: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PARAM_DIR: &str = "params";

pub fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

/// Writes every tensor of `params` under `dir/params/` in `T`'s precision.
pub fn save_params<T: Real>(dir: &Path, params: &ParamSet<T>) -> Result<Vec<ParamEntry>> {
    params
        .iter()
        .enumerate()
        .map(|(i, (_, name, t))| {
            let file = format!("{PARAM_DIR}/{i:03}_{name}.bin");
            write_tensor(&dir.join(&file), t, T::DTYPE)?;
            Ok(ParamEntry {
                name: name.to_string(),
                file,
                shape: t.shape().to_vec(),
            })
        })
        .collect()
}

/// Overwrites `params` from the listed files; every parameter must be listed.
pub fn load_params<T: Real>(dir: &Path, entries: &[ParamEntry], params: &mut ParamSet<T>) -> Result<()> {
    if entries.len() != params.len() {
        return Err(Error::format(
            "params",
            format!("checkpoint lists {} tensors, the model has {}", entries.len(), params.len()),
        ));
    }
    for e in entries {
        let t = read_tensor::<T>(&dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::format(e.name.clone(), "stored shape differs from the manifest"));
        }
        params.set(&e.name, t)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub kind: String,
    pub dtype: String,
    pub mode: Mode,
    pub model: ModelConfig,
    pub shape: ModelShape,
    pub config_hash: String,
    pub params: Vec<ParamEntry>,
}

pub fn save_model<T: Real>(dir: &Path, model: &Model<T>, config_hash: &str) -> Result<CheckpointManifest> {
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA,
        kind: "encoder".into(),
        dtype: dtype_name(T::DTYPE).into(),
        mode: model.mode,
        model: model.config.clone(),
        shape: model.shape.clone(),
        config_hash: config_hash.to_string(),
        params: save_params(dir, &model.params)?,
    };
    write_json(&dir.join(CHECKPOINT_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = read_json(&dir.join(CHECKPOINT_FILE))?;
    if m.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::format("schema_version", format!("unsupported checkpoint schema {}", m.schema_version)));
    }
    if m.kind != "encoder" {
        return Err(Error::format("kind", format!("expected an encoder checkpoint, found `{}`", m.kind)));
    }
    Ok(m)
}

pub fn load_model<T: Real>(dir: &Path) -> Result<(Model<T>, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    let mut model = Model::new(&m.shape, &m.model, m.mode, 0)?;
    load_params(dir, &m.params, &mut model.params)?;
    Ok((model, m))
}
