//! Model checkpoints: parameter values in an `SPCM` container plus a JSON
//! header (`<name>.json` next to `<name>.spcm`) with the model configuration
//! and the name and shape of every stored parameter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use crate::datamodel::{load_container, save_container};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    /// Training metadata, free-form.
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn header_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, meta: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let tensors: Vec<_> = model.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    let header = CheckpointHeader {
        model: model.config().clone(),
        params: tensors
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    save_container(path, &tensors)?;
    let hp = header_path(path);
    let text = serde_json::to_string_pretty(&header).map_err(|source| Error::Json {
        context: "serializing checkpoint header".into(),
        source,
    })?;
    std::fs::write(&hp, text).map_err(|e| Error::io(&hp, e))
}

pub fn load_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let hp = header_path(path.as_ref());
    let text = std::fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        context: format!("parsing {}", hp.display()),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointHeader)> {
    let path = path.as_ref();
    let header = load_header(path)?;
    let tensors = load_container(path)?;
    let mut model = Model::new(&header.model, 0)?;
    if tensors.len() != model.store.len() || header.params.len() != tensors.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} tensors, model has {} parameters",
            tensors.len(),
            model.store.len()
        )));
    }
    for ((name, t), entry) in tensors.into_iter().zip(&header.params) {
        if entry.name != name || entry.shape != t.shape() {
            return Err(Error::Config(format!("checkpoint header disagrees with container at '{name}'")));
        }
        let id = model
            .store
            .id(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint parameter '{name}' unknown to the model")))?;
        let p = model.store.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::shape("load_checkpoint", name, format!("{:?}", p.value.shape()), format!("{:?}", t.shape())));
        }
        p.value = t;
    }
    Ok((model, header))
}
