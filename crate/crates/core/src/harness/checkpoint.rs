//! Checkpoints: a JSON manifest (configuration plus parameter names and
//! shapes) and a weights file holding every parameter as a tensor dump, in
//! manifest order.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::tensor::{read_dump, write_dump, ParamStore};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const FORMAT: &str = "pwrf-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: PipelineConfig,
    pub params: Vec<ParamEntry>,
}

/// Writes `store` and `cfg` into directory `dir`, creating it if needed.
pub fn save(dir: impl AsRef<Path>, cfg: &PipelineConfig, store: &ParamStore) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        config: cfg.clone(),
        params: store
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec() })
            .collect(),
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let mut out = BufWriter::new(std::fs::File::create(dir.join(WEIGHTS_FILE))?);
    for (_, p) in store.iter() {
        write_dump(&p.tensor, &mut out)?;
    }
    out.flush()?;
    Ok(())
}

/// Rebuilds the model described by a checkpoint and loads its weights.
pub fn load(dir: impl AsRef<Path>) -> Result<(PipelineConfig, Model, ParamStore)> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format `{}`", manifest.format)));
    }
    let cfg = manifest.config;
    let (model, mut store) = Model::build(&cfg)?;
    if store.len() != manifest.params.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    let mut input = BufReader::new(std::fs::File::open(dir.join(WEIGHTS_FILE))?);
    for entry in &manifest.params {
        let t = read_dump(&mut input)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!("weights for `{}` have shape {:?}, manifest says {:?}", entry.name, t.shape(), entry.shape)));
        }
        store.set_by_name(&entry.name, t).map_err(|e| Error::Format(format!("checkpoint does not match model: {e}")))?;
    }
    Ok((cfg, model, store))
}
