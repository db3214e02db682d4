//! Checkpoint directories: a JSON manifest plus one .gvt file per tensor
//! (parameter value and both optimizer moments), capturing everything a
//! resumed run needs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::gvt;
use crate::train::TrainConfig;

const FORMAT_TAG: &str = "geovit-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
    value_file: String,
    m_file: String,
    v_file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    step_count: u64,
    model_config: ModelConfig,
    train_config: TrainConfig,
    norm_stats: NormStats,
    params: Vec<ManifestParam>,
}

/// Everything stored beside the tensors.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub norm: NormStats,
    pub step_count: u64,
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    store: &ParamStore<T>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    norm: &NormStats,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(store.len());
    for (_, entry) in store.iter() {
        let value_file = format!("{}.value.gvt", entry.name);
        let m_file = format!("{}.m.gvt", entry.name);
        let v_file = format!("{}.v.gvt", entry.name);
        gvt::write_tensor(&dir.join(&value_file), &entry.value)?;
        gvt::write_tensor(&dir.join(&m_file), &entry.m)?;
        gvt::write_tensor(&dir.join(&v_file), &entry.v)?;
        params.push(ManifestParam {
            name: entry.name.clone(),
            shape: entry.value.shape().to_vec(),
            value_file,
            m_file,
            v_file,
        });
    }
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        step_count: store.step_count(),
        model_config: model_config.clone(),
        train_config: train_config.clone(),
        norm_stats: *norm,
        params,
    };
    let path = dir.join("checkpoint.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::format(
            &path,
            format!("unknown checkpoint format {:?}", manifest.format),
        ));
    }
    if manifest.step_count != 0 && manifest.params.is_empty() {
        return Err(Error::format(&path, "trained checkpoint lists no parameters"));
    }
    Ok(manifest)
}

/// Metadata only, without touching the tensor files.
pub fn read_checkpoint_meta(dir: &Path) -> Result<CheckpointMeta> {
    let m = read_manifest(dir)?;
    Ok(CheckpointMeta {
        model_config: m.model_config,
        train_config: m.train_config,
        norm: m.norm_stats,
        step_count: m.step_count,
    })
}

/// Restore a checkpoint into an existing model. The stored configuration
/// must match the model's exactly; every tensor is read and validated
/// before any state is mutated, so a failed load leaves the model as it
/// was.
pub fn load_checkpoint_into<T: Scalar>(dir: &Path, model: &mut Model<T>) -> Result<CheckpointMeta> {
    let manifest = read_manifest(dir)?;
    if manifest.model_config != *model.config() {
        return Err(Error::config(format!(
            "checkpoint at {} was written for a different model configuration",
            dir.display()
        )));
    }
    let store = model.store();
    if manifest.params.len() != store.len() {
        return Err(Error::contract(format!(
            "checkpoint lists {} parameters, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }

    // read and validate everything first
    let mut staged = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        let id = store.id(&p.name).ok_or_else(|| {
            Error::contract(format!("checkpoint parameter \"{}\" is unknown to the model", p.name))
        })?;
        let want = store.get(id).value.shape();
        let value = gvt::read_tensor::<T>(&dir.join(&p.value_file))?;
        let m = gvt::read_tensor::<T>(&dir.join(&p.m_file))?;
        let v = gvt::read_tensor::<T>(&dir.join(&p.v_file))?;
        for (what, t) in [("value", &value), ("m", &m), ("v", &v)] {
            if t.shape() != want || t.shape() != p.shape {
                return Err(Error::contract(format!(
                    "checkpoint tensor \"{}\" ({what}) has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    want
                )));
            }
        }
        staged.push((id, value, m, v));
    }

    let store = model.store_mut();
    for (id, value, m, v) in staged {
        store.set_value(id, value)?;
        store.set_optimizer_state(id, m, v)?;
    }
    store.set_step_count(manifest.step_count);
    Ok(CheckpointMeta {
        model_config: manifest.model_config,
        train_config: manifest.train_config,
        norm: manifest.norm_stats,
        step_count: manifest.step_count,
    })
}

/// Build the model described by the checkpoint and restore it.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let manifest = read_manifest(dir)?;
    manifest.model_config.validate()?;
    let mut model = Model::<T>::new(manifest.model_config)?;
    let meta = load_checkpoint_into(dir, &mut model)?;
    Ok((model, meta))
}
