//! Checkpoints: a JSON manifest plus a flat file of little-endian `f32`s in
//! manifest order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::{build_model, DsatModel};
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    /// Canonical `key = value` text of the training config.
    pub config: String,
    /// File name of the value blob, relative to the manifest.
    pub data_file: String,
    pub parameters: Vec<ManifestEntry>,
}

fn data_path(manifest_path: &Path, data_file: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(data_file)
}

pub fn manifest_for(cfg: &TrainConfig, store: &ParamStore, data_file: &str) -> Manifest {
    Manifest {
        config_hash: cfg.hash(),
        config: cfg.to_text(),
        data_file: data_file.to_owned(),
        parameters: store
            .iter()
            .map(|p| ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    }
}

/// Writes `<path>` (manifest) and `<path stem>.bin` next to it.
pub fn save(path: &Path, cfg: &TrainConfig, store: &ParamStore) -> Result<()> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?;
    let data_file = format!("{stem}.bin");
    let manifest = manifest_for(cfg, store, &data_file);
    let mut bytes = Vec::new();
    for p in store.iter() {
        for &v in p.value.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bin = data_path(path, &data_file);
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Copies checkpoint values into `store`, which must have exactly the
/// manifest's layout.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<Manifest> {
    let manifest = read_manifest(path)?;
    let params: Vec<_> = store
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (i, entry) in manifest.parameters.iter().enumerate() {
        match params.get(i) {
            None => {
                return Err(Error::Manifest {
                    name: entry.name.clone(),
                    reason: "not present in the model".into(),
                })
            }
            Some((name, shape)) if *name != entry.name => {
                return Err(Error::Manifest {
                    name: name.clone(),
                    reason: format!("checkpoint has `{}` in this position", entry.name),
                })
            }
            Some((name, shape)) if *shape != entry.shape => {
                return Err(Error::Manifest {
                    name: name.clone(),
                    reason: format!(
                        "shape {:?} in checkpoint, {:?} in model",
                        entry.shape, shape
                    ),
                })
            }
            Some(_) => {}
        }
    }
    if let Some((name, _)) = params.get(manifest.parameters.len()) {
        return Err(Error::Manifest {
            name: name.clone(),
            reason: "missing from the checkpoint".into(),
        });
    }
    let bin = data_path(path, &manifest.data_file);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let total: usize = manifest
        .parameters
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != 4 * total {
        return Err(Error::Manifest {
            name: manifest.data_file.clone(),
            reason: format!("expected {} bytes, found {}", 4 * total, bytes.len()),
        });
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = values.next().unwrap_or(0.0);
        }
    }
    Ok(manifest)
}

/// Rebuilds the model described by the checkpoint's config and loads it.
pub fn load(path: &Path) -> Result<(TrainConfig, ParamStore, DsatModel)> {
    let manifest = read_manifest(path)?;
    let cfg = TrainConfig::parse(&manifest.config)?;
    if cfg.hash() != manifest.config_hash {
        return Err(Error::Manifest {
            name: "config".into(),
            reason: "config hash does not match the embedded config".into(),
        });
    }
    let (mut store, model) = build_model(&cfg)?;
    load_into(path, &mut store)?;
    Ok((cfg, store, model))
}
