use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::{Error, Result};

const META_KEY: &str = "nowcast";

/// Everything needed to check that a checkpoint fits the run loading it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `interpolator`, `forecastor`, `convlstm_lcb`, ...
    pub kind: String,
    /// Full experiment config as written by the run that produced it.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub spec_fingerprint: String,
    /// Epochs completed.
    pub epoch: usize,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tensors = store.tensors();
    let mut info = HashMap::new();
    info.insert(META_KEY.to_string(), serde_json::to_string(meta)?);
    // write then rename so a crash never leaves a truncated checkpoint behind
    let tmp: PathBuf = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors.iter(), Some(info), &tmp)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    Ok(load_checkpoint(path)?.1)
}

pub fn load_checkpoint(path: &Path) -> Result<(HashMap<String, Tensor>, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| ckpt_err(path, "no run metadata"))?;
    let meta: CheckpointMeta = serde_json::from_str(raw)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((tensors, meta))
}

/// Loads parameters into `store` after checking kind, config hash and
/// normalization fingerprint. Any mismatch is an error.
pub fn restore_checkpoint(
    path: &Path,
    store: &ParamStore,
    kind: &str,
    config_hash: &str,
    spec_fingerprint: &str,
) -> Result<CheckpointMeta> {
    let (tensors, meta) = load_checkpoint(path)?;
    if meta.kind != kind {
        return Err(ckpt_err(path, format!("holds a {} model, expected {kind}", meta.kind)));
    }
    if meta.config_hash != config_hash {
        return Err(ckpt_err(
            path,
            format!("config hash {} does not match {config_hash}", meta.config_hash),
        ));
    }
    if meta.spec_fingerprint != spec_fingerprint {
        return Err(ckpt_err(
            path,
            format!(
                "normalization fingerprint {} does not match {spec_fingerprint}",
                meta.spec_fingerprint
            ),
        ));
    }
    store
        .load(&tensors)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{UNet, UNetConfig};
    use candle_core::DType;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            kind: "interpolator".into(),
            config: serde_json::json!({"a": 1}),
            config_hash: "abc".into(),
            spec_fingerprint: "f00".into(),
            epoch: 3,
        }
    }

    fn cfg() -> UNetConfig {
        UNetConfig {
            base_channels: 8,
            depth: 1,
            time_embedding_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_restores_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt/i.safetensors");
        let a = UNet::new(cfg(), 1, DType::F32).unwrap();
        save_checkpoint(&path, a.store(), &meta()).unwrap();
        let b = UNet::new(cfg(), 2, DType::F32).unwrap();
        let m = restore_checkpoint(&path, b.store(), "interpolator", "abc", "f00").unwrap();
        assert_eq!(m, meta());
        for (k, t) in a.store().tensors() {
            let u = &b.store().tensors()[&k];
            assert_eq!(
                t.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                u.flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }

    #[test]
    fn mismatches_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.safetensors");
        let a = UNet::new(cfg(), 1, DType::F32).unwrap();
        save_checkpoint(&path, a.store(), &meta()).unwrap();
        assert!(restore_checkpoint(&path, a.store(), "forecastor", "abc", "f00").is_err());
        assert!(restore_checkpoint(&path, a.store(), "interpolator", "xyz", "f00").is_err());
        assert!(restore_checkpoint(&path, a.store(), "interpolator", "abc", "bad").is_err());
        let other = UNet::new(UNetConfig { depth: 2, ..cfg() }, 1, DType::F32).unwrap();
        assert!(restore_checkpoint(&path, other.store(), "interpolator", "abc", "f00").is_err());
        assert!(matches!(
            load_checkpoint(&dir.path().join("none.safetensors")),
            Err(Error::MissingFile(_))
        ));
    }
}
