//! Parameter checkpoints: a single binary file with a JSON header (config,
//! config hash, step, seed, tensor directory) followed by raw little-endian
//! scalars. Loading verifies the embedded config hash.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::Real;

use super::config::ModelConfig;
use super::params::ParamSet;
use super::ModelError;

const MAGIC: &[u8; 8] = b"PSCKPT01";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in scalars.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    dtype: String,
    step: u64,
    seed: u64,
    atlas_institution: Option<String>,
    adam_t: Option<u64>,
    entries: Vec<TensorMeta>,
}

/// Optimizer state stored alongside the parameters so training can resume
/// exactly.
#[derive(Clone, Debug)]
pub struct AdamState<R: Real> {
    pub t: u64,
    pub m: Vec<ArrayD<R>>,
    pub v: Vec<ArrayD<R>>,
}

pub struct Checkpoint<R: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<R>,
    pub adam: Option<AdamState<R>>,
    pub step: u64,
    pub seed: u64,
    pub atlas_institution: Option<String>,
}

pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut h = Sha256::new();
    h.update(json.as_bytes());
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint<R: Real>(path: &Path, ckpt: &Checkpoint<R>) -> Result<(), ModelError> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let push_tensor = |name: String, t: &ArrayD<R>, entries: &mut Vec<TensorMeta>,
                           payload: &mut Vec<u8>, offset: &mut usize| {
        entries.push(TensorMeta {
            name,
            shape: t.shape().to_vec(),
            offset: *offset,
            len: t.len(),
        });
        for &v in t.iter() {
            if R::DTYPE == "f32" {
                payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            } else {
                payload.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
        *offset += t.len();
    };

    for (name, t) in ckpt.params.iter() {
        push_tensor(name.clone(), t, &mut entries, &mut payload, &mut offset);
    }
    if let Some(adam) = &ckpt.adam {
        for (i, (name, _)) in ckpt.params.iter().enumerate() {
            push_tensor(
                format!("adam.m.{name}"),
                &adam.m[i],
                &mut entries,
                &mut payload,
                &mut offset,
            );
            push_tensor(
                format!("adam.v.{name}"),
                &adam.v[i],
                &mut entries,
                &mut payload,
                &mut offset,
            );
        }
    }

    let header = Header {
        config: ckpt.config.clone(),
        config_hash: config_hash(&ckpt.config),
        dtype: R::DTYPE.to_string(),
        step: ckpt.step,
        seed: ckpt.seed,
        atlas_institution: ckpt.atlas_institution.clone(),
        adam_t: ckpt.adam.as_ref().map(|a| a.t),
        entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    // atomic write: temp file then rename
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<Checkpoint<R>, ModelError> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Format(format!(
            "bad checkpoint magic in {}",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;
    if header.config_hash != config_hash(&header.config) {
        return Err(ModelError::ConfigMismatch(
            "checkpoint config hash does not match its embedded config".into(),
        ));
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let scalar_bytes = if header.dtype == "f32" { 4 } else { 8 };
    let total: usize = header.entries.iter().map(|e| e.len).sum();
    if payload.len() != total * scalar_bytes {
        return Err(ModelError::Format(format!(
            "payload is {} bytes, directory needs {}",
            payload.len(),
            total * scalar_bytes
        )));
    }
    let read_tensor = |meta: &TensorMeta| -> ArrayD<R> {
        let start = meta.offset * scalar_bytes;
        let mut data = Vec::with_capacity(meta.len);
        if header.dtype == "f32" {
            for c in payload[start..start + meta.len * 4].chunks_exact(4) {
                data.push(R::from_f64(
                    f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64
                ));
            }
        } else {
            for c in payload[start..start + meta.len * 8].chunks_exact(8) {
                data.push(R::from_f64(f64::from_le_bytes([
                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                ])));
            }
        }
        ArrayD::from_shape_vec(IxDyn(&meta.shape), data).expect("shape matches len")
    };

    let mut params = ParamSet::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for meta in &header.entries {
        if let Some(rest) = meta.name.strip_prefix("adam.m.") {
            let _ = rest;
            m.push(read_tensor(meta));
        } else if let Some(rest) = meta.name.strip_prefix("adam.v.") {
            let _ = rest;
            v.push(read_tensor(meta));
        } else {
            params.add(meta.name.clone(), read_tensor(meta));
        }
    }
    let adam = header.adam_t.map(|t| AdamState { t, m, v });
    Ok(Checkpoint {
        config: header.config,
        params,
        adam,
        step: header.step,
        seed: header.seed,
        atlas_institution: header.atlas_institution,
    })
}

/// Error unless the checkpoint was produced by exactly this config.
pub fn require_config(ckpt_config: &ModelConfig, expected: &ModelConfig) -> Result<(), ModelError> {
    if config_hash(ckpt_config) != config_hash(expected) {
        return Err(ModelError::ConfigMismatch(
            "checkpoint was trained with a different model config".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;

    #[test]
    fn checkpoint_round_trips_params_and_adam_state() {
        let cfg = ModelConfig {
            widths: vec![2, 4],
            feat_channels: 3,
            ..ModelConfig::desk_default()
        };
        let params = init_params::<f32>(&cfg, 3);
        let adam = AdamState {
            t: 17,
            m: params.iter().map(|(_, t)| t.mapv(|v| v * 0.5)).collect(),
            v: params.iter().map(|(_, t)| t.mapv(|v| v * v)).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(
            &path,
            &Checkpoint {
                config: cfg.clone(),
                params: params.clone(),
                adam: Some(adam.clone()),
                step: 42,
                seed: 9,
                atlas_institution: Some("site_1".into()),
            },
        )
        .unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.seed, 9);
        assert_eq!(loaded.atlas_institution.as_deref(), Some("site_1"));
        assert_eq!(loaded.params.total_len(), params.total_len());
        for (i, (name, t)) in params.iter().enumerate() {
            assert_eq!(loaded.params.get(name), t);
            assert_eq!(&loaded.adam.as_ref().unwrap().m[i], &adam.m[i]);
            assert_eq!(&loaded.adam.as_ref().unwrap().v[i], &adam.v[i]);
        }
        require_config(&loaded.config, &cfg).unwrap();
        let other = ModelConfig {
            widths: vec![4, 8],
            ..cfg
        };
        assert!(require_config(&loaded.config, &other).is_err());
    }
}
