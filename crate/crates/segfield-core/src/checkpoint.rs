//! Versioned binary checkpoint container: JSON header (configs + array
//! index) followed by raw little-endian f64 arrays. Optimizer moments ride
//! along so training can resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::fusion::FusionConfig;
use crate::nn::{AdamState, ParamStore};
use crate::tape::Matrix;

const MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub iteration: u64,
    pub seed: u64,
    pub field: FieldConfig,
    pub fusion: Option<FusionConfig>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    frozen: bool,
    /// "param", "adam_m" or "adam_v"
    kind: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    adam_step: Option<u64>,
    arrays: Vec<ArrayEntry>,
}

fn ckpt_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    store: &ParamStore,
    adam: Option<&AdamState>,
) -> Result<()> {
    let mut arrays = Vec::new();
    let mut blobs: Vec<&Matrix> = Vec::new();
    for (name, param) in store.iter() {
        let (rows, cols) = param.value.dim();
        arrays.push(ArrayEntry {
            name: name.to_string(),
            rows,
            cols,
            frozen: param.frozen,
            kind: "param".into(),
        });
        blobs.push(&param.value);
    }
    if let Some(state) = adam {
        for (kind, map) in [("adam_m", &state.m), ("adam_v", &state.v)] {
            for (name, value) in map {
                let (rows, cols) = value.dim();
                arrays.push(ArrayEntry {
                    name: name.clone(),
                    rows,
                    cols,
                    frozen: false,
                    kind: kind.into(),
                });
                blobs.push(value);
            }
        }
    }
    let header = Header {
        meta: meta.clone(),
        adam_step: adam.map(|a| a.t),
        arrays,
    };
    let header_json = serde_json::to_vec(&header).expect("serialize header");

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(MAGIC).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&VERSION.to_le_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&header_json).map_err(|e| Error::io(&tmp, e))?;
        for blob in blobs {
            let mut bytes = Vec::with_capacity(blob.len() * 8);
            for v in blob.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        }
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
    pub adam: Option<AdamState>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file (bad magic)"));
    }
    let mut version = [0u8; 4];
    file.read_exact(&mut version).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(version);
    if version != VERSION {
        return Err(ckpt_err(path, format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let mut header_json = vec![0u8; u64::from_le_bytes(len) as usize];
    file.read_exact(&mut header_json)
        .map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_slice(&header_json).map_err(|e| ckpt_err(path, e.to_string()))?;

    let mut store = ParamStore::new();
    let mut adam_m: BTreeMap<String, Matrix> = BTreeMap::new();
    let mut adam_v: BTreeMap<String, Matrix> = BTreeMap::new();
    for entry in &header.arrays {
        let n = entry.rows * entry.cols;
        let mut bytes = vec![0u8; n * 8];
        file.read_exact(&mut bytes)
            .map_err(|_| ckpt_err(path, format!("truncated array {}", entry.name)))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let matrix = Matrix::from_shape_vec((entry.rows, entry.cols), values)
            .map_err(|e| ckpt_err(path, e.to_string()))?;
        match entry.kind.as_str() {
            "param" => {
                store.register(&entry.name, matrix);
                store.set_frozen(&entry.name, entry.frozen);
            }
            "adam_m" => {
                adam_m.insert(entry.name.clone(), matrix);
            }
            "adam_v" => {
                adam_v.insert(entry.name.clone(), matrix);
            }
            other => return Err(ckpt_err(path, format!("unknown array kind {other}"))),
        }
    }
    let adam = header.adam_step.map(|t| AdamState {
        t,
        m: adam_m,
        v: adam_v,
    });
    Ok(LoadedCheckpoint {
        meta: header.meta,
        store,
        adam,
    })
}

/// Reject checkpoints whose configs differ from what the caller expects.
pub fn ensure_config_matches(
    path: &Path,
    meta: &CheckpointMeta,
    field: &FieldConfig,
    fusion: Option<&FusionConfig>,
) -> Result<()> {
    if &meta.field != field {
        return Err(ckpt_err(
            path,
            format!(
                "field config mismatch: checkpoint {:?} vs requested {:?}",
                meta.field, field
            ),
        ));
    }
    if let Some(fusion) = fusion {
        if meta.fusion.as_ref() != Some(fusion) {
            return Err(ckpt_err(
                path,
                format!(
                    "fusion config mismatch: checkpoint {:?} vs requested {:?}",
                    meta.fusion, fusion
                ),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_linear, Adam, AdamConfig};

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            stage: 1,
            iteration: 42,
            seed: 7,
            field: FieldConfig::default(),
            fusion: None,
        }
    }

    #[test]
    fn round_trip_preserves_values_flags_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck/stage1.ckpt");
        let mut store = ParamStore::new();
        init_linear(&mut store, "field.trunk.0", 4, 8, 1);
        init_linear(&mut store, "fusion.out_proj", 8, 2, 1);
        store.freeze_prefix("field.");

        let mut adam = Adam::new(AdamConfig::default());
        let g = Matrix::from_elem((8, 2), 0.5);
        adam.step(&mut store, &[("fusion.out_proj.w".into(), g)], 1e-3);

        save_checkpoint(&path, &meta(), &store, Some(&adam.export_state())).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.iteration, 42);
        assert_eq!(loaded.meta.stage, 1);
        assert_eq!(loaded.store.len(), store.len());
        for (name, param) in store.iter() {
            assert_eq!(&param.value, loaded.store.value(name), "{name}");
            assert_eq!(param.frozen, loaded.store.is_frozen(name));
        }
        let adam_state = loaded.adam.unwrap();
        assert_eq!(adam_state.t, 1);
        assert!(adam_state.m.contains_key("fusion.out_proj.w"));
    }

    #[test]
    fn corrupt_and_truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint { .. })
        ));

        let mut store = ParamStore::new();
        init_linear(&mut store, "a", 4, 4, 1);
        save_checkpoint(&path, &meta(), &store, None).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let store = {
            let mut s = ParamStore::new();
            init_linear(&mut s, "a", 2, 2, 1);
            s
        };
        save_checkpoint(&path, &meta(), &store, None).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut other = FieldConfig::default();
        other.hidden_width += 1;
        assert!(ensure_config_matches(&path, &loaded.meta, &FieldConfig::default(), None).is_ok());
        assert!(ensure_config_matches(&path, &loaded.meta, &other, None).is_err());
    }
}
