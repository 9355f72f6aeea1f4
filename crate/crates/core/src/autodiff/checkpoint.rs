//! Model checkpoints: `<name>.json` manifest listing every layer (kind,
//! shapes, constraint, blob offsets), the Adam scalars and free-form
//! metadata, plus `<name>.bin` holding the parameter blobs as little-endian
//! `f64`, weights then bias for each layer in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AdamState, Constraint, LayerKind, LayerParams, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    kind: LayerKind,
    weight_shape: Vec<usize>,
    bias_shape: Vec<usize>,
    constraint: Option<Constraint>,
    weight_offset_bytes: u64,
    bias_offset_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    layers: Vec<LayerEntry>,
    adam: Option<AdamState>,
    metadata: serde_json::Value,
}

/// Everything a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layers: Vec<(String, LayerParams)>,
    pub adam: Option<AdamState>,
    pub metadata: serde_json::Value,
}

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut j = stem.clone().into_os_string();
    j.push(".json");
    let mut b = stem.into_os_string();
    b.push(".bin");
    (j.into(), b.into())
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let (json, bin) = paths(path.as_ref());
    let mut blob = Vec::new();
    let mut layers = Vec::new();
    for (name, l) in &ckpt.layers {
        let weight_offset_bytes = blob.len() as u64;
        blob.extend(l.weights.data().iter().flat_map(|v| v.to_le_bytes()));
        let bias_offset_bytes = blob.len() as u64;
        blob.extend(l.bias.data().iter().flat_map(|v| v.to_le_bytes()));
        layers.push(LayerEntry {
            name: name.clone(),
            kind: l.kind,
            weight_shape: l.weights.shape().to_vec(),
            bias_shape: l.bias.shape().to_vec(),
            constraint: l.constraint,
            weight_offset_bytes,
            bias_offset_bytes,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f64le".into(),
        layers,
        adam: ckpt.adam.clone(),
        metadata: ckpt.metadata.clone(),
    };
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json, text + "\n").map_err(io(&json))?;
    fs::write(&bin, blob).map_err(io(&bin))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let (json, bin) = paths(path.as_ref());
    let text = fs::read_to_string(&json).map_err(io(&json))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION || manifest.dtype != "f64le" {
        return Err(CheckpointError::Corrupt(format!(
            "unsupported format {} / {}",
            manifest.format_version, manifest.dtype
        )));
    }
    let blob = fs::read(&bin).map_err(io(&bin))?;
    let read = |offset: u64, shape: &[usize]| -> Result<Tensor, CheckpointError> {
        let n: usize = shape.iter().product();
        let start = offset as usize;
        let end = start + 8 * n;
        let bytes = blob
            .get(start..end)
            .ok_or_else(|| CheckpointError::Corrupt(format!("blob too short for {n} values at offset {offset}")))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    };
    let mut expected_len = 0u64;
    let mut layers = Vec::new();
    for e in &manifest.layers {
        let w = read(e.weight_offset_bytes, &e.weight_shape)?;
        let b = read(e.bias_offset_bytes, &e.bias_shape)?;
        expected_len += 8 * (w.numel() + b.numel()) as u64;
        let params = LayerParams::new(e.kind, w, b, e.constraint).map_err(|err| CheckpointError::Corrupt(err.to_string()))?;
        layers.push((e.name.clone(), params));
    }
    if expected_len != blob.len() as u64 {
        return Err(CheckpointError::Corrupt(format!("blob has {} bytes, manifest describes {expected_len}", blob.len())));
    }
    Ok(Checkpoint { layers, adam: manifest.adam, metadata: manifest.metadata })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        Checkpoint {
            layers: vec![
                ("c".into(), LayerParams::conv(2, 3, 3, &mut rng)),
                ("d".into(), LayerParams::transposed_conv(3, 1, &mut rng)),
                ("h".into(), LayerParams::nonnegative_dense(1, 1, &mut rng)),
            ],
            adam: Some(AdamState::new(0.01)),
            metadata: serde_json::json!({"note": "x"}),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        write_checkpoint(&c, dir.path().join("m")).unwrap();
        let back = read_checkpoint(dir.path().join("m.json")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(&sample(), dir.path().join("m")).unwrap();
        let bin = dir.path().join("m.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_checkpoint(dir.path().join("m")), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn garbage_manifest_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(&sample(), dir.path().join("m")).unwrap();
        fs::write(dir.path().join("m.json"), "not json").unwrap();
        assert!(matches!(read_checkpoint(dir.path().join("m")), Err(CheckpointError::Corrupt(_))));
    }
}
