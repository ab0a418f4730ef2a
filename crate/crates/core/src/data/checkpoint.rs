//! Checkpoint file format.
//!
//! Layout: an 8-byte little-endian header length, the JSON header, the
//! payload of little-endian `f32` values, then a little-endian CRC32 of the
//! header and payload bytes together. The header additionally stores the
//! CRC32 of the payload alone.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelSpec, UrnetModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in `f32` elements.
    pub offset: usize,
}

/// Training progress stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub phase: String,
    pub epochs_completed: usize,
    pub seed: u64,
    /// Optimizer moments and similar per-parameter buffers.
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelSpec,
    pub normalization: Normalization,
    pub tensors: Vec<TensorEntry>,
    pub phase: String,
    pub epochs_completed: usize,
    pub seed: u64,
    pub state_tensors: Vec<TensorEntry>,
    pub payload_len: usize,
    pub payload_crc32: u32,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: UrnetModel,
    pub state: TrainState,
    pub normalization: Normalization,
}

/// Every stored tensor of the model: parameters, then running statistics.
fn model_tensors(model: &UrnetModel) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model.params().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    for (name, rs) in model.running_stats() {
        let c = rs.mean.len();
        out.push((format!("{name}.running_mean"), Tensor::new(&[c], rs.mean).expect("finite running mean")));
        out.push((format!("{name}.running_var"), Tensor::new(&[c], rs.var).expect("finite running var")));
    }
    out
}

fn push_tensors(tensors: &[(String, Tensor)], payload: &mut Vec<u8>, offset: &mut usize) -> Vec<TensorEntry> {
    tensors
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset: *offset };
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            *offset += t.numel();
            entry
        })
        .collect()
}

pub fn save_checkpoint(model: &UrnetModel, state: &TrainState, normalization: &Normalization, path: impl AsRef<Path>) -> Result<()> {
    let mut payload = Vec::new();
    let mut offset = 0;
    let tensors = push_tensors(&model_tensors(model), &mut payload, &mut offset);
    let state_tensors = push_tensors(&state.tensors, &mut payload, &mut offset);
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: model.spec.clone(),
        normalization: normalization.clone(),
        tensors,
        phase: state.phase.clone(),
        epochs_completed: state.epochs_completed,
        seed: state.seed,
        state_tensors,
        payload_len: payload.len(),
        payload_crc32: crc32fast::hash(&payload),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = Vec::with_capacity(8 + header_bytes.len() + payload.len() + 4);
    file.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    file.extend_from_slice(&header_bytes);
    file.extend_from_slice(&payload);
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&header_bytes);
    hasher.update(&payload);
    file.extend_from_slice(&hasher.finalize().to_le_bytes());
    std::fs::write(path, file)?;
    Ok(())
}

fn decode(payload: &[u8], entries: &[TensorEntry], floats: usize) -> Result<Vec<(String, Tensor)>> {
    entries
        .iter()
        .map(|e| {
            let len: usize = e.shape.iter().product();
            if e.offset.checked_add(len).is_none_or(|end| end > floats) {
                return Err(CheckpointError::Manifest(format!(
                    "tensor {} [{}, +{len}) exceeds payload of {floats} values",
                    e.name, e.offset
                ))
                .into());
            }
            let bytes = &payload[4 * e.offset..4 * (e.offset + len)];
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| CheckpointError::Manifest(format!("tensor {}: {err}", e.name)))?;
            Ok((e.name.clone(), t))
        })
        .collect()
}

fn check_layout(entries: &[&TensorEntry]) -> Result<()> {
    let mut spans: Vec<(usize, usize, &str)> =
        entries.iter().map(|e| (e.offset, e.offset + e.shape.iter().product::<usize>(), e.name.as_str())).collect();
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(CheckpointError::Manifest(format!("tensors {} and {} overlap", w[0].2, w[1].2)).into());
        }
    }
    Ok(())
}

/// Reads a checkpoint. When `expected` is given, the stored architecture
/// must equal it.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelSpec>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated(format!("{} bytes", bytes.len())).into());
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    if header_len > body.len().saturating_sub(4) {
        return Err(CheckpointError::Truncated(format!("header length {header_len} exceeds file")).into());
    }
    let header_bytes = &body[..header_len];
    let version: serde_json::Value =
        serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Manifest(format!("unreadable header: {e}")))?;
    let found = version.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found, expected: CHECKPOINT_VERSION }.into());
    }
    let header: CheckpointHeader =
        serde_json::from_value(version).map_err(|e| CheckpointError::Manifest(format!("invalid header: {e}")))?;
    let payload_end = header_len + header.payload_len;
    if payload_end + 4 != body.len() {
        return Err(CheckpointError::Manifest(format!(
            "header declares {} payload bytes, file holds {}",
            header.payload_len,
            body.len().saturating_sub(header_len + 4)
        ))
        .into());
    }
    let payload = &body[header_len..payload_end];
    let computed = crc32fast::hash(payload);
    if computed != header.payload_crc32 {
        return Err(CheckpointError::Checksum { stored: header.payload_crc32, computed }.into());
    }
    let stored = u32::from_le_bytes(body[payload_end..].try_into().expect("4 bytes"));
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(header_bytes);
    hasher.update(payload);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }
    if payload.len() % 4 != 0 {
        return Err(CheckpointError::Manifest("payload is not a whole number of f32 values".into()).into());
    }
    if let Some(spec) = expected {
        if *spec != header.model {
            return Err(CheckpointError::Architecture(format!(
                "checkpoint has {} blocks {:?} of widths {:?}, configuration expects {} blocks {:?} of widths {:?}",
                header.model.num_blocks(),
                header.model.blocks_per_stage,
                header.model.stage_channels,
                spec.num_blocks(),
                spec.blocks_per_stage,
                spec.stage_channels
            ))
            .into());
        }
    }
    header.model.validate()?;
    check_layout(&header.tensors.iter().chain(&header.state_tensors).collect::<Vec<_>>())?;

    let floats = payload.len() / 4;
    let stored_tensors = decode(payload, &header.tensors, floats)?;
    let state_tensors = decode(payload, &header.state_tensors, floats)?;

    let mut model = UrnetModel::new(header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    restore(&mut model, stored_tensors)?;
    Ok(Checkpoint {
        model,
        state: TrainState { phase: header.phase, epochs_completed: header.epochs_completed, seed: header.seed, tensors: state_tensors },
        normalization: header.normalization,
    })
}

fn restore(model: &mut UrnetModel, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let expected = model_tensors(model);
    if expected.len() != tensors.len() {
        return Err(CheckpointError::Manifest(format!("{} tensors stored, model has {}", tensors.len(), expected.len())).into());
    }
    let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = by_name.remove(name).ok_or_else(|| Error::from(CheckpointError::Manifest(format!("missing tensor {name}"))))?;
        if t.shape() != shape {
            return Err(CheckpointError::Manifest(format!("tensor {name} has shape {:?}, model expects {shape:?}", t.shape())).into());
        }
        Ok(t)
    };
    for p in model.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = take(&p.name, &shape)?;
    }
    for bn in model.batch_norms_mut() {
        let c = bn.running.mean.len();
        bn.running.mean = take(&format!("{}.running_mean", bn.name), &[c])?.into_data();
        bn.running.var = take(&format!("{}.running_var", bn.name), &[c])?.into_data();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn small() -> UrnetModel {
        let spec = ModelSpec { blocks_per_stage: vec![1, 1], stage_channels: vec![4, 8], ..ModelSpec::toy(3) };
        UrnetModel::new(spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn saved() -> (tempfile::TempDir, std::path::PathBuf, UrnetModel) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = small();
        model.batch_norms_mut()[0].running.mean[1] = 0.25;
        let state =
            TrainState { phase: "joint".into(), epochs_completed: 3, seed: 9, tensors: vec![("adam.m.0".into(), Tensor::full(&[2], 0.5))] };
        save_checkpoint(&model, &state, &Normalization::identity(3), &path).unwrap();
        (dir, path, model)
    }

    #[test]
    fn round_trip_within_f32_rounding() {
        let (_d, path, model) = saved();
        let ck = load_checkpoint(&path, Some(&model.spec)).unwrap();
        for (a, b) in model.params().iter().zip(ck.model.params()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
        assert_eq!(ck.model.running_stats()[0].1.mean[1], 0.25);
        assert_eq!(ck.state.phase, "joint");
        assert_eq!(ck.state.epochs_completed, 3);
        assert_eq!(ck.state.tensors[0].1.data(), [0.5, 0.5]);
    }

    #[test]
    fn corrupt_payload_fails_checksum() {
        let (_d, path, _) = saved();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Checkpoint(CheckpointError::Checksum { .. }))));
    }

    #[test]
    fn architecture_mismatch_names_block_counts() {
        let (_d, path, _) = saved();
        let err = load_checkpoint(&path, Some(&ModelSpec::toy(3))).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::Architecture(_))));
        let msg = err.to_string();
        assert!(msg.contains("2 blocks") && msg.contains("12 blocks"), "{msg}");
    }

    #[test]
    fn version_mismatch() {
        let (_d, path, _) = saved();
        let mut bytes = std::fs::read(&path).unwrap();
        let key = b"\"version\":1";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        bytes[at + key.len() - 1] = b'7';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Checkpoint(CheckpointError::Version { found: 7, expected: 1 }))));
    }

    #[test]
    fn truncated_and_length_mismatch() {
        let (_d, path, _) = saved();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..6]).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Checkpoint(CheckpointError::Truncated(_)))));
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Checkpoint(CheckpointError::Manifest(_)))));
    }
}
