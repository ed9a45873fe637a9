//! Binary checkpoint archive.
//!
//! Layout: 8-byte magic, little-endian `u32` schema version, little-endian
//! `u64` header length, a JSON header (dtype, step, config, generator state
//! and a tensor directory), then the raw little-endian tensor data in
//! directory order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::network::{BnStats, GaitMilParams, Model, ModelConfig, PARTS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GAITMIL\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: String,
    stream: u64,
    /// Decimal; a `u128` does not fit a JSON number.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    step: usize,
    config: TrainConfig,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

fn named_tensors<T: Scalar>(state: &TrainState<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out: Vec<(String, &Tensor<T>)> = state
        .model
        .params
        .named()
        .into_iter()
        .map(|(n, t)| (format!("model.{n}"), t))
        .collect();
    out.push(("bnneck.running_mean".into(), &state.model.bn_stats.mean));
    out.push(("bnneck.running_var".into(), &state.model.bn_stats.var));
    out.extend(
        state
            .velocity
            .named()
            .into_iter()
            .map(|(n, t)| (format!("velocity.{n}"), t)),
    );
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

/// Serialize `state` to bytes.
pub(crate) fn encode<T: Scalar>(state: &TrainState<T>) -> Vec<u8> {
    let tensors = named_tensors(state);
    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: data.len(),
        });
        for &v in t.data() {
            v.write_le(&mut data);
        }
    }
    let header = Header {
        dtype: T::DTYPE.to_string(),
        step: state.step,
        config: state.config.clone(),
        rng: RngState {
            seed: hex(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

/// Atomically write `state` to `path` (temporary file, then rename).
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let bytes = encode(state);
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn schema(msg: impl Into<String>) -> Error {
    Error::Schema(msg.into())
}

fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(schema("not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(schema(format!(
            "checkpoint schema version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if header_len > body.len() {
        return Err(schema("truncated checkpoint header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| schema(format!("checkpoint header: {e}")))?;
    header.config.validate().map_err(|e| schema(format!("checkpoint config: {e}")))?;
    Ok((header, &body[header_len..]))
}

/// Header fields of a checkpoint, readable without knowing its dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub dtype: String,
    pub step: usize,
    pub config: TrainConfig,
}

pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointInfo> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = parse_header(&bytes)?;
    Ok(CheckpointInfo {
        dtype: header.dtype,
        step: header.step,
        config: header.config,
    })
}

pub(crate) fn decode<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    let (header, data) = parse_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(schema(format!("checkpoint holds {} values, expected {}", header.dtype, T::DTYPE)));
    }

    let model_cfg = header.config.model.clone();
    let params = GaitMilParams::zeros(&model_cfg);
    let mut state = TrainState {
        config: header.config,
        velocity: params.clone(),
        model: Model {
            params,
            bn_stats: BnStats::identity(PARTS, model_cfg.embed_dim),
            config: model_cfg,
        },
        step: header.step,
        rng: ChaCha8Rng::seed_from_u64(0),
    };

    let mut remaining: Vec<(String, Vec<usize>)> = named_tensors(&state)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let mut values: Vec<(String, Tensor<T>)> = Vec::with_capacity(remaining.len());
    for entry in &header.tensors {
        let Some(pos) = remaining.iter().position(|(n, _)| *n == entry.name) else {
            return Err(schema(format!("unexpected or repeated tensor {}", entry.name)));
        };
        let (name, shape) = remaining.swap_remove(pos);
        if shape != entry.shape {
            return Err(schema(format!("tensor {name} has shape {:?}, model expects {shape:?}", entry.shape)));
        }
        let len: usize = shape.iter().product();
        let end = entry.offset + len * T::BYTES;
        let raw = data
            .get(entry.offset..end)
            .ok_or_else(|| schema(format!("tensor {name} runs past the end of the archive")))?;
        let vals = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        values.push((name, Tensor::from_vec(&shape, vals)?));
    }
    if let Some((name, _)) = remaining.first() {
        return Err(schema(format!("checkpoint lacks tensor {name}")));
    }
    for (name, t) in values {
        if let Some(rest) = name.strip_prefix("model.") {
            set_named(&mut state.model.params, rest, t);
        } else if let Some(rest) = name.strip_prefix("velocity.") {
            set_named(&mut state.velocity, rest, t);
        } else if name == "bnneck.running_mean" {
            state.model.bn_stats.mean = t;
        } else {
            state.model.bn_stats.var = t;
        }
    }

    let seed = unhex(&header.rng.seed).ok_or_else(|| schema("bad generator seed"))?;
    let word_pos: u128 = header.rng.word_pos.parse().map_err(|_| schema("bad generator position"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    Ok(state)
}

fn set_named<T: Scalar>(params: &mut GaitMilParams<T>, name: &str, value: Tensor<T>) {
    for (n, t) in params.named_mut() {
        if n == name {
            *t = value;
            return;
        }
    }
    unreachable!("names come from the same parameter set")
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Load a checkpoint that must match `model` exactly.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, model: &ModelConfig) -> Result<TrainState<T>> {
    let state = load_checkpoint(path)?;
    if &state.config.model != model {
        return Err(schema(format!(
            "checkpoint model config {} does not match requested {}",
            serde_json::to_string(&state.config.model).expect("serializes"),
            serde_json::to_string(model).expect("serializes")
        )));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::BatchPlan;
    use rand::Rng;

    fn config() -> TrainConfig {
        TrainConfig {
            seed: 3,
            batch: BatchPlan {
                subjects_per_batch: 3,
                clips_per_subject: 2,
                class_stratified: true,
            },
            model: ModelConfig {
                bags: 2,
                clip_frames: 4,
                backbone_widths: vec![2, 3, 4],
                embed_dim: 4,
                attention_dim: 3,
                mil_enabled: true,
            },
            ..TrainConfig::default()
        }
    }

    fn state() -> TrainState<f32> {
        let mut s = TrainState::<f32>::new(config()).unwrap();
        s.step = 17;
        let _: u64 = s.rng.random();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        s.velocity.for_each_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v = r.random()));
        s.model.bn_stats.var.data_mut()[3] = 2.5;
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let s = state();
        let bytes = encode(&s);
        let back: TrainState<f32> = decode(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a").join("x.ckpt");
        let s = state();
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn version_mismatch_is_schema_error() {
        let mut bytes = encode(&state());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Schema(m)) if m.contains("version 7")));
    }

    #[test]
    fn dtype_mismatch_is_schema_error() {
        let bytes = encode(&state());
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Schema(_))));
    }

    #[test]
    fn other_model_config_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&state(), &path).unwrap();
        let mut other = config().model;
        other.embed_dim = 8;
        assert!(matches!(load_checkpoint_for::<f32>(&path, &other), Err(Error::Schema(_))));
        assert!(load_checkpoint_for::<f32>(&path, &config().model).is_ok());
    }

    #[test]
    fn inspect_reads_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&state(), &path).unwrap();
        let info = inspect_checkpoint(&path).unwrap();
        assert_eq!((info.dtype.as_str(), info.step), ("f32", 17));
        assert_eq!(info.config, config());
    }

    #[test]
    fn garbage_is_schema_error() {
        assert!(matches!(decode::<f32>(b"not a checkpoint at all"), Err(Error::Schema(_))));
    }
}
