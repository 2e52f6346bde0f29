//! Checkpoint archive.
//!
//! ```text
//! b"DCLCKPT\0" | u64 LE manifest length | JSON manifest | f32 LE blob
//! ```
//!
//! The manifest carries the full training config, counters, RNG position,
//! loss history and a table of named arrays with shapes and element offsets
//! into the blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpochLog, TrainConfig, TrainState};
use crate::error::{DclError, Result};
use crate::inter_icl::FeatureQueue;

pub const CHECKPOINT_FORMAT: &str = "dcl-ckpt-1";
const MAGIC: &[u8; 8] = b"DCLCKPT\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal string; the value is a u128.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    pub len: usize,
    pub head: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub queue_real: QueueState,
    pub queue_fake: QueueState,
    pub total_enqueued: u64,
    pub real_prototype_initialized: bool,
    pub fake_prototype_initialized: bool,
    pub adam_step: u64,
    pub history: Vec<EpochLog>,
    pub arrays: Vec<ArrayEntry>,
}

/// Every float array in the state, in archive order.
fn named_arrays(state: &TrainState) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out = Vec::new();
    for p in state.model.query.params() {
        out.push((format!("query.{}", p.name), p.shape, p.data));
    }
    for p in state.model.key.params() {
        out.push((format!("key.{}", p.name), p.shape, p.data));
    }
    for (side, enc) in [("query", &state.model.query), ("key", &state.model.key)] {
        for p in enc.buffers() {
            out.push((format!("{side}.{}", p.name), p.shape, p.data));
        }
    }
    let trainable = state.model.trainable_params();
    for p in state.model.classifier.params() {
        out.push((p.name, p.shape, p.data));
    }
    for (p, m) in trainable.iter().zip(&state.optimizer.m) {
        out.push((format!("adam.m.{}", p.name), p.shape.clone(), m.as_slice()));
    }
    for (p, v) in trainable.iter().zip(&state.optimizer.v) {
        out.push((format!("adam.v.{}", p.name), p.shape.clone(), v.as_slice()));
    }
    for (name, q) in [("queue.real", &state.queues.real), ("queue.fake", &state.queues.fake)] {
        out.push((name.into(), vec![q.capacity(), q.dim()], q.raw_buffer()));
    }
    let dim = state.prototypes.p_real.len();
    out.push(("proto.real".into(), vec![dim], &state.prototypes.p_real));
    out.push(("proto.fake".into(), vec![dim], &state.prototypes.p_fake));
    out
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let arrays = named_arrays(state);
    let mut entries = Vec::with_capacity(arrays.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (name, shape, data) in &arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len();
        for v in data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        config: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        rng: RngState {
            seed: state.rng.get_seed().to_vec(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        queue_real: QueueState {
            len: state.queues.real.len(),
            head: state.queues.real.head(),
        },
        queue_fake: QueueState {
            len: state.queues.fake.len(),
            head: state.queues.fake.head(),
        },
        total_enqueued: state.queues.total_enqueued,
        real_prototype_initialized: state.prototypes.real_initialized,
        fake_prototype_initialized: state.prototypes.fake_initialized,
        adam_step: state.optimizer.t,
        history: state.history.clone(),
        arrays: entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;

    let tmp = path.with_file_name(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    let write = || -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&blob)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        DclError::io(path, e)
    })
}

fn ckpt_err(msg: impl Into<String>) -> DclError {
    DclError::Checkpoint(msg.into())
}

/// Read only the manifest of a checkpoint.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| DclError::io(path, e))?;
    parse(&bytes).map(|(m, _)| m)
}

fn parse(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ckpt_err("not a checkpoint file (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(ckpt_err("truncated file: manifest is incomplete"));
    }
    let value: serde_json::Value = serde_json::from_slice(&body[..len])?;
    let format = value.get("format").and_then(|f| f.as_str()).unwrap_or("<missing>");
    if format != CHECKPOINT_FORMAT {
        return Err(ckpt_err(format!(
            "unsupported checkpoint format `{format}` (expected `{CHECKPOINT_FORMAT}`)"
        )));
    }
    let manifest: Manifest = serde_json::from_value(value)?;
    Ok((manifest, &body[len..]))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| DclError::io(path, e))?;
    let (manifest, blob) = parse(&bytes)?;
    if blob.len() % 4 != 0 {
        return Err(ckpt_err("truncated file: array data is not a whole number of floats"));
    }
    let n_floats = blob.len() / 4;

    let mut state = TrainState::new(manifest.config.clone())?;
    let expected: Vec<(String, Vec<usize>)> = named_arrays(&state)
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if let Some(extra) = manifest
        .arrays
        .iter()
        .find(|e| !expected.iter().any(|(n, _)| *n == e.name))
    {
        return Err(ckpt_err(format!("unexpected array `{}`", extra.name)));
    }
    let mut values: Vec<Vec<f32>> = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let entry = manifest
            .arrays
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| ckpt_err(format!("missing array `{name}`")))?;
        if &entry.shape != shape {
            return Err(ckpt_err(format!(
                "array `{name}` has shape {:?} in the manifest, expected {:?}",
                entry.shape, shape
            )));
        }
        let count: usize = shape.iter().product();
        let end = entry.offset.checked_add(count).filter(|&e| e <= n_floats);
        let end = end.ok_or_else(|| ckpt_err(format!("truncated file: array `{name}` runs past the end")))?;
        values.push(
            blob[entry.offset * 4..end * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
    }

    let mut it = values.into_iter();
    let mut next = || it.next().expect("one value per expected array");
    for dst in state.model.query.slices_mut() {
        dst.copy_from_slice(&next());
    }
    for dst in state.model.key.slices_mut() {
        dst.copy_from_slice(&next());
    }
    for dst in state.model.query.buffers_mut() {
        dst.copy_from_slice(&next());
    }
    for dst in state.model.key.buffers_mut() {
        dst.copy_from_slice(&next());
    }
    for dst in state.model.classifier.slices_mut() {
        dst.copy_from_slice(&next());
    }
    for m in state.optimizer.m.iter_mut() {
        *m = next();
    }
    for v in state.optimizer.v.iter_mut() {
        *v = next();
    }
    let dim = state.config.encoder.locations();
    let cap = state.config.contrast.queue_capacity;
    state.queues.real = FeatureQueue::from_raw(dim, cap, next(), manifest.queue_real.len, manifest.queue_real.head)?;
    state.queues.fake = FeatureQueue::from_raw(dim, cap, next(), manifest.queue_fake.len, manifest.queue_fake.head)?;
    state.prototypes.p_real = next();
    state.prototypes.p_fake = next();

    state.queues.total_enqueued = manifest.total_enqueued;
    state.prototypes.real_initialized = manifest.real_prototype_initialized;
    state.prototypes.fake_initialized = manifest.fake_prototype_initialized;
    state.optimizer.t = manifest.adam_step;
    state.epoch = manifest.epoch;
    state.step = manifest.step;
    state.history = manifest.history;

    let seed: [u8; 32] = manifest
        .rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| ckpt_err("rng seed must be 32 bytes"))?;
    let word_pos: u128 = manifest
        .rng
        .word_pos
        .parse()
        .map_err(|_| ckpt_err(format!("bad rng word position `{}`", manifest.rng.word_pos)))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(manifest.rng.stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    Ok(state)
}
