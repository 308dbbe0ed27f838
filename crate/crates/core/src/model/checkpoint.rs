//! Checkpoint container.
//!
//! Layout of a checkpoint file:
//!
//! ```text
//! bytes 0..8    magic "FSEGCKP1"
//! bytes 8..16   u64 LE: length of the JSON header in bytes
//! header        JSON: version, network config, caller metadata, global step,
//!               rng stream state, Adam hyperparameters, and the ordered list
//!               of (name, shape) for every parameter array
//! blobs         for each parameter in header order: the value array, then the
//!               Adam first moment, then the Adam second moment, each as raw
//!               little-endian f64
//! ```
//!
//! Save -> load -> save reproduces the file byte for byte.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AdamState;
use crate::rng::StreamState;

use super::{GrowthModel, NetworkConfig};

const MAGIC: &[u8; 8] = b"FSEGCKP1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamHyper {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    network: NetworkConfig,
    meta: serde_json::Value,
    step: u64,
    rng: StreamState,
    adam: AdamHyper,
    params: Vec<ParamEntry>,
}

/// A loaded checkpoint: the reconstructed model plus optimizer and loop state.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: GrowthModel,
    pub adam: AdamState,
    pub step: u64,
    pub rng: StreamState,
    pub meta: serde_json::Value,
}

fn push_f64_le(out: &mut Vec<u8>, arr: &ArrayD<f64>) {
    for v in arr.as_slice().expect("parameter arrays are contiguous") {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Data(format!(
        "corrupt checkpoint {}: {what}; delete this file and re-run to retrain",
        path.display()
    ))
}

/// Serialize model, optimizer state, step counter, rng state, and caller
/// metadata into `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &GrowthModel,
    adam: &AdamState,
    step: u64,
    rng: &StreamState,
    meta: serde_json::Value,
) -> Result<()> {
    let params: Vec<ParamEntry> = model
        .store
        .ids()
        .map(|id| ParamEntry {
            name: model.store.name(id).to_string(),
            shape: model.store.value(id).shape().to_vec(),
        })
        .collect();
    let header = Header {
        version: VERSION,
        network: model.config.clone(),
        meta,
        step,
        rng: rng.clone(),
        adam: AdamHyper { beta1: adam.beta1, beta2: adam.beta2, epsilon: adam.epsilon },
        params,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut bytes = Vec::with_capacity(16 + header_json.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for id in model.store.ids() {
        push_f64_le(&mut bytes, model.store.value(id));
        let (m, v) = adam.moments(id);
        push_f64_le(&mut bytes, m);
        push_f64_le(&mut bytes, v);
    }

    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a checkpoint, rebuilding the model for its stored config and
/// overwriting every parameter and optimizer moment from the file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "missing or wrong magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(corrupt(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| corrupt(path, format!("unreadable header: {e}")))?;
    if header.version != VERSION {
        return Err(corrupt(path, format!("unsupported version {}", header.version)));
    }

    let mut model = GrowthModel::new(header.network.clone())?;
    if model.store.len() != header.params.len() {
        return Err(corrupt(path, "parameter list does not match the stored config"));
    }
    let mut adam = AdamState::new(&model.store);
    adam.beta1 = header.adam.beta1;
    adam.beta2 = header.adam.beta2;
    adam.epsilon = header.adam.epsilon;

    let mut offset = 16 + header_len;
    let ids: Vec<_> = model.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        if model.store.name(id) != entry.name
            || model.store.value(id).shape() != entry.shape.as_slice()
        {
            return Err(corrupt(
                path,
                format!("parameter {} does not match the stored config", entry.name),
            ));
        }
        let len: usize = entry.shape.iter().product();
        let nbytes = len * 8;
        if bytes.len() < offset + 3 * nbytes {
            return Err(corrupt(path, format!("truncated blob for {}", entry.name)));
        }
        let read_arr = |off: usize| -> ArrayD<f64> {
            let vals: Vec<f64> = bytes[off..off + nbytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ArrayD::from_shape_vec(IxDyn(&entry.shape), vals).expect("shape checked")
        };
        *model.store.value_mut(id) = read_arr(offset);
        let (m, v) = adam.moments_mut(id);
        *m = read_arr(offset + nbytes);
        *v = read_arr(offset + 2 * nbytes);
        offset += 3 * nbytes;
    }
    if offset != bytes.len() {
        return Err(corrupt(path, "trailing bytes after parameter blobs"));
    }

    Ok(Checkpoint { model, adam, step: header.step, rng: header.rng, meta: header.meta })
}
