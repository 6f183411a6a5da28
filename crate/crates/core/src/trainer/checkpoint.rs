//! Checkpoint archive: a magic/version line, the header length, a JSON
//! header (tensor table, config snapshot, checksum) and raw little-endian
//! tensor payloads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::numerics::{AdamWState, Tensor};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const MAGIC: &str = "TVTS-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

/// Batches are a pure function of the seed and the batch index, so this
/// pair is the complete sampling state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_batch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub opt: AdamWState<T>,
    pub step: u64,
    pub config: TrainConfig,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
    #[serde(default)]
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub dtype: String,
    pub step: u64,
    pub rng: RngState,
    pub config: TrainConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    pub checksum: String,
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor<T>, decay: bool, payload: &mut Vec<u8>| {
        let offset = payload.len();
        for &v in t.data() {
            v.write_le(payload);
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.into(),
            offset,
            nbytes: payload.len() - offset,
            decay,
        });
    };
    for e in ckpt.params.entries() {
        push(e.name.clone(), &e.value, e.decay, &mut payload);
    }
    for (e, m) in ckpt.params.entries().iter().zip(&ckpt.opt.first) {
        push(format!("{MOMENT1}{}", e.name), m, false, &mut payload);
    }
    for (e, v) in ckpt.params.entries().iter().zip(&ckpt.opt.second) {
        push(format!("{MOMENT2}{}", e.name), v, false, &mut payload);
    }
    let header = Header {
        version: FORMAT_VERSION,
        dtype: T::DTYPE.into(),
        step: ckpt.step,
        rng: ckpt.rng,
        config: ckpt.config.clone(),
        tensors,
        payload_bytes: payload.len(),
        checksum: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    let mut out = format!("{MAGIC} v{FORMAT_VERSION}\n{}\n{json}\n", json.len()).into_bytes();
    out.extend_from_slice(&payload);
    out
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> std::result::Result<&'a str, CheckpointError> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Header("missing line break".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| CheckpointError::Header("non-UTF-8 preamble".into()))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> std::result::Result<Checkpoint<T>, CheckpointError> {
    let mut pos = 0;
    let magic = take_line(bytes, &mut pos)?;
    let version = magic
        .strip_prefix(MAGIC)
        .and_then(|r| r.trim().strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| CheckpointError::Header(format!("bad magic line {magic:?}")))?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len: usize = take_line(bytes, &mut pos)?
        .parse()
        .map_err(|_| CheckpointError::Header("bad header length".into()))?;
    if bytes.len() < pos + len + 1 {
        return Err(CheckpointError::Truncated {
            expected: pos + len + 1,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[pos..pos + len]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    pos += len + 1;
    if header.dtype != T::DTYPE {
        return Err(CheckpointError::Dtype {
            found: header.dtype,
            expected: T::DTYPE.into(),
        });
    }
    let payload = &bytes[pos..];
    if payload.len() < header.payload_bytes {
        return Err(CheckpointError::Truncated {
            expected: header.payload_bytes,
            found: payload.len(),
        });
    }
    if payload.len() > header.payload_bytes {
        return Err(CheckpointError::Header(format!(
            "{} trailing bytes after payload",
            payload.len() - header.payload_bytes
        )));
    }
    let found = hex::encode(Sha256::digest(payload));
    if found != header.checksum {
        return Err(CheckpointError::Checksum {
            expected: header.checksum,
            found,
        });
    }
    let mut names = std::collections::HashSet::new();
    let mut read = |e: &TensorEntry| -> std::result::Result<Tensor<T>, CheckpointError> {
        if !names.insert(e.name.clone()) {
            return Err(CheckpointError::Header(format!("tensor {} listed twice", e.name)));
        }
        if e.dtype != T::DTYPE {
            return Err(CheckpointError::Dtype {
                found: e.dtype.clone(),
                expected: T::DTYPE.into(),
            });
        }
        let n: usize = e.shape.iter().product();
        if n * T::BYTES != e.nbytes || e.offset + e.nbytes > payload.len() || e.shape.contains(&0) {
            return Err(CheckpointError::Shape {
                name: e.name.clone(),
                shape: e.shape.clone(),
                bytes: e.nbytes,
            });
        }
        let data = payload[e.offset..e.offset + e.nbytes].chunks(T::BYTES).map(T::read_le).collect();
        Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::Header(err.to_string()))
    };
    let mut params = ParamStore::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut m1 = std::collections::HashMap::new();
    let mut m2 = std::collections::HashMap::new();
    for e in &header.tensors {
        let t = read(e)?;
        if let Some(n) = e.name.strip_prefix(MOMENT1) {
            m1.insert(n.to_string(), t);
        } else if let Some(n) = e.name.strip_prefix(MOMENT2) {
            m2.insert(n.to_string(), t);
        } else {
            params.add(e.name.clone(), t, e.decay);
        }
    }
    for e in params.entries() {
        let a = m1.remove(&e.name).ok_or_else(|| CheckpointError::Missing(format!("{MOMENT1}{}", e.name)))?;
        let b = m2.remove(&e.name).ok_or_else(|| CheckpointError::Missing(format!("{MOMENT2}{}", e.name)))?;
        if a.shape() != e.value.shape() || b.shape() != e.value.shape() {
            return Err(CheckpointError::Shape {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                bytes: a.len() * T::BYTES,
            });
        }
        first.push(a);
        second.push(b);
    }
    Ok(Checkpoint {
        params,
        opt: AdamWState {
            first,
            second,
            step: header.step,
        },
        step: header.step,
        config: header.config,
        rng: header.rng,
    })
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

/// Reads only the header, e.g. to learn the dtype before a typed load.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    take_line(&bytes, &mut pos)?;
    let len: usize = take_line(&bytes, &mut pos)?
        .parse()
        .map_err(|_| CheckpointError::Header("bad header length".into()))?;
    let end = (pos + len).min(bytes.len());
    Ok(serde_json::from_slice(&bytes[pos..end]).map_err(|e| CheckpointError::Header(e.to_string()))?)
}
