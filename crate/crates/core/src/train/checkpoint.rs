//! `PCAN` checkpoint files: magic, `u32` version, `u64` header length, JSON
//! header, then raw little-endian tensor data in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::config::{Precision, TrainConfig};
use crate::data::codec::write_file;
use crate::error::{Error, Result};
use crate::head::ClassCenters;
use crate::params::ParamTable;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"PCAN";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Momentum,
    Centers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    group: Group,
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: usize,
}

/// Batch order and augmentation are pure functions of `(seed, epoch)`, so
/// the seed and the next epoch are the whole generator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    config: TrainConfig,
    class_names: Vec<String>,
    epoch: usize,
    step: u64,
    rng: RngState,
    center_alpha: f64,
    center_lambda: f64,
    tensors: Vec<Entry>,
}

fn dtype_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn precision_of<T: Scalar>() -> Precision {
    if T::BYTES == 8 {
        Precision::F64
    } else {
        Precision::F32
    }
}

pub fn encode_checkpoint<T: Scalar>(state: &TrainState<T>) -> Result<Vec<u8>> {
    let mut data: Vec<(Group, &str, &Tensor<T>)> = Vec::new();
    data.extend(state.params.iter().map(|(n, t)| (Group::Param, n.as_str(), t)));
    data.extend(state.momentum.iter().map(|(n, t)| (Group::Momentum, n.as_str(), t)));
    data.push((Group::Centers, "centers", &state.centers.centers));
    let mut offset = 0;
    let tensors = data
        .iter()
        .map(|&(group, name, t)| {
            let e = Entry {
                group,
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let header = Header {
        dtype: dtype_name(precision_of::<T>()).into(),
        config: state.config.clone(),
        class_names: state.class_names.clone(),
        epoch: state.epoch,
        step: state.step,
        rng: RngState {
            seed: state.config.seed,
            next_epoch: state.epoch,
        },
        center_alpha: state.centers.alpha,
        center_lambda: state.centers.lambda,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in data {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Format(format!("truncated file: {} bytes, no header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected \"PCAN\"", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "version mismatch: file has {version}, reader supports {CHECKPOINT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = PREAMBLE
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("truncated file: header of {len} bytes does not fit")))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..end])
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    Ok((header, end))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    let (header, start) = parse_header(bytes)?;
    let expected = dtype_name(precision_of::<T>());
    if header.dtype != expected {
        return Err(Error::Format(format!(
            "checkpoint stores {} values, expected {expected}",
            header.dtype
        )));
    }
    let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let need = total * T::BYTES;
    if bytes.len() - start != need {
        return Err(Error::Format(format!(
            "truncated file: data section has {} bytes, header describes {need}",
            bytes.len() - start
        )));
    }
    let data = &bytes[start..];
    let (mut params, mut momentum) = (ParamTable::new(), ParamTable::new());
    let mut centers = None;
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let lo = e.offset * T::BYTES;
        let raw = data
            .get(lo..lo + n * T::BYTES)
            .ok_or_else(|| Error::Format(format!("tensor {} lies outside the data section", e.name)))?;
        let values = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::from_vec(&e.shape, values).map_err(|err| Error::Format(err.to_string()))?;
        match e.group {
            Group::Param => params.insert(e.name.clone(), t)?,
            Group::Momentum => momentum.insert(e.name.clone(), t)?,
            Group::Centers => centers = Some(t),
        }
    }
    let centers = centers.ok_or_else(|| Error::Format("missing class centers".into()))?;
    Ok(TrainState {
        config: header.config,
        class_names: header.class_names,
        params,
        momentum,
        centers: ClassCenters {
            centers,
            alpha: header.center_alpha,
            lambda: header.center_lambda,
        },
        epoch: header.rng.next_epoch,
        step: header.step,
    })
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(state)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Value type stored in a checkpoint file, read from its header.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = parse_header(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    match header.dtype.as_str() {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::Format(format!("{}: unknown dtype {other}", path.display()))),
    }
}
