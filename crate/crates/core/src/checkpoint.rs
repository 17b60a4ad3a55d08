//! Checkpoint files.
//!
//! Layout: the magic bytes `CCT1`, a little-endian `u32` header length, a
//! JSON header, then the tensor payloads back to back. The header holds the
//! run configuration, the element type, the training bookkeeping and a
//! directory of `(name, offset, len)` entries with offsets relative to the
//! start of the payload section. Each payload is a serialized tensor
//! (rank, dims, elements at the checkpoint's native width).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::CctParams;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::train::{EpochRecord, TrainState};

pub const MAGIC: &[u8; 4] = b"CCT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: DType,
    pub run: RunConfig,
    pub step: u64,
    pub epoch: u64,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_val_loss: Option<f64>,
    pub epochs_since_best: u64,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Serializes the state; the bytes are written to a sibling temporary file
/// first and renamed into place.
pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    state: &TrainState<T>,
    run: &RunConfig,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(state, run)?;
    let tmp = path.with_extension("cct.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode<T: Scalar>(state: &TrainState<T>, run: &RunConfig) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let groups = [
        ("", &state.params),
        ("adam_m.", &state.m),
        ("adam_v.", &state.v),
    ];
    for (prefix, set) in groups {
        for (name, t) in set.named() {
            let offset = payload.len() as u64;
            t.write_bytes(&mut payload);
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                offset,
                len: payload.len() as u64 - offset,
            });
        }
    }
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        dtype: T::DTYPE,
        run: run.clone(),
        step: state.step,
        epoch: state.epoch,
        seed: state.seed,
        history: state.history.clone(),
        best_val_loss: state.best_val_loss,
        epochs_since_best: state.epochs_since_best,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing CCT1 magic"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| corrupt("header truncated"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {}",
            header.version
        )));
    }
    Ok((header, &bytes[8 + len..]))
}

/// Reads only the header, e.g. to learn the element type.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(TrainState<T>, RunConfig)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Parses a whole checkpoint; nothing is returned unless every tensor is
/// present, in bounds and shaped as the stored configuration requires.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(TrainState<T>, RunConfig)> {
    let (header, payload) = split_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(corrupt(format!(
            "checkpoint holds {:?} tensors, {:?} requested",
            header.dtype,
            T::DTYPE
        )));
    }
    let expected_len: u64 = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() as u64 != expected_len {
        return Err(corrupt(format!(
            "payload is {} bytes, directory describes {expected_len}",
            payload.len()
        )));
    }
    let mut table: HashMap<&str, Tensor<T>> = HashMap::new();
    for e in &header.tensors {
        let start = e.offset as usize;
        let slice = start
            .checked_add(e.len as usize)
            .and_then(|end| payload.get(start..end))
            .ok_or_else(|| corrupt(format!("tensor {} out of bounds", e.name)))?;
        let (t, used) = Tensor::<T>::read_bytes(slice)?;
        if used != slice.len() {
            return Err(corrupt(format!("tensor {} has trailing bytes", e.name)));
        }
        table.insert(&e.name, t);
    }
    let cfg = &header.run.model;
    let shapes =
        CctParams::<Tensor<T>>::shapes(cfg).map_err(|e| corrupt(format!("stored config: {e}")))?;
    let names: Vec<String> = shapes.named().into_iter().map(|(n, _)| n).collect();
    let mut take = |prefix: &str| -> Result<CctParams<Tensor<T>>> {
        let mut ordered = Vec::with_capacity(names.len());
        for n in &names {
            let key = format!("{prefix}{n}");
            ordered.push(
                table
                    .remove(key.as_str())
                    .ok_or_else(|| corrupt(format!("missing tensor {key}")))?,
            );
        }
        let mut it = ordered.into_iter();
        let set = shapes.map(|_| it.next().expect("one tensor per leaf"));
        set.check(cfg)
            .map_err(|e| corrupt(format!("{prefix}parameters: {e}")))?;
        Ok(set)
    };
    let params = take("")?;
    let m = take("adam_m.")?;
    let v = take("adam_v.")?;
    let state = TrainState {
        params,
        m,
        v,
        step: header.step,
        epoch: header.epoch,
        seed: header.seed,
        history: header.history,
        best_val_loss: header.best_val_loss,
        epochs_since_best: header.epochs_since_best,
    };
    Ok((state, header.run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CctConfig;

    fn state<T: Scalar>() -> (TrainState<T>, RunConfig) {
        let run = RunConfig {
            model: CctConfig {
                precision: T::DTYPE,
                ..CctConfig::tiny()
            },
            ..RunConfig::default()
        };
        let mut s = TrainState::<T>::new(&run.model, 3).unwrap();
        s.m = s.params.map(|t| t.map(|v| v * T::of(0.5)));
        s.v = s.params.map(|t| t.map(|v| v * v));
        s.step = 17;
        s.epoch = 2;
        s.best_val_loss = Some(0.25);
        (s, run)
    }

    fn bitwise_eq<T: Scalar>(a: &CctParams<Tensor<T>>, b: &CctParams<Tensor<T>>) -> bool {
        a.leaves().iter().zip(b.leaves()).all(|(x, y)| {
            x.shape() == y.shape()
                && x.data()
                    .iter()
                    .zip(y.data())
                    .all(|(p, q)| p.f64().to_bits() == q.f64().to_bits())
        })
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cct");
        let (s, run) = state::<f64>();
        save_checkpoint(&path, &s, &run).unwrap();
        let (back, run_back) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(run_back, run);
        assert!(bitwise_eq(&s.params, &back.params));
        assert!(bitwise_eq(&s.m, &back.m));
        assert!(bitwise_eq(&s.v, &back.v));
        assert_eq!(
            (back.step, back.epoch, back.best_val_loss),
            (17, 2, Some(0.25))
        );
        assert_eq!(read_header(&path).unwrap().dtype, DType::F64);
        assert!(load_checkpoint::<f32>(&path).is_err());

        let (s, run) = state::<f32>();
        save_checkpoint(&path, &s, &run).unwrap();
        assert!(bitwise_eq(
            &s.params,
            &load_checkpoint::<f32>(&path).unwrap().0.params
        ));
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let (s, run) = state::<f64>();
        let bytes = encode(&s, &run).unwrap();
        for cut in [0, 3, 7, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(
                    decode::<f64>(&bytes[..cut]),
                    Err(Error::CorruptCheckpoint(_))
                ),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode::<f64>(&bad),
            Err(Error::CorruptCheckpoint(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode::<f64>(&extra),
            Err(Error::CorruptCheckpoint(_))
        ));
        assert!(decode::<f64>(&bytes).is_ok());
    }
}
