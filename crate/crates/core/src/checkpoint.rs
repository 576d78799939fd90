//! Named-parameter checkpoints: one JSON manifest line, then every parameter's
//! values as little-endian scalars in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::split_header;
use crate::error::{Error, FormatError, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "VOXMAE-CKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    MaePretrained,
    Scratch,
    Finetuned,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::MaePretrained => "mae-pretrained",
            Provenance::Scratch => "scratch",
            Provenance::Finetuned => "finetuned",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub params: Vec<(String, Tensor<T>)>,
    /// Fingerprint of the whole producing config.
    pub fingerprint: String,
    /// Fingerprint of the encoder portion, checked on transfer.
    pub encoder_fingerprint: String,
    pub provenance: Provenance,
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of the first value within the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    magic: String,
    version: u32,
    dtype: DType,
    fingerprint: String,
    encoder_fingerprint: String,
    provenance: Provenance,
    epoch: usize,
    seed: u64,
    params: Vec<ParamEntry>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Snapshot of the store's parameters whose names pass `keep`, detached.
    pub fn from_store(
        ps: &ParamStore<T>,
        keep: impl Fn(&str) -> bool,
        fingerprint: String,
        encoder_fingerprint: String,
        provenance: Provenance,
        epoch: usize,
        seed: u64,
    ) -> Self {
        let params = ps.iter().filter(|(n, _)| keep(n)).map(|(n, t)| (n.to_string(), t.detach())).collect();
        Self {
            params,
            fingerprint,
            encoder_fingerprint,
            provenance,
            epoch,
            seed,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            magic: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_FORMAT_VERSION,
            dtype: T::DTYPE,
            fingerprint: self.fingerprint.clone(),
            encoder_fingerprint: self.encoder_fingerprint.clone(),
            provenance: self.provenance,
            epoch: self.epoch,
            seed: self.seed,
            params: self
                .params
                .iter()
                .scan(0, |offset, (name, t)| {
                    let entry = ParamEntry {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                        offset: *offset,
                    };
                    *offset += t.numel() * T::DTYPE.size_in_bytes();
                    Some(entry)
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.push(b'\n');
        for (_, t) in &self.params {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (value, payload) = split_header(bytes, CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION)?;
        let m: Manifest = serde_json::from_value(value).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
        if m.dtype != T::DTYPE {
            return Err(FormatError::MalformedHeader(format!(
                "checkpoint holds {} values, reader expects {}",
                m.dtype,
                T::DTYPE
            ))
            .into());
        }
        let width = T::DTYPE.size_in_bytes();
        let mut params = Vec::with_capacity(m.params.len());
        let mut expected_offset = 0;
        for (i, p) in m.params.iter().enumerate() {
            let bad = |reason: String| -> Error {
                FormatError::Parameter {
                    name: p.name.clone(),
                    reason,
                }
                .into()
            };
            if p.shape.is_empty() || p.shape.contains(&0) {
                return Err(bad(format!("invalid shape {:?}", p.shape)));
            }
            if p.offset != expected_offset {
                return Err(bad(format!("offset {} but the previous parameter ends at {expected_offset}", p.offset)));
            }
            let n: usize = p.shape.iter().product();
            let end = p.offset + n * width;
            let next = m.params.get(i + 1).map_or(payload.len(), |q| q.offset);
            if end != next {
                return Err(bad(format!(
                    "shape {:?} needs {} bytes but its slot holds {}",
                    p.shape,
                    n * width,
                    next.saturating_sub(p.offset)
                )));
            }
            let values = payload[p.offset..end].chunks_exact(width).map(T::read_le).collect();
            let t = Tensor::from_vec(&p.shape, values).map_err(|e| bad(e.to_string()))?;
            params.push((p.name.clone(), t));
            expected_offset = end;
        }
        if m.params.is_empty() && !payload.is_empty() {
            return Err(FormatError::PayloadLength {
                expected_values: 0,
                expected_bytes: 0,
                found_bytes: payload.len(),
            }
            .into());
        }
        Ok(Self {
            params,
            fingerprint: m.fingerprint,
            encoder_fingerprint: m.encoder_fingerprint,
            provenance: m.provenance,
            epoch: m.epoch,
            seed: m.seed,
        })
    }

    /// Copies every checkpoint parameter into the same-named store slot.
    /// Errors name the first parameter that is missing or mis-shaped.
    pub fn load_into(&self, ps: &mut ParamStore<T>) -> Result<Vec<String>> {
        for (name, t) in &self.params {
            let id = ps
                .id(name)
                .ok_or_else(|| Error::Transfer(format!("parameter `{name}` does not exist in the target model")))?;
            if ps.get(id).shape() != t.shape() {
                return Err(Error::Transfer(format!(
                    "parameter `{name}`: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    ps.get(id).shape()
                )));
            }
        }
        for (name, t) in &self.params {
            let id = ps.id(name).expect("checked above");
            ps.set(id, t.clone())?;
        }
        Ok(self.params.iter().map(|(n, _)| n.clone()).collect())
    }
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, c: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, c.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
