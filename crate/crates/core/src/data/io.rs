//! Volume files: one JSON header line, then little-endian payloads.
//!
//! ```text
//! {"magic":"VOXMAE1","version":1,"extents":[D,H,W],"spacing":[sd,sh,sw],"dtype":"f32","labels":null}\n
//! D·H·W × f32 LE voxels
//! D·H·W × u8 class ids            (only when "labels" is {"dtype":"u8","num_classes":C})
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Item, LabelMap, SplitIndices, Volume};
use crate::error::{Error, FormatError, Result};

pub const VOLUME_MAGIC: &str = "VOXMAE1";
pub const VOLUME_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelHeader {
    dtype: String,
    num_classes: u8,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    magic: String,
    version: u32,
    extents: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    labels: Option<LabelHeader>,
}

/// Splits a header line from its payload and checks magic and version.
pub(crate) fn split_header<'a>(bytes: &'a [u8], magic: &'static str, version: u32) -> Result<(serde_json::Value, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| FormatError::MalformedHeader("missing header line terminator".into()))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| FormatError::MalformedHeader(format!("header is not JSON: {e}")))?;
    let found = value.get("magic").and_then(|m| m.as_str()).unwrap_or("");
    if found != magic {
        return Err(FormatError::BadMagic {
            expected: magic,
            found: found.to_string(),
        }
        .into());
    }
    let v = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| FormatError::MalformedHeader("missing version".into()))?;
    if v != version as u64 {
        return Err(FormatError::UnknownVersion {
            found: v as u32,
            supported: version,
        }
        .into());
    }
    Ok((value, &bytes[nl + 1..]))
}

pub fn encode_volume(v: &Volume, labels: Option<&LabelMap>) -> Result<Vec<u8>> {
    if let Some(l) = labels {
        if l.extents != v.extents {
            return Err(Error::Contract(format!(
                "label extents {:?} differ from volume extents {:?}",
                l.extents, v.extents
            )));
        }
    }
    let header = VolumeHeader {
        magic: VOLUME_MAGIC.into(),
        version: VOLUME_FORMAT_VERSION,
        extents: v.extents,
        spacing: v.spacing,
        dtype: "f32".into(),
        labels: labels.map(|l| LabelHeader {
            dtype: "u8".into(),
            num_classes: l.num_classes,
        }),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.reserve(v.voxels.len() * 5);
    for x in &v.voxels {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(l) = labels {
        out.extend_from_slice(&l.classes);
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<(Volume, Option<LabelMap>)> {
    let (value, payload) = split_header(bytes, VOLUME_MAGIC, VOLUME_FORMAT_VERSION)?;
    let h: VolumeHeader = serde_json::from_value(value).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    if h.dtype != "f32" {
        return Err(FormatError::MalformedHeader(format!("unsupported voxel dtype `{}`", h.dtype)).into());
    }
    if h.extents.contains(&0) || h.spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(FormatError::MalformedHeader(format!(
            "extents {:?} and spacing {:?} must be positive",
            h.extents, h.spacing
        ))
        .into());
    }
    let n: usize = h.extents.iter().product();
    let label_bytes = match &h.labels {
        Some(l) if l.dtype != "u8" => {
            return Err(FormatError::MalformedHeader(format!("unsupported label dtype `{}`", l.dtype)).into())
        }
        Some(_) => n,
        None => 0,
    };
    let expected = n * 4 + label_bytes;
    if payload.len() != expected {
        return Err(FormatError::PayloadLength {
            expected_values: n,
            expected_bytes: expected,
            found_bytes: payload.len(),
        }
        .into());
    }
    let voxels = payload[..n * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let volume = Volume {
        extents: h.extents,
        spacing: h.spacing,
        voxels,
    };
    let labels = match h.labels {
        Some(l) => Some(LabelMap::new(h.extents, l.num_classes, payload[n * 4..].to_vec())?),
        None => None,
    };
    Ok((volume, labels))
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume, labels: Option<&LabelMap>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_volume(v, labels)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<(Volume, Option<LabelMap>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

const DATASET_MANIFEST: &str = "dataset.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    version: u32,
    files: Vec<String>,
    splits: SplitIndices,
}

/// Writes `dataset.json` plus one volume file per item into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(ds.items.len());
    for (i, item) in ds.items.iter().enumerate() {
        let name = format!("item-{i:05}.vox");
        write_volume(dir.join(&name), &item.volume, item.labels.as_ref())?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        version: 1,
        files,
        splits: ds.splits.clone(),
    };
    let path = dir.join(DATASET_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if manifest.version != 1 {
        return Err(FormatError::UnknownVersion {
            found: manifest.version,
            supported: 1,
        }
        .into());
    }
    let items = manifest
        .files
        .iter()
        .map(|f| read_volume(dir.join(f)).map(|(volume, labels)| Item { volume, labels }))
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        items,
        splits: manifest.splits,
    };
    ds.validate()?;
    Ok(ds)
}
