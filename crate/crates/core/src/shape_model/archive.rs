//! `MFM1` model archive.
//!
//! Layout:
//!
//! ```text
//! offset 0   4 bytes   magic "MFM1"
//! offset 4   8 bytes   u64 little-endian header length H
//! offset 12  H bytes   UTF-8 JSON header
//! offset 12+H          data section: little-endian f64 blobs
//! ```
//!
//! Blob offsets in the header are relative to the start of the data section
//! and lengths are in bytes. `components` is stored column-major (component
//! after component).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ModelParts, MorphableModel};
use crate::error::{Error, Result};
use crate::mesh::Triangle;

const MAGIC: &[u8; 4] = b"MFM1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobRef {
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Regions {
    top: Vec<usize>,
    face: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Blobs {
    mean: BlobRef,
    components: BlobRef,
    eigenvalues: BlobRef,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    vertex_count: usize,
    n_components: usize,
    landmarks: BTreeMap<String, usize>,
    ear_anchors: [String; 2],
    jawline: BTreeSet<String>,
    regions: Regions,
    topology: Vec<Triangle>,
    blobs: Blobs,
}

fn push_blob(data: &mut Vec<u8>, values: &[f64]) -> BlobRef {
    let offset = data.len() as u64;
    for v in values {
        data.extend_from_slice(&v.to_le_bytes());
    }
    BlobRef {
        offset,
        length: (values.len() * 8) as u64,
    }
}

pub fn write_archive_bytes(model: &MorphableModel) -> Vec<u8> {
    let mut data = Vec::new();
    let mean = push_blob(&mut data, model.mean_shape.as_slice());
    let components = push_blob(&mut data, model.components.as_slice());
    let eigenvalues = push_blob(&mut data, model.eigenvalues.as_slice());
    let header = Header {
        format: "MFM1".into(),
        vertex_count: model.vertex_count(),
        n_components: model.n_components(),
        landmarks: model.landmarks.clone(),
        ear_anchors: model.ear_anchors.clone(),
        jawline: model.jawline.clone(),
        regions: Regions {
            top: model.top_region.clone(),
            face: model.face_region.clone(),
        },
        topology: model.topology.to_vec(),
        blobs: Blobs {
            mean,
            components,
            eigenvalues,
        },
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

pub fn write_archive(model: &MorphableModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_archive_bytes(model)).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, data: &[u8], blob: &BlobRef, expected: usize, name: &str) -> Result<Vec<f64>> {
    if blob.length != (expected * 8) as u64 {
        return Err(Error::format(
            path,
            format!("blob {name}: length {} bytes, expected {}", blob.length, expected * 8),
        ));
    }
    let start = blob.offset as usize;
    let end = start
        .checked_add(blob.length as usize)
        .filter(|&e| e <= data.len())
        .ok_or_else(|| {
            Error::format(
                path,
                format!(
                    "blob {name}: bytes {}..{} exceed data section of {} bytes",
                    blob.offset,
                    blob.offset + blob.length,
                    data.len()
                ),
            )
        })?;
    Ok(data[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn read_archive_bytes(bytes: &[u8], path: &Path) -> Result<MorphableModel> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "offset 0: missing MFM1 magic"));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, format!("offset 4: header length {header_len} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[12..header_end]).map_err(|e| {
        Error::format(
            path,
            format!("header (offset 12) line {} column {}: {e}", e.line(), e.column()),
        )
    })?;
    if header.format != "MFM1" {
        return Err(Error::format(path, format!("unsupported format tag {:?}", header.format)));
    }
    let data = &bytes[header_end..];
    let v = header.vertex_count;
    let n = header.n_components;
    let mean = read_blob(path, data, &header.blobs.mean, 3 * v, "mean")?;
    let comps = read_blob(path, data, &header.blobs.components, 3 * v * n, "components")?;
    let eig = read_blob(path, data, &header.blobs.eigenvalues, n, "eigenvalues")?;
    MorphableModel::new(ModelParts {
        mean_shape: DVector::from_vec(mean),
        components: DMatrix::from_vec(3 * v, n, comps),
        eigenvalues: DVector::from_vec(eig),
        landmarks: header.landmarks,
        ear_anchors: header.ear_anchors,
        jawline: header.jawline,
        top_region: header.regions.top,
        face_region: header.regions.face,
        topology: header.topology,
    })
    .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_archive(path: &Path) -> Result<MorphableModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_archive_bytes(&bytes, path)
}
