use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mesh_io::ply_bytes;
use super::scene_io::{camera_records, keypoint_file_name, keypoint_files, to_json_bytes};
use crate::error::{Error, Result};
use crate::pipeline::FitResult;
use crate::shape_model::{MorphableModel, ShapeParams};
use crate::shape_solver::Alignment;
use crate::synth::{SweepReport, SyntheticScene};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sha256: String,
    pub bytes: u64,
}

/// Content hashes of every file written to an output directory, keyed by relative path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    /// Hash over the manifest itself; equal digests mean identical outputs.
    pub fn digest(&self) -> String {
        sha256_hex(&to_json_bytes(self))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Single writer for an output directory that records a hash of everything it writes.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    manifest: Manifest,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Manifest::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.files.insert(
            name.to_string(),
            ManifestEntry {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, &to_json_bytes(value))
    }

    /// Writes `manifest.json` and returns the manifest.
    pub fn finish(self) -> Result<Manifest> {
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, to_json_bytes(&self.manifest)).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest)
    }
}

/// One JSON document per line.
pub fn jsonl_bytes<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("in-memory serialization");
        out.push(b'\n');
    }
    out
}

/// Writes the three fitted meshes in world coordinates, the result, its trace and a manifest.
pub fn save_result(model: &MorphableModel, result: &FitResult, out_dir: &Path) -> Result<Manifest> {
    let mut out = OutputDir::create(out_dir)?;
    let meshes = result.meshes(model)?;
    for (name, mesh) in ["mesh_mean.ply", "mesh_front.ply", "mesh_final.ply"].iter().zip(&meshes) {
        out.write(name, &ply_bytes(&mesh.vertices, &mesh.topology))?;
    }
    out.write_json("result.json", result)?;
    out.write("trace.jsonl", &jsonl_bytes(&result.trace))?;
    out.finish()
}

/// Ground truth of a generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub alpha: ShapeParams,
    pub alignment: Alignment,
    pub head_width: f64,
    pub frontal_frame: crate::FrameId,
}

/// Writes a generated scene in the same layout `fit` reads: `cameras.json`,
/// `keypoints/`, `dense.ply`, plus `ground_truth.json` and `mesh_truth.ply`.
pub fn save_synthetic(model: &MorphableModel, scene: &SyntheticScene, out_dir: &Path) -> Result<Manifest> {
    let mut out = OutputDir::create(out_dir)?;
    out.write_json("cameras.json", &camera_records(&scene.input.cameras))?;
    for k in keypoint_files(&scene.input.keypoints) {
        out.write_json(&format!("keypoints/{}", keypoint_file_name(k.frame_id)), &k)?;
    }
    let dense = &scene.input.dense;
    out.write("dense.ply", &ply_bytes(&dense.vertices, &dense.triangles))?;
    let truth = model.synthesize(&scene.alpha)?.transformed(&scene.alignment.combined());
    out.write("mesh_truth.ply", &ply_bytes(&truth.vertices, &truth.topology))?;
    out.write_json(
        "ground_truth.json",
        &GroundTruth {
            alpha: scene.alpha.clone(),
            alignment: scene.alignment,
            head_width: scene.head_width,
            frontal_frame: scene.input.frontal_frame,
        },
    )?;
    out.finish()
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Validation(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))
}

/// `sweep.json`, `sweep_rows.csv` and `sweep_summary.csv`.
pub fn save_sweep(report: &SweepReport, out_dir: &Path) -> Result<Manifest> {
    let mut out = OutputDir::create(out_dir)?;
    out.write_json("sweep.json", report)?;
    out.write("sweep_rows.csv", &csv_bytes(&report.rows)?)?;
    out.write("sweep_summary.csv", &csv_bytes(&report.summary)?)?;
    out.finish()
}
