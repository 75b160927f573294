use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::mesh_io::read_mesh;
use crate::camera_geom::PerspectiveCamera;
use crate::error::{Error, Result};
use crate::pipeline::{FitConfig, Keypoint, SceneInput};
use crate::shape_model::MorphableModel;
use crate::synth::SceneSpec;
use crate::{FrameId, Vec3};

/// Camera as stored on disk. `rotation` is row-major and maps world to camera coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub frame_id: FrameId,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl CameraRecord {
    pub fn from_camera(frame_id: FrameId, c: &PerspectiveCamera) -> Self {
        let r = c.rotation();
        let t = c.translation();
        Self {
            frame_id,
            fx: c.fx(),
            fy: c.fy(),
            cx: c.cx(),
            cy: c.cy(),
            skew: c.skew(),
            rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            translation: [t.x, t.y, t.z],
            width: c.width(),
            height: c.height(),
        }
    }

    pub fn to_camera(&self) -> Result<PerspectiveCamera> {
        let k = Matrix3::new(self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        let r = Matrix3::from_row_slice(&self.rotation);
        let t = Vec3::from_row_slice(&self.translation);
        PerspectiveCamera::new(k, r, t, self.width, self.height)
    }
}

/// Detected keypoints of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointFile {
    pub frame_id: FrameId,
    pub points: Vec<Keypoint>,
}

/// Reads a JSON file, reporting line and column on parse errors.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, format!("line {} column {}: {e}", e.line(), e.column())))
}

/// Serializes with the shortest round-tripping float representation.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("in-memory serialization");
    v.push(b'\n');
    v
}

pub fn read_cameras(path: &Path) -> Result<BTreeMap<FrameId, PerspectiveCamera>> {
    let records: Vec<CameraRecord> = read_json(path)?;
    let mut out = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        let cam = rec
            .to_camera()
            .map_err(|e| Error::format(path, format!("camera {i} (frame {}): {e}", rec.frame_id)))?;
        if out.insert(rec.frame_id, cam).is_some() {
            return Err(Error::format(path, format!("camera {i}: frame {} listed twice", rec.frame_id)));
        }
    }
    Ok(out)
}

pub fn camera_records(cameras: &BTreeMap<FrameId, PerspectiveCamera>) -> Vec<CameraRecord> {
    cameras.iter().map(|(&f, c)| CameraRecord::from_camera(f, c)).collect()
}

/// Reads every `*.json` file of `dir`, one frame per file. Files are parsed in parallel.
pub fn read_keypoint_dir(dir: &Path) -> Result<BTreeMap<FrameId, Vec<Keypoint>>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            files.push(p);
        }
    }
    files.sort();
    let parsed: Vec<(PathBuf, KeypointFile)> = files
        .into_par_iter()
        .map(|p| read_json(&p).map(|k| (p, k)))
        .collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    let mut origin: BTreeMap<FrameId, PathBuf> = BTreeMap::new();
    for (p, k) in parsed {
        if let Some(first) = origin.get(&k.frame_id) {
            return Err(Error::format(
                &p,
                format!("frame {} already defined in {}", k.frame_id, first.display()),
            ));
        }
        origin.insert(k.frame_id, p);
        out.insert(k.frame_id, k.points);
    }
    Ok(out)
}

pub fn keypoint_files(keypoints: &BTreeMap<FrameId, Vec<Keypoint>>) -> Vec<KeypointFile> {
    keypoints
        .iter()
        .map(|(&frame_id, points)| KeypointFile { frame_id, points: points.clone() })
        .collect()
}

/// File name used for a frame's keypoints.
pub fn keypoint_file_name(frame: FrameId) -> String {
    format!("frame_{frame:05}.json")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePaths {
    pub cameras: PathBuf,
    pub keypoints: PathBuf,
    pub mesh: PathBuf,
    /// Defaults to the frame with the most keypoints (lowest id on ties).
    pub frontal_frame: Option<FrameId>,
}

/// Frame with the most keypoints; ties go to the lowest frame id.
pub fn default_frontal_frame(keypoints: &BTreeMap<FrameId, Vec<Keypoint>>) -> Option<FrameId> {
    keypoints
        .iter()
        .fold(None, |best: Option<(FrameId, usize)>, (&f, k)| match best {
            Some((_, n)) if n >= k.len() => best,
            _ => Some((f, k.len())),
        })
        .map(|(f, _)| f)
}

/// Loads and cross-validates a scene. Nothing is returned unless every file parses
/// and the scene is consistent with `model`.
pub fn load_scene(model: &MorphableModel, paths: &ScenePaths) -> Result<SceneInput> {
    let (cameras, (keypoints, dense)) = rayon::join(
        || read_cameras(&paths.cameras),
        || rayon::join(|| read_keypoint_dir(&paths.keypoints), || read_mesh(&paths.mesh)),
    );
    let (cameras, keypoints, dense) = (cameras?, keypoints?, dense?);
    let frontal_frame = match paths.frontal_frame {
        Some(f) => f,
        None => default_frontal_frame(&keypoints)
            .ok_or_else(|| Error::UnfittableScene(format!("no keypoint files in {}", paths.keypoints.display())))?,
    };
    let scene = SceneInput {
        cameras,
        keypoints,
        dense,
        frontal_frame,
    };
    scene.validate(model)?;
    Ok(scene)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub heads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: crate::synth::SWEEP_LAMBDAS.to_vec(),
            heads: 10,
        }
    }
}

/// Optional input and output locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub model: Option<PathBuf>,
    pub cameras: Option<PathBuf>,
    pub keypoints: Option<PathBuf>,
    pub mesh: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a run can be configured with. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub fit: FitConfig,
    pub synth: SceneSpec,
    pub sweep: SweepConfig,
    pub paths: PathConfig,
}

impl ProjectConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        self.synth.validate()?;
        if self.sweep.heads == 0 {
            return Err(Error::Validation("sweep.heads must be positive".into()));
        }
        if self.sweep.lambdas.is_empty() || self.sweep.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Validation("sweep.lambdas must be non-empty, finite and non-negative".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Validation("threads must be positive".into()));
        }
        Ok(())
    }
}
