//! Two-stage fitting: frontal facial-landmark fit, then an all-pose fit with
//! transferred landmarks and scalp features.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera_geom::{camera_head_angles, umeyama_fit, PerspectiveCamera};
use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::pose_refine::LmSettings;
use crate::shape_model::{HeadMesh, MorphableModel, ShapeParams};
use crate::shape_solver::{
    align_shape, iterate_fit, Alignment, AlignmentTargets, FrameObservations, IterationRecord, KeypointSource,
    Observation, SolveSettings, StaticKeypoints,
};
use crate::silhouette::{filter_reconstruction, rasterize_silhouette, scalp_correspondences, SilhouetteMask};
use crate::{FrameId, Vec2, Vec3};

/// Minimum number of facial keypoints on the frontal frame.
pub const MIN_FRONTAL_KEYPOINTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Keypoint {
    pub id: String,
    pub u: f64,
    pub v: f64,
}

/// Everything the fit consumes.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub cameras: BTreeMap<FrameId, PerspectiveCamera>,
    /// Detected facial keypoints per frame. Frames without a face are absent.
    pub keypoints: BTreeMap<FrameId, Vec<Keypoint>>,
    pub dense: TriangleMesh,
    /// Frame whose view direction defines azimuth 0 and whose keypoints locate
    /// the landmarks in the dense reconstruction.
    pub frontal_frame: FrameId,
}

impl SceneInput {
    /// Cross-checks frames, keypoint ids and the dense mesh against `model`.
    pub fn validate(&self, model: &MorphableModel) -> Result<()> {
        for (&f, kps) in &self.keypoints {
            if !self.cameras.contains_key(&f) {
                return Err(Error::Validation(format!("keypoints for frame {f} but no camera")));
            }
            let mut seen = BTreeSet::new();
            for k in kps {
                if model.landmark_vertex(&k.id).is_none() || model.is_anchor(&k.id) {
                    return Err(Error::Validation(format!(
                        "frame {f}: keypoint id {:?} is not an observable landmark of the model",
                        k.id
                    )));
                }
                if !seen.insert(k.id.as_str()) {
                    return Err(Error::Validation(format!("frame {f}: keypoint id {:?} repeated", k.id)));
                }
                if !(k.u.is_finite() && k.v.is_finite()) {
                    return Err(Error::Validation(format!("frame {f}: keypoint {:?} is not finite", k.id)));
                }
            }
        }
        let frontal = self.keypoints.get(&self.frontal_frame).map_or(0, |k| k.len());
        if frontal < MIN_FRONTAL_KEYPOINTS {
            return Err(Error::UnfittableScene(format!(
                "frontal frame {} has {frontal} keypoints, at least {MIN_FRONTAL_KEYPOINTS} required",
                self.frontal_frame
            )));
        }
        self.dense.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub azimuth_step: f64,
    pub elevation_limit: f64,
    pub edge_factor: f64,
    pub landmark_weight: f64,
    pub scalp_weight: f64,
    pub scalp_features: bool,
    pub min_frame_keypoints: usize,
    pub lm: LmSettings,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            iterations: 9,
            azimuth_step: 15.0,
            elevation_limit: 30.0,
            edge_factor: crate::silhouette::DEFAULT_EDGE_FACTOR,
            landmark_weight: 1.0,
            scalp_weight: 1.0,
            scalp_features: true,
            min_frame_keypoints: 4,
            lm: LmSettings::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("lambda", self.lambda >= 0.0 && self.lambda.is_finite()),
            ("iterations", self.iterations >= 1),
            ("azimuth_step", self.azimuth_step > 0.0 && self.azimuth_step <= 360.0),
            ("elevation_limit", (0.0..=90.0).contains(&self.elevation_limit)),
            ("edge_factor", self.edge_factor > 0.0 && self.edge_factor.is_finite()),
            ("landmark_weight", self.landmark_weight > 0.0 && self.landmark_weight.is_finite()),
            ("scalp_weight", self.scalp_weight >= 0.0 && self.scalp_weight.is_finite()),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(Error::Validation(format!("config field {name} is out of range")));
        }
        self.lm.validate()
    }

    pub fn solve_settings(&self) -> SolveSettings {
        SolveSettings {
            lambda: self.lambda,
            iterations: self.iterations,
            min_frame_keypoints: self.min_frame_keypoints,
            realign: true,
            refine_pose: true,
            lm: self.lm.clone(),
        }
    }
}

/// Keypointed frames split into a fit set and a held-out evaluation set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSplit {
    pub fit: Vec<FrameId>,
    pub held_out: Vec<FrameId>,
}

/// Alternating split of the keypointed frames in id order. The parity is
/// chosen so the frontal frame lands in the fit set.
pub fn select_frontal_frames(scene: &SceneInput) -> Result<FrameSplit> {
    let frames: Vec<FrameId> = scene.keypoints.iter().filter(|(_, k)| !k.is_empty()).map(|(&f, _)| f).collect();
    if frames.is_empty() {
        return Err(Error::UnfittableScene("no frame has facial keypoints".into()));
    }
    let parity = frames.iter().position(|&f| f == scene.frontal_frame).unwrap_or(0) % 2;
    let (fit, held_out): (Vec<_>, Vec<_>) = frames.iter().enumerate().partition(|(i, _)| i % 2 == parity);
    let split = FrameSplit {
        fit: fit.into_iter().map(|(_, &f)| f).collect(),
        held_out: held_out.into_iter().map(|(_, &f)| f).collect(),
    };
    if split.held_out.is_empty() {
        log::warn!("only one keypointed frame; nothing is held out for evaluation");
    }
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseAngles {
    pub azimuth: f64,
    pub elevation: f64,
}

/// Per-bin frame choice: for each azimuth bin `[k step, (k+1) step)` the frame
/// within the elevation limit whose azimuth is nearest the bin centre. Ties go
/// to the lower frame id. Azimuths are taken modulo 360.
pub fn sample_pose_ring(
    angles: &BTreeMap<FrameId, PoseAngles>,
    exclude: &BTreeSet<FrameId>,
    azimuth_step: f64,
    elevation_limit: f64,
) -> Result<Vec<FrameId>> {
    if !(azimuth_step > 0.0) {
        return Err(Error::Validation("azimuth step must be positive".into()));
    }
    let bins = (360.0 / azimuth_step).ceil() as usize;
    let mut best: BTreeMap<usize, (f64, FrameId)> = BTreeMap::new();
    for (&f, a) in angles {
        if exclude.contains(&f) || a.elevation.abs() > elevation_limit {
            continue;
        }
        let az = a.azimuth.rem_euclid(360.0);
        let bin = ((az / azimuth_step).floor() as usize).min(bins - 1);
        let centre = (bin as f64 + 0.5) * azimuth_step;
        let d = (az - centre).abs();
        let e = best.entry(bin).or_insert((d, f));
        if d < e.0 {
            *e = (d, f);
        }
    }
    if best.is_empty() {
        return Err(Error::UnfittableScene(format!(
            "no frame within {elevation_limit} degrees of elevation"
        )));
    }
    let mut frames: Vec<FrameId> = best.into_values().map(|(_, f)| f).collect();
    frames.sort_unstable();
    Ok(frames)
}

/// Filtered reconstruction, frame split and dense-reconstruction landmarks.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub dense: TriangleMesh,
    pub split: FrameSplit,
    pub targets: AlignmentTargets,
}

fn facial_observations(model: &MorphableModel, kps: &[Keypoint], weight: f64) -> Vec<Observation> {
    kps.iter()
        .filter_map(|k| {
            model.landmark_vertex(&k.id).map(|v| Observation {
                vertex: v,
                pixel: Vec2::new(k.u, k.v),
                weight,
            })
        })
        .collect()
}

/// Casts the frontal keypoints into the dense mesh. One trimmed re-fit
/// against the mean shape drops hits far from the rest (rays grazing the
/// wrong surface).
fn dense_landmarks(model: &MorphableModel, scene: &SceneInput, dense: &TriangleMesh) -> Result<AlignmentTargets> {
    let cam = &scene.cameras[&scene.frontal_frame];
    let mut vertices = Vec::new();
    let mut points = Vec::new();
    for k in &scene.keypoints[&scene.frontal_frame] {
        let Some(v) = model.landmark_vertex(&k.id) else { continue };
        let (origin, dir) = cam.pixel_ray(&Vec2::new(k.u, k.v));
        if let Some((_, hit)) = dense.ray_cast(&origin, &dir) {
            vertices.push(v);
            points.push(hit);
        }
    }
    if vertices.len() < 3 {
        return Err(Error::UnfittableScene(format!(
            "only {} frontal keypoints hit the dense reconstruction",
            vertices.len()
        )));
    }
    let mean: Vec<Vec3> = vertices.iter().map(|&v| model.mean_vertex(v)).collect();
    let t = umeyama_fit(&mean, &points)?;
    let residuals: Vec<f64> = mean.iter().zip(&points).map(|(p, q)| (t.apply(p) - q).norm()).collect();
    let mut sorted = residuals.clone();
    sorted.sort_by(f64::total_cmp);
    let limit = 3.0 * sorted[sorted.len() / 2];
    let keep: Vec<usize> = (0..residuals.len()).filter(|&i| residuals[i] <= limit).collect();
    if keep.len() >= 3 && keep.len() < residuals.len() {
        log::info!("dropped {} outlying dense landmarks", residuals.len() - keep.len());
        vertices = keep.iter().map(|&i| vertices[i]).collect();
        points = keep.iter().map(|&i| points[i]).collect();
    }
    Ok(AlignmentTargets { vertices, points })
}

pub fn prepare_scene(model: &MorphableModel, scene: &SceneInput, config: &FitConfig) -> Result<PreparedScene> {
    config.validate()?;
    scene.validate(model)?;
    let dense = filter_reconstruction(&scene.dense, config.edge_factor)?;
    let split = select_frontal_frames(scene)?;
    let targets = dense_landmarks(model, scene, &dense)?;
    Ok(PreparedScene { dense, split, targets })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Result {
    pub mean_alignment: Alignment,
    pub alpha_front: ShapeParams,
    pub front_alignment: Alignment,
    pub trace: Vec<IterationRecord>,
}

fn fit_set_source(model: &MorphableModel, scene: &SceneInput, frames: &[FrameId], weight: f64) -> StaticKeypoints {
    StaticKeypoints(
        frames
            .iter()
            .map(|f| FrameObservations {
                frame_id: *f,
                camera: scene.cameras[f].clone(),
                observations: facial_observations(model, &scene.keypoints[f], weight),
            })
            .collect(),
    )
}

/// Mean-shape alignment followed by the frontal facial-keypoint fit.
pub fn stage1_frontal_fit(
    model: &MorphableModel,
    scene: &SceneInput,
    prepared: &PreparedScene,
    config: &FitConfig,
) -> Result<Stage1Result> {
    let settings = config.solve_settings();
    let source = fit_set_source(model, scene, &prepared.split.fit, config.landmark_weight);
    let zeros = ShapeParams::zeros(model.n_components());
    let start = Alignment::from_similarity(prepared.targets.fit(&model.mean_mesh())?);
    let (mean_alignment, _, _) = align_shape(model, &zeros, &source, Some(&prepared.targets), &start, &settings)?;
    let out = iterate_fit(model, &source, Some(&prepared.targets), &zeros, &mean_alignment, &settings, "stage1")?;
    let (front_alignment, _, _) =
        align_shape(model, &out.params, &source, Some(&prepared.targets), &out.alignment, &settings)?;
    Ok(Stage1Result {
        mean_alignment,
        alpha_front: out.params,
        front_alignment,
        trace: out.trace,
    })
}

/// Head-frame camera angles; azimuth is relative to the frontal frame.
pub fn pose_angles(
    cameras: &BTreeMap<FrameId, PerspectiveCamera>,
    head: &Alignment,
    frontal: FrameId,
) -> Result<BTreeMap<FrameId, PoseAngles>> {
    let t = head.combined();
    let (az0, _) = camera_head_angles(&cameras[&frontal], &t)?;
    cameras
        .iter()
        .map(|(&f, c)| {
            let (az, el) = camera_head_angles(c, &t)?;
            Ok((
                f,
                PoseAngles {
                    azimuth: (az - az0).rem_euclid(360.0),
                    elevation: el,
                },
            ))
        })
        .collect()
}

fn vertex_normals(mesh: &HeadMesh) -> Vec<Vec3> {
    let mut n = vec![Vec3::zeros(); mesh.vertices.len()];
    for t in mesh.topology.iter() {
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
        let face = (b - a).cross(&(c - a));
        for &i in t {
            n[i as usize] += face;
        }
    }
    n
}

/// Stage-2 observations: detector keypoints where present, otherwise the
/// visible landmarks of the stage-1 shape projected into the frame, plus the
/// scalp correspondences of the current shape and alignment.
pub struct Stage2Source<'a> {
    facial: Vec<FrameObservations>,
    masks: BTreeMap<FrameId, SilhouetteMask>,
    top_region: &'a [usize],
    ears: [usize; 2],
    scalp_weight: f64,
    scalp_features: bool,
}

impl<'a> Stage2Source<'a> {
    pub fn new(
        model: &'a MorphableModel,
        scene: &SceneInput,
        prepared: &PreparedScene,
        stage1: &Stage1Result,
        frames: &[FrameId],
        config: &FitConfig,
    ) -> Result<Self> {
        let front = model.synthesize(&stage1.alpha_front)?.transformed(&stage1.front_alignment.combined());
        let normals = vertex_normals(&front);
        let held_out: BTreeSet<FrameId> = prepared.split.held_out.iter().copied().collect();
        let mut facial = Vec::with_capacity(frames.len());
        for &f in frames {
            let camera = scene.cameras.get(&f).ok_or_else(|| Error::Validation(format!("no camera for frame {f}")))?;
            let detected = scene.keypoints.get(&f).filter(|k| !k.is_empty() && !held_out.contains(&f));
            let observations = match detected {
                Some(kps) => facial_observations(model, kps, config.landmark_weight),
                None => model
                    .observable_landmarks()
                    .filter_map(|(_, v)| {
                        let p = front.vertices[v];
                        if normals[v].dot(&(camera.center() - p)) <= 0.0 {
                            return None;
                        }
                        let px = camera.project(&p).ok()?;
                        let inside = px.x >= 0.0
                            && px.y >= 0.0
                            && px.x < camera.width() as f64
                            && px.y < camera.height() as f64;
                        inside.then_some(Observation {
                            vertex: v,
                            pixel: px,
                            weight: config.landmark_weight,
                        })
                    })
                    .collect(),
            };
            facial.push(FrameObservations {
                frame_id: f,
                camera: camera.clone(),
                observations,
            });
        }
        let masks = if config.scalp_features {
            facial
                .par_iter()
                .map(|fo| (fo.frame_id, rasterize_silhouette(&prepared.dense, &fo.camera, fo.frame_id)))
                .collect::<Vec<_>>()
                .into_iter()
                .collect()
        } else {
            BTreeMap::new()
        };
        let regions = model.regions();
        Ok(Self {
            facial,
            masks,
            top_region: regions.top,
            ears: [regions.ear_left, regions.ear_right],
            scalp_weight: config.scalp_weight,
            scalp_features: config.scalp_features,
        })
    }

    pub fn masks(&self) -> &BTreeMap<FrameId, SilhouetteMask> {
        &self.masks
    }
}

impl KeypointSource for Stage2Source<'_> {
    fn frames(&self, _: &MorphableModel, mesh: &HeadMesh, alignment: &Alignment) -> Result<Vec<FrameObservations>> {
        let t = alignment.combined();
        Ok(self
            .facial
            .par_iter()
            .map(|fo| {
                let mut fo = fo.clone();
                if self.scalp_features && self.scalp_weight > 0.0 {
                    let mask = &self.masks[&fo.frame_id];
                    for c in scalp_correspondences(mesh, self.top_region, self.ears, &fo.camera, &t, mask) {
                        fo.observations.push(Observation {
                            vertex: c.vertex,
                            pixel: c.target(),
                            weight: self.scalp_weight,
                        });
                    }
                }
                fo
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Result {
    pub alpha_final: ShapeParams,
    pub final_alignment: Alignment,
    pub trace: Vec<IterationRecord>,
}

/// All-pose fit over `frames`, starting from the mean shape and its
/// alignment.
pub fn stage2_allpose_fit(
    model: &MorphableModel,
    scene: &SceneInput,
    prepared: &PreparedScene,
    stage1: &Stage1Result,
    frames: &[FrameId],
    config: &FitConfig,
) -> Result<Stage2Result> {
    let settings = config.solve_settings();
    let source = Stage2Source::new(model, scene, prepared, stage1, frames, config)?;
    let zeros = ShapeParams::zeros(model.n_components());
    let out = iterate_fit(model, &source, Some(&prepared.targets), &zeros, &stage1.mean_alignment, &settings, "stage2")?;
    let (final_alignment, _, _) =
        align_shape(model, &out.params, &source, Some(&prepared.targets), &out.alignment, &settings)?;
    Ok(Stage2Result {
        alpha_final: out.params,
        final_alignment,
        trace: out.trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub frontal_frame: FrameId,
    pub split: FrameSplit,
    pub stage2_frames: Vec<FrameId>,
    pub pose_angles: BTreeMap<FrameId, PoseAngles>,
    pub mean_alignment: Alignment,
    pub front_alignment: Alignment,
    pub final_alignment: Alignment,
    pub alpha_front: ShapeParams,
    pub alpha_final: ShapeParams,
    pub trace: Vec<IterationRecord>,
}

impl FitResult {
    /// `S^mean`, `S^front` and `S^final` placed in the scene frame.
    pub fn meshes(&self, model: &MorphableModel) -> Result<[HeadMesh; 3]> {
        Ok([
            model.mean_mesh().transformed(&self.mean_alignment.combined()),
            model.synthesize(&self.alpha_front)?.transformed(&self.front_alignment.combined()),
            model.synthesize(&self.alpha_final)?.transformed(&self.final_alignment.combined()),
        ])
    }
}

pub fn run_pipeline(model: &MorphableModel, scene: &SceneInput, config: &FitConfig) -> Result<FitResult> {
    let prepared = prepare_scene(model, scene, config).map_err(|e| e.in_stage("prepare"))?;
    let stage1 = stage1_frontal_fit(model, scene, &prepared, config).map_err(|e| e.in_stage("stage1"))?;
    let angles = pose_angles(&scene.cameras, &stage1.front_alignment, scene.frontal_frame)
        .map_err(|e| e.in_stage("pose sampling"))?;
    let held_out: BTreeSet<FrameId> = prepared.split.held_out.iter().copied().collect();
    let frames = sample_pose_ring(&angles, &held_out, config.azimuth_step, config.elevation_limit)
        .map_err(|e| e.in_stage("pose sampling"))?;
    log::info!("stage 2 frames: {frames:?}");
    let stage2 =
        stage2_allpose_fit(model, scene, &prepared, &stage1, &frames, config).map_err(|e| e.in_stage("stage2"))?;
    let mut trace = stage1.trace;
    trace.extend(stage2.trace);
    Ok(FitResult {
        frontal_frame: scene.frontal_frame,
        split: prepared.split,
        stage2_frames: frames,
        pose_angles: angles,
        mean_alignment: stage1.mean_alignment,
        front_alignment: stage1.front_alignment,
        final_alignment: stage2.final_alignment,
        alpha_front: stage1.alpha_front,
        alpha_final: stage2.alpha_final,
        trace,
    })
}
