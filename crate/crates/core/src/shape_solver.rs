//! Regularized linear shape solve from backprojected keypoints, and the
//! alternating align / refine / solve loop.
//!
//! Keypoints are lifted to 3D using the depth of the corresponding landmark of
//! the currently aligned model, mapped back into the canonical model frame,
//! and the shape coefficients are found from
//!
//! ```text
//! (sum_k w_k U_k^T U_k + lambda diag(1/sigma)) alpha = sum_k w_k U_k^T (Y_k - m_k)
//! ```
//!
//! where `U_k`, `m_k` are the component rows and mean of landmark vertex `k`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::camera_geom::{umeyama_fit, PerspectiveCamera, RigidTransform, SimilarityTransform, MIN_DEPTH};
use crate::error::{Error, Result};
use crate::pose_refine::{refine_pose, ConvergenceReport, LmSettings, PoseFrame, PoseObservation, PoseProblem};
use crate::shape_model::{HeadMesh, MorphableModel, ShapeParams};
use crate::{FrameId, Vec2, Vec3};

/// Eigenvalues are floored at this fraction of the largest one before the
/// prior is inverted.
pub const EIGENVALUE_FLOOR: f64 = 1e-8;
/// Condition estimates above this are logged.
pub const CONDITION_WARNING: f64 = 1e10;

/// Model-to-world alignment: rigid correction applied after a similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub similarity: SimilarityTransform,
    pub rigid: RigidTransform,
}

impl Alignment {
    pub fn new(similarity: SimilarityTransform, rigid: RigidTransform) -> Self {
        Self { similarity, rigid }
    }

    pub fn from_similarity(similarity: SimilarityTransform) -> Self {
        Self::new(similarity, RigidTransform::identity())
    }

    pub fn combined(&self) -> SimilarityTransform {
        self.rigid.then_after(&self.similarity)
    }
}

/// A keypoint observation tied to a model vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub vertex: usize,
    pub pixel: Vec2,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservations {
    pub frame_id: FrameId,
    pub camera: PerspectiveCamera,
    pub observations: Vec<Observation>,
}

/// Supplies per-frame observations for the current shape and alignment.
/// Sources whose observations depend on the model (projected landmarks, scalp
/// extrema) are re-evaluated every iteration.
pub trait KeypointSource: Sync {
    fn frames(&self, model: &MorphableModel, mesh: &HeadMesh, alignment: &Alignment) -> Result<Vec<FrameObservations>>;
}

/// Fixed observations, e.g. detector keypoints.
#[derive(Debug, Clone)]
pub struct StaticKeypoints(pub Vec<FrameObservations>);

impl KeypointSource for StaticKeypoints {
    fn frames(&self, _: &MorphableModel, _: &HeadMesh, _: &Alignment) -> Result<Vec<FrameObservations>> {
        Ok(self.0.clone())
    }
}

/// Landmark positions in the dense reconstruction used for the similarity
/// re-alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTargets {
    pub vertices: Vec<usize>,
    pub points: Vec<Vec3>,
}

impl AlignmentTargets {
    pub fn fit(&self, mesh: &HeadMesh) -> Result<SimilarityTransform> {
        let src: Vec<Vec3> = self.vertices.iter().map(|&v| mesh.vertices[v]).collect();
        umeyama_fit(&src, &self.points)
    }
}

/// A keypoint lifted to 3D.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackprojectedPoint {
    pub frame_id: FrameId,
    pub vertex: usize,
    pub weight: f64,
    pub world: Vec3,
    /// `world` mapped into the canonical model frame.
    pub canonical: Vec3,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Backprojection {
    pub points: Vec<BackprojectedPoint>,
    /// Frames skipped because a landmark was behind the camera.
    pub excluded: Vec<FrameId>,
}

/// Lifts every observation with the camera-frame depth of its model vertex
/// under `alignment`. Frames where any such vertex is behind the camera are
/// excluded with a warning.
pub fn backproject_keypoints(mesh: &HeadMesh, alignment: &Alignment, frames: &[FrameObservations]) -> Result<Backprojection> {
    let t = alignment.combined();
    let mut out = Backprojection::default();
    'frames: for f in frames {
        let mut lifted = Vec::with_capacity(f.observations.len());
        for o in &f.observations {
            let v = mesh.vertices.get(o.vertex).ok_or_else(|| {
                Error::Validation(format!("frame {} observes vertex {} outside the model", f.frame_id, o.vertex))
            })?;
            let depth = f.camera.world_to_camera(&t.apply(v)).z;
            if !(depth >= MIN_DEPTH) {
                log::warn!(
                    "frame {} excluded: vertex {} at depth {depth:e} is behind the camera",
                    f.frame_id,
                    o.vertex
                );
                out.excluded.push(f.frame_id);
                continue 'frames;
            }
            let world = f.camera.camera_to_world(&f.camera.backproject(&o.pixel, depth)?);
            lifted.push(BackprojectedPoint {
                frame_id: f.frame_id,
                vertex: o.vertex,
                weight: o.weight,
                world,
                canonical: t.apply_inverse(&world),
            });
        }
        out.points.extend(lifted);
    }
    Ok(out)
}

fn prior_precision(model: &MorphableModel) -> DVector<f64> {
    let ev = model.eigenvalues();
    let floor = EIGENVALUE_FLOOR * ev.max();
    ev.map(|e| 1.0 / e.max(floor))
}

/// Normal matrix and right-hand side of the regularized solve.
pub fn normal_equations(model: &MorphableModel, points: &[BackprojectedPoint], lambda: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Validation(format!("lambda must be non-negative, got {lambda}")));
    }
    let n = model.n_components();
    // Per-vertex total weight and weighted sum of residual targets; BTreeMap
    // keeps the accumulation order fixed.
    let mut per_vertex: BTreeMap<usize, (f64, Vec3)> = BTreeMap::new();
    for p in points {
        if p.vertex >= model.vertex_count() {
            return Err(Error::Validation(format!("vertex {} outside the model", p.vertex)));
        }
        let e = per_vertex.entry(p.vertex).or_insert((0.0, Vec3::zeros()));
        e.0 += p.weight;
        e.1 += p.weight * (p.canonical - model.mean_vertex(p.vertex));
    }
    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for (&v, &(w, r)) in &per_vertex {
        let u = model.component_rows(v);
        let ut = u.transpose();
        a += w * (&ut * u);
        b += &ut * r;
    }
    let precision = prior_precision(model);
    for j in 0..n {
        a[(j, j)] += lambda * precision[j];
    }
    // Exact symmetry regardless of rounding in the products above.
    let a = (&a + a.transpose()) * 0.5;
    Ok((a, b))
}

fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let ev = a.clone().symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Minimizer of the regularized objective for fixed backprojected points.
pub fn solve_shape_step(model: &MorphableModel, points: &[BackprojectedPoint], lambda: f64) -> Result<ShapeParams> {
    let (a, b) = normal_equations(model, points, lambda)?;
    let condition = condition_estimate(&a);
    if condition > CONDITION_WARNING {
        log::warn!("shape normal matrix condition estimate {condition:.3e}");
    }
    match a.cholesky() {
        Some(c) if condition.is_finite() => Ok(c.solve(&b).into()),
        _ => Err(Error::IllPosed { condition }),
    }
}

/// `sum_k w_k |S(alpha)_k - Y_k|^2 + lambda alpha^T diag(1/sigma) alpha`, in
/// canonical model units.
pub fn shape_objective(model: &MorphableModel, params: &ShapeParams, points: &[BackprojectedPoint], lambda: f64) -> Result<f64> {
    if params.len() != model.n_components() {
        return Err(Error::InvalidParams {
            expected: model.n_components(),
            actual: params.len(),
        });
    }
    let data: f64 = points
        .iter()
        .map(|p| p.weight * (model.vertex(params, p.vertex) - p.canonical).norm_squared())
        .sum();
    let precision = prior_precision(model);
    let prior: f64 = params.alpha.iter().zip(precision.iter()).map(|(a, s)| a * a * s).sum();
    Ok(data + lambda * prior)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSettings {
    pub lambda: f64,
    pub iterations: usize,
    /// Frames with fewer observations are left out of the iteration.
    pub min_frame_keypoints: usize,
    /// Re-fit the similarity to the alignment targets each iteration.
    pub realign: bool,
    pub refine_pose: bool,
    pub lm: LmSettings,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            iterations: 9,
            min_frame_keypoints: 4,
            realign: true,
            refine_pose: true,
            lm: LmSettings::default(),
        }
    }
}

/// One line of the fitting trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub stage: String,
    pub iteration: usize,
    pub pose_objective_initial: f64,
    pub pose_objective: f64,
    pub pose_steps: usize,
    pub shape_objective: f64,
    pub alpha_norm: f64,
    pub frames: Vec<FrameId>,
    pub observations: usize,
    pub excluded_frames: Vec<FrameId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub params: ShapeParams,
    pub alignment: Alignment,
    pub trace: Vec<IterationRecord>,
}

/// Keeps observations at positive depth under `t` and frames that still have
/// at least `min` of them.
fn usable_frames(frames: Vec<FrameObservations>, mesh: &HeadMesh, t: &SimilarityTransform, min: usize) -> Vec<FrameObservations> {
    let mut out: Vec<FrameObservations> = frames
        .into_iter()
        .filter_map(|mut f| {
            f.observations.retain(|o| {
                o.vertex < mesh.vertices.len() && f.camera.world_to_camera(&t.apply(&mesh.vertices[o.vertex])).z >= MIN_DEPTH
            });
            if f.observations.len() < min {
                log::warn!("frame {} dropped: {} usable keypoints", f.frame_id, f.observations.len());
                None
            } else {
                Some(f)
            }
        })
        .collect();
    out.sort_by_key(|f| f.frame_id);
    out
}

fn pose_problem(mesh: &HeadMesh, frames: &[FrameObservations], similarity: &SimilarityTransform) -> Result<PoseProblem> {
    let vertices: BTreeSet<usize> = frames.iter().flat_map(|f| f.observations.iter().map(|o| o.vertex)).collect();
    let index: BTreeMap<usize, usize> = vertices.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let points = vertices.iter().map(|&v| mesh.vertices[v]).collect();
    let pose_frames = frames
        .iter()
        .map(|f| PoseFrame {
            frame_id: f.frame_id,
            camera: f.camera.clone(),
            observations: f
                .observations
                .iter()
                .map(|o| PoseObservation {
                    point: index[&o.vertex],
                    pixel: o.pixel,
                    weight: o.weight,
                })
                .collect(),
        })
        .collect();
    PoseProblem::new(pose_frames, points, *similarity)
}

/// Similarity re-fit (when targets are given) followed by LM refinement of the
/// rigid correction, for a fixed shape.
pub fn align_shape(
    model: &MorphableModel,
    params: &ShapeParams,
    source: &dyn KeypointSource,
    targets: Option<&AlignmentTargets>,
    current: &Alignment,
    settings: &SolveSettings,
) -> Result<(Alignment, Vec<FrameObservations>, Option<ConvergenceReport>)> {
    let mesh = model.synthesize(params)?;
    let frames = source.frames(model, &mesh, current)?;
    align_frames(&mesh, frames, targets, current, settings)
}

fn align_frames(
    mesh: &HeadMesh,
    frames: Vec<FrameObservations>,
    targets: Option<&AlignmentTargets>,
    current: &Alignment,
    settings: &SolveSettings,
) -> Result<(Alignment, Vec<FrameObservations>, Option<ConvergenceReport>)> {
    let (similarity, rigid) = match (settings.realign, targets) {
        (true, Some(t)) => (t.fit(mesh)?, RigidTransform::identity()),
        _ => (current.similarity, current.rigid),
    };
    let start = Alignment::new(similarity, rigid);
    let frames = usable_frames(frames, mesh, &start.combined(), settings.min_frame_keypoints);
    if frames.is_empty() {
        return Err(Error::UnfittableScene("no frame has enough usable keypoints".into()));
    }
    if !settings.refine_pose {
        return Ok((start, frames, None));
    }
    let problem = pose_problem(mesh, &frames, &similarity)?;
    let (rigid, report) = refine_pose(&problem, &rigid, &settings.lm)?;
    Ok((Alignment::new(similarity, rigid), frames, Some(report)))
}

/// Runs `settings.iterations` rounds of re-alignment, pose refinement,
/// backprojection and shape solve. Returns the last solved parameters with the
/// alignment they were solved under.
pub fn iterate_fit(
    model: &MorphableModel,
    source: &dyn KeypointSource,
    targets: Option<&AlignmentTargets>,
    initial_params: &ShapeParams,
    initial_alignment: &Alignment,
    settings: &SolveSettings,
    stage: &str,
) -> Result<FitOutcome> {
    if settings.iterations == 0 {
        return Err(Error::Validation("iterations must be at least 1".into()));
    }
    let mut params = initial_params.clone();
    let mut alignment = *initial_alignment;
    let mut trace = Vec::with_capacity(settings.iterations);
    for iteration in 1..=settings.iterations {
        let step = fit_iteration(model, source, targets, &params, &alignment, settings, stage, iteration);
        match step {
            Ok((p, a, record)) => {
                log::info!(
                    "{stage} iteration {iteration}: pose {:.6e}, shape {:.6e}, |alpha| {:.4}",
                    record.pose_objective,
                    record.shape_objective,
                    record.alpha_norm
                );
                params = p;
                alignment = a;
                trace.push(record);
            }
            Err(e) => {
                return Err(Error::Iteration {
                    iteration,
                    trace,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(FitOutcome {
        params,
        alignment,
        trace,
    })
}

#[allow(clippy::too_many_arguments)]
fn fit_iteration(
    model: &MorphableModel,
    source: &dyn KeypointSource,
    targets: Option<&AlignmentTargets>,
    params: &ShapeParams,
    alignment: &Alignment,
    settings: &SolveSettings,
    stage: &str,
    iteration: usize,
) -> Result<(ShapeParams, Alignment, IterationRecord)> {
    let mesh = model.synthesize(params)?;
    let frames = source.frames(model, &mesh, alignment)?;
    let (aligned, frames, report) = align_frames(&mesh, frames, targets, alignment, settings)?;
    let lifted = backproject_keypoints(&mesh, &aligned, &frames)?;
    let next = solve_shape_step(model, &lifted.points, settings.lambda)?;
    let shape_objective = shape_objective(model, &next, &lifted.points, settings.lambda)?;
    let (pose_objective_initial, pose_objective, pose_steps) = match &report {
        Some(r) => (r.initial_objective, r.final_objective, r.iterations),
        None => {
            let problem = pose_problem(&mesh, &frames, &aligned.similarity)?;
            let f = crate::pose_refine::pose_objective(&problem, &aligned.rigid)?;
            (f, f, 0)
        }
    };
    let used: BTreeSet<FrameId> = lifted.points.iter().map(|p| p.frame_id).collect();
    let record = IterationRecord {
        stage: stage.to_string(),
        iteration,
        pose_objective_initial,
        pose_objective,
        pose_steps,
        shape_objective,
        alpha_norm: next.norm(),
        frames: used.into_iter().collect(),
        observations: lifted.points.len(),
        excluded_frames: lifted.excluded,
    };
    Ok((next, aligned, record))
}
