//! Levenberg–Marquardt refinement of a rigid correction applied on top of a
//! similarity alignment, minimizing multi-view reprojection error.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera_geom::{PerspectiveCamera, RigidTransform, SimilarityTransform};
use crate::error::{Error, Result};
use crate::{FrameId, Vec2, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct PoseObservation {
    /// Index into [`PoseProblem::model_points`].
    pub point: usize,
    pub pixel: Vec2,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub frame_id: FrameId,
    pub camera: PerspectiveCamera,
    pub observations: Vec<PoseObservation>,
}

/// Observations of model points in several calibrated frames. Frames are kept
/// sorted by id so results do not depend on the input order.
#[derive(Debug, Clone)]
pub struct PoseProblem {
    frames: Vec<PoseFrame>,
    model_points: Vec<Vec3>,
    base_transform: SimilarityTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    FiniteDifference,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSettings {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub jacobian: JacobianMode,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            initial_damping: 1e-3,
            damping_up: 10.0,
            damping_down: 10.0,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-12,
            jacobian: JacobianMode::FiniteDifference,
        }
    }
}

impl LmSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_damping", self.initial_damping),
            ("gradient_tolerance", self.gradient_tolerance),
            ("step_tolerance", self.step_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("lm.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("damping_up", self.damping_up), ("damping_down", self.damping_down)] {
            if !(v > 1.0) || !v.is_finite() {
                return Err(Error::Validation(format!("lm.{name} must be greater than 1, got {v}")));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::Validation("lm.max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    Step,
    MaxIterations,
    DampingLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Number of accepted steps.
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub termination: Termination,
    /// Objective after each accepted step.
    pub accepted_objectives: Vec<f64>,
}

const ROTATION_FD_STEP: f64 = 1e-6;
const MAX_DAMPING: f64 = 1e16;

impl PoseProblem {
    pub fn new(mut frames: Vec<PoseFrame>, model_points: Vec<Vec3>, base_transform: SimilarityTransform) -> Result<Self> {
        frames.sort_by_key(|f| f.frame_id);
        if let Some(w) = frames.windows(2).find(|w| w[0].frame_id == w[1].frame_id) {
            return Err(Error::Validation(format!("frame {} appears twice", w[0].frame_id)));
        }
        let mut used = vec![false; model_points.len()];
        for f in &frames {
            for o in &f.observations {
                if o.point >= model_points.len() {
                    return Err(Error::Validation(format!(
                        "frame {} observes point {} but only {} model points exist",
                        f.frame_id,
                        o.point,
                        model_points.len()
                    )));
                }
                if !(o.weight >= 0.0) || !o.weight.is_finite() {
                    return Err(Error::Validation(format!("observation weight {} is invalid", o.weight)));
                }
                used[o.point] = true;
            }
        }
        let distinct = used.iter().filter(|&&u| u).count();
        if distinct < 3 {
            return Err(Error::Degenerate(format!("{distinct} distinct observed points, at least 3 required")));
        }
        Ok(Self {
            frames,
            model_points,
            base_transform,
        })
    }

    pub fn frames(&self) -> &[PoseFrame] {
        &self.frames
    }

    pub fn model_points(&self) -> &[Vec3] {
        &self.model_points
    }

    pub fn base_transform(&self) -> &SimilarityTransform {
        &self.base_transform
    }

    pub fn residual_count(&self) -> usize {
        2 * self.frames.iter().map(|f| f.observations.len()).sum::<usize>()
    }

    /// Points after the base similarity, before the rigid correction.
    fn base_points(&self) -> Vec<Vec3> {
        self.model_points.iter().map(|p| self.base_transform.apply(p)).collect()
    }

    fn frame_residuals(frame: &PoseFrame, world: &[Vec3]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(2 * frame.observations.len());
        for o in &frame.observations {
            let px = frame.camera.project(&world[o.point]).map_err(|e| match e {
                Error::BehindCamera { depth, .. } => Error::BehindCamera {
                    frame: Some(frame.frame_id),
                    vertex: Some(o.point),
                    depth,
                },
                other => other,
            })?;
            let w = o.weight.sqrt();
            out.push(w * (px.x - o.pixel.x));
            out.push(w * (px.y - o.pixel.y));
        }
        Ok(out)
    }

    fn residuals_from_base(&self, base: &[Vec3], pose: &RigidTransform) -> Result<DVector<f64>> {
        let world: Vec<Vec3> = base.iter().map(|p| pose.apply(p)).collect();
        let blocks: Vec<Result<Vec<f64>>> = self
            .frames
            .par_iter()
            .map(|f| Self::frame_residuals(f, &world))
            .collect();
        let mut r = Vec::with_capacity(self.residual_count());
        for b in blocks {
            r.extend(b?);
        }
        Ok(DVector::from_vec(r))
    }

    /// Weighted residual vector, two entries (u, v) per observation, frames in
    /// id order.
    pub fn residuals(&self, pose: &RigidTransform) -> Result<DVector<f64>> {
        self.residuals_from_base(&self.base_points(), pose)
    }

    /// Mean camera-frame depth of the observed points, used to scale the
    /// translation finite-difference step.
    fn length_scale(&self, base: &[Vec3], pose: &RigidTransform) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for f in &self.frames {
            for o in &f.observations {
                sum += f.camera.world_to_camera(&pose.apply(&base[o.point])).z.abs();
                n += 1;
            }
        }
        if n == 0 || !(sum > 0.0) {
            1.0
        } else {
            sum / n as f64
        }
    }

    /// Jacobian of [`PoseProblem::residuals`] with respect to the pose
    /// parameters (axis-angle, translation).
    pub fn jacobian(&self, pose: &RigidTransform, mode: JacobianMode) -> Result<DMatrix<f64>> {
        let base = self.base_points();
        match mode {
            JacobianMode::FiniteDifference => self.jacobian_fd(&base, pose),
            JacobianMode::Analytic => self.jacobian_analytic(&base, pose),
        }
    }

    fn jacobian_fd(&self, base: &[Vec3], pose: &RigidTransform) -> Result<DMatrix<f64>> {
        let p0 = pose.params();
        let scale = self.length_scale(base, pose);
        let mut j = DMatrix::zeros(self.residual_count(), 6);
        for k in 0..6 {
            let h = if k < 3 { ROTATION_FD_STEP } else { ROTATION_FD_STEP * scale };
            let (mut plus, mut minus) = (p0, p0);
            plus[k] += h;
            minus[k] -= h;
            let rp = self.residuals_from_base(base, &RigidTransform::from_params(&plus))?;
            let rm = self.residuals_from_base(base, &RigidTransform::from_params(&minus))?;
            j.set_column(k, &((rp - rm) / (2.0 * h)));
        }
        Ok(j)
    }

    fn jacobian_analytic(&self, base: &[Vec3], pose: &RigidTransform) -> Result<DMatrix<f64>> {
        let p = pose.params();
        let jl = left_jacobian(&Vec3::new(p[0], p[1], p[2]));
        let mut j = DMatrix::zeros(self.residual_count(), 6);
        let mut row = 0;
        for f in &self.frames {
            let cam = &f.camera;
            let (fx, fy, s) = (cam.fx(), cam.fy(), cam.skew());
            for o in &f.observations {
                let rp = pose.rotation() * base[o.point];
                let pc = cam.world_to_camera(&(rp + pose.translation()));
                if pc.z < crate::camera_geom::MIN_DEPTH {
                    return Err(Error::BehindCamera {
                        frame: Some(f.frame_id),
                        vertex: Some(o.point),
                        depth: pc.z,
                    });
                }
                let iz = 1.0 / pc.z;
                let dproj = Matrix2x3::new(
                    fx * iz,
                    s * iz,
                    -(fx * pc.x + s * pc.y) * iz * iz,
                    0.0,
                    fy * iz,
                    -fy * pc.y * iz * iz,
                );
                let d_world_d_rot: Matrix3<f64> = -skew(&rp) * jl;
                let a = dproj * cam.rotation() * d_world_d_rot;
                let b = dproj * cam.rotation();
                let w = o.weight.sqrt();
                for r in 0..2 {
                    for c in 0..3 {
                        j[(row + r, c)] = w * a[(r, c)];
                        j[(row + r, 3 + c)] = w * b[(r, c)];
                    }
                }
                row += 2;
            }
        }
        Ok(j)
    }
}

fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Left Jacobian of SO(3) at `w`.
fn left_jacobian(w: &Vec3) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if theta2 < 1e-8 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let t = theta2.sqrt();
        ((1.0 - t.cos()) / theta2, (t - t.sin()) / (theta2 * t))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// `sum_n sum_k w |pi_n(T_opt T_sim X_k) - y_kn|^2`.
pub fn pose_objective(problem: &PoseProblem, pose: &RigidTransform) -> Result<f64> {
    Ok(problem.residuals(pose)?.norm_squared())
}

/// Marquardt-damped Gauss–Newton on the six pose parameters. The returned
/// objective never exceeds the initial one.
pub fn refine_pose(
    problem: &PoseProblem,
    initial: &RigidTransform,
    settings: &LmSettings,
) -> Result<(RigidTransform, ConvergenceReport)> {
    settings.validate()?;
    let base = problem.base_points();
    let mut pose = *initial;
    let mut params = pose.params();
    let mut r = problem.residuals_from_base(&base, &pose).map_err(|e| {
        Error::InvalidInitialization(format!("initial pose has no finite objective: {e}"))
    })?;
    let mut f = r.norm_squared();
    if !f.is_finite() {
        return Err(Error::InvalidInitialization(format!("initial objective is {f}")));
    }
    let initial_objective = f;
    let mut mu = settings.initial_damping;
    let mut accepted = Vec::new();
    let mut termination = Termination::MaxIterations;

    'outer: for _ in 0..settings.max_iterations {
        let j = match settings.jacobian {
            JacobianMode::FiniteDifference => problem.jacobian_fd(&base, &pose),
            JacobianMode::Analytic => problem.jacobian_analytic(&base, &pose),
        }?;
        let jt = j.transpose();
        let a = &jt * &j;
        let g = &jt * &r;
        if g.amax() <= settings.gradient_tolerance * (1.0 + f) {
            termination = Termination::Gradient;
            break;
        }
        let diag_floor = 1e-12 * a.diagonal().max().max(1e-300);
        loop {
            let mut damped = a.clone();
            for i in 0..6 {
                damped[(i, i)] += mu * a[(i, i)].max(diag_floor);
            }
            let step = match damped.cholesky() {
                Some(c) => c.solve(&(-&g)),
                None => {
                    mu *= settings.damping_up;
                    if mu > MAX_DAMPING {
                        termination = Termination::DampingLimit;
                        break 'outer;
                    }
                    continue;
                }
            };
            let pnorm = params.iter().map(|x| x * x).sum::<f64>().sqrt();
            if step.norm() <= settings.step_tolerance * (pnorm + settings.step_tolerance) {
                termination = Termination::Step;
                break 'outer;
            }
            let mut trial = params;
            for (t, d) in trial.iter_mut().zip(step.iter()) {
                *t += d;
            }
            let trial_pose = RigidTransform::from_params(&trial);
            let trial_r = problem.residuals_from_base(&base, &trial_pose);
            let trial_f = trial_r.as_ref().map(|r| r.norm_squared()).unwrap_or(f64::INFINITY);
            if trial_f < f {
                params = trial;
                pose = trial_pose;
                r = trial_r.expect("finite objective implies residuals");
                f = trial_f;
                accepted.push(f);
                mu = (mu / settings.damping_down).max(1e-300);
                break;
            }
            mu *= settings.damping_up;
            if mu > MAX_DAMPING {
                termination = Termination::DampingLimit;
                break 'outer;
            }
        }
    }
    log::debug!(
        "pose refinement: {} accepted steps, objective {:.6e} -> {:.6e} ({:?})",
        accepted.len(),
        initial_objective,
        f,
        termination
    );
    Ok((
        pose,
        ConvergenceReport {
            iterations: accepted.len(),
            initial_objective,
            final_objective: f,
            termination,
            accepted_objectives: accepted,
        },
    ))
}
