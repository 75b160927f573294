//! Ground-truth synthetic scenes and the regularization sweep.
//!
//! A scene places a head `S(alpha_r)` in the world with a random similarity,
//! puts cameras on an orbit around it, projects the visible landmarks of the
//! frames near the frontal direction as keypoints, and builds a "dense
//! reconstruction" by jittering the head surface, punching holes and adding a
//! detached background cube.
//!
//! Random streams derived from the scene seed: 0 shape, 1 world transform,
//! 2 keypoint noise, 3 mesh jitter, 4 holes.

use std::collections::BTreeMap;

use nalgebra::{DVector, Rotation3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera_geom::{PerspectiveCamera, RigidTransform, SimilarityTransform};
use crate::error::{Error, Result};
use crate::mesh::{Triangle, TriangleMesh};
use crate::metrics::head_width;
use crate::pipeline::{run_pipeline, FitConfig, Keypoint, SceneInput};
use crate::rng::{derive_seed, SeededRng};
use crate::shape_model::{param_cosine_similarity, MorphableModel, ShapeParams};
use crate::shape_solver::Alignment;
use crate::{FrameId, Vec3};

const STREAM_SHAPE: u64 = 0;
const STREAM_TRANSFORM: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_JITTER: u64 = 3;
const STREAM_HOLES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Keypoint noise standard deviation, pixels.
    pub pixel_sigma: f64,
    /// Dense-mesh vertex jitter standard deviation as a fraction of head width.
    pub jitter: f64,
    /// Probability of deleting each dense-mesh triangle.
    pub hole_probability: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            pixel_sigma: 1.0,
            jitter: 0.003,
            hole_probability: 0.02,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            pixel_sigma: 0.0,
            jitter: 0.0,
            hole_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitSpec {
    pub frames: usize,
    /// Camera distance from the head origin in head widths.
    pub radius: f64,
    /// Elevation follows `amplitude * sin(2 azimuth)`, degrees.
    pub elevation_amplitude: f64,
    /// Frames within this azimuth of the face get keypoints, degrees.
    pub keypoint_azimuth_limit: f64,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            frames: 72,
            radius: 3.3,
            elevation_amplitude: 20.0,
            keypoint_azimuth_limit: 60.0,
            width: 1080,
            height: 1920,
            focal: 1500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ShapeSource {
    /// `alpha_j ~ N(0, scale^2 sigma_j)`.
    Prior { scale: f64 },
    /// A smooth bump on the upper scalp projected onto the basis.
    ScalpHeavy { amplitude: f64 },
    Mean,
    Explicit { alpha: ShapeParams },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub orbit: OrbitSpec,
    pub noise: NoiseSpec,
    pub shape: ShapeSource,
    /// Scale of model units in the world frame.
    pub world_scale: f64,
    pub background: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            orbit: OrbitSpec::default(),
            noise: NoiseSpec::default(),
            shape: ShapeSource::Prior { scale: 1.0 },
            world_scale: 1e-3,
            background: true,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let n = &self.noise;
        let o = &self.orbit;
        let ok = n.pixel_sigma >= 0.0
            && n.jitter >= 0.0
            && (0.0..1.0).contains(&n.hole_probability)
            && o.frames > 0
            && o.radius > 1.0
            && o.focal > 0.0
            && o.width > 0
            && o.height > 0
            && self.world_scale > 0.0;
        if !ok {
            return Err(Error::Validation("scene spec has out-of-range values".into()));
        }
        Ok(())
    }
}

/// Ground truth and the generated fitting input.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub alpha: ShapeParams,
    pub alignment: Alignment,
    /// Head width of the ground-truth head in world units.
    pub head_width: f64,
    /// Azimuth and elevation of each camera in the head frame, degrees.
    pub orbit_angles: BTreeMap<FrameId, (f64, f64)>,
    pub input: SceneInput,
}

fn scalp_bump(model: &MorphableModel, amplitude: f64, rng: &mut SeededRng) -> ShapeParams {
    let mean = model.mean_mesh();
    let top: std::collections::BTreeSet<usize> = model.top_region().iter().copied().collect();
    let centre_dir = crate::shape_model::builder_direction(rng.uniform_range(-180.0, 180.0), rng.uniform_range(55.0, 85.0));
    let width = rng.uniform_range(0.5, 0.8);
    let amp = amplitude * rng.uniform_range(0.7, 1.3);
    let nv = model.vertex_count();
    let mut field = DVector::zeros(3 * nv);
    for v in 0..nv {
        if !top.contains(&v) {
            continue;
        }
        let p = mean.vertices[v];
        let d = p.normalize();
        let w = amp * (-(d - centre_dir).norm_squared() / (2.0 * width * width)).exp();
        field.fixed_rows_mut::<3>(3 * v).copy_from(&(d * w));
    }
    // Weighted fit: the bump on the scalp, zero displacement elsewhere with the face held
    // hardest, so the deformation stays on top.
    let face: std::collections::BTreeSet<usize> = model.face_region().iter().copied().collect();
    let u = model.components();
    let mut weighted = u.clone();
    for v in 0..nv {
        let w = if top.contains(&v) {
            1.0
        } else if face.contains(&v) {
            4.0
        } else {
            0.5
        };
        for k in 0..3 {
            weighted.row_mut(3 * v + k).scale_mut(w);
            field[3 * v + k] *= w;
        }
    }
    let normal = weighted.transpose() * &weighted;
    let rhs = weighted.transpose() * field;
    // Orthonormal columns and positive weights keep the normal matrix definite.
    normal.cholesky().expect("weighted basis has full column rank").solve(&rhs).into()
}

/// Area-weighted vertex normals.
fn normals(vertices: &[Vec3], triangles: &[Triangle]) -> Vec<Vec3> {
    let mut n = vec![Vec3::zeros(); vertices.len()];
    for t in triangles {
        let [a, b, c] = t.map(|i| vertices[i as usize]);
        let f = (b - a).cross(&(c - a));
        for &i in t {
            n[i as usize] += f;
        }
    }
    n
}

fn cube(centre: Vec3, half: f64) -> (Vec<Vec3>, Vec<Triangle>) {
    let mut v = Vec::with_capacity(8);
    for i in 0..8 {
        let s = |b: usize| if i & b != 0 { half } else { -half };
        v.push(centre + Vec3::new(s(1), s(2), s(4)));
    }
    let faces: [[u32; 4]; 6] = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let t = faces.iter().flat_map(|f| [[f[0], f[1], f[2]], [f[0], f[2], f[3]]]).collect();
    (v, t)
}

pub fn generate_scene(model: &MorphableModel, spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut shape_rng = SeededRng::new(derive_seed(seed, STREAM_SHAPE));
    let alpha = match &spec.shape {
        ShapeSource::Prior { scale } => model.sample_random_shape(*scale, shape_rng.next_u64())?,
        ShapeSource::ScalpHeavy { amplitude } => scalp_bump(model, *amplitude, &mut shape_rng),
        ShapeSource::Mean => ShapeParams::zeros(model.n_components()),
        ShapeSource::Explicit { alpha } => {
            if alpha.len() != model.n_components() {
                return Err(Error::InvalidParams {
                    expected: model.n_components(),
                    actual: alpha.len(),
                });
            }
            alpha.clone()
        }
    };

    let mut trng = SeededRng::new(derive_seed(seed, STREAM_TRANSFORM));
    let rotation = Rotation3::new(trng.unit_vector() * trng.uniform_range(0.0, std::f64::consts::PI)).into_inner();
    let scale = spec.world_scale * trng.uniform_range(0.9, 1.1);
    let translation = Vec3::new(trng.normal(), trng.normal(), trng.normal()) * 0.5;
    let similarity = SimilarityTransform::new(scale, rotation, translation)?;
    let alignment = Alignment::new(similarity, RigidTransform::identity());
    let world = alignment.combined();

    let head = model.synthesize(&alpha)?;
    let world_vertices: Vec<Vec3> = head.vertices.iter().map(|p| world.apply(p)).collect();
    let width = head_width(&world_vertices, &model.regions())?;
    let centre = world.apply(&Vec3::zeros());
    let up = rotation * Vec3::y();
    let vnormals = normals(&world_vertices, &head.topology);

    let o = &spec.orbit;
    let mut noise = SeededRng::new(derive_seed(seed, STREAM_NOISE));
    let mut cameras = BTreeMap::new();
    let mut keypoints = BTreeMap::new();
    let mut orbit_angles = BTreeMap::new();
    for i in 0..o.frames {
        let az = 360.0 * i as f64 / o.frames as f64;
        let el = o.elevation_amplitude * (2.0 * az.to_radians()).sin();
        let dir = rotation * crate::shape_model::builder_direction(az, el);
        let eye = centre + dir * (o.radius * width);
        let cam = PerspectiveCamera::look_at(
            &eye,
            &centre,
            &up,
            o.focal,
            o.focal,
            o.width as f64 / 2.0,
            o.height as f64 / 2.0,
            o.width,
            o.height,
        )?;
        let id = i as FrameId;
        let signed_az = if az > 180.0 { az - 360.0 } else { az };
        if signed_az.abs() <= o.keypoint_azimuth_limit {
            let mut kps = Vec::new();
            for (name, v) in model.observable_landmarks() {
                let p = world_vertices[v];
                if vnormals[v].dot(&(eye - p)) <= 0.0 {
                    continue;
                }
                let px = cam.project(&p)?;
                let (du, dv) = (noise.normal(), noise.normal());
                kps.push(Keypoint {
                    id: name.to_string(),
                    u: px.x + spec.noise.pixel_sigma * du,
                    v: px.y + spec.noise.pixel_sigma * dv,
                });
            }
            keypoints.insert(id, kps);
        }
        cameras.insert(id, cam);
        orbit_angles.insert(id, (az, el));
    }

    let mut jitter = SeededRng::new(derive_seed(seed, STREAM_JITTER));
    let sigma = spec.noise.jitter * width;
    let mut dense_vertices: Vec<Vec3> = world_vertices
        .iter()
        .map(|p| {
            let d = Vec3::new(jitter.normal(), jitter.normal(), jitter.normal());
            if sigma > 0.0 {
                p + d * sigma
            } else {
                *p
            }
        })
        .collect();
    let mut holes = SeededRng::new(derive_seed(seed, STREAM_HOLES));
    let mut dense_triangles: Vec<Triangle> = head
        .topology
        .iter()
        .filter(|_| holes.uniform() >= spec.noise.hole_probability)
        .copied()
        .collect();
    if spec.background {
        let (cv, ct) = cube(centre - up * (5.0 * width), 0.5 * width);
        let off = dense_vertices.len() as u32;
        dense_vertices.extend(cv);
        dense_triangles.extend(ct.into_iter().map(|t| t.map(|i| i + off)));
    }
    let dense = TriangleMesh::new(dense_vertices, dense_triangles)?;

    Ok(SyntheticScene {
        alpha,
        alignment,
        head_width: width,
        orbit_angles,
        input: SceneInput {
            cameras,
            keypoints,
            dense,
            frontal_frame: 0,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub head: usize,
    pub lambda: f64,
    pub cosine: Option<f64>,
    pub delta_s: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub lambda: f64,
    pub mean_cosine: f64,
    pub mean_delta_s: f64,
    pub runs: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

/// Fits `n_heads` random heads for every lambda and records the cosine
/// similarity and the shape distance to the ground truth. Failed runs are
/// recorded, not propagated. Head `h` uses the scene seed
/// `derive_seed(seed, h)`.
pub fn lambda_sweep(
    model: &MorphableModel,
    lambdas: &[f64],
    n_heads: usize,
    spec: &SceneSpec,
    config: &FitConfig,
    seed: u64,
) -> Result<SweepReport> {
    if n_heads == 0 {
        return Err(Error::Validation("at least one head is required".into()));
    }
    if lambdas.is_empty() {
        return Err(Error::Validation("at least one lambda is required".into()));
    }
    let scenes: Vec<Result<SyntheticScene>> = (0..n_heads)
        .into_par_iter()
        .map(|h| generate_scene(model, spec, derive_seed(seed, h as u64)))
        .collect();
    let jobs: Vec<(usize, f64)> = (0..n_heads).flat_map(|h| lambdas.iter().map(move |&l| (h, l))).collect();
    let rows: Vec<SweepRow> = jobs
        .par_iter()
        .map(|&(head, lambda)| {
            let run = || -> Result<(f64, f64)> {
                let scene = scenes[head].as_ref().map_err(|e| Error::Validation(e.to_string()))?;
                let cfg = FitConfig { lambda, ..config.clone() };
                let fit = run_pipeline(model, &scene.input, &cfg)?;
                let cos = param_cosine_similarity(&scene.alpha, &fit.alpha_final).unwrap_or(0.0);
                Ok((cos, model.shape_distance(&scene.alpha, &fit.alpha_final)?))
            };
            match run() {
                Ok((c, d)) => SweepRow {
                    head,
                    lambda,
                    cosine: Some(c),
                    delta_s: Some(d),
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep head {head} lambda {lambda}: {e}");
                    SweepRow {
                        head,
                        lambda,
                        cosine: None,
                        delta_s: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let summary = lambdas
        .iter()
        .map(|&lambda| {
            let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.lambda == lambda && r.error.is_none()).collect();
            let n = ok.len().max(1) as f64;
            SweepSummary {
                lambda,
                mean_cosine: if ok.is_empty() { f64::NAN } else { ok.iter().filter_map(|r| r.cosine).sum::<f64>() / n },
                mean_delta_s: if ok.is_empty() { f64::NAN } else { ok.iter().filter_map(|r| r.delta_s).sum::<f64>() / n },
                runs: ok.len(),
                failures: n_heads - ok.len(),
            }
        })
        .collect();
    Ok(SweepReport { rows, summary })
}

/// Lambda values of the published regularization experiment.
pub const SWEEP_LAMBDAS: [f64; 9] = [0.1, 5.0, 10.0, 50.0, 100.0, 200.0, 1000.0, 2000.0, 10000.0];
