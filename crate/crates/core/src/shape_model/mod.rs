//! PCA morphable head model: `S(alpha) = mean + U * alpha`.

mod archive;
mod builder;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Triangle, TriangleMesh};
use crate::rng::SeededRng;
use crate::Vec3;

pub use archive::{read_archive, read_archive_bytes, write_archive, write_archive_bytes};
pub use builder::{icosphere, SyntheticModelSpec};
pub(crate) use builder::direction as builder_direction;

/// Everything needed to construct a [`MorphableModel`].
#[derive(Debug, Clone)]
pub struct ModelParts {
    pub mean_shape: DVector<f64>,
    pub components: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub landmarks: BTreeMap<String, usize>,
    /// Landmark ids of the left and right ear-level anchors. They are part of
    /// the landmark table but are never observed by a detector.
    pub ear_anchors: [String; 2],
    pub jawline: BTreeSet<String>,
    pub top_region: Vec<usize>,
    pub face_region: Vec<usize>,
    pub topology: Vec<Triangle>,
}

/// Statistical head prior. Immutable after construction.
#[derive(Debug, Clone)]
pub struct MorphableModel {
    mean_shape: DVector<f64>,
    components: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    landmarks: BTreeMap<String, usize>,
    ear_anchors: [String; 2],
    jawline: BTreeSet<String>,
    top_region: Vec<usize>,
    face_region: Vec<usize>,
    topology: Arc<[Triangle]>,
}

/// PCA coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeParams {
    pub alpha: Vec<f64>,
}

impl ShapeParams {
    pub fn zeros(n: usize) -> Self {
        Self { alpha: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.alpha.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.alpha)
    }
}

impl From<DVector<f64>> for ShapeParams {
    fn from(v: DVector<f64>) -> Self {
        Self {
            alpha: v.iter().copied().collect(),
        }
    }
}

/// Head surface sharing the model topology.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMesh {
    pub vertices: Vec<Vec3>,
    pub topology: Arc<[Triangle]>,
}

impl HeadMesh {
    pub fn transformed(&self, t: &crate::camera_geom::SimilarityTransform) -> Self {
        Self {
            vertices: self.vertices.iter().map(|p| t.apply(p)).collect(),
            topology: Arc::clone(&self.topology),
        }
    }

    pub fn to_triangle_mesh(&self) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.clone(),
            triangles: self.topology.to_vec(),
        }
    }
}

/// Vertex index sets used by the scalp features and the metrics.
#[derive(Debug, Clone, Copy)]
pub struct HeadRegions<'a> {
    pub top: &'a [usize],
    pub face: &'a [usize],
    pub ear_left: usize,
    pub ear_right: usize,
}

fn check_region(name: &str, region: &[usize], v: usize) -> Result<()> {
    if let Some(&bad) = region.iter().find(|&&i| i >= v) {
        return Err(Error::InvalidModel(format!(
            "{name} region index {bad} out of range for {v} vertices"
        )));
    }
    Ok(())
}

impl MorphableModel {
    pub fn new(parts: ModelParts) -> Result<Self> {
        let ModelParts {
            mean_shape,
            components,
            eigenvalues,
            landmarks,
            ear_anchors,
            jawline,
            mut top_region,
            mut face_region,
            topology,
        } = parts;
        if mean_shape.len() % 3 != 0 || mean_shape.is_empty() {
            return Err(Error::InvalidModel(format!(
                "mean shape length {} is not a positive multiple of 3",
                mean_shape.len()
            )));
        }
        let v = mean_shape.len() / 3;
        let n = eigenvalues.len();
        if components.nrows() != 3 * v || components.ncols() != n {
            return Err(Error::InvalidModel(format!(
                "components are {}x{}, expected {}x{}",
                components.nrows(),
                components.ncols(),
                3 * v,
                n
            )));
        }
        if eigenvalues.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidModel(
                "eigenvalues must be finite and strictly positive".into(),
            ));
        }
        if eigenvalues.as_slice().windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidModel("eigenvalues must be non-increasing".into()));
        }
        if !mean_shape.iter().chain(components.iter()).all(|x| x.is_finite()) {
            return Err(Error::InvalidModel("non-finite mean or component entry".into()));
        }
        for (id, &idx) in &landmarks {
            if idx >= v {
                return Err(Error::InvalidModel(format!(
                    "landmark {id} -> vertex {idx} out of range for {v} vertices"
                )));
            }
        }
        for id in ear_anchors.iter().chain(jawline.iter()) {
            if !landmarks.contains_key(id) {
                return Err(Error::InvalidModel(format!(
                    "id {id} is not in the landmark table"
                )));
            }
        }
        if jawline.iter().any(|id| ear_anchors.contains(id)) {
            return Err(Error::InvalidModel("ear anchors cannot be jawline landmarks".into()));
        }
        top_region.sort_unstable();
        top_region.dedup();
        face_region.sort_unstable();
        face_region.dedup();
        check_region("top", &top_region, v)?;
        check_region("face", &face_region, v)?;
        if let Some(t) = topology.iter().find(|t| t.iter().any(|&i| i as usize >= v)) {
            return Err(Error::InvalidModel(format!(
                "triangle {t:?} out of range for {v} vertices"
            )));
        }
        Ok(Self {
            mean_shape,
            components,
            eigenvalues,
            landmarks,
            ear_anchors,
            jawline,
            top_region,
            face_region,
            topology: topology.into(),
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn mean_shape(&self) -> &DVector<f64> {
        &self.mean_shape
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn landmarks(&self) -> &BTreeMap<String, usize> {
        &self.landmarks
    }

    pub fn landmark_vertex(&self, id: &str) -> Option<usize> {
        self.landmarks.get(id).copied()
    }

    pub fn ear_anchors(&self) -> &[String; 2] {
        &self.ear_anchors
    }

    pub fn jawline(&self) -> &BTreeSet<String> {
        &self.jawline
    }

    pub fn is_anchor(&self, id: &str) -> bool {
        self.ear_anchors.iter().any(|a| a == id)
    }

    /// Landmarks a detector can observe (everything except the anchors), in id order.
    pub fn observable_landmarks(&self) -> impl Iterator<Item = (&str, usize)> {
        self.landmarks
            .iter()
            .filter(|(id, _)| !self.is_anchor(id))
            .map(|(id, &v)| (id.as_str(), v))
    }

    pub fn top_region(&self) -> &[usize] {
        &self.top_region
    }

    pub fn face_region(&self) -> &[usize] {
        &self.face_region
    }

    pub fn regions(&self) -> HeadRegions<'_> {
        HeadRegions {
            top: &self.top_region,
            face: &self.face_region,
            ear_left: self.landmarks[&self.ear_anchors[0]],
            ear_right: self.landmarks[&self.ear_anchors[1]],
        }
    }

    pub fn topology(&self) -> &Arc<[Triangle]> {
        &self.topology
    }

    pub fn mean_vertex(&self, v: usize) -> Vec3 {
        Vec3::new(
            self.mean_shape[3 * v],
            self.mean_shape[3 * v + 1],
            self.mean_shape[3 * v + 2],
        )
    }

    /// The three component rows of vertex `v` (3 x n_alpha).
    pub fn component_rows(&self, v: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.components.rows(3 * v, 3)
    }

    fn check_params(&self, params: &ShapeParams) -> Result<()> {
        if params.len() != self.n_components() {
            return Err(Error::InvalidParams {
                expected: self.n_components(),
                actual: params.len(),
            });
        }
        Ok(())
    }

    pub fn synthesize(&self, params: &ShapeParams) -> Result<HeadMesh> {
        self.check_params(params)?;
        let flat = &self.mean_shape + &self.components * params.as_dvector();
        Ok(HeadMesh {
            vertices: flat
                .as_slice()
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
            topology: Arc::clone(&self.topology),
        })
    }

    pub fn mean_mesh(&self) -> HeadMesh {
        self.synthesize(&ShapeParams::zeros(self.n_components()))
            .expect("zero parameters have the right length")
    }

    /// Vertex `v` of `S(alpha)` without synthesizing the full mesh.
    pub fn vertex(&self, params: &ShapeParams, v: usize) -> Vec3 {
        self.mean_vertex(v) + self.component_rows(v) * params.as_dvector()
    }

    /// Draws `alpha_j ~ N(0, scale^2 * eigenvalue_j)` from the stream `seed`.
    pub fn sample_random_shape(&self, scale: f64, seed: u64) -> Result<ShapeParams> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::UndefinedInput(format!(
                "sampling scale must be positive, got {scale}"
            )));
        }
        let mut rng = SeededRng::new(seed);
        Ok(ShapeParams {
            alpha: self
                .eigenvalues
                .iter()
                .map(|&ev| scale * ev.sqrt() * rng.normal())
                .collect(),
        })
    }

    /// `|S(a) - S(b)|^2` summed over all vertices.
    pub fn shape_distance(&self, a: &ShapeParams, b: &ShapeParams) -> Result<f64> {
        self.check_params(a)?;
        self.check_params(b)?;
        let diff = a.as_dvector() - b.as_dvector();
        Ok((&self.components * diff).norm_squared())
    }
}

/// Free-function form of [`MorphableModel::synthesize`].
pub fn synthesize(model: &MorphableModel, params: &ShapeParams) -> Result<HeadMesh> {
    model.synthesize(params)
}

pub fn sample_random_shape(model: &MorphableModel, scale: f64, seed: u64) -> Result<ShapeParams> {
    model.sample_random_shape(scale, seed)
}

pub fn shape_distance(model: &MorphableModel, a: &ShapeParams, b: &ShapeParams) -> Result<f64> {
    model.shape_distance(a, b)
}

pub fn param_cosine_similarity(a: &ShapeParams, b: &ShapeParams) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedInput("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.alpha.iter().zip(&b.alpha).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
