//! Evaluation measures: scalp Chamfer distance, landmark reprojection RMS,
//! anthropometric ratios and vertex-displacement consistency.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera_geom::{umeyama_fit, PerspectiveCamera};
use crate::error::{Error, Result};
use crate::mesh::{KdTree, TriangleMesh};
use crate::pipeline::Keypoint;
use crate::shape_model::{HeadMesh, HeadRegions, MorphableModel};
use crate::{FrameId, Vec2, Vec3};

/// Reference head width used to express normalized distances in millimetres.
pub const REFERENCE_HEAD_WIDTH_MM: f64 = 160.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub units: String,
    pub subset: String,
    pub frames: usize,
    pub count: usize,
}

/// Distance between the two lateral extremes of the top region, measured
/// along the ear-to-ear direction.
pub fn head_width(vertices: &[Vec3], regions: &HeadRegions<'_>) -> Result<f64> {
    let axis = vertices[regions.ear_left] - vertices[regions.ear_right];
    if !(axis.norm() > 0.0) {
        return Err(Error::Degenerate("ear anchors coincide".into()));
    }
    let axis = axis.normalize();
    let mut lo: Option<(f64, usize)> = None;
    let mut hi: Option<(f64, usize)> = None;
    for &v in regions.top {
        let s = vertices[v].dot(&axis);
        if lo.is_none_or(|(k, _)| s < k) {
            lo = Some((s, v));
        }
        if hi.is_none_or(|(k, _)| s > k) {
            hi = Some((s, v));
        }
    }
    match (lo, hi) {
        (Some((_, a)), Some((_, b))) if a != b => Ok((vertices[b] - vertices[a]).norm()),
        _ => Err(Error::Degenerate("top region has fewer than two vertices".into())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChamferOptions {
    pub head_width_mm: f64,
    /// Average with the reference-to-model direction, restricted to reference
    /// vertices whose nearest model vertex lies in the top region.
    pub symmetric: bool,
}

impl Default for ChamferOptions {
    fn default() -> Self {
        Self {
            head_width_mm: REFERENCE_HEAD_WIDTH_MM,
            symmetric: false,
        }
    }
}

/// Mean distance from each top-region vertex of `fitted` to the nearest
/// reference vertex, divided by the head width of `fitted` and expressed for
/// a head `head_width_mm` wide.
pub fn chamfer_scalp(
    fitted: &HeadMesh,
    reference: &TriangleMesh,
    regions: &HeadRegions<'_>,
    options: &ChamferOptions,
) -> Result<MetricReport> {
    if reference.vertices.is_empty() {
        return Err(Error::UndefinedInput("empty reference mesh".into()));
    }
    if regions.top.is_empty() {
        return Err(Error::UndefinedInput("empty top region".into()));
    }
    let width = head_width(&fitted.vertices, regions)?;
    let tree = KdTree::new(&reference.vertices);
    let forward: Vec<f64> = regions
        .top
        .par_iter()
        .map(|&v| tree.nearest(&fitted.vertices[v]).expect("non-empty tree").1.sqrt())
        .collect();
    let mut mean = forward.iter().sum::<f64>() / forward.len() as f64;
    let mut count = forward.len();
    if options.symmetric {
        let model_tree = KdTree::new(&fitted.vertices);
        let top: BTreeSet<usize> = regions.top.iter().copied().collect();
        let backward: Vec<Option<f64>> = reference
            .vertices
            .par_iter()
            .map(|p| {
                let (i, d2) = model_tree.nearest(p).expect("non-empty tree");
                top.contains(&i).then(|| d2.sqrt())
            })
            .collect();
        let back: Vec<f64> = backward.into_iter().flatten().collect();
        if !back.is_empty() {
            mean = 0.5 * (mean + back.iter().sum::<f64>() / back.len() as f64);
            count += back.len();
        }
    }
    Ok(MetricReport {
        metric: "chamfer".into(),
        value: mean / width * options.head_width_mm,
        units: "mm".into(),
        subset: if options.symmetric { "scalp-symmetric" } else { "scalp" }.into(),
        frames: 0,
        count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkSubset {
    All,
    NoJawline,
    JawlineOnly,
}

impl LandmarkSubset {
    fn name(self) -> &'static str {
        match self {
            LandmarkSubset::All => "all",
            LandmarkSubset::NoJawline => "no-jawline",
            LandmarkSubset::JawlineOnly => "jawline-only",
        }
    }
}

/// RMS distance in pixels between projected model landmarks of the
/// scene-aligned `fitted` mesh and the keypoints of `frames`.
pub fn rms_reprojection(
    model: &MorphableModel,
    fitted: &HeadMesh,
    cameras: &BTreeMap<FrameId, PerspectiveCamera>,
    keypoints: &BTreeMap<FrameId, Vec<Keypoint>>,
    frames: &[FrameId],
    subset: LandmarkSubset,
) -> Result<MetricReport> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut used = BTreeSet::new();
    for f in frames {
        let cam = cameras.get(f).ok_or_else(|| Error::Validation(format!("no camera for frame {f}")))?;
        let Some(kps) = keypoints.get(f) else { continue };
        for k in kps {
            let jaw = model.jawline().contains(&k.id);
            let keep = match subset {
                LandmarkSubset::All => true,
                LandmarkSubset::NoJawline => !jaw,
                LandmarkSubset::JawlineOnly => jaw,
            };
            if !keep {
                continue;
            }
            let v = model
                .landmark_vertex(&k.id)
                .ok_or_else(|| Error::Validation(format!("unknown keypoint id {:?}", k.id)))?;
            let px = cam.project(&fitted.vertices[v]).map_err(|e| match e {
                Error::BehindCamera { depth, .. } => Error::BehindCamera {
                    frame: Some(*f),
                    vertex: Some(v),
                    depth,
                },
                other => other,
            })?;
            sum += (px - Vec2::new(k.u, k.v)).norm_squared();
            count += 1;
            used.insert(*f);
        }
    }
    if count == 0 {
        return Err(Error::UndefinedInput(format!("no keypoints in subset {}", subset.name())));
    }
    Ok(MetricReport {
        metric: "rms_reprojection".into(),
        value: (sum / count as f64).sqrt(),
        units: "px".into(),
        subset: subset.name().into(),
        frames: used.len(),
        count,
    })
}

fn image_extent(vertices: &[Vec3], camera: &PerspectiveCamera) -> Result<(f64, f64)> {
    let mut lo = Vec2::repeat(f64::INFINITY);
    let mut hi = Vec2::repeat(f64::NEG_INFINITY);
    for p in vertices {
        let px = camera.project(p)?;
        lo = lo.inf(&px);
        hi = hi.sup(&px);
    }
    Ok((hi.x - lo.x, hi.y - lo.y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnthropometricRatios {
    pub height_over_width: f64,
    pub height_over_length: f64,
}

/// Image-space height over width in the portrait view and height over length
/// in the lateral view.
pub fn anthropometric_ratios(
    fitted: &HeadMesh,
    portrait: &PerspectiveCamera,
    lateral: &PerspectiveCamera,
) -> Result<AnthropometricRatios> {
    if fitted.vertices.is_empty() {
        return Err(Error::UndefinedInput("empty mesh".into()));
    }
    let (w, h) = image_extent(&fitted.vertices, portrait)?;
    let (l, h2) = image_extent(&fitted.vertices, lateral)?;
    if !(w > 0.0 && l > 0.0) {
        return Err(Error::Degenerate("zero projected extent".into()));
    }
    Ok(AnthropometricRatios {
        height_over_width: h / w,
        height_over_length: h2 / l,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// Mean displacement as a percentage of head width.
    pub head: f64,
    pub face: f64,
    pub scalp: f64,
}

/// Scales both fits to unit head width, aligns `b` to `a` rigidly over all
/// vertices, and reports the mean per-vertex displacement per region.
pub fn vertex_displacement_consistency(
    a: &HeadMesh,
    b: &HeadMesh,
    regions: &HeadRegions<'_>,
) -> Result<ConsistencyReport> {
    if a.vertices.len() != b.vertices.len() || a.topology != b.topology {
        return Err(Error::DimensionMismatch("fits do not share a topology".into()));
    }
    let normalize = |m: &HeadMesh| -> Result<Vec<Vec3>> {
        let w = head_width(&m.vertices, regions)?;
        let c = m.vertices.iter().sum::<Vec3>() / m.vertices.len() as f64;
        Ok(m.vertices.iter().map(|p| (p - c) / w).collect())
    };
    let (pa, pb) = (normalize(a)?, normalize(b)?);
    let sim = umeyama_fit(&pb, &pa)?;
    // Rigid part only: both shapes already share the unit head width, and the
    // centroids coincide, so the translation vanishes.
    let r = sim.rotation();
    let disp: Vec<f64> = pa.iter().zip(&pb).map(|(p, q)| (p - r * q).norm()).collect();
    let mean = |idx: &mut dyn Iterator<Item = usize>| {
        let (s, n) = idx.fold((0.0, 0usize), |(s, n), i| (s + disp[i], n + 1));
        if n == 0 {
            0.0
        } else {
            100.0 * s / n as f64
        }
    };
    Ok(ConsistencyReport {
        head: mean(&mut (0..disp.len())),
        face: mean(&mut regions.face.iter().copied()),
        scalp: mean(&mut regions.top.iter().copied()),
    })
}
