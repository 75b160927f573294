//! Pinhole cameras, similarity and rigid transforms, Umeyama alignment.
//!
//! Conventions: extrinsics map world to camera (`x_c = R x_w + t`), the camera
//! looks along +z, and pixel `(u, v)` is (column, row) with the origin at the
//! top-left corner of the image. Pixel `(c, r)` covers `[c, c+1) x [r, r+1)`.

use nalgebra::{Matrix3, Rotation3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Vec2, Vec3};

/// Depths below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

const ROTATION_TOL: f64 = 1e-9;

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let err = (r.transpose() * r - Matrix3::identity()).amax();
    err <= tol && (r.determinant() - 1.0).abs() <= tol && r.iter().all(|x| x.is_finite())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveCamera {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vec3,
    width: u32,
    height: u32,
}

impl PerspectiveCamera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vec3,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let k = &intrinsics;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidCamera(
                "intrinsics must be upper triangular with K[2][2] = 1".into(),
            ));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || !k.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive and finite (fx = {}, fy = {})",
                k[(0, 0)],
                k[(1, 1)]
            )));
        }
        if !is_rotation(&rotation, ROTATION_TOL) {
            return Err(Error::InvalidCamera(format!(
                "rotation is not proper orthonormal (det = {:.12})",
                rotation.determinant()
            )));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidCamera("translation is not finite".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("image size must be non-zero".into()));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_params(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vec3,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        Self::new(k, rotation, translation, width, height)
    }

    /// Camera at `eye` looking at `target`, with `up` pointing towards the top
    /// of the image.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: &Vec3,
        target: &Vec3,
        up: &Vec3,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let z = (target - eye).normalize();
        let down = -(up - z * up.dot(&z));
        if down.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up vector parallel to the viewing direction".into()));
        }
        let y = down.normalize();
        let x = y.cross(&z);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self::from_params(fx, fy, cx, cy, r, -(r * eye), width, height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    pub fn skew(&self) -> f64 {
        self.intrinsics[(0, 1)]
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn project_camera_point(&self, p: &Vec3) -> Result<Vec2> {
        if !(p.z >= MIN_DEPTH) {
            return Err(Error::BehindCamera {
                frame: None,
                vertex: None,
                depth: p.z,
            });
        }
        let k = &self.intrinsics;
        Ok(Vec2::new(
            (k[(0, 0)] * p.x + k[(0, 1)] * p.y) / p.z + k[(0, 2)],
            k[(1, 1)] * p.y / p.z + k[(1, 2)],
        ))
    }

    pub fn project(&self, p: &Vec3) -> Result<Vec2> {
        self.project_camera_point(&self.world_to_camera(p))
    }

    /// Camera-frame point on the ray through `pixel` at depth `depth`.
    pub fn backproject(&self, pixel: &Vec2, depth: f64) -> Result<Vec3> {
        if !(depth >= MIN_DEPTH) || !depth.is_finite() {
            return Err(Error::BehindCamera {
                frame: None,
                vertex: None,
                depth,
            });
        }
        let y = (pixel.y - self.cy()) / self.fy();
        let x = (pixel.x - self.cx() - self.skew() * y) / self.fx();
        Ok(Vec3::new(x * depth, y * depth, depth))
    }

    /// World-space ray (origin, unit direction) through `pixel`.
    pub fn pixel_ray(&self, pixel: &Vec2) -> (Vec3, Vec3) {
        let p = self.backproject(pixel, 1.0).expect("unit depth is valid");
        (self.center(), (self.rotation.transpose() * p).normalize())
    }
}

/// `x -> scale * R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "TransformRecord", try_from = "TransformRecord")]
pub struct SimilarityTransform {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vec3,
}

/// `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "TransformRecord", try_from = "TransformRecord")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

/// Serialized form shared by both transforms; rotation is row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransformRecord {
    #[serde(default = "one", skip_serializing_if = "is_one")]
    scale: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
}

fn one() -> f64 {
    1.0
}

fn is_one(x: &f64) -> bool {
    *x == 1.0
}

fn rows(m: &Matrix3<f64>) -> [f64; 9] {
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}

impl From<SimilarityTransform> for TransformRecord {
    fn from(t: SimilarityTransform) -> Self {
        Self {
            scale: t.scale,
            rotation: rows(&t.rotation),
            translation: t.translation.into(),
        }
    }
}

impl TryFrom<TransformRecord> for SimilarityTransform {
    type Error = Error;
    fn try_from(r: TransformRecord) -> Result<Self> {
        Self::new(r.scale, Matrix3::from_row_slice(&r.rotation), r.translation.into())
    }
}

impl From<RigidTransform> for TransformRecord {
    fn from(t: RigidTransform) -> Self {
        Self {
            scale: 1.0,
            rotation: rows(&t.rotation),
            translation: t.translation.into(),
        }
    }
}

impl TryFrom<TransformRecord> for RigidTransform {
    type Error = Error;
    fn try_from(r: TransformRecord) -> Result<Self> {
        if r.scale != 1.0 {
            return Err(Error::Validation("rigid transform with non-unit scale".into()));
        }
        Self::new(Matrix3::from_row_slice(&r.rotation), r.translation.into())
    }
}

impl std::fmt::Display for TransformRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Validation(format!("similarity scale must be positive, got {scale}")));
        }
        if !is_rotation(&rotation, ROTATION_TOL) {
            return Err(Error::Validation("similarity rotation is not proper orthonormal".into()));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    /// Inverse mapping without building the inverse transform.
    pub fn apply_inverse(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation) / self.scale
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !is_rotation(&rotation, ROTATION_TOL) {
            return Err(Error::Validation("rigid rotation is not proper orthonormal".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// From axis-angle (first three) and translation (last three).
    pub fn from_params(p: &[f64; 6]) -> Self {
        let w = Vec3::new(p[0], p[1], p[2]);
        Self {
            rotation: Rotation3::new(w).into_inner(),
            translation: Vec3::new(p[3], p[4], p[5]),
        }
    }

    pub fn params(&self) -> [f64; 6] {
        let w = Rotation3::from_matrix_unchecked(self.rotation).scaled_axis();
        [w.x, w.y, w.z, self.translation.x, self.translation.y, self.translation.z]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// `self ∘ sim`.
    pub fn then_after(&self, sim: &SimilarityTransform) -> SimilarityTransform {
        self.as_similarity().compose(sim)
    }

    pub fn as_similarity(&self) -> SimilarityTransform {
        SimilarityTransform {
            scale: 1.0,
            rotation: self.rotation,
            translation: self.translation,
        }
    }
}

/// Least-squares similarity minimizing `sum |s R p_i + t - q_i|^2`, with the
/// reflection case folded into a proper rotation.
pub fn umeyama_fit(source: &[Vec3], target: &[Vec3]) -> Result<SimilarityTransform> {
    if source.len() != target.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} source points vs {} target points",
            source.len(),
            target.len()
        )));
    }
    let n = source.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("{n} point pairs, at least 3 required")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = source.iter().sum::<Vec3>() * inv_n;
    let mu_t = target.iter().sum::<Vec3>() * inv_n;
    let mut sigma_s = 0.0;
    let mut cov = Matrix3::zeros();
    for (p, q) in source.iter().zip(target) {
        let ps = p - mu_s;
        let qt = q - mu_t;
        sigma_s += ps.norm_squared();
        cov += qt * ps.transpose();
    }
    sigma_s *= inv_n;
    cov *= inv_n;
    if !(sigma_s > 0.0) || !cov.iter().all(|x| x.is_finite()) {
        return Err(Error::Degenerate("source points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = svd.singular_values;
    // nalgebra does not sort 3x3 singular values; order them descending.
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let u = Matrix3::from_columns(&[u.column(idx[0]), u.column(idx[1]), u.column(idx[2])]);
    let vt = Matrix3::from_rows(&[vt.row(idx[0]), vt.row(idx[1]), vt.row(idx[2])]);
    d = Vec3::new(d[idx[0]], d[idx[1]], d[idx[2]]);
    if d[1] <= 1e-12 * d[0] || d[0] <= 0.0 {
        return Err(Error::Degenerate(format!(
            "rank-deficient cross-covariance (singular values {:.3e}, {:.3e}, {:.3e})",
            d[0], d[1], d[2]
        )));
    }
    let mut s = Vec3::new(1.0, 1.0, 1.0);
    if (u.determinant() * vt.determinant()) < 0.0 {
        s[2] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s) * vt;
    let scale = d.component_mul(&s).sum() / sigma_s;
    if !(scale > 0.0) {
        return Err(Error::Degenerate(format!("non-positive scale {scale}")));
    }
    let translation = mu_t - scale * (rotation * mu_s);
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Sum of squared residuals `|T p_i - q_i|^2`.
pub fn alignment_residual(t: &SimilarityTransform, source: &[Vec3], target: &[Vec3]) -> f64 {
    source
        .iter()
        .zip(target)
        .map(|(p, q)| (t.apply(p) - q).norm_squared())
        .sum()
}

/// Azimuth and elevation (degrees) of the camera centre in the head frame
/// given by `head_frame` (model to world). Azimuth is measured about the head
/// +y axis from +z (the face direction) towards +x; elevation from the
/// horizontal plane through the head origin.
pub fn camera_head_angles(camera: &PerspectiveCamera, head_frame: &SimilarityTransform) -> Result<(f64, f64)> {
    let c = head_frame.apply_inverse(&camera.center());
    let horiz = c.x.hypot(c.z);
    if c.norm() < 1e-12 {
        return Err(Error::Degenerate("camera centre coincides with the head origin".into()));
    }
    Ok((c.x.atan2(c.z).to_degrees(), c.y.atan2(horiz).to_degrees()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn rot_z(deg: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians()).into_inner()
    }

    fn test_camera() -> PerspectiveCamera {
        PerspectiveCamera::from_params(1000.0, 1000.0, 960.0, 540.0, Matrix3::identity(), Vec3::zeros(), 1920, 1080)
            .unwrap()
    }

    fn random_similarity(rng: &mut SeededRng) -> SimilarityTransform {
        let axis = rng.unit_vector();
        let angle = rng.uniform_range(-3.0, 3.0);
        SimilarityTransform::new(
            rng.uniform_range(0.2, 5.0),
            Rotation3::new(axis * angle).into_inner(),
            Vec3::new(rng.normal(), rng.normal(), rng.normal()) * 3.0,
        )
        .unwrap()
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = test_camera();
        let p = cam.project(&Vec3::new(0.0, 0.0, 7.0)).unwrap();
        assert_eq!(p, Vec2::new(960.0, 540.0));
    }

    #[test]
    fn hand_computed_projection() {
        let p = test_camera().project(&Vec3::new(0.1, 0.2, 2.0)).unwrap();
        assert!((p - Vec2::new(1010.0, 640.0)).norm() < 1e-12);
    }

    #[test]
    fn behind_camera_rejected() {
        let cam = test_camera();
        assert!(matches!(cam.project(&Vec3::new(0.0, 0.0, -1.0)), Err(Error::BehindCamera { .. })));
        assert!(cam.project(&Vec3::new(0.0, 0.0, 1e-10)).is_err());
        assert!(cam.backproject(&Vec2::new(1.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn backprojection_cases() {
        let cam = test_camera();
        assert_eq!(cam.backproject(&Vec2::new(960.0, 540.0), 3.5).unwrap(), Vec3::new(0.0, 0.0, 3.5));
        // Skewed intrinsics, inverted with a generic 3x3 solve.
        let k = Matrix3::new(800.0, 3.0, 310.0, 0.0, 820.0, 250.0, 0.0, 0.0, 1.0);
        let cam = PerspectiveCamera::new(k, Matrix3::identity(), Vec3::zeros(), 640, 480).unwrap();
        let px = Vec2::new(123.4, 456.7);
        let depth = 2.75;
        let ray = k.lu().solve(&Vec3::new(px.x, px.y, 1.0)).unwrap();
        let expected = ray * (depth / ray.z);
        assert!((cam.backproject(&px, depth).unwrap() - expected).norm() < 1e-12);
    }

    #[test]
    fn projection_round_trips() {
        let mut rng = SeededRng::new(17);
        for _ in 0..100 {
            let r = Rotation3::new(rng.unit_vector() * rng.uniform_range(0.0, 3.0)).into_inner();
            let cam = PerspectiveCamera::from_params(900.0, 950.0, 320.0, 240.0, r, Vec3::new(0.1, -0.2, 5.0), 640, 480)
                .unwrap();
            let pc = Vec3::new(rng.normal(), rng.normal(), rng.uniform_range(1.0, 10.0));
            let pw = cam.camera_to_world(&pc);
            let px = cam.project(&pw).unwrap();
            let back = cam.camera_to_world(&cam.backproject(&px, pc.z).unwrap());
            assert!((back - pw).norm() < 1e-10);
            let px2 = cam.project_camera_point(&cam.backproject(&px, 3.0).unwrap()).unwrap();
            assert!((px2 - px).norm() < 1e-9);
        }
    }

    #[test]
    fn invalid_cameras_rejected() {
        let reflect = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(PerspectiveCamera::from_params(1.0, 1.0, 0.0, 0.0, reflect, Vec3::zeros(), 10, 10).is_err());
        assert!(PerspectiveCamera::from_params(-1.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vec3::zeros(), 10, 10).is_err());
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let cam = PerspectiveCamera::look_at(
            &Vec3::new(3.0, 1.0, 4.0),
            &Vec3::new(0.5, 0.0, 0.0),
            &Vec3::y(),
            500.0,
            500.0,
            320.0,
            240.0,
            640,
            480,
        )
        .unwrap();
        let p = cam.project(&Vec3::new(0.5, 0.0, 0.0)).unwrap();
        assert!((p - Vec2::new(320.0, 240.0)).norm() < 1e-9);
        // Points above the target appear above the image centre.
        assert!(cam.project(&Vec3::new(0.5, 0.5, 0.0)).unwrap().y < 240.0);
    }

    #[test]
    fn umeyama_identity_and_translation() {
        let mut rng = SeededRng::new(1);
        let src: Vec<Vec3> = (0..10).map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal())).collect();
        let t = umeyama_fit(&src, &src).unwrap();
        assert!((t.scale() - 1.0).abs() < 1e-12);
        assert!((t.rotation() - Matrix3::identity()).amax() < 1e-12);
        assert!(t.translation().norm() < 1e-12);
        let shift = Vec3::new(1.0, 2.0, 3.0);
        let dst: Vec<Vec3> = src.iter().map(|p| p + shift).collect();
        let t = umeyama_fit(&src, &dst).unwrap();
        assert!((t.translation() - shift).norm() < 1e-12);
        assert!((t.scale() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn umeyama_recovers_composed_similarity() {
        let mut rng = SeededRng::new(2);
        let src: Vec<Vec3> = (0..25).map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal())).collect();
        let truth = SimilarityTransform::new(2.0, rot_z(90.0), Vec3::new(0.0, 0.0, 5.0)).unwrap();
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let t = umeyama_fit(&src, &dst).unwrap();
        assert!((t.scale() - 2.0).abs() < 1e-9);
        assert!((t.rotation() - rot_z(90.0)).amax() < 1e-9);
        assert!((t.translation() - Vec3::new(0.0, 0.0, 5.0)).norm() < 1e-9);
        assert!(alignment_residual(&t, &src, &dst) < 1e-9);
    }

    #[test]
    fn umeyama_handles_reflection_case() {
        // Target is a mirror image: the best proper rotation still has det +1.
        let mut rng = SeededRng::new(8);
        let src: Vec<Vec3> = (0..12).map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal())).collect();
        let dst: Vec<Vec3> = src.iter().map(|p| Vec3::new(p.x, p.y, -p.z)).collect();
        let t = umeyama_fit(&src, &dst).unwrap();
        assert!((t.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn umeyama_is_optimal_against_perturbations() {
        let mut rng = SeededRng::new(3);
        let src: Vec<Vec3> = (0..30).map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal())).collect();
        let truth = random_similarity(&mut rng);
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p) + Vec3::new(rng.normal(), rng.normal(), rng.normal()) * 0.1).collect();
        let best = umeyama_fit(&src, &dst).unwrap();
        let r0 = alignment_residual(&best, &src, &dst);
        for _ in 0..100 {
            let d = Rotation3::new(rng.unit_vector() * rng.uniform_range(0.0, 0.05)).into_inner();
            let pert = SimilarityTransform::new(
                best.scale() * (1.0 + 0.02 * rng.normal()),
                d * best.rotation(),
                best.translation() + Vec3::new(rng.normal(), rng.normal(), rng.normal()) * 0.01,
            )
            .unwrap();
            assert!(r0 <= alignment_residual(&pert, &src, &dst));
        }
    }

    #[test]
    fn umeyama_degenerate_inputs() {
        let p = [Vec3::zeros(), Vec3::x()];
        assert!(matches!(umeyama_fit(&p, &p), Err(Error::Degenerate(_))));
        let collinear: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(umeyama_fit(&collinear, &collinear), Err(Error::Degenerate(_))));
        assert!(umeyama_fit(&collinear[..3], &collinear[..4]).is_err());
    }

    #[test]
    fn head_angles() {
        let head = SimilarityTransform::new(2.0, rot_z(30.0), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let place = |local: Vec3| {
            let eye = head.apply(&local);
            PerspectiveCamera::look_at(&eye, &head.apply(&Vec3::zeros()), &(head.rotation() * Vec3::z()), 100.0, 100.0, 50.0, 50.0, 100, 100)
                .or_else(|_| PerspectiveCamera::look_at(&eye, &head.apply(&Vec3::zeros()), &(head.rotation() * Vec3::y()), 100.0, 100.0, 50.0, 50.0, 100, 100))
                .unwrap()
        };
        let (az, el) = camera_head_angles(&place(Vec3::new(0.0, 0.0, 5.0)), &head).unwrap();
        assert!(az.abs() < 1e-9 && el.abs() < 1e-9);
        let (_, el) = camera_head_angles(&place(Vec3::new(0.0, 5.0, 0.0)), &head).unwrap();
        assert!((el - 90.0).abs() < 1e-9);
        let s = std::f64::consts::FRAC_1_SQRT_2 * 5.0;
        let (az, el) = camera_head_angles(&place(Vec3::new(s, 0.0, s)), &head).unwrap();
        assert!((az - 45.0).abs() < 1e-6 && el.abs() < 1e-9);
    }

    #[test]
    fn transform_serde_round_trip() {
        let mut rng = SeededRng::new(4);
        let t = random_similarity(&mut rng);
        let json = serde_json::to_string(&t).unwrap();
        let back: SimilarityTransform = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        let r = RigidTransform::from_params(&[0.1, -0.2, 0.3, 1.0, 2.0, 3.0]);
        let back: RigidTransform = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(serde_json::from_str::<SimilarityTransform>(
            r#"{"scale":1,"rotation":[1,0,0,0,1,0,0,0,-1],"translation":[0,0,0]}"#
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn composition_is_associative(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let (a, b, c) = (random_similarity(&mut rng), random_similarity(&mut rng), random_similarity(&mut rng));
            let p = Vec3::new(rng.normal(), rng.normal(), rng.normal());
            let lhs = a.compose(&b).compose(&c).apply(&p);
            let rhs = a.compose(&b.compose(&c)).apply(&p);
            prop_assert!((lhs - rhs).norm() < 1e-9 * (1.0 + lhs.norm()));
        }

        #[test]
        fn inverse_round_trips(seed in any::<u64>()) {
            let mut rng = SeededRng::new(seed);
            let a = random_similarity(&mut rng);
            let p = Vec3::new(rng.normal(), rng.normal(), rng.normal());
            prop_assert!((a.inverse().apply(&a.apply(&p)) - p).norm() < 1e-9);
            prop_assert!((a.apply_inverse(&a.apply(&p)) - p).norm() < 1e-9);
            let r = RigidTransform::from_params(&[rng.normal(), rng.normal(), rng.normal(), rng.normal(), rng.normal(), rng.normal()]);
            prop_assert!((r.inverse().apply(&r.apply(&p)) - p).norm() < 1e-9);
            let back = RigidTransform::from_params(&r.params());
            prop_assert!((back.rotation() - r.rotation()).amax() < 1e-9);
        }
    }
}
