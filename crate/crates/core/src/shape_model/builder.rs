//! Deterministic synthetic head model.
//!
//! The mean head is an ellipsoid tessellated from a subdivided icosahedron
//! (x: lateral, y: up, z: towards the face). The deformation basis is made of
//! radial displacement fields following real spherical harmonics of increasing
//! degree, with the seven infinitesimal similarity motions of the mean
//! (translation, rotation, uniform scale) projected out, then orthonormalized.
//! Eigenvalues decay as a power of the component index.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ModelParts, MorphableModel};
use crate::error::{Error, Result};
use crate::mesh::Triangle;
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticModelSpec {
    /// Icosahedron subdivision level; level 4 gives 2562 vertices.
    pub subdivisions: u32,
    pub n_components: usize,
    /// Semi-axes (lateral, vertical, front-back) in model units.
    /// Millimetres; the default is a 156 x 200 x 190 mm head.
    pub semi_axes: [f64; 3],
    /// RMS per-vertex displacement of the first component at one standard deviation.
    pub leading_rms: f64,
    /// Standard deviation of component j is proportional to (1 + j)^-decay.
    pub decay: f64,
    /// Extra landmarks spread uniformly over the whole head (`aux_###`).
    pub aux_landmarks: usize,
}

impl Default for SyntheticModelSpec {
    fn default() -> Self {
        Self {
            subdivisions: 4,
            n_components: 30,
            semi_axes: [78.0, 100.0, 95.0],
            leading_rms: 3.6,
            decay: 0.5,
            aux_landmarks: 0,
        }
    }
}

/// Direction from azimuth (about +y, from +z towards +x) and elevation, degrees.
pub(crate) fn direction(azimuth_deg: f64, elevation_deg: f64) -> Vec3 {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    Vec3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos())
}

fn facial_landmark_layout() -> Vec<(String, f64, f64)> {
    let mut out = Vec::new();
    let mut push = |prefix: &str, pts: &[(f64, f64)]| {
        for (i, &(az, el)) in pts.iter().enumerate() {
            out.push((format!("{prefix}_{i:02}"), az, el));
        }
    };
    let jaw: Vec<(f64, f64)> = (0..9).map(|i| (-60.0 + 15.0 * i as f64, -40.0)).collect();
    push("jaw", &jaw);
    push(
        "brow",
        &[(-35.0, 22.0), (-25.0, 22.0), (-15.0, 22.0), (15.0, 22.0), (25.0, 22.0), (35.0, 22.0)],
    );
    push(
        "eye",
        &[(-32.0, 10.0), (-24.0, 10.0), (-16.0, 10.0), (16.0, 10.0), (24.0, 10.0), (32.0, 10.0)],
    );
    push(
        "nose",
        &[(0.0, 12.0), (0.0, 4.0), (0.0, -4.0), (-8.0, -10.0), (0.0, -10.0), (8.0, -10.0)],
    );
    push(
        "mouth",
        &[(-15.0, -22.0), (-8.0, -22.0), (0.0, -22.0), (8.0, -22.0), (15.0, -22.0), (0.0, -28.0)],
    );
    out
}

/// Unit icosphere with outward-facing (counter-clockwise) triangles.
pub fn icosphere(subdivisions: u32) -> (Vec<Vec3>, Vec<Triangle>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut tris: Vec<Triangle> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut mid = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) / 2.0).normalize());
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(tris.len() * 4);
        for &[a, b, c] in &tris {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        tris = next;
    }
    (verts, tris)
}

fn factorial_ratio(l: usize, m: usize) -> f64 {
    // (l - m)! / (l + m)!
    ((l - m + 1)..=(l + m)).fold(1.0, |acc, k| acc / k as f64)
}

/// Real, orthonormal spherical harmonics up to `max_degree` at direction `d`
/// (polar axis +y), ordered by degree then order `m = -l..=l`.
fn real_harmonics(d: &Vec3, max_degree: usize) -> Vec<f64> {
    let x = d.y.clamp(-1.0, 1.0);
    let phi = d.x.atan2(d.z);
    let s = (1.0 - x * x).max(0.0).sqrt();
    // Associated Legendre P[l][m].
    let mut p = vec![vec![0.0; max_degree + 1]; max_degree + 1];
    p[0][0] = 1.0;
    for m in 1..=max_degree {
        p[m][m] = -(2.0 * m as f64 - 1.0) * s * p[m - 1][m - 1];
    }
    for m in 0..max_degree {
        p[m + 1][m] = x * (2.0 * m as f64 + 1.0) * p[m][m];
    }
    for m in 0..=max_degree {
        for l in (m + 2)..=max_degree {
            p[l][m] = ((2.0 * l as f64 - 1.0) * x * p[l - 1][m] - (l + m - 1) as f64 * p[l - 2][m])
                / (l - m) as f64;
        }
    }
    let mut out = Vec::with_capacity((max_degree + 1) * (max_degree + 1));
    for l in 0..=max_degree {
        for mm in -(l as i64)..=(l as i64) {
            let m = mm.unsigned_abs() as usize;
            let k = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial_ratio(l, m)).sqrt();
            let val = match mm.cmp(&0) {
                std::cmp::Ordering::Equal => k * p[l][0],
                std::cmp::Ordering::Greater => std::f64::consts::SQRT_2 * k * p[l][m] * (m as f64 * phi).cos(),
                std::cmp::Ordering::Less => std::f64::consts::SQRT_2 * k * p[l][m] * (m as f64 * phi).sin(),
            };
            out.push(val);
        }
    }
    out
}

/// Gram–Schmidt (two passes) of `v` against `basis`. Returns the normalized
/// remainder if it keeps more than `rel_tol` of the original norm.
fn orthonormalize(v: &DVector<f64>, basis: &[DVector<f64>], rel_tol: f64) -> Option<DVector<f64>> {
    let norm0 = v.norm();
    let mut r = v.clone();
    for _ in 0..2 {
        for q in basis {
            let c = q.dot(&r);
            r.axpy(-c, q, 1.0);
        }
    }
    let n = r.norm();
    (n > rel_tol * norm0).then(|| r / n)
}

fn nearest_direction(dirs: &[Vec3], target: &Vec3, taken: &BTreeSet<usize>) -> usize {
    let t = target.normalize();
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, d) in dirs.iter().enumerate() {
        if taken.contains(&i) {
            continue;
        }
        let c = d.dot(&t);
        if c > best.1 {
            best = (i, c);
        }
    }
    best.0
}

impl SyntheticModelSpec {
    pub fn build(&self) -> Result<MorphableModel> {
        if self.n_components == 0 {
            return Err(Error::InvalidModel("at least one component is required".into()));
        }
        if self.subdivisions > 7 {
            return Err(Error::InvalidModel("subdivision level above 7 is not supported".into()));
        }
        if self.semi_axes.iter().any(|&a| !(a > 0.0)) || !(self.leading_rms > 0.0) {
            return Err(Error::InvalidModel("semi-axes and leading_rms must be positive".into()));
        }
        let (dirs, topology) = icosphere(self.subdivisions);
        let nv = dirs.len();
        let [a, b, c] = self.semi_axes;
        let mean_pts: Vec<Vec3> = dirs.iter().map(|d| Vec3::new(a * d.x, b * d.y, c * d.z)).collect();
        let normals: Vec<Vec3> = dirs
            .iter()
            .map(|d| Vec3::new(d.x / a, d.y / b, d.z / c).normalize())
            .collect();

        let flatten = |f: &dyn Fn(usize) -> Vec3| -> DVector<f64> {
            let mut out = DVector::zeros(3 * nv);
            for v in 0..nv {
                let x = f(v);
                out.fixed_rows_mut::<3>(3 * v).copy_from(&x);
            }
            out
        };

        // Infinitesimal similarity motions of the mean shape.
        let mut basis: Vec<DVector<f64>> = Vec::new();
        let mut rigid = Vec::new();
        for axis in [Vec3::x(), Vec3::y(), Vec3::z()] {
            rigid.push(flatten(&|_| axis));
            rigid.push(flatten(&|v| axis.cross(&mean_pts[v])));
        }
        rigid.push(flatten(&|v| mean_pts[v]));
        for m in &rigid {
            if let Some(q) = orthonormalize(m, &basis, 1e-9) {
                basis.push(q);
            }
        }
        let n_similarity = basis.len();

        let mut degree = 0;
        while basis.len() - n_similarity < self.n_components {
            degree += 1;
            if degree > 24 || (degree + 1) * (degree + 1) > nv {
                return Err(Error::InvalidModel(format!(
                    "cannot build {} components on {} vertices",
                    self.n_components, nv
                )));
            }
            let harmonics: Vec<Vec<f64>> = dirs.iter().map(|d| real_harmonics(d, degree)).collect();
            for k in degree * degree..(degree + 1) * (degree + 1) {
                if basis.len() - n_similarity == self.n_components {
                    break;
                }
                let field = flatten(&|v| normals[v] * harmonics[v][k]);
                if let Some(q) = orthonormalize(&field, &basis, 1e-6) {
                    basis.push(q);
                }
            }
        }

        let comps = &basis[n_similarity..];
        let components = DMatrix::from_columns(comps);
        let sqrt_v = (nv as f64).sqrt();
        let eigenvalues = DVector::from_iterator(
            self.n_components,
            (0..self.n_components).map(|j| (self.leading_rms * sqrt_v * (1.0 + j as f64).powf(-self.decay)).powi(2)),
        );
        let mean_shape = flatten(&|v| mean_pts[v]);

        let mut taken = BTreeSet::new();
        let mut landmarks = BTreeMap::new();
        let ear_left = nearest_direction(&dirs, &Vec3::x(), &taken);
        taken.insert(ear_left);
        let ear_right = nearest_direction(&dirs, &-Vec3::x(), &taken);
        taken.insert(ear_right);
        landmarks.insert("ear_left".to_string(), ear_left);
        landmarks.insert("ear_right".to_string(), ear_right);
        let mut jawline = BTreeSet::new();
        for (id, az, el) in facial_landmark_layout() {
            let v = nearest_direction(&dirs, &direction(az, el), &taken);
            taken.insert(v);
            if id.starts_with("jaw") {
                jawline.insert(id.clone());
            }
            landmarks.insert(id, v);
        }
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for i in 0..self.aux_landmarks {
            let n = self.aux_landmarks as f64;
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            let v = nearest_direction(&dirs, &Vec3::new(r * phi.cos(), y, r * phi.sin()), &taken);
            if v == usize::MAX {
                break;
            }
            taken.insert(v);
            landmarks.insert(format!("aux_{i:03}"), v);
        }

        let face_region: Vec<usize> = (0..nv).filter(|&v| dirs[v].z > 0.35 && dirs[v].y < 0.5).collect();
        let face_set: BTreeSet<usize> = face_region.iter().copied().collect();
        let top_region: Vec<usize> = (0..nv).filter(|&v| dirs[v].y > 0.0 && !face_set.contains(&v)).collect();

        MorphableModel::new(ModelParts {
            mean_shape,
            components,
            eigenvalues,
            landmarks,
            ear_anchors: ["ear_left".into(), "ear_right".into()],
            jawline,
            top_region,
            face_region,
            topology,
        })
    }
}
