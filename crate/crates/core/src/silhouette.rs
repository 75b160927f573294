//! Dense-reconstruction clean-up, silhouette masks and scalp features.

use serde::{Deserialize, Serialize};

use crate::camera_geom::{PerspectiveCamera, SimilarityTransform, MIN_DEPTH};
use crate::error::{Error, Result};
use crate::mesh::{Triangle, TriangleMesh};
use crate::shape_model::HeadMesh;
use crate::{FrameId, Vec2, Vec3};

pub const DEFAULT_EDGE_FACTOR: f64 = 8.0;

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Triangles of the largest vertex-connected component. Ties go to the
/// component containing the lowest triangle index.
fn largest_component(mesh: &TriangleMesh) -> Vec<Triangle> {
    let n = mesh.vertices.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for t in &mesh.triangles {
        for k in 1..3 {
            let a = find(&mut parent, t[0] as usize);
            let b = find(&mut parent, t[k] as usize);
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut count = vec![0usize; n];
    let mut first = vec![usize::MAX; n];
    for (i, t) in mesh.triangles.iter().enumerate() {
        let r = find(&mut parent, t[0] as usize);
        count[r] += 1;
        first[r] = first[r].min(i);
    }
    let best = (0..n)
        .filter(|&r| count[r] > 0)
        .max_by(|&a, &b| count[a].cmp(&count[b]).then(first[b].cmp(&first[a])));
    match best {
        None => Vec::new(),
        Some(root) => mesh
            .triangles
            .iter()
            .filter(|t| find(&mut parent, t[0] as usize) == root)
            .copied()
            .collect(),
    }
}

fn edge_lengths(v: &[Vec3], t: &Triangle) -> [f64; 3] {
    let [a, b, c] = t.map(|i| v[i as usize]);
    [(a - b).norm(), (b - c).norm(), (c - a).norm()]
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Drops vertices no triangle references, keeping the order of the rest.
fn compact(vertices: &[Vec3], triangles: Vec<Triangle>) -> TriangleMesh {
    let mut map = vec![u32::MAX; vertices.len()];
    for t in &triangles {
        for &i in t {
            map[i as usize] = 0;
        }
    }
    let mut kept = Vec::new();
    for (i, m) in map.iter_mut().enumerate() {
        if *m == 0 {
            *m = kept.len() as u32;
            kept.push(vertices[i]);
        }
    }
    let triangles = triangles.into_iter().map(|t| t.map(|i| map[i as usize])).collect();
    TriangleMesh {
        vertices: kept,
        triangles,
    }
}

/// Keeps the largest connected component, removes triangles whose longest
/// edge exceeds `edge_factor` times the median edge length, and drops orphaned
/// vertices. Repeats until nothing changes, so applying it twice is the same
/// as applying it once.
pub fn filter_reconstruction(raw: &TriangleMesh, edge_factor: f64) -> Result<TriangleMesh> {
    if !(edge_factor > 0.0) {
        return Err(Error::Validation(format!("edge factor must be positive, got {edge_factor}")));
    }
    raw.validate()?;
    if raw.is_empty() {
        return Err(Error::OverFiltered);
    }
    let mut mesh = raw.clone();
    loop {
        let component = largest_component(&mesh);
        let edges: Vec<f64> = component.iter().flat_map(|t| edge_lengths(&mesh.vertices, t)).collect();
        let limit = edge_factor * median(edges);
        let kept: Vec<Triangle> = component
            .into_iter()
            .filter(|t| edge_lengths(&mesh.vertices, t).iter().all(|&e| e <= limit))
            .collect();
        let next = compact(&mesh.vertices, kept);
        if next.is_empty() {
            return Err(Error::OverFiltered);
        }
        if next == mesh {
            return Ok(next);
        }
        mesh = next;
    }
}

/// Binary image, row-major, one byte per pixel (0 or 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SilhouetteMask {
    pub frame_id: FrameId,
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl SilhouetteMask {
    pub fn empty(frame_id: FrameId, width: u32, height: u32) -> Self {
        Self {
            frame_id,
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn get(&self, col: i64, row: i64) -> bool {
        col >= 0
            && row >= 0
            && col < self.width as i64
            && row < self.height as i64
            && self.data[row as usize * self.width as usize + col as usize] != 0
    }

    pub fn set(&mut self, col: u32, row: u32) {
        self.data[row as usize * self.width as usize + col as usize] = 1;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&p| p != 0).count()
    }

    /// Set pixel with at least one unset or out-of-image 4-neighbour.
    pub fn is_boundary(&self, col: i64, row: i64) -> bool {
        self.get(col, row)
            && !(self.get(col - 1, row) && self.get(col + 1, row) && self.get(col, row - 1) && self.get(col, row + 1))
    }
}

/// Marks every pixel whose centre lies inside the projection of a triangle
/// with all three corners in front of the camera. Coverage is inclusive on
/// triangle edges.
pub fn rasterize_silhouette(mesh: &TriangleMesh, camera: &PerspectiveCamera, frame_id: FrameId) -> SilhouetteMask {
    let (w, h) = (camera.width(), camera.height());
    let mut mask = SilhouetteMask::empty(frame_id, w, h);
    let projected: Vec<Option<Vec2>> = mesh
        .vertices
        .iter()
        .map(|p| {
            let c = camera.world_to_camera(p);
            (c.z >= MIN_DEPTH).then(|| camera.project_camera_point(&c).ok()).flatten()
        })
        .collect();
    for t in &mesh.triangles {
        let (Some(a), Some(b), Some(c)) = (projected[t[0] as usize], projected[t[1] as usize], projected[t[2] as usize])
        else {
            continue;
        };
        let area = (b - a).perp(&(c - a));
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let sign = area.signum();
        let min_x = a.x.min(b.x).min(c.x);
        let max_x = a.x.max(b.x).max(c.x);
        let min_y = a.y.min(b.y).min(c.y);
        let max_y = a.y.max(b.y).max(c.y);
        let c0 = (min_x - 0.5).ceil().max(0.0);
        let c1 = (max_x - 0.5).floor().min(w as f64 - 1.0);
        let r0 = (min_y - 0.5).ceil().max(0.0);
        let r1 = (max_y - 0.5).floor().min(h as f64 - 1.0);
        if c0 > c1 || r0 > r1 {
            continue;
        }
        for row in r0 as u32..=r1 as u32 {
            for col in c0 as u32..=c1 as u32 {
                let p = Vec2::new(col as f64 + 0.5, row as f64 + 0.5);
                let e0 = sign * (b - a).perp(&(p - a));
                let e1 = sign * (c - b).perp(&(p - b));
                let e2 = sign * (a - c).perp(&(p - c));
                if e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0 {
                    mask.set(col, row);
                }
            }
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalpDirection {
    Left,
    Right,
    Top,
}

/// Left-most (min u), right-most (max u) and top-most (min v) projected
/// vertices of `region` under `alignment`. Vertices behind the camera are
/// ignored; ties resolve to the smallest vertex index.
pub fn model_scalp_extrema(
    mesh: &HeadMesh,
    region: &[usize],
    camera: &PerspectiveCamera,
    alignment: &SimilarityTransform,
) -> Vec<(ScalpDirection, usize)> {
    let mut sorted = region.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: [Option<(f64, usize)>; 3] = [None; 3];
    for v in sorted {
        let Some(p) = mesh.vertices.get(v) else { continue };
        let Ok(px) = camera.project(&alignment.apply(p)) else {
            continue;
        };
        let keys = [px.x, -px.x, px.y];
        for (slot, key) in best.iter_mut().zip(keys) {
            if slot.is_none_or(|(k, _)| key < k) {
                *slot = Some((key, v));
            }
        }
    }
    [ScalpDirection::Left, ScalpDirection::Right, ScalpDirection::Top]
        .into_iter()
        .zip(best)
        .filter_map(|(d, b)| b.map(|(_, v)| (d, v)))
        .collect()
}

/// Extremal set pixels among rows `< boundary_row`, returned as pixel centres.
/// Among tied pixels the middle one is reported.
pub fn silhouette_scalp_extrema(mask: &SilhouetteMask, boundary_row: u32) -> Vec<(ScalpDirection, Vec2)> {
    let rows = boundary_row.min(mask.height) as usize;
    let w = mask.width as usize;
    // Extremal column plus every row attaining it; the middle such row is reported.
    let mut left: Option<(usize, Vec<usize>)> = None;
    let mut right: Option<(usize, Vec<usize>)> = None;
    let mut top: Option<(usize, usize, usize)> = None;
    let update = |slot: &mut Option<(usize, Vec<usize>)>, key: usize, r: usize, better: fn(usize, usize) -> bool| {
        match slot {
            Some((k, rows)) if *k == key => rows.push(r),
            Some((k, _)) if !better(key, *k) => {}
            _ => *slot = Some((key, vec![r])),
        }
    };
    for r in 0..rows {
        let row = &mask.data[r * w..(r + 1) * w];
        let Some(first) = row.iter().position(|&p| p != 0) else { continue };
        let last = row.iter().rposition(|&p| p != 0).expect("row has a set pixel");
        if top.is_none() {
            top = Some((r, first, last));
        }
        update(&mut left, first, r, |a, b| a < b);
        update(&mut right, last, r, |a, b| a > b);
    }
    let side = |(c, rows): (usize, Vec<usize>)| Vec2::new(c as f64 + 0.5, rows[(rows.len() - 1) / 2] as f64 + 0.5);
    // Pixels between the first and last set pixel of the top row need not be set.
    let apex = |(r, lo, hi): (usize, usize, usize)| {
        let row = &mask.data[r * w..(r + 1) * w];
        let set: Vec<usize> = (lo..=hi).filter(|&c| row[c] != 0).collect();
        Vec2::new(set[(set.len() - 1) / 2] as f64 + 0.5, r as f64 + 0.5)
    };
    [
        (ScalpDirection::Left, left.map(side)),
        (ScalpDirection::Right, right.map(side)),
        (ScalpDirection::Top, top.map(apex)),
    ]
    .into_iter()
    .filter_map(|(d, p)| p.map(|p| (d, p)))
    .collect()
}

/// First row below the mean image row of the projected ear anchors: rows
/// whose centres lie above that mean form the upper part of the mask.
pub fn ear_boundary_row(
    mesh: &HeadMesh,
    ears: [usize; 2],
    camera: &PerspectiveCamera,
    alignment: &SimilarityTransform,
) -> Option<u32> {
    let mut sum = 0.0;
    for v in ears {
        sum += camera.project(&alignment.apply(&mesh.vertices[v])).ok()?.y;
    }
    let mean = 0.5 * sum;
    Some((mean - 0.5).ceil().clamp(0.0, camera.height() as f64) as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalpCorrespondence {
    pub frame_id: FrameId,
    pub direction: ScalpDirection,
    pub vertex: usize,
    /// Silhouette extremum.
    pub pixel: [f64; 2],
    /// Current projection of `vertex`.
    pub projected: [f64; 2],
    /// Silhouette edge on the scanline (left/right) or column (top) through
    /// `projected`, in the extremal direction.
    pub contour: [f64; 2],
}

impl ScalpCorrespondence {
    /// Observation target. An extremum only pins the coordinate it extremizes, so the
    /// tangential coordinate stays at the model projection.
    pub fn target(&self) -> Vec2 {
        Vec2::new(self.contour[0], self.contour[1])
    }
}

/// Outermost set pixel in `dir` on the row (left/right) or column (top) through `at`,
/// restricted to rows `< boundary_row`. The other coordinate is `at`'s.
fn contour_point(mask: &SilhouetteMask, dir: ScalpDirection, at: Vec2, boundary_row: u32) -> Option<Vec2> {
    let rows = boundary_row.min(mask.height);
    if rows == 0 || !at.x.is_finite() || !at.y.is_finite() {
        return None;
    }
    let w = mask.width as usize;
    match dir {
        ScalpDirection::Left | ScalpDirection::Right => {
            let r = at.y.floor().clamp(0.0, f64::from(rows - 1)) as usize;
            let row = &mask.data[r * w..(r + 1) * w];
            let c = if dir == ScalpDirection::Left {
                row.iter().position(|&p| p != 0)
            } else {
                row.iter().rposition(|&p| p != 0)
            }?;
            Some(Vec2::new(c as f64 + 0.5, at.y))
        }
        ScalpDirection::Top => {
            let c = at.x.floor().clamp(0.0, mask.width as f64 - 1.0) as usize;
            let r = (0..rows as usize).find(|&r| mask.data[r * w + c] != 0)?;
            Some(Vec2::new(at.x, r as f64 + 0.5))
        }
    }
}

/// Pairs the model extrema with the silhouette extrema of the same direction.
pub fn scalp_correspondences(
    mesh: &HeadMesh,
    top_region: &[usize],
    ears: [usize; 2],
    camera: &PerspectiveCamera,
    alignment: &SimilarityTransform,
    mask: &SilhouetteMask,
) -> Vec<ScalpCorrespondence> {
    let Some(boundary) = ear_boundary_row(mesh, ears, camera, alignment) else {
        return Vec::new();
    };
    // Extrema over the whole head above the ear line, so the candidate set matches the
    // silhouette submask; an extremum landing outside the scalp region is discarded.
    let above: Vec<usize> = (0..mesh.vertices.len())
        .filter(|&v| {
            camera
                .project(&alignment.apply(&mesh.vertices[v]))
                .is_ok_and(|px| px.y < f64::from(boundary))
        })
        .collect();
    let mut scalp = top_region.to_vec();
    scalp.sort_unstable();
    let model = model_scalp_extrema(mesh, &above, camera, alignment);
    let observed = silhouette_scalp_extrema(mask, boundary);
    model
        .into_iter()
        .filter(|(_, v)| scalp.binary_search(v).is_ok())
        .filter_map(|(d, vertex)| {
            let (_, px) = observed.iter().find(|(o, _)| *o == d)?;
            let proj = camera.project(&alignment.apply(&mesh.vertices[vertex])).ok()?;
            let contour = contour_point(mask, d, proj, boundary).unwrap_or(match d {
                ScalpDirection::Left | ScalpDirection::Right => Vec2::new(px.x, proj.y),
                ScalpDirection::Top => Vec2::new(proj.x, px.y),
            });
            Some(ScalpCorrespondence {
                frame_id: mask.frame_id,
                direction: d,
                vertex,
                pixel: [px.x, px.y],
                projected: [proj.x, proj.y],
                contour: [contour.x, contour.y],
            })
        })
        .collect()
}
