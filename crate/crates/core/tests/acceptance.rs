//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL` line.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use headfit_core::camera_geom::{PerspectiveCamera, RigidTransform, SimilarityTransform};
use headfit_core::io::{save_result, save_sweep};
use headfit_core::metrics::{
    chamfer_scalp, head_width, rms_reprojection, vertex_displacement_consistency, ChamferOptions, LandmarkSubset,
};
use headfit_core::pose_refine::{refine_pose, ConvergenceReport, JacobianMode, LmSettings, PoseFrame, PoseObservation, PoseProblem};
use headfit_core::rng::{derive_seed, SeededRng};
use headfit_core::shape_model::{icosphere, param_cosine_similarity, HeadMesh, MorphableModel, ShapeParams, SyntheticModelSpec};
use headfit_core::shape_solver::{iterate_fit, Alignment, FrameObservations, Observation, SolveSettings, StaticKeypoints};
use headfit_core::silhouette::{rasterize_silhouette, silhouette_scalp_extrema, ScalpDirection};
use headfit_core::synth::{generate_scene, lambda_sweep, NoiseSpec, SceneSpec, ShapeSource, SWEEP_LAMBDAS};
use headfit_core::{run_pipeline, umeyama_fit, FitConfig, FrameId, Keypoint, TriangleMesh, Vec2, Vec3};
use nalgebra::{Matrix3, Rotation3};

// Tolerances.
const UMEYAMA_ROTATION_TOL: f64 = 1e-8;
const UMEYAMA_SCALE_TOL: f64 = 1e-9;
const UMEYAMA_BUDGET: Duration = Duration::from_secs(5);
const POSE_OBJECTIVE_TOL: f64 = 1e-8;
const POSE_MIN_CONVERGED: usize = 95;
const POSE_BUDGET: Duration = Duration::from_secs(60);
const SHAPE_COSINE_MIN: f64 = 0.999;
const SHAPE_DISTANCE_REL: f64 = 1e-6;
const SWEEP_BUDGET: Duration = Duration::from_secs(15 * 60);
const STAGE_MIN_WINS: usize = 8;
const JACOBIAN_REL_TOL: f64 = 1e-4;
const AREA_REL_TOL: f64 = 0.02;
const EXTREMUM_PX_TOL: f64 = 1.0;
const METRIC_REL_TOL: f64 = 1e-8;
const CONSISTENCY_MAX_PERCENT: f64 = 3.0;

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

fn random_rotation(rng: &mut SeededRng, max_angle: f64) -> Matrix3<f64> {
    Rotation3::new(rng.unit_vector() * rng.uniform_range(0.0, max_angle)).into_inner()
}

/// Chord form; `acos` of the trace cannot resolve angles below ~1e-8.
fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    2.0 * ((a - b).norm() / 8f64.sqrt()).min(1.0).asin()
}

fn monotone(r: &ConvergenceReport) -> bool {
    let mut prev = r.initial_objective;
    r.accepted_objectives.iter().all(|&o| {
        let ok = o <= prev;
        prev = o;
        ok
    })
}

#[test]
fn criterion_1_umeyama_recovers_random_similarities() {
    let start = Instant::now();
    let mut rng = SeededRng::new(1);
    let (mut worst_rot, mut worst_scale) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = 3 + (rng.next_u64() % 98) as usize;
        let src = loop {
            let pts: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal())).collect();
            let c = pts.iter().sum::<Vec3>() / n as f64;
            let cov = pts.iter().fold(Matrix3::zeros(), |m, p| m + (p - c) * (p - c).transpose());
            let ev = cov.symmetric_eigenvalues();
            let mut ev: Vec<f64> = ev.iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            // Well-spread in at least two directions.
            if ev[1] > 0.05 * ev[2] {
                break pts;
            }
        };
        let scale = rng.uniform_range(-2.0, 2.0).exp();
        let rot = random_rotation(&mut rng, std::f64::consts::PI);
        let t = Vec3::new(rng.normal(), rng.normal(), rng.normal()) * 10.0;
        let truth = SimilarityTransform::new(scale, rot, t).unwrap();
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let fit = umeyama_fit(&src, &dst).unwrap();
        worst_rot = worst_rot.max(rotation_angle(fit.rotation(), &rot));
        worst_scale = worst_scale.max((fit.scale() - scale).abs() / scale);
    }
    let elapsed = start.elapsed();
    let pass = worst_rot < UMEYAMA_ROTATION_TOL && worst_scale < UMEYAMA_SCALE_TOL && elapsed < UMEYAMA_BUDGET;
    report(
        1,
        pass,
        format!("1000 cases, max rotation error {worst_rot:.2e} rad, max scale error {worst_scale:.2e}, {elapsed:.2?}"),
    );
}

/// Random points seen by a ring of cameras at distance 8, with a random base
/// similarity and a random true rigid correction.
fn pose_problem(seed: u64, frames: usize, points: usize) -> (PoseProblem, RigidTransform) {
    let mut rng = SeededRng::new(seed);
    let model_points: Vec<Vec3> = (0..points).map(|_| Vec3::new(rng.normal(), rng.normal(), rng.normal()) * 0.5).collect();
    let base = SimilarityTransform::new(
        rng.uniform_range(0.5, 2.0),
        random_rotation(&mut rng, 3.0),
        Vec3::new(rng.normal(), rng.normal(), rng.normal()) * 0.1,
    )
    .unwrap();
    let truth = RigidTransform::from_params(&[
        0.1 * rng.normal(),
        0.1 * rng.normal(),
        0.1 * rng.normal(),
        0.05 * rng.normal(),
        0.05 * rng.normal(),
        0.05 * rng.normal(),
    ]);
    let pose_frames = (0..frames)
        .map(|i| {
            let az = i as f64 / frames as f64 * std::f64::consts::TAU;
            let eye = Vec3::new(8.0 * az.sin(), rng.uniform_range(-2.0, 2.0), 8.0 * az.cos());
            let camera =
                PerspectiveCamera::look_at(&eye, &Vec3::zeros(), &Vec3::y(), 1000.0, 1000.0, 640.0, 480.0, 1280, 960)
                    .unwrap();
            let observations = (0..points)
                .map(|k| PoseObservation {
                    point: k,
                    pixel: camera.project(&truth.apply(&base.apply(&model_points[k]))).unwrap(),
                    weight: 1.0,
                })
                .collect();
            PoseFrame { frame_id: i as FrameId, camera, observations }
        })
        .collect();
    (PoseProblem::new(pose_frames, model_points, base).unwrap(), truth)
}

/// Rotation error of exactly `deg` and a translation offset of `frac` times the camera distance.
fn perturb(truth: &RigidTransform, rng: &mut SeededRng, deg: f64, frac: f64) -> RigidTransform {
    let d = Rotation3::new(rng.unit_vector() * deg.to_radians()).into_inner();
    RigidTransform::new(d * truth.rotation(), truth.translation() + rng.unit_vector() * frac * 8.0).unwrap()
}

#[test]
fn criterion_2_pose_refinement_converges() {
    let start = Instant::now();
    let mut converged = 0;
    let mut all_monotone = true;
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let (problem, truth) = pose_problem(1000 + seed, 20, 30);
        let mut rng = SeededRng::new(derive_seed(2, seed));
        let (deg, frac) = (rng.uniform_range(0.0, 10.0), rng.uniform_range(0.0, 0.05));
        let init = perturb(&truth, &mut rng, deg, frac);
        let (_, r) = refine_pose(&problem, &init, &LmSettings::default()).unwrap();
        if r.final_objective < POSE_OBJECTIVE_TOL {
            converged += 1;
        }
        worst = worst.max(r.final_objective);
        all_monotone &= monotone(&r);
    }
    let elapsed = start.elapsed();
    let pass = converged >= POSE_MIN_CONVERGED && all_monotone && elapsed < POSE_BUDGET;
    report(
        2,
        pass,
        format!("{converged}/100 below {POSE_OBJECTIVE_TOL:e} (worst {worst:.2e}), monotone {all_monotone}, {elapsed:.2?}"),
    );
}

fn ring_cameras(n: usize) -> Vec<PerspectiveCamera> {
    (0..n)
        .map(|i| {
            let az = i as f64 / n as f64 * std::f64::consts::TAU;
            let el = 0.3 * (2.0 * az).sin();
            let eye = Vec3::new(az.sin() * el.cos(), el.sin(), az.cos() * el.cos()) * 0.55;
            PerspectiveCamera::look_at(&eye, &Vec3::zeros(), &Vec3::y(), 1500.0, 1500.0, 540.0, 960.0, 1080, 1920).unwrap()
        })
        .collect()
}

fn exact_frames(model: &MorphableModel, truth: &ShapeParams, alignment: &Alignment, cams: &[PerspectiveCamera]) -> Vec<FrameObservations> {
    let mesh = model.synthesize(truth).unwrap().transformed(&alignment.combined());
    cams.iter()
        .enumerate()
        .map(|(i, cam)| FrameObservations {
            frame_id: i as FrameId,
            camera: cam.clone(),
            observations: model
                .observable_landmarks()
                .map(|(_, v)| Observation { vertex: v, pixel: cam.project(&mesh.vertices[v]).unwrap(), weight: 1.0 })
                .collect(),
        })
        .collect()
}

#[test]
fn criterion_3_shape_recovery_on_noiseless_scenes() {
    let alignment = Alignment::new(
        SimilarityTransform::new(1e-3, Rotation3::from_euler_angles(0.1, -0.3, 0.05).into_inner(), Vec3::new(0.05, -0.02, 0.1))
            .unwrap(),
        RigidTransform::identity(),
    );
    let settings = SolveSettings { lambda: 1e-8, iterations: 40, realign: false, refine_pose: false, ..SolveSettings::default() };
    let mut lines = Vec::new();
    let mut pass = true;
    for n in [5usize, 20, 50] {
        let model = SyntheticModelSpec { subdivisions: 3, n_components: n, aux_landmarks: 80, ..SyntheticModelSpec::default() }
            .build()
            .unwrap();
        let truth = model.sample_random_shape(1.0, 30 + n as u64).unwrap();
        let frames = exact_frames(&model, &truth, &alignment, &ring_cameras(12));
        let out = iterate_fit(&model, &StaticKeypoints(frames), None, &ShapeParams::zeros(n), &alignment, &settings, "oracle")
            .unwrap();
        let cos = param_cosine_similarity(&truth, &out.params).unwrap();
        let ds = model.shape_distance(&truth, &out.params).unwrap();
        let w = head_width(&model.synthesize(&truth).unwrap().vertices, &model.regions()).unwrap();
        let rel = ds / (w * w);
        pass &= cos > SHAPE_COSINE_MIN && rel < SHAPE_DISTANCE_REL;
        lines.push(format!("n={n}: cos {cos:.6}, dS/w^2 {rel:.2e}"));
    }
    report(3, pass, lines.join("; "));
}

#[test]
fn criterion_4_lambda_sweep_has_interior_optimum() {
    let start = Instant::now();
    let model = SyntheticModelSpec::default().build().unwrap();
    let sweep = lambda_sweep(&model, &SWEEP_LAMBDAS, 10, &SceneSpec::default(), &FitConfig::default(), 7).unwrap();
    let elapsed = start.elapsed();
    let mean: BTreeMap<u64, f64> = sweep.summary.iter().map(|s| (s.lambda.to_bits(), s.mean_delta_s)).collect();
    let at = |l: f64| mean[&l.to_bits()];
    let (lo, hi) = (SWEEP_LAMBDAS[0], SWEEP_LAMBDAS[SWEEP_LAMBDAS.len() - 1]);
    let (best_l, best) = SWEEP_LAMBDAS[1..SWEEP_LAMBDAS.len() - 1]
        .iter()
        .map(|&l| (l, at(l)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let failures: usize = sweep.summary.iter().map(|s| s.failures).sum();
    let pass = best < at(lo) && best < at(hi) && elapsed < SWEEP_BUDGET;
    let table: Vec<String> = sweep.summary.iter().map(|s| format!("{}={:.3e}", s.lambda, s.mean_delta_s)).collect();
    report(
        4,
        pass,
        format!("best interior lambda {best_l} ({best:.3e}); {}; {failures} failed runs; {elapsed:.2?}", table.join(" ")),
    );
}

#[test]
fn criterion_5_stage_ordering_on_scalp_heavy_heads() {
    let model = SyntheticModelSpec::default().build().unwrap();
    let spec = SceneSpec { shape: ShapeSource::ScalpHeavy { amplitude: 12.0 }, ..SceneSpec::default() };
    let regions = model.regions();
    let mut wins = 0;
    let mut rows = Vec::new();
    for h in 0..10u64 {
        let scene = generate_scene(&model, &spec, derive_seed(5, h)).unwrap();
        let fit = run_pipeline(&model, &scene.input, &FitConfig::default()).unwrap();
        let c: Vec<f64> = fit
            .meshes(&model)
            .unwrap()
            .iter()
            .map(|m| chamfer_scalp(m, &scene.input.dense, &regions, &ChamferOptions::default()).unwrap().value)
            .collect();
        if c[2] < c[0] && c[2] < c[1] {
            wins += 1;
        }
        rows.push(format!("{:.2}/{:.2}/{:.2}", c[0], c[1], c[2]));
    }
    report(
        5,
        wins >= STAGE_MIN_WINS,
        format!("final best in {wins}/10 (mean/front/final mm: {})", rows.join(" ")),
    );
}

#[test]
fn criterion_6_jacobian_agreement_and_monotone_steps() {
    let mut worst = 0.0f64;
    let mut all_monotone = true;
    for seed in 0..100u64 {
        let (problem, truth) = pose_problem(5000 + seed, 4 + (seed % 5) as usize, 8 + (seed % 13) as usize);
        let mut rng = SeededRng::new(derive_seed(6, seed));
        let (deg, frac) = (rng.uniform_range(0.0, 20.0), rng.uniform_range(0.0, 0.05));
        let pose = perturb(&truth, &mut rng, deg, frac);
        let a = problem.jacobian(&pose, JacobianMode::Analytic).unwrap();
        let f = problem.jacobian(&pose, JacobianMode::FiniteDifference).unwrap();
        worst = worst.max((&a - &f).norm() / a.norm());
        for mode in [JacobianMode::Analytic, JacobianMode::FiniteDifference] {
            let settings = LmSettings { jacobian: mode, ..LmSettings::default() };
            let (_, r) = refine_pose(&problem, &pose, &settings).unwrap();
            all_monotone &= monotone(&r);
        }
    }
    // Pose refinement inside a full fit never ends above where it started.
    let model = SyntheticModelSpec { subdivisions: 3, n_components: 10, ..SyntheticModelSpec::default() }.build().unwrap();
    let scene = generate_scene(&model, &SceneSpec::default(), 61).unwrap();
    let fit = run_pipeline(&model, &scene.input, &FitConfig::default()).unwrap();
    let trace_ok = fit.trace.iter().all(|r| r.pose_objective <= r.pose_objective_initial);
    let pass = worst < JACOBIAN_REL_TOL && all_monotone && trace_ok;
    report(
        6,
        pass,
        format!("max relative Jacobian difference {worst:.2e}, accepted steps monotone {all_monotone}, fit trace monotone {trace_ok}"),
    );
}

#[test]
fn criterion_7_sphere_silhouette_geometry() {
    let (f, cx, cy, r) = (800.0, 320.0, 240.0, 1.0);
    let (v, t) = icosphere(5);
    let sphere = TriangleMesh::new(v.into_iter().map(|p| p * r).collect(), t).unwrap();
    let mut rng = SeededRng::new(7);
    let (mut worst_area, mut worst_px) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let d = rng.uniform_range(4.0, 30.0);
        let cam = PerspectiveCamera::from_params(f, f, cx, cy, Matrix3::identity(), Vec3::new(0.0, 0.0, d), 640, 480).unwrap();
        let mask = rasterize_silhouette(&sphere, &cam, 0);
        let radius = f * r / (d * d - r * r).sqrt();
        let area = std::f64::consts::PI * radius * radius;
        worst_area = worst_area.max((mask.count() as f64 - area).abs() / area);
        for (dir, px) in silhouette_scalp_extrema(&mask, 480) {
            let expected = match dir {
                ScalpDirection::Left => Vec2::new(cx - radius, cy),
                ScalpDirection::Right => Vec2::new(cx + radius, cy),
                ScalpDirection::Top => Vec2::new(cx, cy - radius),
            };
            worst_px = worst_px.max((px - expected).amax());
        }
    }
    let pass = worst_area < AREA_REL_TOL && worst_px <= EXTREMUM_PX_TOL;
    report(7, pass, format!("20 distances, max area error {:.3}%, max extremum offset {worst_px:.3} px", 100.0 * worst_area));
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn criterion_8_fit_and_sweep_are_deterministic() {
    let model = SyntheticModelSpec::default().build().unwrap();
    let scene = generate_scene(&model, &SceneSpec::default(), 81).unwrap();
    let fit_digest = |threads| {
        in_pool(threads, || {
            let dir = tempfile::tempdir().unwrap();
            let fit = run_pipeline(&model, &scene.input, &FitConfig::default()).unwrap();
            save_result(&model, &fit, dir.path()).unwrap().digest()
        })
    };
    let fits = [fit_digest(1), fit_digest(4), fit_digest(4)];

    let small = SyntheticModelSpec { subdivisions: 3, n_components: 10, ..SyntheticModelSpec::default() }.build().unwrap();
    let sweep_digest = |threads| {
        in_pool(threads, || {
            let dir = tempfile::tempdir().unwrap();
            let report = lambda_sweep(&small, &[1.0, 100.0, 10000.0], 2, &SceneSpec::default(), &FitConfig::default(), 3).unwrap();
            save_sweep(&report, dir.path()).unwrap().digest()
        })
    };
    let sweeps = [sweep_digest(1), sweep_digest(3), sweep_digest(3)];
    let same = |d: &[String; 3]| d.iter().all(|x| *x == d[0]);
    let pass = same(&fits) && same(&sweeps);
    report(
        8,
        pass,
        format!("fit manifests {} and sweep manifests {} over 1/N/N threads", &fits[0][..12], &sweeps[0][..12]),
    );
}

fn random_head(rng: &mut SeededRng, model: &MorphableModel) -> HeadMesh {
    let alpha = model.sample_random_shape(1.0, rng.next_u64()).unwrap();
    let t = SimilarityTransform::new(
        rng.uniform_range(0.5, 2.0),
        random_rotation(rng, 3.0),
        Vec3::new(rng.normal(), rng.normal(), rng.normal()),
    )
    .unwrap();
    model.synthesize(&alpha).unwrap().transformed(&t)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn metric_oracles(model: &MorphableModel) -> (f64, f64) {
    let regions = model.regions();
    let mut rng = SeededRng::new(9);
    let (mut chamfer_err, mut rms_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let fitted = random_head(&mut rng, model);
        let n_ref = 50 + (rng.next_u64() % 400) as usize;
        let reference = TriangleMesh {
            vertices: (0..n_ref)
                .map(|_| fitted.vertices[(rng.next_u64() % fitted.vertices.len() as u64) as usize] + rng.unit_vector() * rng.uniform())
                .collect(),
            triangles: vec![],
        };
        // Naive nearest-vertex loop and head width along the ear axis.
        let axis = (fitted.vertices[regions.ear_left] - fitted.vertices[regions.ear_right]).normalize();
        let proj = |v: &usize| fitted.vertices[*v].dot(&axis);
        let lo = regions.top.iter().min_by(|a, b| proj(a).total_cmp(&proj(b))).unwrap();
        let hi = regions.top.iter().max_by(|a, b| proj(a).total_cmp(&proj(b))).unwrap();
        let width = (fitted.vertices[*hi] - fitted.vertices[*lo]).norm();
        let naive: f64 = regions
            .top
            .iter()
            .map(|&v| reference.vertices.iter().map(|q| (fitted.vertices[v] - q).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / regions.top.len() as f64
            * 160.0
            / width;
        let got = chamfer_scalp(&fitted, &reference, &regions, &ChamferOptions::default()).unwrap().value;
        chamfer_err = chamfer_err.max(rel(got, naive));

        let centre = fitted.vertices.iter().sum::<Vec3>() / fitted.vertices.len() as f64;
        let radius = fitted.vertices.iter().map(|p| (p - centre).norm()).fold(0.0, f64::max);
        let mut cameras = BTreeMap::new();
        let mut keypoints = BTreeMap::new();
        let mut sum = 0.0;
        let mut count = 0usize;
        for f in 0..3u32 {
            let eye = centre + rng.unit_vector() * 5.0 * radius;
            let cam = PerspectiveCamera::look_at(&eye, &centre, &Vec3::y(), 1200.0, 1100.0, 500.0, 400.0, 1000, 800)
                .or_else(|_| PerspectiveCamera::look_at(&eye, &centre, &Vec3::x(), 1200.0, 1100.0, 500.0, 400.0, 1000, 800))
                .unwrap();
            let mut kps = Vec::new();
            for (id, v) in model.observable_landmarks() {
                if rng.uniform() < 0.3 {
                    continue;
                }
                let p = cam.rotation() * fitted.vertices[v] + cam.translation();
                let (u, w) = (1200.0 * p.x / p.z + 500.0, 1100.0 * p.y / p.z + 400.0);
                let k = Keypoint { id: id.to_string(), u: u + 3.0 * rng.normal(), v: w + 3.0 * rng.normal() };
                sum += (u - k.u).powi(2) + (w - k.v).powi(2);
                count += 1;
                kps.push(k);
            }
            cameras.insert(f, cam);
            keypoints.insert(f, kps);
        }
        let got = rms_reprojection(model, &fitted, &cameras, &keypoints, &[0, 1, 2], LandmarkSubset::All).unwrap().value;
        rms_err = rms_err.max(rel(got, (sum / count as f64).sqrt()));
    }
    (chamfer_err, rms_err)
}

#[test]
fn criterion_9_metric_oracles_and_consistency() {
    let model = SyntheticModelSpec::default().build().unwrap();
    let (chamfer_err, rms_err) = metric_oracles(&model);

    let alpha = model.sample_random_shape(1.0, 90).unwrap();
    let spec = SceneSpec { shape: ShapeSource::Explicit { alpha }, noise: NoiseSpec::default(), ..SceneSpec::default() };
    let fits: Vec<HeadMesh> = [91u64, 92]
        .iter()
        .map(|&seed| {
            let scene = generate_scene(&model, &spec, seed).unwrap();
            let fit = run_pipeline(&model, &scene.input, &FitConfig::default()).unwrap();
            model.synthesize(&fit.alpha_final).unwrap()
        })
        .collect();
    let c = vertex_displacement_consistency(&fits[0], &fits[1], &model.regions()).unwrap();
    let worst = c.head.max(c.face).max(c.scalp);
    let pass = chamfer_err < METRIC_REL_TOL && rms_err < METRIC_REL_TOL && worst < CONSISTENCY_MAX_PERCENT;
    report(
        9,
        pass,
        format!(
            "chamfer rel error {chamfer_err:.1e}, rms rel error {rms_err:.1e}, consistency head/face/scalp {:.2}/{:.2}/{:.2}%",
            c.head, c.face, c.scalp
        ),
    );
}
