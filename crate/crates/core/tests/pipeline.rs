use std::collections::BTreeSet;

use headfit_core::silhouette::{scalp_correspondences, ScalpDirection};
use headfit_core::synth::{generate_scene, NoiseSpec, SceneSpec, SyntheticScene};
use headfit_core::{
    filter_reconstruction, rasterize_silhouette, run_pipeline, Alignment, Error, FitConfig, FitResult, FrameId,
    MorphableModel, ShapeParams, SyntheticModelSpec,
};

fn model() -> MorphableModel {
    SyntheticModelSpec::default().build().unwrap()
}

fn fit(model: &MorphableModel, spec: &SceneSpec, seed: u64) -> (SyntheticScene, FitResult) {
    let scene = generate_scene(model, spec, seed).unwrap();
    let result = run_pipeline(model, &scene.input, &FitConfig::default()).unwrap();
    (scene, result)
}

#[test]
fn held_out_frames_never_reach_a_solve() {
    let model = model();
    let (_, result) = fit(&model, &SceneSpec::default(), 21);
    let held: BTreeSet<_> = result.split.held_out.iter().copied().collect();
    assert!(!held.is_empty());
    for r in &result.trace {
        assert!(r.frames.iter().all(|f| !held.contains(f)), "{} iteration {} used {:?}", r.stage, r.iteration, r.frames);
    }
    assert!(result.stage2_frames.iter().all(|f| !held.contains(f)));
}

#[test]
fn stage2_frames_respect_elevation_bound_and_objective_decreases() {
    let model = model();
    let config = FitConfig::default();
    let (_, result) = fit(&model, &SceneSpec::default(), 22);
    for f in &result.stage2_frames {
        assert!(result.pose_angles[f].elevation.abs() <= config.elevation_limit);
    }
    let stage2: Vec<f64> = result.trace.iter().filter(|r| r.stage == "stage2").map(|r| r.shape_objective).collect();
    assert_eq!(stage2.len(), config.iterations);
    assert!(stage2.last().unwrap() <= stage2.first().unwrap(), "{stage2:?}");
}

/// Largest gap, along the extremized axis, between model and silhouette extrema over `frames`.
fn extremum_gap(model: &MorphableModel, scene: &SyntheticScene, alpha: &ShapeParams, alignment: &Alignment, frames: &[FrameId]) -> f64 {
    let dense = filter_reconstruction(&scene.input.dense, FitConfig::default().edge_factor).unwrap();
    let mesh = model.synthesize(alpha).unwrap();
    let regions = model.regions();
    let t = alignment.combined();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for f in frames {
        let cam = &scene.input.cameras[f];
        let mask = rasterize_silhouette(&dense, cam, *f);
        for c in scalp_correspondences(&mesh, regions.top, [regions.ear_left, regions.ear_right], cam, &t, &mask) {
            // Only the extremized coordinate is defined by a silhouette extremum.
            let gap = match c.direction {
                ScalpDirection::Left | ScalpDirection::Right => c.pixel[0] - c.projected[0],
                ScalpDirection::Top => c.pixel[1] - c.projected[1],
            };
            worst = worst.max(gap.abs());
            checked += 1;
        }
    }
    assert!(checked >= frames.len(), "{checked} correspondences");
    worst
}

#[test]
fn model_extrema_agree_with_silhouette() {
    let model = model();
    let spec = SceneSpec { noise: NoiseSpec::none(), ..SceneSpec::default() };
    let scene = generate_scene(&model, &spec, 23).unwrap();
    // A weak prior so the noiseless fit converges close to the truth.
    let config = FitConfig { lambda: 1.0, iterations: 20, ..FitConfig::default() };
    let result = run_pipeline(&model, &scene.input, &config).unwrap();
    let at_truth = extremum_gap(&model, &scene, &scene.alpha, &scene.alignment, &result.stage2_frames);
    let fitted = extremum_gap(&model, &scene, &result.alpha_final, &result.final_alignment, &result.stage2_frames);
    assert!(at_truth < 3.0, "ground truth gap {at_truth:.2} px");
    assert!(fitted < 3.0, "fitted gap {fitted:.2} px");
}

#[test]
fn frontal_fit_improves_on_mean_for_facial_landmarks() {
    let model = model();
    let (scene, result) = fit(&model, &SceneSpec::default(), 24);
    let [mean, front, _] = result.meshes(&model).unwrap();
    let rms = |m| {
        headfit_core::metrics::rms_reprojection(
            &model,
            m,
            &scene.input.cameras,
            &scene.input.keypoints,
            &result.split.held_out,
            headfit_core::metrics::LandmarkSubset::All,
        )
        .unwrap()
        .value
    };
    assert!(rms(&front) < rms(&mean), "front {} mean {}", rms(&front), rms(&mean));
}

#[test]
fn scene_without_keypoints_is_unfittable() {
    let model = model();
    let mut scene = generate_scene(&model, &SceneSpec::default(), 25).unwrap();
    scene.input.keypoints.clear();
    let err = run_pipeline(&model, &scene.input, &FitConfig::default()).unwrap_err();
    assert!(err.is_unfittable(), "{err}");
    assert!(!matches!(err, Error::Io { .. }));
}
