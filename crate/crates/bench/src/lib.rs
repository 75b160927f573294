//! Shared fixtures for the benchmarks.

use headfit_core::pose_refine::{PoseFrame, PoseObservation};
use headfit_core::shape_solver::{backproject_keypoints, BackprojectedPoint, FrameObservations, Observation};
use headfit_core::synth::{generate_scene, NoiseSpec, SceneSpec, SyntheticScene};
use headfit_core::{MorphableModel, PoseProblem, SyntheticModelSpec};

pub struct Fixture {
    pub model: MorphableModel,
    pub scene: SyntheticScene,
}

impl Fixture {
    /// Default model and a noiseless default scene.
    pub fn new() -> Self {
        let model = SyntheticModelSpec::default().build().expect("default model");
        let spec = SceneSpec { noise: NoiseSpec::none(), ..SceneSpec::default() };
        let scene = generate_scene(&model, &spec, 1).expect("scene");
        Self { model, scene }
    }

    /// Projections of the ground-truth landmarks in every keypointed frame.
    pub fn observations(&self) -> Vec<FrameObservations> {
        let truth = self.model.synthesize(&self.scene.alpha).expect("truth");
        let t = self.scene.alignment.combined();
        self.scene
            .input
            .keypoints
            .keys()
            .map(|f| {
                let camera = self.scene.input.cameras[f].clone();
                let observations = self
                    .model
                    .observable_landmarks()
                    .filter_map(|(_, v)| {
                        let pixel = camera.project(&t.apply(&truth.vertices[v])).ok()?;
                        Some(Observation { vertex: v, pixel, weight: 1.0 })
                    })
                    .collect();
                FrameObservations { frame_id: *f, camera, observations }
            })
            .collect()
    }

    pub fn backprojected(&self) -> Vec<BackprojectedPoint> {
        let mean = self.model.mean_mesh();
        backproject_keypoints(&mean, &self.scene.alignment, &self.observations()).expect("backprojection").points
    }

    pub fn pose_problem(&self) -> PoseProblem {
        let truth = self.model.synthesize(&self.scene.alpha).expect("truth");
        let frames = self
            .observations()
            .into_iter()
            .map(|f| PoseFrame {
                frame_id: f.frame_id,
                camera: f.camera,
                observations: f
                    .observations
                    .iter()
                    .map(|o| PoseObservation { point: o.vertex, pixel: o.pixel, weight: o.weight })
                    .collect(),
            })
            .collect();
        PoseProblem::new(frames, truth.vertices, self.scene.alignment.similarity).expect("pose problem")
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use headfit_core::pose_refine::pose_objective;

    #[test]
    fn fixture_is_consistent_at_ground_truth() {
        let fx = Fixture::new();
        let problem = fx.pose_problem();
        assert!(pose_objective(&problem, &fx.scene.alignment.rigid).unwrap() < 1e-12);
        assert!(!fx.backprojected().is_empty());
    }
}
