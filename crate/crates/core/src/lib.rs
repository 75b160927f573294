//! Two-stage fitting of a PCA morphable head model to multi-view keypoints,
//! calibrated cameras and a dense reconstruction.
//!
//! Stage 1 fits facial landmarks on frontal frames. Stage 2 samples views all
//! around the head and adds scalp features taken from the silhouette of the
//! dense reconstruction. The [`synth`] module generates ground-truth scenes
//! and [`metrics`] implements the evaluation measures.

pub mod camera_geom;
pub mod error;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod pose_refine;
pub mod rng;
pub mod shape_model;
pub mod shape_solver;
pub mod silhouette;
pub mod synth;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Vec2 = nalgebra::Vector2<f64>;
pub type FrameId = u32;

pub use camera_geom::{camera_head_angles, umeyama_fit, PerspectiveCamera, RigidTransform, SimilarityTransform};
pub use error::{Error, Result};
pub use mesh::{KdTree, Triangle, TriangleMesh};
pub use pipeline::{run_pipeline, FitConfig, FitResult, Keypoint, SceneInput};
pub use pose_refine::{refine_pose, ConvergenceReport, JacobianMode, LmSettings, PoseProblem};
pub use shape_model::{
    param_cosine_similarity, sample_random_shape, shape_distance, synthesize, HeadMesh, MorphableModel, ShapeParams,
    SyntheticModelSpec,
};
pub use shape_solver::{Alignment, IterationRecord};
pub use silhouette::{filter_reconstruction, rasterize_silhouette, SilhouetteMask};
pub use synth::{generate_scene, lambda_sweep, NoiseSpec, SceneSpec, SyntheticScene};
