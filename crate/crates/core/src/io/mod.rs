//! File formats: meshes, cameras, keypoints, configuration and fit outputs.

mod mesh_io;
mod output;
mod scene_io;

pub use mesh_io::{ply_bytes, ply_from_bytes, read_mesh, read_obj, read_ply, write_ply};
pub use output::{
    jsonl_bytes, save_result, save_sweep, save_synthetic, sha256_hex, GroundTruth, Manifest, ManifestEntry, OutputDir,
    MANIFEST_FILE,
};
pub use scene_io::{
    camera_records, default_frontal_frame, keypoint_file_name, keypoint_files, load_scene, read_cameras, read_json,
    read_keypoint_dir, to_json_bytes, CameraRecord, KeypointFile, PathConfig, ProjectConfig, ScenePaths, SweepConfig,
};
