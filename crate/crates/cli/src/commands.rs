use std::path::{Path, PathBuf};

use headfit_core::io::{
    load_scene, read_cameras, read_json, read_keypoint_dir, read_mesh, save_result, save_sweep, save_synthetic,
    to_json_bytes, ProjectConfig, ScenePaths,
};
use headfit_core::metrics::{
    anthropometric_ratios, chamfer_scalp, rms_reprojection, vertex_displacement_consistency, ChamferOptions,
};
use headfit_core::shape_model::{read_archive, write_archive, HeadMesh, MorphableModel, SyntheticModelSpec};
use headfit_core::synth::{generate_scene, lambda_sweep, SceneSpec};
use headfit_core::{run_pipeline, Error, FitResult, Result, TriangleMesh};

use crate::{Cli, Command, EvalCommand, FitArgs, ModelBuildArgs, SceneArgs, SweepArgs, SynthArgs, ValidateArgs};

/// 2 for scenes the method cannot fit, 3 for unreadable or invalid input, 1 otherwise.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_unfittable() {
        2
    } else if e.is_input_error() {
        3
    } else {
        1
    }
}

fn required(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| Error::Validation(format!("--{name} is required (or set paths.{name} in the config)")))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => ProjectConfig::load(p)?,
        None => ProjectConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(t) = cli.threads {
        config.threads = Some(t);
    }
    config.validate()?;
    if let Some(n) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Fit(a) => fit(&config, a),
        Command::Synth(a) => synth(&config, a),
        Command::Sweep(a) => sweep(&config, a),
        Command::Eval(e) => eval(e),
        Command::Validate(a) => validate(&config, a),
        Command::ModelBuild(a) => model_build(a),
    }
}

fn scene_paths(config: &ProjectConfig, s: &SceneArgs) -> Result<ScenePaths> {
    Ok(ScenePaths {
        cameras: required(&s.cameras, &config.paths.cameras, "cameras")?,
        keypoints: required(&s.keypoints, &config.paths.keypoints, "keypoints")?,
        mesh: required(&s.mesh, &config.paths.mesh, "mesh")?,
        frontal_frame: s.frontal_frame,
    })
}

fn load_model(config: &ProjectConfig, flag: &Option<PathBuf>) -> Result<MorphableModel> {
    read_archive(&required(flag, &config.paths.model, "model")?)
}

fn fit(config: &ProjectConfig, a: FitArgs) -> Result<()> {
    let model = load_model(config, &a.model)?;
    let out = required(&a.out, &config.paths.out, "out")?;
    let scene = load_scene(&model, &scene_paths(config, &a.scene)?)?;
    let result = run_pipeline(&model, &scene, &config.fit)?;
    let manifest = save_result(&model, &result, &out)?;
    println!(
        "fit: {} stage-2 frames, {} iterations; outputs in {} (manifest {})",
        result.stage2_frames.len(),
        result.trace.len(),
        out.display(),
        manifest.digest()
    );
    Ok(())
}

fn scene_spec(config: &ProjectConfig, spec: &Option<PathBuf>) -> Result<SceneSpec> {
    let spec = match spec {
        Some(p) => read_json::<SceneSpec>(p)?,
        None => config.synth.clone(),
    };
    spec.validate()?;
    Ok(spec)
}

fn synth(config: &ProjectConfig, a: SynthArgs) -> Result<()> {
    let model = load_model(config, &a.model)?;
    let out = required(&a.out, &config.paths.out, "out")?;
    let spec = scene_spec(config, &a.spec)?;
    let scene = generate_scene(&model, &spec, config.seed)?;
    let manifest = save_synthetic(&model, &scene, &out)?;
    println!("synth: {} frames in {} (manifest {})", scene.input.cameras.len(), out.display(), manifest.digest());
    Ok(())
}

fn sweep(config: &ProjectConfig, a: SweepArgs) -> Result<()> {
    let model = load_model(config, &a.model)?;
    let out = required(&a.out, &config.paths.out, "out")?;
    let spec = scene_spec(config, &a.spec)?;
    let lambdas = a.lambdas.unwrap_or_else(|| config.sweep.lambdas.clone());
    let heads = a.heads.unwrap_or(config.sweep.heads);
    let report = lambda_sweep(&model, &lambdas, heads, &spec, &config.fit, config.seed)?;
    let manifest = save_sweep(&report, &out)?;
    for s in &report.summary {
        println!(
            "lambda {:>10}: cosine {:.4}  delta_s {:.6e}  ({} runs, {} failed)",
            s.lambda, s.mean_cosine, s.mean_delta_s, s.runs, s.failures
        );
    }
    println!("sweep: outputs in {} (manifest {})", out.display(), manifest.digest());
    Ok(())
}

fn head_mesh(model: &MorphableModel, path: &Path) -> Result<HeadMesh> {
    let m: TriangleMesh = read_mesh(path)?;
    if m.vertices.len() != model.vertex_count() || m.triangles[..] != model.topology()[..] {
        return Err(Error::format(path, "mesh does not have the model's topology"));
    }
    Ok(HeadMesh {
        vertices: m.vertices,
        topology: model.topology().clone(),
    })
}

fn emit<T: serde::Serialize>(value: &T, out: &Option<PathBuf>) -> Result<()> {
    let bytes = to_json_bytes(value);
    match out {
        Some(p) => std::fs::write(p, &bytes).map_err(|e| Error::io(p, e)),
        None => {
            print!("{}", String::from_utf8_lossy(&bytes));
            Ok(())
        }
    }
}

fn eval(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Chamfer { model, fitted, reference, head_width_mm, symmetric, out } => {
            let model = read_archive(&model)?;
            let fitted = head_mesh(&model, &fitted)?;
            let reference = read_mesh(&reference)?;
            let options = ChamferOptions { head_width_mm, symmetric };
            emit(&chamfer_scalp(&fitted, &reference, &model.regions(), &options)?, &out)
        }
        EvalCommand::Rms { model, fitted, cameras, keypoints, frames, result, subset, out } => {
            let model = read_archive(&model)?;
            let fitted = head_mesh(&model, &fitted)?;
            let cameras = read_cameras(&cameras)?;
            let keypoints = read_keypoint_dir(&keypoints)?;
            let frames = match (frames, result) {
                (Some(f), _) => f,
                (None, Some(r)) => read_json::<FitResult>(&r)?.split.held_out,
                (None, None) => keypoints.keys().copied().collect(),
            };
            emit(&rms_reprojection(&model, &fitted, &cameras, &keypoints, &frames, subset.into())?, &out)
        }
        EvalCommand::Ratios { fitted, cameras, portrait, lateral, out } => {
            let mesh = read_mesh(&fitted)?;
            let cameras = read_cameras(&cameras)?;
            let cam = |f| cameras.get(&f).ok_or_else(|| Error::Validation(format!("no camera for frame {f}")));
            let head = HeadMesh {
                vertices: mesh.vertices,
                topology: mesh.triangles.into(),
            };
            emit(&anthropometric_ratios(&head, cam(portrait)?, cam(lateral)?)?, &out)
        }
        EvalCommand::Consistency { model, a, b, out } => {
            let model = read_archive(&model)?;
            let a = head_mesh(&model, &a)?;
            let b = head_mesh(&model, &b)?;
            emit(&vertex_displacement_consistency(&a, &b, &model.regions())?, &out)
        }
    }
}

fn validate(config: &ProjectConfig, a: ValidateArgs) -> Result<()> {
    let model = match a.model.as_ref().or(config.paths.model.as_ref()) {
        Some(p) => {
            let m = read_archive(p)?;
            println!("model: {} vertices, {} components", m.vertex_count(), m.n_components());
            Some(m)
        }
        None => None,
    };
    let s = &a.scene;
    let any_scene = s.cameras.is_some() || s.keypoints.is_some() || s.mesh.is_some();
    if any_scene || config.paths.cameras.is_some() {
        let paths = scene_paths(config, s)?;
        let model = model.ok_or_else(|| Error::Validation("--model is required to validate a scene".into()))?;
        let scene = load_scene(&model, &paths)?;
        println!(
            "scene: {} cameras, {} keypoint frames, dense mesh with {} vertices, frontal frame {}",
            scene.cameras.len(),
            scene.keypoints.len(),
            scene.dense.vertices.len(),
            scene.frontal_frame
        );
    }
    println!("ok");
    Ok(())
}

fn model_build(a: ModelBuildArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_json::<SyntheticModelSpec>(p)?,
        None => SyntheticModelSpec::default(),
    };
    if let Some(s) = a.subdivisions {
        spec.subdivisions = s;
    }
    if let Some(n) = a.components {
        spec.n_components = n;
    }
    if let Some(n) = a.aux_landmarks {
        spec.aux_landmarks = n;
    }
    let model = spec.build()?;
    write_archive(&model, &a.out)?;
    println!(
        "model-build: {} vertices, {} components -> {}",
        model.vertex_count(),
        model.n_components(),
        a.out.display()
    );
    Ok(())
}
