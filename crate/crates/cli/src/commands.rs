use std::fs;
use std::path::{Path, PathBuf};

use hanerf_core::appearance::{interpolate_appearance, AppearanceVector};
use hanerf_core::cameras::{CameraIntrinsics, CameraPose};
use hanerf_core::datagen::{
    generate_dataset, Dataset, DatasetManifest, DatasetSpec, PerturbationSpec, SyntheticScene,
    MANIFEST_FILE,
};
use hanerf_core::imaging::Image;
use hanerf_core::trainer::{
    load_checkpoint, run_training, Checkpoint, Model, Outcome, TrainConfig, Trainer, TrainingSet,
    CHECKPOINT_FILE, METRICS_FILE,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::exit::{CmdResult, Failure, INTERNAL};
use crate::pose::parse_pose;
use crate::runlog::{dataset_hash, file_hash, RunRecord};
use crate::{
    CameraArgs, EvalArgs, InterpolateArgs, Perturbation, RenderArgs, SynthArgs, TrainArgs,
    TransferArgs,
};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const RENDER_PNG: &str = "render.png";

/// Training settings plus where to read and write, as accepted by
/// `train --config`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

fn require(path: &Path, what: &str) -> CmdResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::missing(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn create_dir(dir: &Path) -> CmdResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn manifest_path(dataset: &Path) -> PathBuf {
    if dataset.is_dir() {
        dataset.join(MANIFEST_FILE)
    } else {
        dataset.to_path_buf()
    }
}

fn load_dataset(path: &Path, run: &mut RunRecord) -> CmdResult<Dataset> {
    require(&manifest_path(path), "dataset manifest")?;
    let d = Dataset::load(path)?;
    run.input("dataset", path, dataset_hash(&d.root, &d.manifest)?);
    Ok(d)
}

fn load_model(path: &Path, run: &mut RunRecord) -> CmdResult<(Model, Checkpoint)> {
    require(path, "checkpoint")?;
    let ckpt = load_checkpoint(path)?;
    run.input("checkpoint", path, file_hash(path)?);
    Ok((Model::from_checkpoint(&ckpt), ckpt))
}

fn load_image(path: &Path, role: &str, run: &mut RunRecord) -> CmdResult<Image> {
    require(path, "image")?;
    let img = Image::load_png(path)?;
    run.input(role, path, file_hash(path)?);
    Ok(img)
}

/// Camera from `--dataset` when given, otherwise from the size and
/// field-of-view flags.
fn camera(
    args: &CameraArgs,
    run: &mut RunRecord,
) -> CmdResult<(CameraIntrinsics, Option<DatasetManifest>)> {
    match &args.dataset {
        Some(d) => {
            let path = manifest_path(d);
            require(&path, "dataset manifest")?;
            let m = DatasetManifest::load(&path)?;
            run.input("manifest", &path, file_hash(&path)?);
            Ok((m.camera()?, Some(m)))
        }
        None => Ok((
            CameraIntrinsics::from_fov(args.width, args.height, args.fov)?,
            None,
        )),
    }
}

fn camera_json(args: &CameraArgs) -> serde_json::Value {
    json!({
        "dataset": args.dataset,
        "width": args.width,
        "height": args.height,
        "fov": args.fov,
    })
}

fn appearance_of(model: &Model, image: &Image) -> CmdResult<AppearanceVector> {
    if !model.mode.uses_appearance() {
        eprintln!(
            "note: {} mode has no appearance encoder; rendering with the zero appearance",
            model.mode
        );
    }
    Ok(model.appearance(image)?)
}

fn save_png(img: &Image, dir: &Path, name: &str, run: &mut RunRecord) -> CmdResult<()> {
    img.save_png(&dir.join(name))?;
    run.output(dir, name)
}

pub fn synth(args: &SynthArgs) -> CmdResult {
    let seed = args.perturb_seed.unwrap_or(args.scene_seed);
    let mut perturb = match args.perturb {
        Perturbation::Color => PerturbationSpec::color_only(seed),
        Perturbation::Occlusion => PerturbationSpec::occlusion_only(seed),
        Perturbation::Combined => PerturbationSpec::combined(seed),
    };
    if let Some(c) = args.coverage {
        if !perturb.occlusion {
            return Err(Failure::bad_input(
                "--coverage needs occlusion perturbations",
            ));
        }
        perturb.coverage = Some(c);
    }
    let spec = DatasetSpec {
        n_train: args.n_train,
        n_test: args.n_test,
        width: args.size,
        height: args.size,
        ..DatasetSpec::default()
    };
    let scene = SyntheticScene::procedural(args.scene_seed);
    create_dir(&args.out)?;
    let manifest = generate_dataset(&scene, &spec, &perturb, &args.out)?;

    let mut run = RunRecord::new(
        "synth",
        json!({
            "scene_seed": args.scene_seed,
            "scene": scene,
            "dataset": spec,
            "perturbation": perturb,
            "out": args.out,
        }),
    );
    run.outputs
        .insert("dataset".into(), dataset_hash(&args.out, &manifest)?);
    run.write(&args.out)?;
    println!("{}", args.out.join(MANIFEST_FILE).display());
    Ok(())
}

/// Loads `--config`, rejecting keys that are not settings, then applies
/// flag overrides.
pub fn resolve_train_config(args: &TrainArgs) -> CmdResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            require(path, "config file")?;
            let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Failure::bad_input(format!("{}: {e}", path.display())))?;
            let known = serde_json::to_value(RunConfig::default()).expect("config serializes");
            let (Some(given), Some(known)) = (value.as_object(), known.as_object()) else {
                return Err(Failure::bad_input(format!(
                    "{}: expected a JSON object",
                    path.display()
                )));
            };
            if let Some(k) = given.keys().find(|k| !known.contains_key(*k)) {
                return Err(Failure::bad_input(format!(
                    "{}: unknown setting `{k}`",
                    path.display()
                )));
            }
            serde_json::from_value(value)
                .map_err(|e| Failure::bad_input(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(v) = &args.dataset {
        cfg.dataset = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.out = Some(v.clone());
    }
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = args.$field { t.$field = v; })*};
    }
    set!(
        mode,
        iterations,
        seed,
        batch_rays,
        samples_per_ray,
        grid_size,
        lambda,
        lambda_o,
        lr_start,
        lr_end,
        log_every
    );
    if let Some(v) = args.checkpoint_every {
        t.checkpoint_every = Some(v);
    }
    t.validate()?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let cfg = resolve_train_config(args)?;
    let dataset_dir = cfg.dataset.clone().ok_or_else(|| {
        Failure::bad_input("no dataset given (--dataset or `dataset` in the config)")
    })?;
    let out = cfg.out.clone().ok_or_else(|| {
        Failure::bad_input("no output directory given (--out or `out` in the config)")
    })?;
    let mut run = RunRecord::new(
        "train",
        serde_json::to_value(&cfg).expect("config serializes"),
    );
    if let Some(path) = &args.config {
        run.input("config", path, file_hash(path)?);
    }
    create_dir(&out)?;
    let dataset = load_dataset(&dataset_dir, &mut run)?;
    let data = TrainingSet::from_dataset(&dataset)?;
    let trainer = match &args.resume {
        Some(path) => {
            require(path, "checkpoint")?;
            let mut ckpt = load_checkpoint(path)?;
            run.input("resume", path, file_hash(path)?);
            if ckpt.config.mode != cfg.train.mode {
                return Err(Failure::bad_input(format!(
                    "checkpoint was trained in {} mode, configuration asks for {}",
                    ckpt.config.mode, cfg.train.mode
                )));
            }
            ckpt.config.iterations = cfg.train.iterations;
            ckpt.config.log_every = cfg.train.log_every;
            ckpt.config.checkpoint_every = cfg.train.checkpoint_every;
            Trainer::resume(ckpt, &data)?
        }
        None => Trainer::new(cfg.train.clone(), &data)?,
    };
    let result = run_training(trainer, Some(&out))?;
    run.output(&out, CHECKPOINT_FILE)?;
    run.output(&out, METRICS_FILE)?;
    run.write(&out)?;
    match result.outcome {
        Outcome::Completed => {
            let last = result.log.last().map_or(f64::NAN, |r| r.total);
            println!(
                "trained {} for {} iterations (final loss {last:.6e}); checkpoint at {}",
                cfg.train.mode,
                result.checkpoint.iteration,
                out.join(CHECKPOINT_FILE).display()
            );
            Ok(())
        }
        Outcome::Diverged { iteration, context } => Err(Failure::new(
            INTERNAL,
            format!(
                "training diverged at iteration {iteration}: {context}; last good state saved to {}",
                out.join(CHECKPOINT_FILE).display()
            ),
        )),
    }
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let mut run = RunRecord::new(
        "eval",
        json!({ "ckpt": args.ckpt, "dataset": args.dataset, "out": args.out }),
    );
    let (model, ckpt) = load_model(&args.ckpt, &mut run)?;
    let dataset = load_dataset(&args.dataset, &mut run)?;
    create_dir(&args.out)?;
    let config = json!({ "iteration": ckpt.iteration, "train": ckpt.config });
    let (report, renders) = model.evaluate(&dataset, config)?;
    create_dir(&args.out.join("renders"))?;
    for (view, img) in dataset.test.iter().zip(&renders) {
        let name = format!("renders/{:03}.png", view.id);
        img.save_png(&args.out.join(&name))?;
        run.output(&args.out, &name)?;
    }
    for (name, text) in [
        (REPORT_JSON, report.to_json()),
        (REPORT_CSV, report.to_csv()),
    ] {
        let path = args.out.join(name);
        fs::write(&path, text).map_err(|e| Failure::io(&path, e))?;
        run.output(&args.out, name)?;
    }
    run.write(&args.out)?;
    let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
    println!(
        "{}: {} test views, mean PSNR {} dB (clean {} dB)",
        report.mode,
        report.images.len(),
        show(report.psnr.mean),
        show(report.psnr_clean.mean)
    );
    Ok(())
}

pub fn render(args: &RenderArgs) -> CmdResult {
    let mut run = RunRecord::new(
        "render",
        json!({
            "ckpt": args.ckpt,
            "pose": args.pose,
            "appearance_image": args.appearance_image,
            "camera": camera_json(&args.camera),
            "out": args.out,
        }),
    );
    let (model, _) = load_model(&args.ckpt, &mut run)?;
    let (intr, manifest) = camera(&args.camera, &mut run)?;
    let pose = parse_pose(&args.pose, manifest.as_ref())?;
    let app = match &args.appearance_image {
        Some(p) => appearance_of(&model, &load_image(p, "appearance_image", &mut run)?)?,
        None => model.zero_appearance(),
    };
    create_dir(&args.out)?;
    let img = model.render(&intr, &pose, &app)?;
    save_png(&img, &args.out, RENDER_PNG, &mut run)?;
    run.write(&args.out)?;
    println!("{}", args.out.join(RENDER_PNG).display());
    Ok(())
}

pub fn transfer(args: &TransferArgs) -> CmdResult {
    let mut run = RunRecord::new(
        "transfer",
        json!({
            "ckpt": args.ckpt,
            "example": args.example,
            "poses": args.poses,
            "camera": camera_json(&args.camera),
            "out": args.out,
        }),
    );
    let (model, _) = load_model(&args.ckpt, &mut run)?;
    let (intr, manifest) = camera(&args.camera, &mut run)?;
    let poses: Vec<CameraPose> = args
        .poses
        .iter()
        .map(|p| parse_pose(p, manifest.as_ref()))
        .collect::<CmdResult<_>>()?;
    let app = appearance_of(&model, &load_image(&args.example, "example", &mut run)?)?;
    create_dir(&args.out)?;
    for (i, pose) in poses.iter().enumerate() {
        let img = model.render(&intr, pose, &app)?;
        save_png(&img, &args.out, &format!("transfer_{i:03}.png"), &mut run)?;
    }
    run.write(&args.out)?;
    println!("{} views written to {}", poses.len(), args.out.display());
    Ok(())
}

pub fn interpolate(args: &InterpolateArgs) -> CmdResult {
    if args.steps < 2 {
        return Err(Failure::bad_input("--steps must be at least 2"));
    }
    let mut run = RunRecord::new(
        "interpolate",
        json!({
            "ckpt": args.ckpt,
            "a": args.a,
            "b": args.b,
            "steps": args.steps,
            "pose": args.pose,
            "camera": camera_json(&args.camera),
            "out": args.out,
        }),
    );
    let (model, _) = load_model(&args.ckpt, &mut run)?;
    let (intr, manifest) = camera(&args.camera, &mut run)?;
    let pose = parse_pose(&args.pose, manifest.as_ref())?;
    let a = appearance_of(&model, &load_image(&args.a, "a", &mut run)?)?;
    let b = model.appearance(&load_image(&args.b, "b", &mut run)?)?;
    create_dir(&args.out)?;
    for i in 0..args.steps {
        let t = i as f64 / (args.steps - 1) as f64;
        let app = interpolate_appearance(&a, &b, t)?;
        let img = model.render(&intr, &pose, &app)?;
        save_png(&img, &args.out, &format!("step_{i:03}.png"), &mut run)?;
    }
    run.write(&args.out)?;
    println!("{} steps written to {}", args.steps, args.out.display());
    Ok(())
}
