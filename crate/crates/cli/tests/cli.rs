use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hanerf_core::appearance::EncoderConfig;
use hanerf_core::datagen::{DatasetManifest, Split};
use hanerf_core::field::{FieldConfig, PositionalEncodingConfig};
use hanerf_core::imaging::Mask;
use hanerf_core::occlusion::VisibilityConfig;
use hanerf_core::trainer::{load_checkpoint, Mode, ModelConfig, TrainConfig};
use serde_json::{json, Value};
use tempfile::TempDir;

const IDENTITY_AT_FOUR: &str = "1,0,0,0,0,1,0,0,0,0,1,4,0,0,0,1";

fn hanerf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hanerf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hanerf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    hanerf(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn pe(frequencies: usize) -> PositionalEncodingConfig {
    PositionalEncodingConfig {
        frequencies,
        include_raw: true,
    }
}

fn micro_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        samples_per_ray: 8,
        batch_rays: 16,
        iterations: 3,
        log_every: 1,
        seed: 5,
        model: ModelConfig {
            field: FieldConfig {
                position_encoding: pe(3),
                direction_encoding: pe(2),
                depth: 3,
                width: 12,
                skip_layer: Some(2),
                color_width: 8,
                appearance_dim: 4,
            },
            encoder: EncoderConfig {
                channels: vec![3, 3, 3, 3, 3],
                output_dim: 4,
            },
            visibility: VisibilityConfig {
                pixel_encoding: pe(3),
                depth: 2,
                width: 12,
                transient_dim: 4,
            },
        },
        ..TrainConfig::default()
    }
}

fn small_dataset(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    ok(&[
        "synth",
        "--n-train",
        "4",
        "--n-test",
        "2",
        "--size",
        "32",
        "--scene-seed",
        "3",
        "--out",
        s(&out),
    ]);
    out
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

/// Trains a micro ha-nerf model into `dir/run` and returns its checkpoint.
fn trained(dir: &Path, data: &Path) -> PathBuf {
    let cfg = write_config(
        dir,
        "micro.json",
        &serde_json::to_value(micro_config(Mode::HaNerf)).unwrap(),
    );
    let out = dir.join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--dataset",
        s(data),
        "--out",
        s(&out),
    ]);
    out.join("checkpoint.bin")
}

#[test]
fn synth_defaults_are_documented_sizes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    let printed = ok(&["synth", "--out", s(&out)]);
    assert_eq!(printed.trim(), s(&out.join("manifest.json")));
    let m = DatasetManifest::load(&out.join("manifest.json")).unwrap();
    let count = |split| m.frames.iter().filter(|f| f.split == split).count();
    assert_eq!((count(Split::Train), count(Split::Test)), (100, 8));
    assert_eq!((m.intrinsics.w, m.intrinsics.h), (64, 64));
    assert_eq!(read_json(&out.join("run.json"))["command"], "synth");
}

#[test]
fn synth_coverage_flag_sets_mask_coverage() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    ok(&[
        "synth",
        "--n-train",
        "10",
        "--n-test",
        "1",
        "--coverage",
        "0.2",
        "--out",
        s(&out),
    ]);
    let m = DatasetManifest::load(&out.join("manifest.json")).unwrap();
    let covers: Vec<f64> = m
        .frames
        .iter()
        .filter_map(|f| f.mask.as_ref())
        .map(|p| Mask::load_png(&out.join(p)).unwrap().coverage())
        .collect();
    assert_eq!(covers.len(), 10);
    let mean = covers.iter().sum::<f64>() / covers.len() as f64;
    assert!((mean - 0.2).abs() <= 0.02, "mean coverage {mean}");
}

#[test]
fn synth_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "synth",
            "--n-train",
            "3",
            "--n-test",
            "1",
            "--size",
            "32",
            "--scene-seed",
            "7",
            "--out",
            s(&out),
        ]);
        read_json(&out.join("run.json"))["outputs"]["dataset"].clone()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn synth_unwritable_output_is_io_error() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("occupied");
    fs::write(&file, b"x").unwrap();
    assert_eq!(
        code(&[
            "synth",
            "--n-train",
            "2",
            "--n-test",
            "1",
            "--out",
            s(&file.join("sub"))
        ]),
        2
    );
}

#[test]
fn bad_arguments_are_bad_input() {
    assert_eq!(code(&["train", "--mode", "nerf-x"]), 4);
    assert_eq!(code(&["synth"]), 4);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let ckpt = trained(tmp.path(), &data);
    let run = ckpt.parent().unwrap();
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let record = read_json(&run.join("run.json"));
    assert_eq!(record["config"]["mode"], "ha-nerf");
    assert_eq!(record["config"]["iterations"], 3);
    assert_eq!(record["config"]["dataset"], s(&data));
    assert!(record["inputs"]["dataset"]["hash"].is_string());

    let cfg = tmp.path().join("micro.json");
    let again = tmp.path().join("again");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--dataset",
        s(&data),
        "--out",
        s(&again),
    ]);
    assert_eq!(
        fs::read(&ckpt).unwrap(),
        fs::read(again.join("checkpoint.bin")).unwrap()
    );
    assert_eq!(
        read_json(&again.join("run.json"))["input_hash"],
        record["input_hash"]
    );
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let mut value = serde_json::to_value(micro_config(Mode::Nerf)).unwrap();
    value["dataset"] = json!(data);
    value["out"] = json!(tmp.path().join("from_file"));
    let cfg = write_config(tmp.path(), "c.json", &value);
    let out = tmp.path().join("from_flag");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--iterations",
        "2",
        "--mode",
        "nerf-t",
        "--out",
        s(&out),
    ]);
    let ckpt = load_checkpoint(&out.join("checkpoint.bin")).unwrap();
    assert_eq!((ckpt.iteration, ckpt.config.mode), (2, Mode::NerfT));
    assert!(!tmp.path().join("from_file").exists());
}

#[test]
fn train_rejects_bad_configs() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let out = tmp.path().join("o");
    let unknown = write_config(tmp.path(), "u.json", &json!({ "iteratoins": 3 }));
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&unknown),
            "--dataset",
            s(&data),
            "--out",
            s(&out)
        ]),
        4
    );
    let invalid = write_config(tmp.path(), "i.json", &json!({ "batch_rays": 0 }));
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&invalid),
            "--dataset",
            s(&data),
            "--out",
            s(&out)
        ]),
        4
    );
    let missing = tmp.path().join("nope.json");
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&missing),
            "--dataset",
            s(&data),
            "--out",
            s(&out)
        ]),
        3
    );
    assert_eq!(
        code(&[
            "train",
            "--dataset",
            s(&tmp.path().join("nodata")),
            "--out",
            s(&out)
        ]),
        3
    );
}

#[test]
fn eval_renders_every_test_view_deterministically() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    ok(&[
        "synth",
        "--n-train",
        "3",
        "--n-test",
        "8",
        "--size",
        "32",
        "--out",
        s(&out),
    ]);
    let ckpt = trained(tmp.path(), &out);
    let e1 = tmp.path().join("e1");
    let e2 = tmp.path().join("e2");
    for e in [&e1, &e2] {
        ok(&[
            "eval",
            "--ckpt",
            s(&ckpt),
            "--dataset",
            s(&out),
            "--out",
            s(e),
        ]);
    }
    let pngs = fs::read_dir(e1.join("renders")).unwrap().count();
    assert_eq!(pngs, 8);
    let report = read_json(&e1.join("report.json"));
    assert_eq!(report["images"].as_array().unwrap().len(), 8);
    assert_eq!(report["mode"], "ha-nerf");
    assert_eq!(report["visibility"].as_array().unwrap().len(), 3);
    assert_eq!(
        fs::read(e1.join("report.json")).unwrap(),
        fs::read(e2.join("report.json")).unwrap()
    );
}

#[test]
fn eval_without_checkpoint_is_missing_artifact() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let ckpt = tmp.path().join("absent.bin");
    assert_eq!(
        code(&[
            "eval",
            "--ckpt",
            s(&ckpt),
            "--dataset",
            s(&data),
            "--out",
            s(&tmp.path().join("e"))
        ]),
        3
    );
    let garbage = tmp.path().join("garbage.bin");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(
        code(&[
            "eval",
            "--ckpt",
            s(&garbage),
            "--dataset",
            s(&data),
            "--out",
            s(&tmp.path().join("e"))
        ]),
        4
    );
}

#[test]
fn render_pose_forms_and_errors() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let ckpt = trained(tmp.path(), &data);
    let r1 = tmp.path().join("r1");
    let r2 = tmp.path().join("r2");
    for r in [&r1, &r2] {
        ok(&[
            "render",
            "--ckpt",
            s(&ckpt),
            "--pose",
            IDENTITY_AT_FOUR,
            "--width",
            "24",
            "--height",
            "16",
            "--out",
            s(r),
        ]);
    }
    assert_eq!(
        fs::read(r1.join("render.png")).unwrap(),
        fs::read(r2.join("render.png")).unwrap()
    );

    let by_id = tmp.path().join("by_id");
    let image = data.join("train/000.png");
    ok(&[
        "render",
        "--ckpt",
        s(&ckpt),
        "--pose",
        "0",
        "--dataset",
        s(&data),
        "--appearance-image",
        s(&image),
        "--out",
        s(&by_id),
    ]);
    let record = read_json(&by_id.join("run.json"));
    assert!(record["inputs"]["appearance_image"]["hash"].is_string());

    let bad = tmp.path().join("bad");
    for pose in ["1,2,3", "0", "1,0,0,0,0,1,0,0,0,0,1,4,0,0,0,2"] {
        assert_eq!(
            code(&[
                "render",
                "--ckpt",
                s(&ckpt),
                "--pose",
                pose,
                "--out",
                s(&bad)
            ]),
            4,
            "{pose}"
        );
    }
    let missing = tmp.path().join("absent.png");
    assert_eq!(
        code(&[
            "render",
            "--ckpt",
            s(&ckpt),
            "--pose",
            "0",
            "--dataset",
            s(&data),
            "--appearance-image",
            s(&missing),
            "--out",
            s(&bad)
        ]),
        3
    );
}

#[test]
fn interpolation_endpoints_match_direct_renders() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let ckpt = trained(tmp.path(), &data);
    let a = data.join("train/000.png");
    let b = data.join("train/001.png");
    let strip = tmp.path().join("strip");
    ok(&[
        "interpolate",
        "--ckpt",
        s(&ckpt),
        "--a",
        s(&a),
        "--b",
        s(&b),
        "--steps",
        "2",
        "--pose",
        "1",
        "--dataset",
        s(&data),
        "--out",
        s(&strip),
    ]);
    for (img, step) in [(&a, "step_000.png"), (&b, "step_001.png")] {
        let direct = tmp.path().join(step);
        ok(&[
            "render",
            "--ckpt",
            s(&ckpt),
            "--pose",
            "1",
            "--dataset",
            s(&data),
            "--appearance-image",
            s(img),
            "--out",
            s(&direct),
        ]);
        assert_eq!(
            fs::read(strip.join(step)).unwrap(),
            fs::read(direct.join("render.png")).unwrap()
        );
    }
    let out = s(&strip);
    assert_eq!(
        code(&[
            "interpolate",
            "--ckpt",
            s(&ckpt),
            "--a",
            s(&a),
            "--b",
            s(&b),
            "--steps",
            "1",
            "--pose",
            "1",
            "--out",
            out
        ]),
        4
    );
}

#[test]
fn transfer_writes_one_image_per_pose() {
    let tmp = TempDir::new().unwrap();
    let data = small_dataset(tmp.path());
    let ckpt = trained(tmp.path(), &data);
    let out = tmp.path().join("t");
    ok(&[
        "transfer",
        "--ckpt",
        s(&ckpt),
        "--example",
        s(&data.join("train/002.png")),
        "--dataset",
        s(&data),
        "--poses",
        "0",
        "4",
        IDENTITY_AT_FOUR,
        "--out",
        s(&out),
    ]);
    for i in 0..3 {
        assert!(out.join(format!("transfer_{i:03}.png")).exists());
    }
    assert_eq!(
        read_json(&out.join("run.json"))["outputs"]
            .as_object()
            .unwrap()
            .len(),
        3
    );
}
