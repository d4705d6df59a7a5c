//! Small end-to-end training runs on synthetic data.

use hanerf_core::appearance::EncoderConfig;
use hanerf_core::datagen::{
    generate_dataset, Dataset, DatasetSpec, PerturbationSpec, SyntheticScene,
};
use hanerf_core::field::{FieldConfig, PositionalEncodingConfig};
use hanerf_core::metrics::psnr;
use hanerf_core::occlusion::VisibilityConfig;
use hanerf_core::trainer::{
    run_training, train, Mode, Model, ModelConfig, Outcome, TrainConfig, Trainer, TrainingSet,
};

fn pe(frequencies: usize) -> PositionalEncodingConfig {
    PositionalEncodingConfig {
        frequencies,
        include_raw: true,
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        field: FieldConfig {
            position_encoding: pe(6),
            direction_encoding: pe(2),
            depth: 3,
            width: 32,
            skip_layer: Some(2),
            color_width: 16,
            appearance_dim: 8,
        },
        encoder: EncoderConfig {
            channels: vec![4, 8, 8, 8, 8],
            output_dim: 8,
        },
        visibility: VisibilityConfig {
            pixel_encoding: pe(4),
            depth: 2,
            width: 16,
            transient_dim: 8,
        },
    }
}

fn dataset(
    scene: u64,
    n_train: usize,
    perturbation: PerturbationSpec,
) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        n_train,
        n_test: 2,
        width: 32,
        height: 32,
        ..DatasetSpec::default()
    };
    generate_dataset(
        &SyntheticScene::procedural(scene),
        &spec,
        &perturbation,
        dir.path(),
    )
    .unwrap();
    let d = Dataset::load(dir.path()).unwrap();
    (dir, d)
}

fn unperturbed(seed: u64) -> PerturbationSpec {
    PerturbationSpec {
        color: false,
        occlusion: false,
        coverage: None,
        seed,
    }
}

#[test]
fn loss_halves_within_2000_iterations_and_renders_converge_in_k() {
    let (_dir, d) = dataset(0, 10, unperturbed(0));
    let cfg = TrainConfig {
        mode: Mode::Nerf,
        batch_rays: 128,
        samples_per_ray: 16,
        iterations: 2000,
        log_every: 1,
        lr_start: 2e-3,
        lr_end: 2e-4,
        seed: 7,
        model: small_model(),
        ..TrainConfig::default()
    };
    let run = train(&d, &cfg, None).unwrap();
    assert_eq!(run.outcome, Outcome::Completed);
    let window = |rows: &[hanerf_core::trainer::LogRow]| {
        rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64
    };
    let first = window(&run.log[..20]);
    let last = window(&run.log[run.log.len() - 20..]);
    assert!(last <= 0.5 * first, "loss {first} -> {last}");

    let mut model = Model::from_checkpoint(&run.checkpoint);
    let view = &d.test[0];
    let app = model.zero_appearance();
    model.samples_per_ray = 64;
    let coarse = model.render(&d.intrinsics, &view.pose, &app).unwrap();
    model.samples_per_ray = 128;
    let fine = model.render(&d.intrinsics, &view.pose, &app).unwrap();
    let diff = coarse
        .data()
        .iter()
        .zip(fine.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / fine.data().len() as f64;
    let worst = coarse
        .data()
        .iter()
        .zip(fine.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("doubling K: mean change {diff:.2e}, max {worst:.2e}");
    assert!(
        diff < 1e-2,
        "doubling K moved the render by {diff} on average"
    );
}

#[test]
fn appearance_from_another_scene_conditions_renders() {
    let (_dir, d) = dataset(0, 6, PerturbationSpec::color_only(0));
    let (_other_dir, other) = dataset(5, 2, PerturbationSpec::color_only(9));
    let cfg = TrainConfig {
        mode: Mode::NerfA,
        batch_rays: 64,
        samples_per_ray: 8,
        iterations: 40,
        seed: 2,
        model: small_model(),
        ..TrainConfig::default()
    };
    let run = train(&d, &cfg, None).unwrap();
    let model = Model::from_checkpoint(&run.checkpoint);
    let pose = &d.test[0].pose;
    let foreign = model.appearance(&other.train[0].image).unwrap();
    let own = model.appearance(&d.train[0].image).unwrap();
    let a = model.render(&d.intrinsics, pose, &foreign).unwrap();
    let b = model.render(&d.intrinsics, pose, &own).unwrap();
    assert!(a
        .data()
        .iter()
        .all(|c| c.is_finite() && (0.0..=1.0).contains(c)));
    assert!(psnr(&a, &b).unwrap() < 99.0);
}

#[test]
fn renders_do_not_depend_on_visibility_parameters() {
    let (_dir, d) = dataset(1, 4, PerturbationSpec::combined(1));
    let data = TrainingSet::from_dataset(&d).unwrap();
    let cfg = TrainConfig {
        mode: Mode::HaNerf,
        batch_rays: 64,
        samples_per_ray: 8,
        iterations: 20,
        seed: 4,
        model: small_model(),
        ..TrainConfig::default()
    };
    let run = run_training(Trainer::new(cfg, &data).unwrap(), None).unwrap();
    let full = Model::from_checkpoint(&run.checkpoint);
    let mut stripped = full.clone();
    stripped
        .params
        .retain(|n| !n.starts_with("visibility.") && !n.starts_with("transient."));
    assert!(stripped.params.names().count() < full.params.names().count());
    let app = full.appearance(&d.test[0].image).unwrap();
    let a = full.render(&d.intrinsics, &d.test[0].pose, &app).unwrap();
    let b = stripped
        .render(&d.intrinsics, &d.test[0].pose, &app)
        .unwrap();
    assert_eq!(a, b);
}
