use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hanerf_core::appearance::{self, encode_appearance, EncoderConfig};
use hanerf_core::cameras::{CameraIntrinsics, CameraPose};
use hanerf_core::datagen::{render_ground_truth, SyntheticScene};
use hanerf_core::diffcore::{forward_backward, Array};
use hanerf_core::field::{self, encode_rows, FieldConfig};
use hanerf_core::imaging::Image;
use hanerf_core::occlusion::VisibilityConfig;
use hanerf_core::renderer::composite;
use hanerf_core::trainer::{
    loss_and_gradients, sample_batch, Mode, ModelConfig, TrainConfig, TrainingSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_composite(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let k = 64;
    let sigmas: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..20.0)).collect();
    let colors: Vec<[f64; 3]> = (0..k)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    let deltas = vec![0.05; k];
    c.bench_function("composite 1024 rays x 64 samples", |b| {
        b.iter(|| {
            for _ in 0..1024 {
                std::hint::black_box(composite(&sigmas, &colors, &deltas));
            }
        })
    });
}

fn bench_field(c: &mut Criterion) {
    let cfg = FieldConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = field::init_params(&cfg, &mut rng).unwrap();
    let n = 4096;
    let points = Array::new(
        &[n, 3],
        (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );
    let gx = encode_rows(&points, cfg.position_encoding);
    let gd = encode_rows(&points, cfg.direction_encoding);
    let app = Array::zeros(&[n, cfg.appearance_dim]);
    c.bench_function("field forward+backward 4096 points", |b| {
        b.iter(|| {
            forward_backward(&params, |g, v| {
                let x = g.constant(gx.clone());
                let d = g.constant(gd.clone());
                let a = g.constant(app.clone());
                let (sigma, z) = field::density(g, v, &cfg, x);
                let rgb = field::color(g, v, &cfg, d, z, a);
                let s = g.sum(sigma);
                let t = g.sum(rgb);
                g.add(s, t)
            })
            .unwrap()
        })
    });
}

fn bench_encoder(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = appearance::init_params(&cfg, &mut rng).unwrap();
    let img = Image::new(64, 64, (0..64 * 64 * 3).map(|_| rng.random()).collect()).unwrap();
    c.bench_function("encode appearance 64x64", |b| {
        b.iter(|| encode_appearance(&params, &cfg, &img).unwrap())
    });
}

fn bench_training_step(c: &mut Criterion) {
    let scene = SyntheticScene::procedural(0);
    let intr = CameraIntrinsics::from_fov(64, 64, 40.0).unwrap();
    let poses: Vec<CameraPose> = (0..8)
        .map(|i| {
            let a = i as f64 * 0.8;
            let eye = nalgebra::Vector3::new(3.5 * a.cos(), 3.5 * a.sin(), 2.0);
            CameraPose::look_at(eye, nalgebra::Vector3::zeros(), nalgebra::Vector3::z()).unwrap()
        })
        .collect();
    let images = poses
        .iter()
        .map(|p| render_ground_truth(&scene, &intr, p))
        .collect();
    let data = TrainingSet::new(intr, poses, images).unwrap();
    let cfg = TrainConfig {
        mode: Mode::HaNerf,
        batch_rays: 256,
        samples_per_ray: 32,
        model: ModelConfig {
            field: FieldConfig {
                depth: 4,
                width: 64,
                skip_layer: Some(2),
                color_width: 32,
                ..FieldConfig::default()
            },
            encoder: EncoderConfig::default(),
            visibility: VisibilityConfig {
                depth: 3,
                width: 64,
                ..VisibilityConfig::default()
            },
        },
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params =
        hanerf_core::trainer::init_model(cfg.mode, &cfg.model, data.len(), &mut rng).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("ha-nerf step, 256 rays x 32 samples", |b| {
        b.iter_batched(
            || sample_batch(&data, &cfg, &mut rng).unwrap(),
            |batch| loss_and_gradients(&params, &data, &cfg, &batch).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_composite,
    bench_field,
    bench_encoder,
    bench_training_step
);
criterion_main!(benches);
