//! Joint optimization of the radiance field, appearance encoder, visibility
//! field and transient embeddings, with ablation modes and checkpoints.

mod checkpoint;
mod model;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use model::{occluded, Model};

use crate::appearance::{self, grid_to_planar, view_consistent_loss, EncoderConfig};
use crate::cameras::{
    generate_grid_rays, generate_ray, random_view, CameraIntrinsics, CameraPose, Ray, SceneBounds,
};
use crate::datagen::Dataset;
use crate::diffcore::{
    adam_step, clip_grad_norm, AdamConfig, Array, Graph, ParamVars, ParameterSet, Var,
};
use crate::error::{Error, Result};
use crate::field::{self, FieldConfig};
use crate::imaging::Image;
use crate::occlusion::{self, occlusion_loss, visibility_graph, VisibilityConfig};
use crate::renderer::render_rays;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "nerf")]
    Nerf,
    #[serde(rename = "nerf-a")]
    NerfA,
    #[serde(rename = "nerf-t")]
    NerfT,
    #[serde(rename = "ha-nerf")]
    HaNerf,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Nerf, Mode::NerfA, Mode::NerfT, Mode::HaNerf];

    /// Trains the appearance encoder and the view-consistency term.
    pub fn uses_appearance(self) -> bool {
        matches!(self, Mode::NerfA | Mode::HaNerf)
    }

    /// Trains the visibility field and weights the loss with it.
    pub fn uses_visibility(self) -> bool {
        matches!(self, Mode::NerfT | Mode::HaNerf)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Nerf => "nerf",
            Mode::NerfA => "nerf-a",
            Mode::NerfT => "nerf-t",
            Mode::HaNerf => "ha-nerf",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode `{s}` (expected nerf, nerf-a, nerf-t or ha-nerf)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub field: FieldConfig,
    pub encoder: EncoderConfig,
    pub visibility: VisibilityConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Weight of the view-consistency loss.
    pub lambda: f64,
    /// Weight of the visibility regularizer.
    pub lambda_o: f64,
    pub samples_per_ray: usize,
    pub batch_rays: usize,
    /// Side of the hallucinated ray grid.
    pub grid_size: usize,
    pub iterations: u64,
    pub lr_start: f64,
    /// Learning rate reached at the final iteration (exponential decay).
    pub lr_end: f64,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,
    pub log_every: u64,
    pub checkpoint_every: Option<u64>,
    pub adam: AdamConfig,
    pub bounds: SceneBounds,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::HaNerf,
            lambda: 1e-3,
            lambda_o: occlusion::LAMBDA_O,
            samples_per_ray: 64,
            batch_rays: 1024,
            grid_size: 32,
            iterations: 20_000,
            lr_start: 5e-4,
            lr_end: 5e-5,
            seed: 0,
            max_grad_norm: None,
            log_every: 100,
            checkpoint_every: None,
            adam: AdamConfig::default(),
            bounds: SceneBounds::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda_o > 0.0) {
            return Err(Error::Config("lambda and lambda_o must be positive".into()));
        }
        if self.batch_rays == 0 || self.samples_per_ray < 2 {
            return Err(Error::Config(
                "need a positive ray batch and at least 2 samples per ray".into(),
            ));
        }
        if self.mode.uses_appearance() && self.grid_size < appearance::MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "grid size {} is below the encoder minimum {}",
                self.grid_size,
                appearance::MIN_IMAGE_SIDE
            )));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == Some(0) {
            return Err(Error::Config(
                "logging and checkpoint intervals must be positive".into(),
            ));
        }
        if self.model.field.appearance_dim != self.model.encoder.output_dim {
            return Err(Error::Config(
                "field appearance width differs from encoder output".into(),
            ));
        }
        self.model.field.validate()
    }

    /// `lr_start · (lr_end / lr_start)^(i / iterations)`.
    pub fn learning_rate(&self, iteration: u64) -> f64 {
        if self.iterations == 0 {
            return self.lr_start;
        }
        let frac = iteration as f64 / self.iterations as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(frac)
    }
}

/// Fresh parameters for the groups `mode` trains.
pub fn init_model<R: Rng + ?Sized>(
    mode: Mode,
    cfg: &ModelConfig,
    num_train_images: usize,
    rng: &mut R,
) -> Result<ParameterSet> {
    let mut p = field::init_params(&cfg.field, rng)?;
    if mode.uses_appearance() {
        p.extend(appearance::init_params(&cfg.encoder, rng)?)?;
    }
    if mode.uses_visibility() {
        p.extend(occlusion::init_params(
            &cfg.visibility,
            num_train_images,
            rng,
        )?)?;
    }
    Ok(p)
}

/// Training images with their cameras.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<CameraPose>,
    pub images: Vec<Image>,
    /// Point the cameras look at; novel views are aimed here.
    pub target: Vector3<f64>,
    pub up: Vector3<f64>,
    planar: Vec<Array>,
}

impl TrainingSet {
    pub fn new(
        intrinsics: CameraIntrinsics,
        poses: Vec<CameraPose>,
        images: Vec<Image>,
    ) -> Result<Self> {
        if poses.is_empty() || poses.len() != images.len() {
            return Err(Error::Input(format!(
                "need one pose per training image ({} poses, {} images)",
                poses.len(),
                images.len()
            )));
        }
        let (w, h) = (intrinsics.width as usize, intrinsics.height as usize);
        if let Some(bad) = images.iter().find(|i| (i.width(), i.height()) != (w, h)) {
            return Err(Error::Input(format!(
                "training image is {}x{}, intrinsics say {w}x{h}",
                bad.width(),
                bad.height()
            )));
        }
        let planar = images.iter().map(Image::to_planar).collect();
        Ok(Self {
            intrinsics,
            target: look_target(&poses),
            up: mean_up(&poses),
            poses,
            images,
            planar,
        })
    }

    pub fn from_dataset(d: &Dataset) -> Result<Self> {
        Self::new(
            d.intrinsics,
            d.train.iter().map(|v| v.pose).collect(),
            d.train.iter().map(|v| v.image.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Planar `[n,3,H,W]` stack of the given images.
    fn planar_stack(&self, ids: &[usize]) -> Array {
        let (w, h) = (
            self.intrinsics.width as usize,
            self.intrinsics.height as usize,
        );
        let mut data = Vec::with_capacity(ids.len() * 3 * w * h);
        for &i in ids {
            data.extend_from_slice(self.planar[i].data());
        }
        Array::new(&[ids.len(), 3, h, w], data)
    }
}

/// Least-squares point closest to every optical axis; the origin when the
/// axes are (nearly) parallel.
fn look_target(poses: &[CameraPose]) -> Vector3<f64> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for p in poses {
        let d = -p.rotation().column(2);
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * p.translation();
    }
    match a.try_inverse() {
        Some(inv) if a.determinant().abs() > 1e-6 * poses.len() as f64 => inv * b,
        _ => Vector3::zeros(),
    }
}

fn mean_up(poses: &[CameraPose]) -> Vector3<f64> {
    let s: Vector3<f64> = poses
        .iter()
        .map(|p| p.rotation().column(1).into_owned())
        .sum();
    if s.norm() < 1e-9 {
        Vector3::z()
    } else {
        s.normalize()
    }
}

/// Rays rendered under one encoded image for the view-consistency term.
#[derive(Clone, Debug)]
pub struct HallucinationView {
    pub rays: Vec<Ray>,
    pub grid_size: usize,
    /// Training image whose appearance conditions the render.
    pub source: usize,
}

/// Everything one loss evaluation needs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rays: Vec<Ray>,
    /// Observed colors `[B,3]`.
    pub observed: Array,
    /// Pixel centers normalized to `[0,1]²`.
    pub pixels: Vec<(f64, f64)>,
    pub image_ids: Vec<usize>,
    pub hallucination: Option<HallucinationView>,
    /// Stratified sampling seed; bin midpoints when `None`.
    pub sampling_seed: Option<u64>,
}

impl Batch {
    /// Distinct training images the batch encodes, ascending.
    pub fn encoded_images(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.image_ids.clone();
        ids.extend(self.hallucination.as_ref().map(|h| h.source));
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Uniform ray batch over all training pixels plus, for appearance modes,
/// one hallucinated grid view from a random interpolated pose.
pub fn sample_batch<R: Rng + ?Sized>(
    data: &TrainingSet,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Batch> {
    let (w, h) = (
        data.intrinsics.width as usize,
        data.intrinsics.height as usize,
    );
    let per_image = w * h;
    let mut rays = Vec::with_capacity(cfg.batch_rays);
    let mut observed = Vec::with_capacity(cfg.batch_rays * 3);
    let mut pixels = Vec::with_capacity(cfg.batch_rays);
    let mut image_ids = Vec::with_capacity(cfg.batch_rays);
    for _ in 0..cfg.batch_rays {
        let idx = rng.random_range(0..data.len() * per_image);
        let (img, p) = (idx / per_image, idx % per_image);
        let (x, y) = (p % w, p / w);
        let (u, v) = (x as f64 + 0.5, y as f64 + 0.5);
        rays.push(generate_ray(
            &data.intrinsics,
            &data.poses[img],
            (u, v),
            &cfg.bounds,
        )?);
        observed.extend_from_slice(&data.images[img].pixel(x, y));
        pixels.push((u / w as f64, v / h as f64));
        image_ids.push(img);
    }
    let hallucination = if cfg.mode.uses_appearance() {
        let source = rng.random_range(0..data.len());
        let pose = random_view(&data.poses, data.target, data.up, rng)?;
        let grid = generate_grid_rays(
            &data.intrinsics,
            &pose,
            cfg.grid_size,
            Some(rng.random()),
            &cfg.bounds,
        )?;
        Some(HallucinationView {
            rays: grid.rays,
            grid_size: cfg.grid_size,
            source,
        })
    } else {
        None
    };
    Ok(Batch {
        rays,
        observed: Array::new(&[cfg.batch_rays, 3], observed),
        pixels,
        image_ids,
        hallucination,
        sampling_seed: Some(rng.random()),
    })
}

/// Loss components of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean per-ray reconstruction term: the occlusion loss in visibility
    /// modes, the squared color error otherwise.
    pub l_o: f64,
    /// View-consistency loss of the hallucinated view (0 without one).
    pub l_v: f64,
    /// Mean squared color error per channel against the observed colors.
    pub mse: f64,
}

impl LossBreakdown {
    /// PSNR of the batch reconstruction against the observed colors.
    pub fn psnr_probe(&self) -> f64 {
        if self.mse > 0.0 {
            -10.0 * self.mse.log10()
        } else {
            crate::metrics::PSNR_CAP
        }
    }
}

/// `l_o + λ·l_v`.
pub fn combine_losses(l_o: f64, l_v: f64, lambda: f64) -> f64 {
    l_o + lambda * l_v
}

pub struct LossVars {
    pub total: Var,
    pub l_o: Var,
    pub l_v: Option<Var>,
    pub mse: Var,
}

/// Builds the training objective of `cfg.mode` on `batch`.
///
/// * nerf: mean squared color error under a zero appearance vector.
/// * nerf-a: appearance-conditioned squared error plus `λ·L_v`.
/// * nerf-t: mean occlusion loss under a zero appearance vector.
/// * ha-nerf: mean occlusion loss plus `λ·L_v`.
pub fn total_loss(
    g: &mut Graph,
    vars: &ParamVars,
    data: &TrainingSet,
    cfg: &TrainConfig,
    batch: &Batch,
) -> Result<LossVars> {
    let model = &cfg.model;
    let n = batch.rays.len();
    let encoded = batch.encoded_images();
    let (appearance, index) = if cfg.mode.uses_appearance() {
        let input = g.constant(data.planar_stack(&encoded));
        let codes = appearance::encode_graph(g, vars, &model.encoder, input);
        let index: Vec<usize> = batch
            .image_ids
            .iter()
            .map(|id| encoded.binary_search(id).expect("batch image is encoded"))
            .collect();
        (codes, index)
    } else {
        (
            g.constant(Array::zeros(&[1, model.field.appearance_dim])),
            vec![0; n],
        )
    };

    let mut rng = batch.sampling_seed.map(ChaCha8Rng::seed_from_u64);
    let out = render_rays(
        g,
        vars,
        &model.field,
        &batch.rays,
        appearance,
        &index,
        cfg.samples_per_ray,
        rng.as_mut(),
    )?;
    let observed = g.constant(batch.observed.clone());
    let diff = g.sub(observed, out.rgb);
    let sq = g.square(diff);
    let mse = g.mean(sq);
    let l_o = if cfg.mode.uses_visibility() {
        let m = visibility_graph(g, vars, &model.visibility, &batch.pixels, &batch.image_ids);
        let per_ray = occlusion_loss(g, m, observed, out.rgb, cfg.lambda_o);
        g.mean(per_ray)
    } else {
        let per_ray = g.sum_cols(sq);
        g.mean(per_ray)
    };

    let l_v = match (&batch.hallucination, cfg.mode.uses_appearance()) {
        (Some(h), true) => {
            let slot = encoded
                .binary_search(&h.source)
                .expect("source image is encoded");
            let idx = vec![slot; h.rays.len()];
            let grid = render_rays(
                g,
                vars,
                &model.field,
                &h.rays,
                appearance,
                &idx,
                cfg.samples_per_ray,
                rng.as_mut(),
            )?;
            let img = grid_to_planar(g, grid.rgb, h.grid_size);
            let re = appearance::encode_graph(g, vars, &model.encoder, img);
            let target = g.gather_rows(appearance, &[slot]);
            Some(view_consistent_loss(g, re, target))
        }
        _ => None,
    };
    let total = match l_v {
        Some(lv) => {
            let weighted = g.scale(lv, cfg.lambda);
            g.add(l_o, weighted)
        }
        None => l_o,
    };
    Ok(LossVars {
        total,
        l_o,
        l_v,
        mse,
    })
}

/// Rays rendered per graph when accumulating gradients over a batch.
pub const TRAIN_CHUNK: usize = 256;

fn accumulate(into: &mut BTreeMap<String, Array>, part: BTreeMap<String, Array>) {
    for (name, g) in part {
        into.get_mut(&name)
            .expect("same parameter set")
            .add_assign(&g);
    }
}

fn row_block(a: &Array, start: usize, end: usize) -> Array {
    let c = a.cols();
    Array::new(&[end - start, c], a.data()[start * c..end * c].to_vec())
}

/// Loss value and per-parameter gradients on one batch.
///
/// Evaluates the same objective as [`total_loss`] but renders at most
/// [`TRAIN_CHUNK`] rays per graph, so memory stays bounded for large
/// batches and grids. Appearance codes are leaves of each chunk graph and
/// their gradients are pushed through the encoder once at the end. The
/// hallucinated grid is rendered twice: once to feed the encoder and once
/// per chunk to backpropagate the image gradient into the field.
pub fn loss_and_gradients(
    params: &ParameterSet,
    data: &TrainingSet,
    cfg: &TrainConfig,
    batch: &Batch,
) -> Result<(LossBreakdown, BTreeMap<String, Array>)> {
    let model = &cfg.model;
    let k = cfg.samples_per_ray;
    let n = batch.rays.len();
    let mut grads: BTreeMap<String, Array> = params
        .iter()
        .map(|(name, p)| (name.to_string(), Array::zeros(p.value.shape())))
        .collect();

    let encoded = batch.encoded_images();
    let mut enc = Graph::new();
    let enc_vars = enc.bind(params);
    let (code_var, codes, index) = if cfg.mode.uses_appearance() {
        let input = enc.constant(data.planar_stack(&encoded));
        let c = appearance::encode_graph(&mut enc, &enc_vars, &model.encoder, input);
        let index: Vec<usize> = batch
            .image_ids
            .iter()
            .map(|id| encoded.binary_search(id).expect("batch image is encoded"))
            .collect();
        (Some(c), enc.value(c).clone(), index)
    } else {
        (
            None,
            Array::zeros(&[1, model.field.appearance_dim]),
            vec![0; n],
        )
    };
    let mut code_grad = Array::zeros(codes.shape());

    let mut rng = batch.sampling_seed.map(ChaCha8Rng::seed_from_u64);
    let (mut l_o, mut sq_total) = (0.0, 0.0);
    for start in (0..n).step_by(TRAIN_CHUNK) {
        let end = (start + TRAIN_CHUNK).min(n);
        let mut g = Graph::new();
        let vars = g.bind(params);
        let app = g.input(codes.clone());
        let out = render_rays(
            &mut g,
            &vars,
            &model.field,
            &batch.rays[start..end],
            app,
            &index[start..end],
            k,
            rng.as_mut(),
        )?;
        let observed = g.constant(row_block(&batch.observed, start, end));
        let diff = g.sub(observed, out.rgb);
        let sq = g.square(diff);
        let per_ray = if cfg.mode.uses_visibility() {
            let m = visibility_graph(
                &mut g,
                &vars,
                &model.visibility,
                &batch.pixels[start..end],
                &batch.image_ids[start..end],
            );
            occlusion_loss(&mut g, m, observed, out.rgb, cfg.lambda_o)
        } else {
            g.sum_cols(sq)
        };
        let summed = g.sum(per_ray);
        let part = g.scale(summed, 1.0 / n as f64);
        l_o += g.value(part).item();
        sq_total += g.value(sq).sum();
        let mut gr = g.backward(part)?;
        if let Some(d) = gr.get(app) {
            code_grad.add_assign(d);
        }
        accumulate(&mut grads, vars.collect(&g, &mut gr));
    }

    let mut l_v = 0.0;
    if let (Some(h), true) = (&batch.hallucination, cfg.mode.uses_appearance()) {
        let slot = encoded
            .binary_search(&h.source)
            .expect("source image is encoded");
        let replay = rng.clone();
        let mut rgb = Vec::with_capacity(h.rays.len() * 3);
        for chunk in h.rays.chunks(TRAIN_CHUNK) {
            let mut g = Graph::new();
            let vars = g.bind_frozen(params);
            let app = g.constant(codes.clone());
            let out = render_rays(
                &mut g,
                &vars,
                &model.field,
                chunk,
                app,
                &vec![slot; chunk.len()],
                k,
                rng.as_mut(),
            )?;
            rgb.extend_from_slice(g.value(out.rgb).data());
        }

        let mut g = Graph::new();
        let vars = g.bind(params);
        let grid = g.input(Array::new(&[h.rays.len(), 3], rgb));
        let img = grid_to_planar(&mut g, grid, h.grid_size);
        let re = appearance::encode_graph(&mut g, &vars, &model.encoder, img);
        let all = g.input(codes.clone());
        let target = g.gather_rows(all, &[slot]);
        let lv = view_consistent_loss(&mut g, re, target);
        let weighted = g.scale(lv, cfg.lambda);
        l_v = g.value(lv).item();
        let mut gr = g.backward(weighted)?;
        let image_grad = gr
            .get(grid)
            .cloned()
            .unwrap_or_else(|| Array::zeros(&[h.rays.len(), 3]));
        if let Some(d) = gr.get(all) {
            code_grad.add_assign(d);
        }
        accumulate(&mut grads, vars.collect(&g, &mut gr));

        let mut rng = replay;
        for (c, chunk) in h.rays.chunks(TRAIN_CHUNK).enumerate() {
            let start = c * TRAIN_CHUNK;
            let mut g = Graph::new();
            let vars = g.bind(params);
            let app = g.input(codes.clone());
            let out = render_rays(
                &mut g,
                &vars,
                &model.field,
                chunk,
                app,
                &vec![slot; chunk.len()],
                k,
                rng.as_mut(),
            )?;
            let seed = row_block(&image_grad, start, start + chunk.len());
            let mut gr = g.backward_seeded(vec![(out.rgb, seed)])?;
            if let Some(d) = gr.get(app) {
                code_grad.add_assign(d);
            }
            accumulate(&mut grads, vars.collect(&g, &mut gr));
        }
    }

    if let Some(c) = code_var {
        let mut gr = enc.backward_seeded(vec![(c, code_grad)])?;
        accumulate(&mut grads, enc_vars.collect(&enc, &mut gr));
    }

    let total = combine_losses(l_o, l_v, cfg.lambda);
    if !total.is_finite() {
        return Err(Error::Divergence {
            iteration: None,
            context: format!("loss evaluated to {total}"),
        });
    }
    let breakdown = LossBreakdown {
        total,
        l_o,
        l_v,
        mse: sq_total / (3 * n) as f64,
    };
    Ok((breakdown, grads))
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub total: f64,
    pub l_o: f64,
    pub l_v: f64,
    pub psnr_probe: f64,
}

pub fn metrics_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iteration,total,l_o,l_v,psnr_probe\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:.4}\n",
            r.iteration, r.total, r.l_o, r.l_v, r.psnr_probe
        ));
    }
    s
}

/// Optimizer state plus the training stream.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a TrainingSet,
    params: ParameterSet,
    iteration: u64,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a TrainingSet) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = init_model(cfg.mode, &cfg.model, data.len(), &mut rng)?;
        Ok(Self {
            cfg,
            data,
            params,
            iteration: 0,
            rng,
        })
    }

    /// Continues from a checkpoint; the subsequent trajectory matches an
    /// uninterrupted run bit for bit.
    pub fn resume(ckpt: Checkpoint, data: &'a TrainingSet) -> Result<Self> {
        ckpt.config.validate()?;
        ckpt.check_compatible(&ckpt.config, data.len())?;
        let rng = ckpt.rng.restore();
        Ok(Self {
            cfg: ckpt.config,
            data,
            params: ckpt.params,
            iteration: ckpt.iteration,
            rng,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
            num_train_images: self.data.len(),
            params: self.params.clone(),
        }
    }

    /// One optimizer step. On a non-finite loss or gradient the parameters,
    /// iteration count and random stream are left as they were.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let mut rng = self.rng.clone();
        let batch = sample_batch(self.data, &self.cfg, &mut rng)?;
        let diverged = |context: String| Error::Divergence {
            iteration: Some(self.iteration),
            context,
        };
        let (loss, mut grads) = match loss_and_gradients(&self.params, self.data, &self.cfg, &batch)
        {
            Err(Error::Divergence { context, .. }) => return Err(diverged(context)),
            other => other?,
        };
        if !loss.total.is_finite() {
            return Err(diverged(format!("loss is {}", loss.total)));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(diverged(format!("gradient of `{name}` is not finite")));
        }
        if let Some(max) = self.cfg.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        let lr = self.cfg.learning_rate(self.iteration);
        adam_step(&mut self.params, &grads, lr, self.cfg.adam)?;
        self.rng = rng;
        self.iteration += 1;
        Ok(loss)
    }
}

/// How a training run ended.
#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Completed,
    /// Aborted on a non-finite loss; the checkpoint is the last good state.
    Diverged {
        iteration: u64,
        context: String,
    },
}

pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub outcome: Outcome,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Runs `trainer` up to its configured iteration count. With `out_dir`, the
/// metrics log is written at the end and checkpoints periodically and at
/// exit.
pub fn run_training(mut trainer: Trainer<'_>, out_dir: Option<&Path>) -> Result<TrainRun> {
    let mut log = Vec::new();
    let mut outcome = Outcome::Completed;
    while trainer.iteration() < trainer.config().iterations {
        let i = trainer.iteration();
        match trainer.step() {
            Ok(loss) => {
                let done = trainer.iteration();
                if i.is_multiple_of(trainer.config().log_every)
                    || done == trainer.config().iterations
                {
                    log.push(LogRow {
                        iteration: i,
                        total: loss.total,
                        l_o: loss.l_o,
                        l_v: loss.l_v,
                        psnr_probe: loss.psnr_probe(),
                    });
                }
                if let (Some(dir), Some(every)) = (out_dir, trainer.config().checkpoint_every) {
                    if done.is_multiple_of(every) {
                        save_checkpoint(&trainer.checkpoint(), &dir.join(CHECKPOINT_FILE))?;
                    }
                }
            }
            Err(Error::Divergence { iteration, context }) => {
                outcome = Outcome::Diverged {
                    iteration: iteration.unwrap_or(i),
                    context,
                };
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(&checkpoint, &dir.join(CHECKPOINT_FILE))?;
        let path = dir.join(METRICS_FILE);
        fs::write(&path, metrics_csv(&log)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainRun {
        checkpoint,
        log,
        outcome,
    })
}

/// Trains from scratch on the training split of `dataset`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainRun> {
    let data = TrainingSet::from_dataset(dataset)?;
    run_training(Trainer::new(cfg.clone(), &data)?, out_dir)
}
