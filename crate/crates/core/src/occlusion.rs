//! Image-dependent 2D visibility field and the occlusion loss.
//!
//! For training image `i` and pixel `p`, the visibility field predicts the
//! probability `M ∈ (0,1)` that the observed color shows the static scene.
//! Its input is the encoded normalized pixel position concatenated with a
//! learned per-image transient embedding. Visibility only reweights the
//! training loss; rendering never consults it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Graph, ParamVars, ParameterSet, Var};
use crate::error::{Error, Result};
use crate::field::{encode_rows, PositionalEncodingConfig};
use crate::imaging::GrayImage;
use crate::init;

pub const TRANSIENT_DIM: usize = 128;
pub const LAMBDA_O: f64 = 6e-3;
const EMBEDDING_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityConfig {
    pub pixel_encoding: PositionalEncodingConfig,
    /// Hidden ReLU layers before the sigmoid output.
    pub depth: usize,
    pub width: usize,
    pub transient_dim: usize,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        Self {
            pixel_encoding: PositionalEncodingConfig {
                frequencies: 10,
                include_raw: true,
            },
            depth: 5,
            width: 256,
            transient_dim: TRANSIENT_DIM,
        }
    }
}

impl VisibilityConfig {
    pub fn input_dim(&self) -> usize {
        self.pixel_encoding.output_dim(2) + self.transient_dim
    }
}

pub mod names {
    pub const EMBEDDINGS: &str = "transient.embeddings";
    pub fn hidden_weight(i: usize) -> String {
        format!("visibility.{i}.weight")
    }
    pub fn hidden_bias(i: usize) -> String {
        format!("visibility.{i}.bias")
    }
    pub const OUT_WEIGHT: &str = "visibility.out.weight";
    pub const OUT_BIAS: &str = "visibility.out.bias";
}

/// Visibility network weights plus a `[num_images, transient_dim]`
/// embedding table drawn from `N(0, 0.01²)`.
pub fn init_params<R: Rng + ?Sized>(
    cfg: &VisibilityConfig,
    num_images: usize,
    rng: &mut R,
) -> Result<ParameterSet> {
    if cfg.depth == 0 || cfg.width == 0 || cfg.transient_dim == 0 {
        return Err(Error::Config("visibility layers must be non-empty".into()));
    }
    if num_images == 0 {
        return Err(Error::Config(
            "transient table needs at least one image".into(),
        ));
    }
    let mut p = ParameterSet::new();
    let mut fan_in = cfg.input_dim();
    for i in 0..cfg.depth {
        p.insert(
            names::hidden_weight(i),
            init::he_uniform(fan_in, cfg.width, rng),
        )?;
        p.insert(names::hidden_bias(i), Array::zeros(&[cfg.width]))?;
        fan_in = cfg.width;
    }
    p.insert(names::OUT_WEIGHT, init::glorot_uniform(cfg.width, 1, rng))?;
    p.insert(names::OUT_BIAS, Array::zeros(&[1]))?;
    p.insert(
        names::EMBEDDINGS,
        init::normal(&[num_images, cfg.transient_dim], EMBEDDING_INIT_STD, rng),
    )?;
    Ok(p)
}

/// Number of rows in the transient table.
pub fn num_embeddings(params: &ParameterSet) -> usize {
    params.value(names::EMBEDDINGS).map_or(0, Array::rows)
}

/// Visibility `[R,1]` of normalized pixels `(u/W, v/H)` in their images.
pub fn visibility_graph(
    g: &mut Graph,
    vars: &ParamVars,
    cfg: &VisibilityConfig,
    normalized_pixels: &[(f64, f64)],
    image_ids: &[usize],
) -> Var {
    assert_eq!(
        normalized_pixels.len(),
        image_ids.len(),
        "one image id per pixel"
    );
    let coords = Array::new(
        &[normalized_pixels.len(), 2],
        normalized_pixels
            .iter()
            .flat_map(|&(u, v)| [u, v])
            .collect(),
    );
    let enc = g.constant(encode_rows(&coords, cfg.pixel_encoding));
    let emb = g.gather_rows(vars.get(names::EMBEDDINGS), image_ids);
    let mut h = g.concat_cols(&[enc, emb]);
    for i in 0..cfg.depth {
        h = g.affine(
            h,
            vars.get(&names::hidden_weight(i)),
            vars.get(&names::hidden_bias(i)),
        );
        h = g.relu(h);
    }
    let out = g.affine(h, vars.get(names::OUT_WEIGHT), vars.get(names::OUT_BIAS));
    g.sigmoid(out)
}

fn check_image_id(params: &ParameterSet, image_id: usize) -> Result<()> {
    let n = num_embeddings(params);
    if image_id >= n {
        return Err(Error::Input(format!(
            "image id {image_id} has no transient embedding ({n} training images)"
        )));
    }
    Ok(())
}

/// Visibility of continuous pixel `(u, v)` of a `width×height` training image.
pub fn visibility(
    params: &ParameterSet,
    cfg: &VisibilityConfig,
    pixel: (f64, f64),
    image_id: usize,
    width: usize,
    height: usize,
) -> Result<f64> {
    check_image_id(params, image_id)?;
    let (u, v) = pixel;
    if !(0.0..width as f64).contains(&u) || !(0.0..height as f64).contains(&v) {
        return Err(Error::Input(format!(
            "pixel ({u}, {v}) outside {width}x{height} image"
        )));
    }
    let mut g = Graph::new();
    let vars = g.bind_frozen(params);
    let m = visibility_graph(
        &mut g,
        &vars,
        cfg,
        &[(u / width as f64, v / height as f64)],
        &[image_id],
    );
    Ok(g.value(m).item())
}

/// Visibility at every pixel center of training image `image_id`.
pub fn visibility_map(
    params: &ParameterSet,
    cfg: &VisibilityConfig,
    image_id: usize,
    width: usize,
    height: usize,
) -> Result<GrayImage> {
    check_image_id(params, image_id)?;
    let pixels: Vec<(f64, f64)> = (0..height)
        .flat_map(|y| {
            (0..width).map(move |x| {
                (
                    (x as f64 + 0.5) / width as f64,
                    (y as f64 + 0.5) / height as f64,
                )
            })
        })
        .collect();
    let mut data = Vec::with_capacity(pixels.len());
    for chunk in pixels.chunks(4096) {
        let mut g = Graph::new();
        let vars = g.bind_frozen(params);
        let m = visibility_graph(&mut g, &vars, cfg, chunk, &vec![image_id; chunk.len()]);
        data.extend_from_slice(g.value(m).data());
    }
    Ok(GrayImage {
        width,
        height,
        data,
    })
}

/// Per-ray `M·‖C − Ĉ‖² + λ_o (1 − M)²` as `[R,1]`. Gradients flow through
/// both `M` and the rendered colors.
pub fn occlusion_loss(
    g: &mut Graph,
    visibility: Var,
    observed: Var,
    rendered: Var,
    lambda_o: f64,
) -> Var {
    let diff = g.sub(observed, rendered);
    let sq = g.square(diff);
    let residual = g.sum_cols(sq);
    let fit = g.mul(visibility, residual);
    let neg = g.scale(visibility, -1.0);
    let hidden = g.add_scalar(neg, 1.0);
    let hidden_sq = g.square(hidden);
    let reg = g.scale(hidden_sq, lambda_o);
    g.add(fit, reg)
}

/// Scalar form of the occlusion loss for a squared residual `r2`.
pub fn occlusion_loss_value(m: f64, r2: f64, lambda_o: f64) -> f64 {
    m * r2 + lambda_o * (1.0 - m).powi(2)
}

/// Minimizer over `M ∈ [0,1]` of [`occlusion_loss_value`].
pub fn optimal_visibility(r2: f64, lambda_o: f64) -> f64 {
    (1.0 - r2 / (2.0 * lambda_o)).clamp(0.0, 1.0)
}
