//! Quadrature of the volume rendering integral along camera rays.
//!
//! Each ray is cut into `K` equal bins with one sample per bin. Sample `k`
//! contributes `w_k = T_k (1 − exp(−σ_k δ_k))` of its color, where
//! `T_k = exp(−Σ_{l<k} σ_l δ_l)`. The last interval is open-ended
//! (`δ_K = 1e10`), so any positive density at the final sample absorbs all
//! remaining transmittance; the field learns the background this way.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cameras::{generate_image_rays, CameraIntrinsics, CameraPose, Ray, SceneBounds};
use crate::diffcore::{Array, Graph, ParamVars, ParameterSet, Var};
use crate::error::{Error, Result};
use crate::field::{self, encode_rows, FieldConfig};
use crate::imaging::Image;

pub const TERMINAL_DELTA: f64 = 1e10;

/// Rays per graph when rendering whole images.
pub const RENDER_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// How sample positions are placed within their bins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampling {
    /// Bin centers; deterministic without any RNG.
    Midpoints,
    /// Uniform within each bin, from a seeded stream.
    Stratified { seed: u64 },
}

/// One sample per equal-length bin of `[near, far]`; bin centers when `rng`
/// is `None`.
pub fn stratified_samples<R: Rng + ?Sized>(
    ray: &Ray,
    k: usize,
    rng: Option<&mut R>,
) -> Result<RaySamples> {
    if k < 2 {
        return Err(Error::Input(format!(
            "need at least 2 samples per ray, got {k}"
        )));
    }
    let span = ray.far - ray.near;
    let t: Vec<f64> = match rng {
        Some(rng) => (0..k)
            .map(|i| ray.near + span * ((i as f64 + rng.random::<f64>()) / k as f64))
            .collect(),
        None => (0..k)
            .map(|i| ray.near + span * ((i as f64 + 0.5) / k as f64))
            .collect(),
    };
    let deltas = t
        .windows(2)
        .map(|w| w[1] - w[0])
        .chain(std::iter::once(TERMINAL_DELTA))
        .collect();
    Ok(RaySamples { t, deltas })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeResult {
    pub rgb: [f64; 3],
    pub weights: Vec<f64>,
    /// `T_1..=T_K`.
    pub transmittance: Vec<f64>,
    /// `T_{K+1}`: probability the ray passes every sample.
    pub final_transmittance: f64,
}

/// Direct evaluation of the quadrature for one ray.
pub fn composite(sigmas: &[f64], colors: &[[f64; 3]], deltas: &[f64]) -> CompositeResult {
    assert!(
        sigmas.len() == colors.len() && sigmas.len() == deltas.len(),
        "composite input lengths differ"
    );
    let k = sigmas.len();
    let mut rgb = [0.0; 3];
    let mut weights = Vec::with_capacity(k);
    let mut transmittance = Vec::with_capacity(k);
    let mut optical_depth = 0.0_f64;
    for i in 0..k {
        let tau = sigmas[i] * deltas[i];
        let t_i = (-optical_depth).exp();
        let w = t_i * (1.0 - (-tau).exp());
        for (c, ci) in rgb.iter_mut().zip(colors[i]) {
            *c += w * ci;
        }
        weights.push(w);
        transmittance.push(t_i);
        optical_depth += tau;
    }
    CompositeResult {
        rgb,
        weights,
        transmittance,
        final_transmittance: (-optical_depth).exp(),
    }
}

/// Differentiable compositing of `sigma[R,K]` and per-sample `colors[R*K,3]`
/// (ray-major). Returns `(rgb[R,3], weights[R,K])`.
pub fn composite_graph(g: &mut Graph, sigma: Var, colors: Var, deltas: &Array) -> (Var, Var) {
    let (r, k) = (deltas.rows(), deltas.cols());
    assert_eq!(g.shape(sigma), [r, k], "sigma shape");
    assert_eq!(g.shape(colors), [r * k, 3], "colors shape");
    let d = g.constant(deltas.clone());
    let tau = g.mul(sigma, d);
    let neg_tau = g.scale(tau, -1.0);
    let survive = g.exp(neg_tau);
    let neg_survive = g.scale(survive, -1.0);
    let alpha = g.add_scalar(neg_survive, 1.0);
    let depth = g.exclusive_cumsum(tau);
    let neg_depth = g.scale(depth, -1.0);
    let trans = g.exp(neg_depth);
    let weights = g.mul(trans, alpha);
    let wcol = g.reshape(weights, &[r * k, 1]);
    let contrib = g.mul_column(colors, wcol);
    let rgb = g.segment_sum(contrib, k);
    (rgb, weights)
}

pub struct RenderOutput {
    pub rgb: Var,
    pub sigma: Var,
    pub weights: Var,
}

/// Sample points `[R*K,3]`, repeated directions `[R*K,3]` and deltas `[R,K]`.
fn sample_rays<R: Rng + ?Sized>(
    rays: &[Ray],
    k: usize,
    mut rng: Option<&mut R>,
) -> Result<(Array, Array, Array)> {
    let n = rays.len();
    let mut points = Vec::with_capacity(n * k * 3);
    let mut dirs = Vec::with_capacity(n * k * 3);
    let mut deltas = Vec::with_capacity(n * k);
    for ray in rays {
        let s = stratified_samples(ray, k, rng.as_deref_mut())?;
        for &t in &s.t {
            let p: Vector3<f64> = ray.at(t);
            points.extend_from_slice(p.as_slice());
            dirs.extend_from_slice(ray.direction.as_slice());
        }
        deltas.extend_from_slice(&s.deltas);
    }
    Ok((
        Array::new(&[n * k, 3], points),
        Array::new(&[n * k, 3], dirs),
        Array::new(&[n, k], deltas),
    ))
}

/// Renders `rays` through the field. Ray `i` uses appearance row
/// `appearance_index[i]` of `appearance[A, dim]`.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<R: Rng + ?Sized>(
    g: &mut Graph,
    vars: &ParamVars,
    cfg: &FieldConfig,
    rays: &[Ray],
    appearance: Var,
    appearance_index: &[usize],
    k: usize,
    rng: Option<&mut R>,
) -> Result<RenderOutput> {
    assert_eq!(
        rays.len(),
        appearance_index.len(),
        "one appearance index per ray"
    );
    let (points, dirs, deltas) = sample_rays(rays, k, rng)?;
    let gx = g.constant(encode_rows(&points, cfg.position_encoding));
    let gd = g.constant(encode_rows(&dirs, cfg.direction_encoding));
    let (sigma, z) = field::density(g, vars, cfg, gx);
    let point_index: Vec<usize> = appearance_index
        .iter()
        .flat_map(|&a| std::iter::repeat_n(a, k))
        .collect();
    let app = g.gather_rows(appearance, &point_index);
    let colors = field::color(g, vars, cfg, gd, z, app);
    let sigma = g.reshape(sigma, &[rays.len(), k]);
    let (rgb, weights) = composite_graph(g, sigma, colors, &deltas);
    if !g.value(rgb).is_finite() {
        return Err(Error::Divergence {
            iteration: None,
            context: "rendered color is not finite".into(),
        });
    }
    Ok(RenderOutput {
        rgb,
        sigma,
        weights,
    })
}

/// Colors `[R,3]` of `rays` under one appearance vector with frozen params.
pub fn render_ray_colors(
    params: &ParameterSet,
    cfg: &FieldConfig,
    rays: &[Ray],
    appearance: &[f64],
    k: usize,
    sampling: Sampling,
) -> Result<Array> {
    let mut rng = match sampling {
        Sampling::Midpoints => None,
        Sampling::Stratified { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut out = Vec::with_capacity(rays.len() * 3);
    for chunk in rays.chunks(RENDER_CHUNK) {
        let mut g = Graph::new();
        let vars = g.bind_frozen(params);
        let app = g.constant(Array::new(&[1, appearance.len()], appearance.to_vec()));
        let idx = vec![0; chunk.len()];
        let o = render_rays(&mut g, &vars, cfg, chunk, app, &idx, k, rng.as_mut())?;
        out.extend_from_slice(g.value(o.rgb).data());
    }
    Ok(Array::new(&[rays.len(), 3], out))
}

/// Full `H×W` render of a camera under one appearance vector.
#[allow(clippy::too_many_arguments)]
pub fn render_image(
    params: &ParameterSet,
    cfg: &FieldConfig,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    appearance: &[f64],
    k: usize,
    sampling: Sampling,
    bounds: &SceneBounds,
) -> Result<Image> {
    let rays = generate_image_rays(intr, pose, bounds);
    let rgb = render_ray_colors(params, cfg, &rays, appearance, k, sampling)?;
    Image::new(intr.width as usize, intr.height as usize, rgb.into_data())
}

/// Densities `[R,K]` at the bin centers of each ray.
pub fn ray_densities(
    params: &ParameterSet,
    cfg: &FieldConfig,
    rays: &[Ray],
    k: usize,
) -> Result<Array> {
    let mut out = Vec::with_capacity(rays.len() * k);
    for chunk in rays.chunks(RENDER_CHUNK) {
        let (points, _, _) = sample_rays::<ChaCha8Rng>(chunk, k, None)?;
        let (sigma, _) = field::eval_density(params, cfg, &points);
        out.extend(sigma.into_data());
    }
    Ok(Array::new(&[rays.len(), k], out))
}
