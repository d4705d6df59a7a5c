//! Convolutional appearance encoder and the view-consistency loss.
//!
//! The encoder maps a whole image to a global appearance vector: stride-2
//! 3×3 convolutions with ReLU, global average pooling, then one linear
//! layer. Pooling makes the output size independent of the input size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Conv2dSpec, Graph, ParamVars, ParameterSet, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::init;

pub const APPEARANCE_DIM: usize = 48;

/// Smallest accepted encoder input side.
pub const MIN_IMAGE_SIDE: usize = 32;

const CONV: Conv2dSpec = Conv2dSpec {
    stride: 2,
    padding: 1,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppearanceVector(Vec<f64>);

impl AppearanceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Input(
                "appearance vector must be non-empty and finite".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `Σ_i |a_i − b_i|`.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        assert_eq!(self.dim(), other.dim(), "appearance dimension mismatch");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128, 256, 256],
            output_dim: APPEARANCE_DIM,
        }
    }
}

pub mod names {
    pub fn conv_weight(i: usize) -> String {
        format!("encoder.conv.{i}.weight")
    }
    pub fn conv_bias(i: usize) -> String {
        format!("encoder.conv.{i}.bias")
    }
    pub const FC_WEIGHT: &str = "encoder.fc.weight";
    pub const FC_BIAS: &str = "encoder.fc.bias";
}

pub fn init_params<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<ParameterSet> {
    if cfg.channels.is_empty() || cfg.output_dim == 0 {
        return Err(Error::Config(
            "encoder needs at least one conv layer and output".into(),
        ));
    }
    let mut p = ParameterSet::new();
    let mut in_ch = 3;
    for (i, &out_ch) in cfg.channels.iter().enumerate() {
        p.insert(
            names::conv_weight(i),
            init::conv_he_uniform(out_ch, in_ch, 3, rng),
        )?;
        p.insert(names::conv_bias(i), Array::zeros(&[out_ch]))?;
        in_ch = out_ch;
    }
    p.insert(
        names::FC_WEIGHT,
        init::glorot_uniform(in_ch, cfg.output_dim, rng),
    )?;
    p.insert(names::FC_BIAS, Array::zeros(&[cfg.output_dim]))?;
    Ok(p)
}

/// Encodes planar images `[B,3,H,W]` to `[B, output_dim]`.
pub fn encode_graph(g: &mut Graph, vars: &ParamVars, cfg: &EncoderConfig, images: Var) -> Var {
    let mut h = g.add_scalar(images, -0.5);
    for i in 0..cfg.channels.len() {
        h = g.conv2d(
            h,
            vars.get(&names::conv_weight(i)),
            vars.get(&names::conv_bias(i)),
            CONV,
        );
        h = g.relu(h);
    }
    let pooled = g.global_avg_pool(h);
    g.affine(pooled, vars.get(names::FC_WEIGHT), vars.get(names::FC_BIAS))
}

pub fn check_image_size(width: usize, height: usize) -> Result<()> {
    if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
        return Err(Error::Input(format!(
            "encoder needs images of at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {width}x{height}"
        )));
    }
    Ok(())
}

/// Appearance vector of one image with frozen parameters.
pub fn encode_appearance(
    params: &ParameterSet,
    cfg: &EncoderConfig,
    image: &Image,
) -> Result<AppearanceVector> {
    check_image_size(image.width(), image.height())?;
    let mut g = Graph::new();
    let vars = g.bind_frozen(params);
    let x = g.constant(image.to_planar());
    let out = encode_graph(&mut g, &vars, cfg, x);
    AppearanceVector::new(g.value(out).data().to_vec())
}

/// `‖encoded − target‖₁` as a sum over components, for `[1, dim]` inputs.
pub fn view_consistent_loss(g: &mut Graph, encoded: Var, target: Var) -> Var {
    assert_eq!(
        g.shape(encoded),
        g.shape(target),
        "appearance shapes differ"
    );
    let d = g.sub(encoded, target);
    let a = g.abs(d);
    g.sum(a)
}

/// Assembles `[S*S, 3]` row-major grid colors into a planar `[1,3,S,S]` image.
pub fn grid_to_planar(g: &mut Graph, rgb: Var, size: usize) -> Var {
    assert_eq!(g.shape(rgb), [size * size, 3], "grid colors shape");
    let t = g.transpose(rgb);
    g.reshape(t, &[1, 3, size, size])
}

/// `(1−t)·a + t·b`.
pub fn interpolate_appearance(
    a: &AppearanceVector,
    b: &AppearanceVector,
    t: f64,
) -> Result<AppearanceVector> {
    if a.dim() != b.dim() {
        return Err(Error::Input("appearance dimension mismatch".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!(
            "interpolation parameter {t} outside [0, 1]"
        )));
    }
    if t == 0.0 {
        return Ok(a.clone());
    }
    if t == 1.0 {
        return Ok(b.clone());
    }
    let v =
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| (1.0 - t) * x + t * y)
            .collect();
    AppearanceVector::new(v)
}
