//! Weight initializers. Weights are stored `[fan_in, fan_out]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::Array;

fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Array {
    let n = shape.iter().product();
    Array::new(
        shape,
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

/// `U(−√(6/fan_in), √(6/fan_in))`, for layers followed by ReLU.
pub fn he_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array {
    uniform(&[fan_in, fan_out], (6.0 / fan_in as f64).sqrt(), rng)
}

/// `U(−√(6/(fan_in+fan_out)), …)`, for linear or sigmoid outputs.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array {
    uniform(
        &[fan_in, fan_out],
        (6.0 / (fan_in + fan_out) as f64).sqrt(),
        rng,
    )
}

/// He-uniform convolution kernel `[out, in, k, k]`.
pub fn conv_he_uniform<R: Rng + ?Sized>(
    out_ch: usize,
    in_ch: usize,
    k: usize,
    rng: &mut R,
) -> Array {
    uniform(
        &[out_ch, in_ch, k, k],
        (6.0 / (in_ch * k * k) as f64).sqrt(),
        rng,
    )
}

pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Array {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    Array::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}
