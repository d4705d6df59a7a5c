//! The static radiance field: sinusoidal encodings, the density trunk and
//! the appearance-conditioned color head.
//!
//! Density and the geometry feature depend on position only. View direction
//! and the appearance vector enter exclusively through the color head, so
//! geometry is the same under every appearance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Graph, ParamVars, ParameterSet, Var};
use crate::error::{Error, Result};
use crate::init;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncodingConfig {
    pub frequencies: usize,
    pub include_raw: bool,
}

impl PositionalEncodingConfig {
    pub fn output_dim(&self, k: usize) -> usize {
        k * (2 * self.frequencies + usize::from(self.include_raw))
    }
}

/// `[p, sin(2⁰πp), cos(2⁰πp), …, sin(2^{L−1}πp), cos(2^{L−1}πp)]`, where each
/// entry stands for all `k` components of `p` and the raw block is optional.
pub fn encode(value: &[f64], frequencies: usize, include_raw: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(value.len() * (2 * frequencies + usize::from(include_raw)));
    encode_into(value, frequencies, include_raw, &mut out);
    out
}

fn encode_into(value: &[f64], frequencies: usize, include_raw: bool, out: &mut Vec<f64>) {
    if include_raw {
        out.extend_from_slice(value);
    }
    let mut freq = std::f64::consts::PI;
    for _ in 0..frequencies {
        out.extend(value.iter().map(|p| (freq * p).sin()));
        out.extend(value.iter().map(|p| (freq * p).cos()));
        freq *= 2.0;
    }
}

/// Encodes every row of `points[m, k]`.
pub fn encode_rows(points: &Array, cfg: PositionalEncodingConfig) -> Array {
    let (m, k) = (points.rows(), points.cols());
    let dim = cfg.output_dim(k);
    let mut out = Vec::with_capacity(m * dim);
    for row in points.data().chunks_exact(k) {
        encode_into(row, cfg.frequencies, cfg.include_raw, &mut out);
    }
    Array::new(&[m, dim], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub position_encoding: PositionalEncodingConfig,
    pub direction_encoding: PositionalEncodingConfig,
    /// Number of ReLU layers in the density trunk.
    pub depth: usize,
    pub width: usize,
    /// Trunk layer whose input is `[h, γx(x)]`; `None` disables the skip.
    pub skip_layer: Option<usize>,
    pub color_width: usize,
    pub appearance_dim: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            position_encoding: PositionalEncodingConfig {
                frequencies: 10,
                include_raw: true,
            },
            direction_encoding: PositionalEncodingConfig {
                frequencies: 4,
                include_raw: true,
            },
            depth: 8,
            width: 256,
            skip_layer: Some(5),
            color_width: 128,
            appearance_dim: crate::appearance::APPEARANCE_DIM,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.position_encoding.frequencies == 0 || self.direction_encoding.frequencies == 0 {
            return Err(Error::Config(
                "encoding frequency counts must be at least 1".into(),
            ));
        }
        if self.depth == 0 || self.width == 0 || self.color_width == 0 {
            return Err(Error::Config("field layers must be non-empty".into()));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.depth {
                return Err(Error::Config(format!(
                    "skip layer {s} must lie in 1..{}",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    pub fn position_dim(&self) -> usize {
        self.position_encoding.output_dim(3)
    }

    pub fn direction_dim(&self) -> usize {
        self.direction_encoding.output_dim(3)
    }
}

pub mod names {
    pub fn trunk_weight(i: usize) -> String {
        format!("field.trunk.{i}.weight")
    }
    pub fn trunk_bias(i: usize) -> String {
        format!("field.trunk.{i}.bias")
    }
    pub const SIGMA_WEIGHT: &str = "field.sigma.weight";
    pub const SIGMA_BIAS: &str = "field.sigma.bias";
    pub const FEATURE_WEIGHT: &str = "field.feature.weight";
    pub const FEATURE_BIAS: &str = "field.feature.bias";
    pub const COLOR_HIDDEN_WEIGHT: &str = "field.color.hidden.weight";
    pub const COLOR_HIDDEN_BIAS: &str = "field.color.hidden.bias";
    pub const COLOR_OUT_WEIGHT: &str = "field.color.out.weight";
    pub const COLOR_OUT_BIAS: &str = "field.color.out.bias";
}

/// Fresh field parameters: He-uniform hidden layers, zero biases.
pub fn init_params<R: Rng + ?Sized>(cfg: &FieldConfig, rng: &mut R) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut p = ParameterSet::new();
    let gx = cfg.position_dim();
    let w = cfg.width;
    for i in 0..cfg.depth {
        let fan_in = match i {
            0 => gx,
            _ if Some(i) == cfg.skip_layer => w + gx,
            _ => w,
        };
        p.insert(names::trunk_weight(i), init::he_uniform(fan_in, w, rng))?;
        p.insert(names::trunk_bias(i), Array::zeros(&[w]))?;
    }
    p.insert(names::SIGMA_WEIGHT, init::glorot_uniform(w, 1, rng))?;
    p.insert(names::SIGMA_BIAS, Array::zeros(&[1]))?;
    p.insert(names::FEATURE_WEIGHT, init::glorot_uniform(w, w, rng))?;
    p.insert(names::FEATURE_BIAS, Array::zeros(&[w]))?;
    let color_in = cfg.direction_dim() + w + cfg.appearance_dim;
    p.insert(
        names::COLOR_HIDDEN_WEIGHT,
        init::he_uniform(color_in, cfg.color_width, rng),
    )?;
    p.insert(names::COLOR_HIDDEN_BIAS, Array::zeros(&[cfg.color_width]))?;
    p.insert(
        names::COLOR_OUT_WEIGHT,
        init::glorot_uniform(cfg.color_width, 3, rng),
    )?;
    p.insert(names::COLOR_OUT_BIAS, Array::zeros(&[3]))?;
    Ok(p)
}

/// Density trunk: `γx[m, dim] -> (σ[m,1] ≥ 0, z[m,width])`.
pub fn density(g: &mut Graph, vars: &ParamVars, cfg: &FieldConfig, gamma_x: Var) -> (Var, Var) {
    assert_eq!(g.value(gamma_x).cols(), cfg.position_dim(), "γx dimension");
    let mut h = gamma_x;
    for i in 0..cfg.depth {
        if Some(i) == cfg.skip_layer {
            h = g.concat_cols(&[h, gamma_x]);
        }
        h = g.affine(
            h,
            vars.get(&names::trunk_weight(i)),
            vars.get(&names::trunk_bias(i)),
        );
        h = g.relu(h);
    }
    let raw_sigma = g.affine(
        h,
        vars.get(names::SIGMA_WEIGHT),
        vars.get(names::SIGMA_BIAS),
    );
    let sigma = g.softplus(raw_sigma);
    let z = g.affine(
        h,
        vars.get(names::FEATURE_WEIGHT),
        vars.get(names::FEATURE_BIAS),
    );
    (sigma, z)
}

/// Color head: `(γd[m,·], z[m,width], ℓ[m,appearance_dim]) -> rgb[m,3] ∈ (0,1)`.
pub fn color(
    g: &mut Graph,
    vars: &ParamVars,
    cfg: &FieldConfig,
    gamma_d: Var,
    z: Var,
    appearance: Var,
) -> Var {
    assert_eq!(g.value(gamma_d).cols(), cfg.direction_dim(), "γd dimension");
    assert_eq!(
        g.value(appearance).cols(),
        cfg.appearance_dim,
        "appearance dimension"
    );
    let input = g.concat_cols(&[gamma_d, z, appearance]);
    let h = g.affine(
        input,
        vars.get(names::COLOR_HIDDEN_WEIGHT),
        vars.get(names::COLOR_HIDDEN_BIAS),
    );
    let h = g.relu(h);
    let out = g.affine(
        h,
        vars.get(names::COLOR_OUT_WEIGHT),
        vars.get(names::COLOR_OUT_BIAS),
    );
    g.sigmoid(out)
}

/// Density and feature of raw points `[m,3]` with frozen parameters.
pub fn eval_density(params: &ParameterSet, cfg: &FieldConfig, points: &Array) -> (Array, Array) {
    let mut g = Graph::new();
    let vars = g.bind_frozen(params);
    let gx = g.constant(encode_rows(points, cfg.position_encoding));
    let (s, z) = density(&mut g, &vars, cfg, gx);
    (g.value(s).clone(), g.value(z).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::{gradient_check, softplus};

    pub(crate) fn micro_config() -> FieldConfig {
        FieldConfig {
            position_encoding: PositionalEncodingConfig {
                frequencies: 2,
                include_raw: true,
            },
            direction_encoding: PositionalEncodingConfig {
                frequencies: 1,
                include_raw: true,
            },
            depth: 3,
            width: 6,
            skip_layer: Some(2),
            color_width: 5,
            appearance_dim: 4,
        }
    }

    fn random_rows(rng: &mut ChaCha8Rng, m: usize, k: usize) -> Array {
        Array::new(
            &[m, k],
            (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode(&[0.0], 2, false), vec![0.0, 1.0, 0.0, 1.0]);
        let e = encode(&[0.5], 1, false);
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15);
        assert_eq!(encode(&[0.1, 0.2, 0.3], 10, true).len(), 63);
        let cfg = PositionalEncodingConfig {
            frequencies: 10,
            include_raw: true,
        };
        assert_eq!(cfg.output_dim(3), 63);
    }

    #[test]
    fn encode_rows_matches_encode() {
        let pts = Array::new(&[2, 3], vec![0.1, -0.4, 0.9, 0.0, 0.5, -1.0]);
        let cfg = PositionalEncodingConfig {
            frequencies: 3,
            include_raw: true,
        };
        let rows = encode_rows(&pts, cfg);
        assert_eq!(rows.row(1), encode(pts.row(1), 3, true).as_slice());
    }

    #[test]
    fn encoding_bands_are_lipschitz() {
        // Band j has derivative magnitude ≤ 2^j π.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = 6;
        for _ in 0..200 {
            let p: f64 = rng.random_range(-1.0..1.0);
            let q = p + rng.random_range(-1e-3..1e-3);
            let (ep, eq) = (encode(&[p], l, false), encode(&[q], l, false));
            for j in 0..l {
                let bound = 2f64.powi(j as i32) * std::f64::consts::PI * (p - q).abs() + 1e-15;
                assert!((ep[2 * j] - eq[2 * j]).abs() <= bound);
                assert!((ep[2 * j + 1] - eq[2 * j + 1]).abs() <= bound);
            }
        }
    }

    #[test]
    fn default_config_matches_architecture() {
        let cfg = FieldConfig::default();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(
            p.value(&names::trunk_weight(0)).unwrap().shape(),
            &[63, 256]
        );
        assert_eq!(
            p.value(&names::trunk_weight(5)).unwrap().shape(),
            &[256 + 63, 256]
        );
        assert_eq!(
            p.value(&names::trunk_weight(7)).unwrap().shape(),
            &[256, 256]
        );
        assert!(p.value(&names::trunk_weight(8)).is_none());
        assert_eq!(
            p.value(names::COLOR_HIDDEN_WEIGHT).unwrap().shape(),
            &[27 + 256 + 48, 128]
        );
        assert_eq!(p.value(names::COLOR_OUT_WEIGHT).unwrap().shape(), &[128, 3]);
    }

    #[test]
    fn zero_density_head_gives_ln2() {
        let cfg = micro_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = init_params(&cfg, &mut rng).unwrap();
        p.value_mut(names::SIGMA_WEIGHT)
            .unwrap()
            .data_mut()
            .fill(0.0);
        let pts = random_rows(&mut rng, 17, 3);
        let (sigma, z) = eval_density(&p, &cfg, &pts);
        assert_eq!(sigma.shape(), &[17, 1]);
        assert_eq!(z.shape(), &[17, 6]);
        assert!(sigma.data().iter().all(|&s| s == softplus(0.0)));
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_color_head_gives_gray() {
        let cfg = micro_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = init_params(&cfg, &mut rng).unwrap();
        p.value_mut(names::COLOR_OUT_WEIGHT)
            .unwrap()
            .data_mut()
            .fill(0.0);
        let mut g = Graph::new();
        let vars = g.bind_frozen(&p);
        let gd = g.constant(random_rows(&mut rng, 5, cfg.direction_dim()));
        let z = g.constant(random_rows(&mut rng, 5, cfg.width));
        let a = g.constant(random_rows(&mut rng, 5, 4));
        let rgb = color(&mut g, &vars, &cfg, gd, z, a);
        assert!(g.value(rgb).data().iter().all(|&c| c == 0.5));
    }

    #[test]
    fn color_in_open_unit_interval() {
        let cfg = micro_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = init_params(&cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let vars = g.bind_frozen(&p);
        let n = 10_000;
        let gd = g.constant(random_rows(&mut rng, n, cfg.direction_dim()));
        let z = g.constant(random_rows(&mut rng, n, cfg.width).map(|x| 3.0 * x));
        let a = g.constant(random_rows(&mut rng, n, 4).map(|x| 3.0 * x));
        let rgb = color(&mut g, &vars, &cfg, gd, z, a);
        assert!(g.value(rgb).data().iter().all(|&c| c > 0.0 && c < 1.0));
    }

    #[test]
    fn density_ignores_direction_and_appearance() {
        // Density is computed before direction or appearance enter the graph,
        // so perturbing them cannot change (σ, z).
        let cfg = micro_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = init_params(&cfg, &mut rng).unwrap();
        let pts = random_rows(&mut rng, 9, 3);
        let gx = encode_rows(&pts, cfg.position_encoding);
        let run = |dirs: &Array, app: &Array| {
            let mut g = Graph::new();
            let vars = g.bind_frozen(&p);
            let x = g.constant(gx.clone());
            let (s, z) = density(&mut g, &vars, &cfg, x);
            let gd = g.constant(encode_rows(dirs, cfg.direction_encoding));
            let a = g.constant(app.clone());
            let rgb = color(&mut g, &vars, &cfg, gd, z, a);
            (g.value(s).clone(), g.value(z).clone(), g.value(rgb).clone())
        };
        let (s1, z1, c1) = run(&random_rows(&mut rng, 9, 3), &random_rows(&mut rng, 9, 4));
        let (s2, z2, c2) = run(&random_rows(&mut rng, 9, 3), &random_rows(&mut rng, 9, 4));
        assert_eq!(s1, s2);
        assert_eq!(z1, z2);
        assert_ne!(c1, c2);
    }

    #[test]
    fn sigma_gradient_matches_finite_differences() {
        let cfg = micro_config();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = init_params(&cfg, &mut rng).unwrap();
        // Non-zero biases keep ReLU pre-activations away from their kink.
        for i in 0..cfg.depth {
            for b in p.value_mut(&names::trunk_bias(i)).unwrap().data_mut() {
                *b = rng.random_range(0.05..0.3);
            }
        }
        let gx = encode_rows(&random_rows(&mut rng, 4, 3), cfg.position_encoding);
        let report = gradient_check(&p, 1e-5, |g, v| {
            let x = g.constant(gx.clone());
            let (s, _) = density(g, v, &cfg, x);
            g.sum(s)
        })
        .unwrap();
        let trunk = &report.params[&names::trunk_weight(1)];
        assert!(trunk.max_rel_err < 1e-5, "{trunk:?}");
    }
}
