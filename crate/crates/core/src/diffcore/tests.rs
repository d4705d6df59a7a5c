use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const H: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values bounded away from zero, for primitives with a kink there.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Array::new(shape, data)
}

fn params(entries: Vec<(&str, Array)>) -> ParameterSet {
    let mut p = ParameterSet::new();
    for (n, a) in entries {
        p.insert(n, a).unwrap();
    }
    p
}

/// Runs `build` over 100 seeds and returns the worst relative error.
fn worst_over_seeds(
    make: impl Fn(&mut ChaCha8Rng) -> ParameterSet,
    build: impl Fn(&mut Graph, &ParamVars) -> Var + Copy,
) -> f64 {
    (0..100)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = make(&mut rng);
            gradient_check(&p, H, build).unwrap().max_rel_err()
        })
        .fold(0.0, f64::max)
}

/// Weighted sum so every output entry carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, v: Var) -> Var {
    let n = g.value(v).len();
    let w = Array::new(
        g.shape(v),
        (0..n).map(|i| 0.3 + 0.17 * (i % 7) as f64).collect(),
    );
    let w = g.constant(w);
    let p = g.mul(v, w);
    g.sum(p)
}

macro_rules! unary_check {
    ($name:ident, $op:ident, $gen:expr) => {
        #[test]
        fn $name() {
            let worst = worst_over_seeds(
                |rng| params(vec![("x", $gen(rng))]),
                |g, v| {
                    let y = g.$op(v.get("x"));
                    weighted_sum(g, y)
                },
            );
            assert!(worst < 1e-6, "worst rel err {worst:e}");
        }
    };
}

unary_check!(grad_relu, relu, |r: &mut ChaCha8Rng| random_off_zero(
    r,
    &[3, 4]
));
unary_check!(grad_abs, abs, |r: &mut ChaCha8Rng| random_off_zero(
    r,
    &[3, 4]
));
unary_check!(grad_sigmoid, sigmoid, |r: &mut ChaCha8Rng| random(
    r,
    &[3, 4],
    -3.0,
    3.0
));
unary_check!(grad_softplus, softplus, |r: &mut ChaCha8Rng| random(
    r,
    &[3, 4],
    -3.0,
    3.0
));
unary_check!(grad_sin, sin, |r: &mut ChaCha8Rng| random(
    r,
    &[3, 4],
    -3.0,
    3.0
));
unary_check!(grad_cos, cos, |r: &mut ChaCha8Rng| random(
    r,
    &[3, 4],
    -3.0,
    3.0
));
unary_check!(grad_exp, exp, |r: &mut ChaCha8Rng| random(
    r,
    &[3, 4],
    -2.0,
    2.0
));
unary_check!(grad_square, square, |r: &mut ChaCha8Rng| random(
    r,
    &[3, 4],
    -2.0,
    2.0
));
unary_check!(grad_transpose, transpose, |r: &mut ChaCha8Rng| random(
    r,
    &[3, 4],
    -1.0,
    1.0
));
unary_check!(grad_sum_cols, sum_cols, |r: &mut ChaCha8Rng| random(
    r,
    &[3, 4],
    -1.0,
    1.0
));
unary_check!(grad_cumsum, exclusive_cumsum, |r: &mut ChaCha8Rng| random(
    r,
    &[3, 5],
    -1.0,
    1.0
));

#[test]
fn grad_scale_and_shift() {
    let worst = worst_over_seeds(
        |rng| params(vec![("x", random(rng, &[2, 3], -1.0, 1.0))]),
        |g, v| {
            let a = g.scale(v.get("x"), -2.5);
            let b = g.add_scalar(a, 0.75);
            let c = g.square(b);
            g.mean(c)
        },
    );
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn grad_binary_elementwise() {
    let worst = worst_over_seeds(
        |rng| {
            params(vec![
                ("a", random(rng, &[3, 2], -1.0, 1.0)),
                ("b", random(rng, &[3, 2], -1.0, 1.0)),
            ])
        },
        |g, v| {
            let (a, b) = (v.get("a"), v.get("b"));
            let s = g.add(a, b);
            let d = g.sub(a, b);
            let m = g.mul(s, d);
            let m = g.mul(m, a);
            weighted_sum(g, m)
        },
    );
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn grad_affine() {
    let worst = worst_over_seeds(
        |rng| {
            params(vec![
                ("x", random(rng, &[4, 3], -1.0, 1.0)),
                ("w", random(rng, &[3, 5], -1.0, 1.0)),
                ("b", random(rng, &[5], -1.0, 1.0)),
            ])
        },
        |g, v| {
            let y = g.affine(v.get("x"), v.get("w"), v.get("b"));
            let y = g.sin(y);
            weighted_sum(g, y)
        },
    );
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn grad_mul_column_and_segment_sum() {
    let worst = worst_over_seeds(
        |rng| {
            params(vec![
                ("a", random(rng, &[6, 3], -1.0, 1.0)),
                ("c", random(rng, &[6, 1], -1.0, 1.0)),
            ])
        },
        |g, v| {
            let m = g.mul_column(v.get("a"), v.get("c"));
            let s = g.segment_sum(m, 3);
            let s = g.square(s);
            weighted_sum(g, s)
        },
    );
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn grad_concat_slice_reshape() {
    let worst = worst_over_seeds(
        |rng| {
            params(vec![
                ("a", random(rng, &[3, 2], -1.0, 1.0)),
                ("b", random(rng, &[3, 4], -1.0, 1.0)),
            ])
        },
        |g, v| {
            let c = g.concat_cols(&[v.get("a"), v.get("b"), v.get("a")]);
            let s = g.slice_cols(c, 1, 6);
            let r = g.reshape(s, &[5, 3]);
            let r = g.cos(r);
            weighted_sum(g, r)
        },
    );
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn grad_gather_with_repeats() {
    let worst = worst_over_seeds(
        |rng| params(vec![("t", random(rng, &[4, 3], -1.0, 1.0))]),
        |g, v| {
            let r = g.gather_rows(v.get("t"), &[2, 0, 2, 3, 2]);
            let r = g.sin(r);
            weighted_sum(g, r)
        },
    );
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn grad_conv_and_pool() {
    let worst = worst_over_seeds(
        |rng| {
            params(vec![
                // Positive data keeps pooled gradients from cancelling
                // towards the finite-difference noise floor.
                ("x", random(rng, &[2, 2, 5, 6], 0.1, 1.0)),
                ("w", random(rng, &[3, 2, 3, 3], 0.1, 0.5)),
                ("b", random(rng, &[3], 0.1, 0.5)),
            ])
        },
        |g, v| {
            let y = g.conv2d(
                v.get("x"),
                v.get("w"),
                v.get("b"),
                Conv2dSpec {
                    stride: 2,
                    padding: 1,
                },
            );
            let y = g.square(y);
            let p = g.global_avg_pool(y);
            weighted_sum(g, p)
        },
    );
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn linear_map_check_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = params(vec![("w", random(&mut rng, &[3, 2], -1.0, 1.0))]);
    let x = random(&mut rng, &[4, 3], -1.0, 1.0);
    let report = gradient_check(&p, H, |g, v| {
        let x = g.constant(x.clone());
        let y = g.matmul(x, v.get("w"));
        weighted_sum(g, y)
    })
    .unwrap();
    assert!(report.max_rel_err() < 1e-10, "{:e}", report.max_rel_err());
    assert_eq!(report.step, H);
}

#[test]
fn sin_composition_check() {
    let p = params(vec![("x", Array::new(&[3], vec![0.3, -1.2, 2.0]))]);
    let report = gradient_check(&p, H, |g, v| {
        let a = g.sin(v.get("x"));
        let b = g.scale(a, 3.0);
        let c = g.sin(b);
        g.sum(c)
    })
    .unwrap();
    assert!(report.max_rel_err() < 1e-6, "{:e}", report.max_rel_err());
}

#[test]
fn corrupted_gradient_is_reported() {
    let p = params(vec![("x", Array::new(&[3], vec![0.3, -1.2, 2.0]))]);
    let build = |g: &mut Graph, v: &ParamVars| {
        let a = g.sin(v.get("x"));
        g.sum(a)
    };
    let (_, mut grads) = forward_backward(&p, build).unwrap();
    grads.get_mut("x").unwrap().data_mut()[1] *= 1.1;
    let report = gradient_check_against(&p, H, &grads, build).unwrap();
    assert!(report.max_rel_err() > 1e-2);
    assert_eq!(report.params["x"].worst_index, 1);
}

#[test]
fn report_covers_every_parameter() {
    let p = params(vec![
        ("used", Array::scalar(1.0)),
        ("unused", Array::zeros(&[2])),
    ]);
    let report = gradient_check(&p, H, |g, v| g.square(v.get("used"))).unwrap();
    assert_eq!(report.params.len(), 2);
    assert_eq!(report.params["unused"].analytic, 0.0);
}

#[test]
fn forward_backward_is_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = params(vec![
        ("w", random(&mut rng, &[16, 8], -1.0, 1.0)),
        ("b", random(&mut rng, &[8], -1.0, 1.0)),
    ]);
    let x = random(&mut rng, &[32, 16], -1.0, 1.0);
    let run = || {
        forward_backward(&p, |g, v| {
            let x = g.constant(x.clone());
            let y = g.affine(x, v.get("w"), v.get("b"));
            let y = g.softplus(y);
            g.mean(y)
        })
        .unwrap()
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}

#[test]
fn relu_propagates_nan() {
    let mut g = Graph::new();
    let x = g.constant(Array::new(&[3], vec![f64::NAN, -1.0, 2.0]));
    let y = g.relu(x);
    let v = g.value(y).data();
    assert!(v[0].is_nan());
    assert_eq!(&v[1..], &[0.0, 2.0]);
}
