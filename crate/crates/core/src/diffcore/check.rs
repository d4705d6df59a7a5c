//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use super::{forward_backward, Array, Graph, ParamVars, ParameterSet, Var};
use crate::error::Result;

/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Relative error `|a−n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub step: f64,
    pub params: BTreeMap<String, ParamCheck>,
}

impl GradientReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.values().fold(0.0, |m, c| m.max(c.max_rel_err))
    }

    /// Name and result of the worst parameter.
    pub fn worst(&self) -> Option<(&str, &ParamCheck)> {
        self.params
            .iter()
            .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
            .map(|(k, v)| (k.as_str(), v))
    }
}

fn evaluate<F>(params: &ParameterSet, build: &F) -> f64
where
    F: Fn(&mut Graph, &ParamVars) -> Var,
{
    let mut g = Graph::new();
    let vars = g.bind(params);
    let loss = build(&mut g, &vars);
    g.value(loss).item()
}

/// Compares analytic gradients of `build`'s loss against central differences
/// `(f(x+h) − f(x−h)) / 2h`, entry by entry, for every parameter.
pub fn gradient_check<F>(params: &ParameterSet, step: f64, build: F) -> Result<GradientReport>
where
    F: Fn(&mut Graph, &ParamVars) -> Var,
{
    let (_, analytic) = forward_backward(params, |g, v| build(g, v))?;
    gradient_check_against(params, step, &analytic, build)
}

/// Like [`gradient_check`], but checks externally supplied analytic
/// gradients. Useful for proving the checker catches a corrupted gradient.
pub fn gradient_check_against<F>(
    params: &ParameterSet,
    step: f64,
    analytic: &BTreeMap<String, Array>,
    build: F,
) -> Result<GradientReport>
where
    F: Fn(&mut Graph, &ParamVars) -> Var,
{
    let mut probe = params.clone();
    let mut report = BTreeMap::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let grad = &analytic[&name];
        let mut worst = ParamCheck {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..grad.len() {
            let original = probe.value(&name).unwrap().data()[i];
            probe.value_mut(&name).unwrap().data_mut()[i] = original + step;
            let plus = evaluate(&probe, &build);
            probe.value_mut(&name).unwrap().data_mut()[i] = original - step;
            let minus = evaluate(&probe, &build);
            probe.value_mut(&name).unwrap().data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.data()[i], numeric);
            if err > worst.max_rel_err || i == 0 {
                worst = ParamCheck {
                    max_rel_err: err,
                    worst_index: i,
                    analytic: grad.data()[i],
                    numeric,
                };
            }
        }
        report.insert(name, worst);
    }
    Ok(GradientReport {
        step,
        params: report,
    })
}
