//! Differentiable numerical substrate: arrays, reverse-mode gradients,
//! finite-difference verification and Adam.

mod array;
mod check;
mod graph;
mod optim;

use std::collections::BTreeMap;

pub use array::Array;
pub use check::{
    gradient_check, gradient_check_against, relative_error, GradientReport, ParamCheck,
    REL_ERR_FLOOR,
};
pub use graph::{sigmoid, softplus, Conv2dSpec, Gradients, Graph, ParamVars, Var};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, Parameter, ParameterSet};

use crate::error::Result;

/// Builds the loss with `build`, then returns its value and the gradient of
/// every parameter in `params` (zeros for parameters the loss ignores).
pub fn forward_backward<F>(
    params: &ParameterSet,
    build: F,
) -> Result<(f64, BTreeMap<String, Array>)>
where
    F: FnOnce(&mut Graph, &ParamVars) -> Var,
{
    let mut g = Graph::new();
    let vars = g.bind(params);
    let loss = build(&mut g, &vars);
    let mut grads = g.backward(loss)?;
    let named = vars.collect(&g, &mut grads);
    Ok((g.value(loss).item(), named))
}

#[cfg(test)]
mod tests;
