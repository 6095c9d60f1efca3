//! Reverse-mode differentiable f64 array engine and the Adam optimizer.

mod adam;
mod array;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod layers;
mod params;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState, DEFAULT_LR};
pub use array::Array;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{add_bias, gru_cell, Gru, GruVars, LayerNorm, Linear, Mlp, LAYER_NORM_EPS};
pub use params::{Bound, ParamId, ParamStore};

use crate::error::Result;

/// Softmax of `x` along `axis`.
pub fn softmax(x: &Array, axis: usize) -> Result<Array> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.softmax(v, axis)?;
    Ok(g.value(y).clone())
}

/// Layer normalization over the last axis of `x`.
pub fn layer_norm(x: &Array, gamma: &Array, beta: &Array, eps: f64) -> Result<Array> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (
        g.constant(x.clone()),
        g.constant(gamma.clone()),
        g.constant(beta.clone()),
    );
    let y = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(y).clone())
}

/// Weights of a GRU cell as plain arrays, see [`gru_cell`](layers::gru_cell).
#[derive(Clone, Debug)]
pub struct GruWeights {
    pub w_input: Array,
    pub w_hidden: Array,
    pub b_input: Array,
    pub b_hidden: Array,
}

impl GruWeights {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruWeights {
            w_input: Array::zeros(&[input, 3 * hidden]),
            w_hidden: Array::zeros(&[hidden, 3 * hidden]),
            b_input: Array::zeros(&[3 * hidden]),
            b_hidden: Array::zeros(&[3 * hidden]),
        }
    }
}

/// Evaluates one GRU update on plain arrays.
pub fn gru_step(state: &Array, input: &Array, w: &GruWeights) -> Result<Array> {
    let mut g = Graph::new();
    let s = g.constant(state.clone());
    let x = g.constant(input.clone());
    let vars = GruVars {
        w_input: g.constant(w.w_input.clone()),
        w_hidden: g.constant(w.w_hidden.clone()),
        b_input: g.constant(w.b_input.clone()),
        b_hidden: g.constant(w.b_hidden.clone()),
    };
    let y = gru_cell(&mut g, s, x, vars)?;
    Ok(g.value(y).clone())
}
