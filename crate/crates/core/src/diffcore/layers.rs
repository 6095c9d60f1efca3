//! Parameterized building blocks on top of the graph ops.

use rand::Rng;

use crate::diffcore::array::Array;
use crate::diffcore::graph::{Graph, Var};
use crate::diffcore::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Adds a `[n]` bias to the last axis of `x`.
pub fn add_bias(g: &mut Graph, x: Var, bias: Var) -> Result<Var> {
    let rank = g.shape(x).len();
    let n = g.value(bias).len();
    let mut shape = vec![1; rank];
    shape[rank - 1] = n;
    let b = g.reshape(bias, &shape)?;
    g.add(x, b)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Array::uniform(&[fan_in, fan_out], bound, rng),
        )?;
        let bias = if with_bias {
            Some(store.add(format!("{name}.bias"), Array::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => add_bias(g, y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Array::ones(&[width]))?,
            beta: store.add(format!("{name}.beta"), Array::zeros(&[width]))?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer boundary, input first and output last.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::arg(
                "an MLP needs at least an input and an output width",
            ));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], with_bias, rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

/// Gate weights for [`gru_cell`]; columns are ordered (reset, update, candidate).
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub b_input: Var,
    pub b_hidden: Var,
}

/// One GRU update applied row-wise.
///
/// r = σ(x·W_ir + b_ir + h·W_hr + b_hr)
/// z = σ(x·W_iz + b_iz + h·W_hz + b_hz)
/// n = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))
/// h' = (1 − z) ⊙ h + z ⊙ n
///
/// A saturated update gate (z → 1) returns the candidate, z → 0 keeps the state.
pub fn gru_cell(g: &mut Graph, state: Var, input: Var, w: GruVars) -> Result<Var> {
    let hs = g.shape(state).to_vec();
    let width = *hs
        .last()
        .ok_or_else(|| Error::arg("gru state is a scalar"))?;
    let is = g.shape(input).to_vec();
    if is.len() != hs.len() || is[..is.len() - 1] != hs[..hs.len() - 1] {
        return Err(Error::arg(format!(
            "gru state {hs:?} and input {is:?} disagree on rows"
        )));
    }
    let expect_wh = [width, 3 * width];
    if g.shape(w.w_hidden) != expect_wh || g.shape(w.w_input) != [is[is.len() - 1], 3 * width] {
        return Err(Error::arg(format!(
            "gru weights {:?}/{:?} do not fit state width {width}",
            g.shape(w.w_input),
            g.shape(w.w_hidden)
        )));
    }
    let gi = g.matmul(input, w.w_input)?;
    let gi = add_bias(g, gi, w.b_input)?;
    let gh = g.matmul(state, w.w_hidden)?;
    let gh = add_bias(g, gh, w.b_hidden)?;
    let axis = hs.len() - 1;
    let gate = |g: &mut Graph, x: Var, k: usize| g.narrow(x, axis, k * width, width);

    let (ir, iz, inn) = (gate(g, gi, 0)?, gate(g, gi, 1)?, gate(g, gi, 2)?);
    let (hr, hz, hn) = (gate(g, gh, 0)?, gate(g, gh, 1)?, gate(g, gh, 2)?);
    let r = g.add(ir, hr)?;
    let r = g.sigmoid(r);
    let z = g.add(iz, hz)?;
    let z = g.sigmoid(z);
    let rn = g.mul(r, hn)?;
    let n = g.add(inn, rn)?;
    let n = g.tanh(n);
    // h + z ⊙ (n − h)
    let diff = g.sub(n, state)?;
    let step = g.mul(z, diff)?;
    g.add(state, step)
}

#[derive(Clone, Debug)]
pub struct Gru {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden.max(1) as f64).sqrt();
        Ok(Gru {
            w_input: store.add(
                format!("{name}.w_input"),
                Array::uniform(&[input, 3 * hidden], bound, rng),
            )?,
            w_hidden: store.add(
                format!("{name}.w_hidden"),
                Array::uniform(&[hidden, 3 * hidden], bound, rng),
            )?,
            b_input: store.add(
                format!("{name}.b_input"),
                Array::uniform(&[3 * hidden], bound, rng),
            )?,
            b_hidden: store.add(
                format!("{name}.b_hidden"),
                Array::uniform(&[3 * hidden], bound, rng),
            )?,
        })
    }

    pub fn vars(&self, p: &Bound) -> GruVars {
        GruVars {
            w_input: p.var(self.w_input),
            w_hidden: p.var(self.w_hidden),
            b_input: p.var(self.b_input),
            b_hidden: p.var(self.b_hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, state: Var, input: Var) -> Result<Var> {
        gru_cell(g, state, input, self.vars(p))
    }
}
