//! Central-difference verification of analytic gradients.

use crate::diffcore::array::Array;
use crate::diffcore::graph::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, point: &[Array]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|a| g.leaf(a.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares backward-mode gradients of `f` at `point` with central differences
/// of step `h`, over every coordinate of every input.
pub fn grad_check<F>(f: F, point: &[Array], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::arg("grad_check step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|a| g.leaf(a.clone())).collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.value(out).item();
    if !f0.is_finite() {
        return Err(Error::numeric(format!(
            "function value is {f0} at the base point"
        )));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Array> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe = point.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..a.len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let an = a.data()[j];
            if !numeric.is_finite() || !an.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite derivative at input {i}, coordinate {j}: analytic {an}, numeric {numeric}"
                )));
            }
            let err = (an - numeric).abs() / an.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
