//! Central finite-difference checks of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Per-input `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)`.
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() <= tol
    }
}

/// Relative L2 distance between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares the tape gradient of `f` with respect to each input against
/// central differences with step `h`. `f` must build a one-element loss.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.item(loss))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic = g
            .grad(var)
            .map(|v| v.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data[j];
            probe[i].data[j] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data[j] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data[j] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
        relative_errors.push(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { relative_errors })
}

/// Reduces an arbitrary tensor to a scalar through fixed random weights so
/// that every output element contributes a distinct sensitivity.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    use rand::Rng;
    let mut rng = crate::rng::stream(seed, crate::rng::Purpose::Init, 0xC0FFEE, 0);
    let shape = g.shape(x).to_vec();
    let n = g.value(x).numel();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.constant(shape, w)?;
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}
