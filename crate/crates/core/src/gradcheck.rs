//! Central finite-difference checks against [`Graph::backward`].

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error used by all gradient checks:
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compares the gradient of the scalar produced by `f` against central
/// differences with step `eps`, over every coordinate of every input, and
/// returns the largest relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
    grad_check_coords(f, inputs, &coords, eps)
}

/// Like [`grad_check`] but only over the listed `(input, flat index)` pairs.
pub fn grad_check_coords<F>(f: F, inputs: &[Tensor], coords: &[(usize, usize)], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor], backward: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let out = f(&mut g, &vars)?;
        if !g.value(out).is_scalar() {
            return Err(Error::Contract(format!("grad_check needs a scalar output, got {:?}", g.shape(out))));
        }
        let value = g.data(out)[0];
        let grads = if backward {
            g.backward(out)?;
            vars.iter().map(|v| g.grad(*v).map(<[f64]>::to_vec)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        probe[i].data_mut()[j] = orig + eps;
        let (plus, _) = eval(&probe, false)?;
        probe[i].data_mut()[j] = orig - eps;
        let (minus, _) = eval(&probe, false)?;
        probe[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].as_ref().map_or(0.0, |g| g[j]);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}
