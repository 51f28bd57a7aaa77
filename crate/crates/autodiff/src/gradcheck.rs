//! Finite-difference gradient checks (64-bit only): central differences at
//! steps `h` and `h / 2`, combined by one Richardson step.

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative error used by every check: `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    rel_error_floored(analytic, numeric, 1e-12)
}

/// `|a - n| / max(|a|, |n|, floor)`. A floor above roundoff keeps gradients
/// that vanish analytically (softmax-invariant biases) from reading as 100% error.
pub fn rel_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(Graph<f64>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = track;
            g.leaf(&t)
        })
        .collect();
    let y = f(&mut g, &vars)?;
    if g.value(y).len() != 1 {
        return invalid(format!("grad_check needs a scalar function, got shape {:?}", g.shape(y)));
    }
    if !g.item(y).is_finite() {
        return Err(Error::NumericFailure(format!("function value {} is not finite", g.item(y))));
    }
    Ok((g, y))
}

/// Max relative error between the tape gradient and central differences,
/// taken over every coordinate of every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_floored(f, inputs, eps, 1e-12)
}

/// [`grad_check_many`] with an explicit denominator floor.
pub fn grad_check_floored<F>(f: F, inputs: &[Tensor<f64>], eps: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(grad_check_detailed(f, inputs, &CheckOptions { floor, ..CheckOptions::central(eps) })?.max_rel_error)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Difference {
    /// `(f(x + h) - f(x - h)) / 2h`.
    Central,
    /// Central differences at `h` and `h / 2` combined to cancel the `h^2` term.
    Richardson,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub eps: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub difference: Difference,
    /// When set, a coordinate whose `h` and `h / 2` central estimates differ
    /// by more than this relative amount is counted as a kink and skipped.
    pub kink_threshold: Option<f64>,
}

impl CheckOptions {
    pub fn central(eps: f64) -> Self {
        CheckOptions { eps, floor: 1e-12, difference: Difference::Central, kink_threshold: None }
    }
}

/// Outcome of [`grad_check_detailed`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Coordinates whose stencil straddles a kink (e.g. a ReLU at zero) and
    /// were left out of `max_rel_error`.
    pub kinks: usize,
}

/// Below this size the two kink-test estimates are compared absolutely, so
/// roundoff on a vanishing derivative is not mistaken for a kink.
const KINK_FLOOR: f64 = 1e-5;

/// Full-control gradient check. With a kink threshold, a wrong analytic
/// gradient still shows up: both numeric estimates then agree with each
/// other and not with it.
pub fn grad_check_detailed<F>(f: F, inputs: &[Tensor<f64>], opts: &CheckOptions) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eps = opts.eps;
    if !(eps > 0.0) {
        return invalid("grad_check step must be positive");
    }
    let (mut g, y) = eval_scalar(&f, inputs, true)?;
    g.backward(y)?;
    let analytic: Vec<Vec<f64>> = (0..inputs.len())
        .map(|i| g.grad(Var(i)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]))
        .collect();

    let mut out = GradCheck { max_rel_error: 0.0, coordinates: 0, kinks: 0 };
    let mut probe = inputs.to_vec();
    let central = |probe: &mut Vec<Tensor<f64>>, i: usize, j: usize, h: f64| -> Result<f64> {
        let x0 = inputs[i].data()[j];
        probe[i].data_mut()[j] = x0 + h;
        let (gp, yp) = eval_scalar(&f, probe, false)?;
        probe[i].data_mut()[j] = x0 - h;
        let (gm, ym) = eval_scalar(&f, probe, false)?;
        probe[i].data_mut()[j] = x0;
        Ok((gp.item(yp) - gm.item(ym)) / (2.0 * h))
    };
    let need_half = opts.difference == Difference::Richardson || opts.kink_threshold.is_some();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            out.coordinates += 1;
            let coarse = central(&mut probe, i, j, eps)?;
            let fine = if need_half { central(&mut probe, i, j, eps / 2.0)? } else { coarse };
            let numeric = match opts.difference {
                Difference::Central => coarse,
                Difference::Richardson => (4.0 * fine - coarse) / 3.0,
            };
            if !numeric.is_finite() || !grads[j].is_finite() {
                return Err(Error::NumericFailure(format!("non-finite gradient at input {i}, coordinate {j}")));
            }
            if opts.kink_threshold.is_some_and(|t| rel_error_floored(coarse, fine, KINK_FLOOR) > t) {
                out.kinks += 1;
                continue;
            }
            out.max_rel_error = out.max_rel_error.max(rel_error_floored(grads[j], numeric, opts.floor));
        }
    }
    Ok(out)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps)
}
