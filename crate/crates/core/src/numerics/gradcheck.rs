//! Central-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error between one analytic and one numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Reverse-mode gradient of `f` with respect to each input.
pub fn analytic_gradient<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(Error::numerical("scalar function returned a non-finite value"));
    }
    Ok(y)
}

/// Sixth-order central difference per element:
/// `(45·d₁ − 9·d₂ + d₃) / 60h` with `dₖ = f(x+kh) − f(x−kh)`.
///
/// The wide stencil keeps truncation error at `O(h⁶)`, which allows a
/// step large enough that rounding noise stays far below the `1e-8`
/// relative-error floor.
pub fn numeric_gradient<F>(f: &F, inputs: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut result = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            let mut at = |dx: f64| -> Result<f64> {
                work[i].data_mut()[j] = x0 + dx;
                evaluate(f, &work)
            };
            let d1 = at(eps)? - at(-eps)?;
            let d2 = at(2.0 * eps)? - at(-2.0 * eps)?;
            let d3 = at(3.0 * eps)? - at(-3.0 * eps)?;
            work[i].data_mut()[j] = x0;
            g.data_mut()[j] = (45.0 * d1 - 9.0 * d2 + d3) / (60.0 * eps);
        }
        result.push(g);
    }
    Ok(result)
}

/// Largest elementwise relative error between two gradient lists.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> Result<f64> {
    if analytic.len() != numeric.len() {
        return Err(Error::shape("gradient lists differ in length"));
    }
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        if a.shape() != n.shape() {
            return Err(Error::shape(format!(
                "gradient shapes differ: {:?} vs {:?}",
                a.shape(),
                n.shape()
            )));
        }
        a.check_finite("analytic gradient")?;
        n.check_finite("numeric gradient")?;
        for (&x, &y) in a.data().iter().zip(n.data()) {
            worst = worst.max(relative_error(x, y));
        }
    }
    Ok(worst)
}

/// Max relative error `|a - n| / max(1e-8, |a| + |n|)` between the
/// reverse-mode and central-difference gradients of `f` at `inputs`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(&f, inputs, eps)?;
    max_relative_error(&analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sum_of_squares(tape: &mut Tape, v: &[Var]) -> Result<Var> {
        let sq = tape.mul(v[0], v[0])?;
        tape.sum(sq)
    }

    #[test]
    fn quadratic_is_exact() {
        let mut rng = Rng::new(1);
        let x = rng.normal_tensor(vec![4, 5]);
        let err = finite_diff_check(sum_of_squares, &[x.clone()], 1e-3).unwrap();
        assert!(err < 1e-8, "{err}");
        let g = analytic_gradient(&sum_of_squares, &[x.clone()]).unwrap();
        assert!(g[0].max_abs_diff(&x.map(|v| 2.0 * v)) == 0.0);
    }

    #[test]
    fn conv3d_gelu_composition() {
        let mut rng = Rng::new(2);
        let x = rng.normal_tensor(vec![2, 3, 4, 4]);
        let w = rng.normal_tensor(vec![2, 2, 3, 3, 3]).map(|v| 0.3 * v);
        let b = rng.normal_tensor(vec![2]);
        let r = rng.normal_tensor(vec![2, 3, 4, 4]);
        let f = move |tape: &mut Tape, v: &[Var]| {
            let y = tape.conv3d(v[0], v[1], v[2], [1, 1, 1], [1, 1, 1])?;
            let y = tape.gelu(y)?;
            let r = tape.constant(r.clone());
            let y = tape.mul(y, r)?;
            tape.sum(y)
        };
        let err = finite_diff_check(f, &[x, w, b], 1e-4).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = Rng::new(3);
        let x = rng.normal_tensor(vec![3, 2, 4, 4]);
        let w = rng.normal_tensor(vec![2, 3, 3, 3, 3]).map(|v| 0.3 * v);
        let b = rng.normal_tensor(vec![2]);
        let f = |tape: &mut Tape, v: &[Var]| {
            let y = tape.conv3d(v[0], v[1], v[2], [1, 1, 1], [1, 1, 1])?;
            let y = tape.gelu(y)?;
            let y = tape.mul(y, y)?;
            tape.sum(y)
        };
        let inputs = [x, w, b];
        let mut analytic = analytic_gradient(&f, &inputs).unwrap();
        let numeric = numeric_gradient(&f, &inputs, 1e-5).unwrap();
        assert!(max_relative_error(&analytic, &numeric).unwrap() < 1e-4);
        // add 10% of the gradient's scale to every element of one input
        let scale = analytic[1].data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        analytic[1] = analytic[1].map(|v| v + 0.1 * scale);
        let err = max_relative_error(&analytic, &numeric).unwrap();
        assert!(err > 0.05, "{err}");
    }

    #[test]
    fn rejects_bad_eps_and_non_scalar() {
        let x = Tensor::ones(vec![2]);
        assert!(finite_diff_check(sum_of_squares, &[x.clone()], 0.0).is_err());
        let not_scalar = |tape: &mut Tape, v: &[Var]| tape.mul(v[0], v[0]);
        assert!(finite_diff_check(not_scalar, &[x], 1e-4).is_err());
    }
}
