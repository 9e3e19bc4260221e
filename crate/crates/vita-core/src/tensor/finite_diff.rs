//! Central-difference gradient checking.
//!
//! Used by the test suites to validate every backward closure against a
//! numeric derivative of the same forward function.

use super::{Tape, Tensor};

/// A graph builder: given concrete input values, rebuild the graph and return
/// the tape, the watched input tensors (aligned with the inputs), and the
/// scalar loss.
pub type GraphFn<'a> = &'a dyn Fn(&[Tensor]) -> (Tape, Vec<Tensor>, Tensor);

/// Numeric gradient of `f`'s scalar output with respect to every element of
/// every input, via central differences with step `h`.
pub fn numeric_gradients(
    inputs: &[Tensor],
    f: impl Fn(&[Tensor]) -> (Tape, Vec<Tensor>, Tensor),
    h: f32,
) -> Vec<Vec<f64>> {
    let eval = |vals: &[Tensor]| -> f64 {
        let (_tape, _watched, loss) = f(vals);
        loss.item() as f64
    };
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut dp = inputs[i].to_vec();
            let mut dm = dp.clone();
            dp[j] += h;
            dm[j] -= h;
            plus[i] = Tensor::from_vec(inputs[i].shape().to_vec(), dp);
            minus[i] = Tensor::from_vec(inputs[i].shape().to_vec(), dm);
            gi.push((eval(&plus) - eval(&minus)) / (2.0 * h as f64));
        }
        grads.push(gi);
    }
    grads
}

/// Compare analytic gradients against central differences.
///
/// Relative error uses max(1, |a|, |n|) in the denominator so that tiny
/// gradients are judged on an absolute scale. Returns the worst relative
/// error seen, or a description of the first failure.
pub fn check_gradients(
    inputs: &[Tensor],
    f: impl Fn(&[Tensor]) -> (Tape, Vec<Tensor>, Tensor),
    h: f32,
    tol: f64,
) -> Result<f64, String> {
    let (tape, watched, loss) = f(inputs);
    tape.backward(&loss);
    let analytic: Vec<Vec<f32>> = watched
        .iter()
        .map(|t| tape.grad(t).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let numeric = numeric_gradients(inputs, &f, h);

    let mut worst = 0.0f64;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        if a.len() != n.len() {
            return Err(format!(
                "input {i}: analytic gradient has {} elements, numeric has {}",
                a.len(),
                n.len()
            ));
        }
        for (j, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let av = av as f64;
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(1.0);
            if rel > worst {
                worst = rel;
            }
            if rel > tol {
                return Err(format!(
                    "input {i} element {j}: analytic {av:.6e} vs numeric {nv:.6e} (rel {rel:.3e} > tol {tol:.1e})"
                ));
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn numeric_matches_analytic_on_quadratic() {
        // loss = sum(x * x): gradient 2x exactly, well inside tolerance.
        let x = Tensor::from_vec(vec![3], vec![0.5, -1.5, 2.0]);
        let f = |inputs: &[Tensor]| {
            let tape = Tape::new();
            let x = tape.watch(&inputs[0]);
            let loss = ops::sum_all(&ops::mul(&x, &x));
            (tape, vec![x], loss)
        };
        let worst = check_gradients(&[x], f, 1e-3, 1e-3).unwrap();
        assert!(worst < 1e-3);
    }

    #[test]
    fn detects_a_missing_gradient_path() {
        // The loss uses a detached copy of x, so the analytic gradient is
        // zero while the numeric one is 2x. The checker must flag this.
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]);
        let f = |inputs: &[Tensor]| {
            let tape = Tape::new();
            let x = tape.watch(&inputs[0]);
            let frozen = x.detach();
            let dead_end = ops::scale(&ops::sum_all(&x), 0.0);
            let loss = ops::add(&ops::sum_all(&ops::mul(&frozen, &frozen)), &dead_end);
            (tape, vec![x], loss)
        };
        let err = check_gradients(&[x], f, 1e-3, 1e-3).unwrap_err();
        assert!(err.contains("element 0"), "{err}");
    }
}
