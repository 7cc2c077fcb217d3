use super::{Graph, Tensor, Var};
use crate::error::{invalid, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest `|a - n| / max(|a|, |n|, 1e-6)` over components.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Checks the gradient of a scalar function at `point`.
///
/// `f` receives a fresh graph and the leaf holding the (possibly perturbed)
/// point and must return a single-element node.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let shape = point.shape().to_vec();
    let base: Vec<f64> = point.data().iter().map(|&v| v as f64).collect();

    let eval = |values: Vec<f64>, with_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let x = g.leaf_f64(&shape, values, with_grad)?;
        let y = f(&mut g, x)?;
        if g.values(y).len() != 1 {
            return Err(invalid(format!(
                "gradient check needs a scalar function, got shape {:?}",
                g.shape(y)
            )));
        }
        let value = g.item(y);
        if !with_grad {
            return Ok((value, vec![]));
        }
        g.backward(y)?;
        Ok((value, g.grad(x)))
    };

    let (_, analytic) = eval(base.clone(), true)?;
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let (fp, _) = eval(plus, false)?;
        let (fm, _) = eval(minus, false)?;
        numeric.push((fp - fm) / (2.0 * h));
    }

    let mut max_rel_error = 0.0f64;
    let mut max_abs_error = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let diff = (a - n).abs();
        max_abs_error = max_abs_error.max(diff);
        max_rel_error = max_rel_error.max(diff / a.abs().max(n.abs()).max(1e-6));
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        max_abs_error,
        tol,
        passed: max_rel_error < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_at_fixed_point() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let s = g.square(x);
                Ok(g.sum(s))
            },
            &x,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        for (a, e) in r.analytic.iter().zip([2.0, 4.0, 6.0]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::full(&[4], 0.5);
        let r = grad_check(|g, _| Ok(g.scalar_const(3.0)), &x, 1e-3, 1e-3).unwrap();
        assert!(r.analytic.iter().all(|&v| v == 0.0));
        assert!(r.numeric.iter().all(|&v| v == 0.0));
        assert!(r.passed);
    }

    #[test]
    fn rejects_vector_output() {
        let x = Tensor::zeros(&[2]);
        assert!(grad_check(|g, x| Ok(g.square(x)), &x, 1e-3, 1e-3).is_err());
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.0, 1e-3).is_err());
    }
}
