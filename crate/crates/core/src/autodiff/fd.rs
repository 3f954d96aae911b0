use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient estimate `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_difference_gradient<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    let two_eps = eps + eps;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                node: format!("finite difference probe at coordinate {i}"),
            });
        }
        grad.push((up - down) / two_eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0f64);
        let g = finite_difference_gradient(|t| Ok(t.item() * t.item()), &x, 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn cube_at_two() {
        let x = Tensor::scalar(2.0f64);
        let g = finite_difference_gradient(|t| Ok(t.item().powi(3)), &x, 1e-5).unwrap();
        assert!((g.item() - 12.0).abs() < 1e-5);
    }

    #[test]
    fn constant_function_is_flat() {
        let x = Tensor::vector(vec![1.0f64, -2.0, 0.5]);
        let g = finite_difference_gradient(|_| Ok(4.0), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::scalar(1.0f64);
        assert!(finite_difference_gradient(|t| Ok(t.item()), &x, 0.0).is_err());
        assert!(finite_difference_gradient(|_| Ok(f64::NAN), &x, 1e-3).is_err());
    }
}

/// Relative error `|a - b| / max(|a|, |b|)`, taken as zero when both magnitudes
/// are below `1e-8`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares analytic parameter and input gradients of `output` against central
/// differences. Returns the largest relative error and the leaf it came from.
pub fn gradient_check(
    graph: &super::Graph<f64>,
    params: &super::TensorMap<f64>,
    inputs: &super::TensorMap<f64>,
    output: super::NodeId,
    eps: f64,
) -> Result<(f64, String)> {
    let eval = graph.evaluate(params, inputs)?;
    let grads = graph.backward(&eval, output)?;
    let mut worst = (0.0f64, String::new());
    for (name, value) in params {
        let analytic = grads.param(name).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
        let numeric = finite_difference_gradient(
            |t| {
                let mut p = params.clone();
                p.insert(name.clone(), t.clone());
                Ok(graph.evaluate(&p, inputs)?.scalar(output))
            },
            value,
            eps,
        )?;
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let e = relative_error(*a, *n);
            if e > worst.0 {
                worst = (e, name.clone());
            }
        }
    }
    Ok(worst)
}
