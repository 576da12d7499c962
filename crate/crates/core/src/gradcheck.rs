//! Central-finite-difference gradient oracle.
//!
//! Rebuilds the forward graph from scratch for every perturbed evaluation, so
//! the numeric estimate is fully independent of the backward pass it checks.
//! Runs at f64 only; finite differences are unreliable at f32.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Worst relative error between analytic and numeric gradients over all
/// elements of all inputs. `build` must construct a scalar output.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars)?;
        let v = g.data(out).item()?;
        if !v.is_finite() {
            return Err(Error::numerical("non-finite value during grad check"));
        }
        Ok(v)
    };

    // analytic gradients from one backward pass
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            let err = (a - numeric).abs() / denom;
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 0.7]).unwrap();
        let err = grad_check(|g, vars| Ok(g.sum_all(vars[0])), &[x], 1e-5).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn exp_derivative_at_one() {
        // d/dx exp(x) at x=1 is e
        let x = Tensor::scalar(1.0f64).reshaped(vec![1]).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let e = g.exp(v);
        let s = g.sum_all(e);
        g.backward(s).unwrap();
        let d = g.grad(v).unwrap().data()[0];
        assert!((d - std::f64::consts::E).abs() < 1e-6);
        let err = grad_check(
            |g, vars| {
                let e = g.exp(vars[0]);
                Ok(g.sum_all(e))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn matmul_ce_composite_passes() {
        let x = Tensor::new(vec![2, 3], vec![0.4, -0.6, 1.1, 0.2, 0.9, -1.3]).unwrap();
        let w = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.713).sin()).collect())
            .unwrap();
        let err = grad_check(
            |g, vars| {
                let z = g.matmul(vars[0], vars[1])?;
                g.cross_entropy(z, &[1, 3])
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }
}
