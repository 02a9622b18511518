//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Largest elementwise relative error between the autodiff gradient of `f`
/// at `x` and central differences `(f(x+eps) − f(x−eps)) / 2eps`.
/// The denominator is `max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&g, xv)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.constant(t);
        let y = f(&g, v)?;
        Ok(g.value(y).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let g = Graph::new();
        let v = g.param(x.clone());
        let y = g.sum(g.square(v));
        assert_eq!(g.backward(y).unwrap().get(v).unwrap(), &[2.0, 4.0]);
        let err = grad_check(|g, v| Ok(g.sum(g.square(v))), &x, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        let err = grad_check(
            |g, v| {
                let w = g.constant(Tensor::from_vec(vec![3.0, -2.0, 0.25]));
                Ok(g.sum(g.mul(v, w)?))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }
}
