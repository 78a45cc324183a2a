use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::{NnError, Result};

/// Largest per-coordinate relative error between the tape gradient of a
/// scalar function and its fourth-order central finite difference
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
///
/// Relative error is `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(NnError::Contract(format!("eps {eps} must be positive")));
    }
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = f(&mut g, v)?;
        let val = g.value(y);
        if val.len() != 1 {
            return Err(NnError::Contract("grad_check needs a scalar function".into()));
        }
        let s = val.data()[0];
        if !s.is_finite() {
            return Err(NnError::NonFinite("grad_check function value"));
        }
        Ok(s)
    };

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    if !g.value(y).data()[0].is_finite() {
        return Err(NnError::NonFinite("grad_check function value"));
    }
    g.backward(y)?;
    let analytic = g.grad_tensor(xv);

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let at = |d: f64| {
            let mut t = x.clone();
            t.data_mut()[i] += d;
            eval(t)
        };
        let fd = (-at(2.0 * eps)? + 8.0 * at(eps)? - 8.0 * at(-eps)? + at(-2.0 * eps)?) / (12.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_tensor(n: usize) -> Tensor<f64> {
        Tensor::new(&[n], (0..n).map(|i| (i as f64 * 1.3).sin() * 2.0).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &vec_tensor(7),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function() {
        let err = grad_check(
            |g, _x| Ok(g.constant(Tensor::scalar(3.0))),
            &vec_tensor(4),
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-12);
    }

    #[test]
    fn non_finite_is_an_error() {
        let r = grad_check(
            |g, _x| Ok(g.constant(Tensor::scalar(f64::INFINITY))),
            &vec_tensor(2),
            1e-4,
        );
        assert!(matches!(r, Err(NnError::NonFinite(_))));
    }
}
