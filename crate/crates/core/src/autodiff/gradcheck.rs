//! Central finite-difference gradient checking in `f64`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Numeric gradient of the scalar function `f` at `x` by central differences.
pub fn numeric_gradient<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        scalar_value(&tape, out)
    };
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        grad.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    Ok(grad)
}

/// Largest elementwise relative error between the tape gradient of `f` at `x`
/// and central differences with step `eps`:
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("grad_check step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    scalar_value(&tape, out)?;
    let analytic = if tape.requires_grad(out) {
        tape.backward(out)?;
        tape.grad(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()])
    } else {
        vec![0.0; x.numel()]
    };
    let numeric = numeric_gradient(&f, x, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max))
}

fn scalar_value(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Backward(format!("expected a scalar, got shape {:?}", t.shape())));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_f64(&[2, 3], &[0.1, -2.0, 3.5, 4.0, 0.0, 9.0]).unwrap();
        let err = grad_check(|t, v| t.sum(v), &x, 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn softmax_sum_of_squares() {
        let x = Tensor::from_f64(&[2, 3], &[0.1, -2.0, 0.5, 1.0, 0.3, -0.7]).unwrap();
        let err = grad_check(
            |t, v| {
                let s = t.softmax_rows(v)?;
                t.sum_squares(s)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        assert!(grad_check(|t, v| t.sum(v), &x, 0.0).is_err());
    }
}
