//! Finite-difference verification of tape gradients.
//!
//! The probe-closure style keeps borrow scopes simple: the caller owns the
//! model, and `fd_grad` only asks it to evaluate the loss with one coordinate
//! of one target tensor temporarily shifted.

use crate::autodiff::{Tape, Val};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient. `probe(i, delta)` must return the loss with
/// coordinate `i` of the target shifted by `delta`, restoring state after.
pub fn fd_grad<F>(mut probe: F, n: usize, step: f64) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("fd_grad", "step must be positive"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let plus = probe(i, step)?;
        let minus = probe(i, -step)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::non_finite(format!("fd probe at coordinate {}", i)));
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Worst-coordinate relative error with denominator `max(1, |a|, |n|)`, so
/// tiny gradients are compared absolutely and large ones relatively.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

/// Check the gradient of a scalar-valued tape function w.r.t. its input.
/// Returns the maximum relative error over input coordinates.
pub fn grad_check_input<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Val) -> Result<Val>,
{
    let mut tape = Tape::new();
    let x = tape.input(point.clone())?;
    let loss = f(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = match grads.wrt(x) {
        Some(g) => g.to_vec(),
        None => vec![0.0; point.len()],
    };

    let numeric = fd_grad(
        |i, delta| {
            let mut probe = point.clone();
            probe.data_mut()[i] += delta;
            let mut t = Tape::new();
            let xv = t.input(probe)?;
            let l = f(&mut t, xv)?;
            Ok(t.value(l).scalar_value())
        },
        point.len(),
        step,
    )?;

    Ok(max_rel_err(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        // loss = sum(x * x), grad = 2x.
        let point = Tensor::new(vec![3], vec![0.5, -1.2, 2.0]).unwrap();
        let err = grad_check_input(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum_all(sq)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "err {}", err);
    }

    #[test]
    fn composite_ops_gradient_checks_out() {
        let point = Tensor::new(vec![4], vec![0.3, -0.7, 1.1, 0.0]).unwrap();
        let err = grad_check_input(
            |tape, x| {
                let a = tape.silu(x)?;
                let b = tape.scale(a, 1.5)?;
                let target = tape.constant(Tensor::new(vec![4], vec![0.1; 4]).unwrap())?;
                tape.squared_l2(b, target)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "err {}", err);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // loss = sum(x^2) forward but sabotaged backward via scale-after:
        // compare analytic 2x against FD of sum(3 x^2).
        let point = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(point.clone()).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.wrt(x).unwrap().to_vec();
        let numeric = fd_grad(
            |i, d| {
                let mut p = point.clone();
                p.data_mut()[i] += d;
                Ok(3.0 * p.data().iter().map(|v| v * v).sum::<f64>())
            },
            2,
            1e-6,
        )
        .unwrap();
        assert!(max_rel_err(&analytic, &numeric) > 0.1);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(fd_grad(|_, _| Ok(0.0), 1, 0.0).is_err());
    }
}
