//! Gradient verification oracles.
//!
//! [`central_diff`] is the independent numerical oracle used across the test
//! suite; [`finite_diff_check`] compares it element-by-element against
//! [`Tape::backward`] for a scalar-valued function of one parameter tensor.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central difference `(f(x+eps) - f(x-eps)) / (2 eps)` in `f64`.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
}

/// Checks the tape gradient of `build` (a parameter-to-scalar function) against
/// central differences, element by element. Returns the maximum relative
/// error, with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// `build` must be deterministic; this is verified by evaluating it twice and
/// rejecting on any mismatch. The divisor uses the actually-representable
/// perturbation `p[i]+eps - (p[i]-eps)` so storage rounding of `eps` does not
/// bias the quotient.
pub fn finite_diff_check<S, F>(build: F, params: &Tensor<S>, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, NodeId) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("finite_diff_check needs eps > 0".to_string()));
    }
    let eval = |p: &Tensor<S>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(p.clone());
        let loss = build(&mut tape, leaf)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "checked function must produce a scalar, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0].to_f64())
    };

    // determinism probe
    let l0 = eval(params)?;
    let l1 = eval(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::NonDeterministic { a: l0, b: l1 });
    }

    // analytic gradient
    let mut tape = Tape::new();
    let leaf = tape.leaf(params.clone());
    let loss = build(&mut tape, leaf)?;
    let grads = tape.backward(loss)?;
    let analytic = match grads.get(leaf) {
        Some(g) => g.clone(),
        None => Tensor::zeros(params.shape()),
    };

    let mut max_rel = 0f64;
    for i in 0..params.len() {
        let base = params.data()[i];
        let mut plus = params.clone();
        plus.data_mut()[i] = base + S::from_f64(eps);
        let mut minus = params.clone();
        minus.data_mut()[i] = base - S::from_f64(eps);
        let h = plus.data()[i].to_f64() - minus.data()[i].to_f64();
        let fd = (eval(&plus)? - eval(&minus)?) / h;
        let rel = rel_error(fd, analytic.data()[i].to_f64());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn quadratic_central_difference_is_exact() {
        // f(x) = x^2 at x = 3: central differences are exact for quadratics.
        let fd = central_diff(|x| x * x, 3.0, 1e-3);
        assert!(rel_error(fd, 6.0) < 1e-9, "fd = {fd}");
    }

    #[test]
    fn linear_function_matches_to_rounding() {
        let fd = central_diff(|x| 2.5 * x - 7.0, 1.234, 1e-4);
        assert!(rel_error(fd, 2.5) < 1e-10);
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let fd = central_diff(sig, 0.0, 1e-4);
        assert!((fd - 0.25).abs() < 1e-6);
    }

    #[test]
    fn tape_sigmoid_passes_check() {
        let p = Tensor::from_vec(&[4], vec![0.0f32, 0.5, -1.2, 2.0]).unwrap();
        let max_rel = finite_diff_check(
            |tape, w| {
                let s = tape.sigmoid(w);
                Ok(tape.sum(s))
            },
            &p,
            1e-2,
        )
        .unwrap();
        assert!(max_rel < 1e-3, "max rel {max_rel}");
    }

    #[test]
    fn nondeterministic_function_rejected() {
        let calls = Cell::new(0u32);
        let p = Tensor::scalar(1.0f32);
        let err = finite_diff_check(
            |tape, w| {
                calls.set(calls.get() + 1);
                let jitter = tape.leaf(Tensor::scalar(calls.get() as f32));
                let x = tape.hadamard(w, jitter)?;
                Ok(tape.sum(x))
            },
            &p,
            1e-2,
        )
        .unwrap_err();
        assert_eq!(err.code(), "non_deterministic");
    }
}
