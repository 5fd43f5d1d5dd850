//! Central-difference gradient checking against the tape's reverse sweep.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of a scalar-valued function against
/// central finite differences at `point`.
///
/// `f` must be pure and deterministic: it rebuilds the same computation on
/// any tape it is handed. Returns the maximum over coordinates of
/// `|autograd - central| / max(1, |central|)`.
pub fn finite_diff_gradcheck<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let loss = f(&mut tape, x)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::invalid(format!(
            "gradcheck needs a scalar function, got output shape {:?}",
            tape.value(loss).shape()
        )));
    }
    tape.backward(loss)?;
    let autograd = tape
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |values: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(values.clone(), false);
        let out = f(&mut t, x)?;
        Ok(t.value(out).item())
    };

    let mut max_err: f64 = 0.0;
    for i in 0..point.numel() {
        let base = point.values()[i];
        let mut plus = point.clone();
        plus.values_mut()[i] = base + h;
        let mut minus = point.clone();
        minus.values_mut()[i] = base - h;
        let central = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let err = (autograd[i] - central).abs() / central.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_tight() {
        let point = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.7]);
        let err = finite_diff_gradcheck(
            |tape, x| {
                let sq = tape.square(x);
                Ok(tape.sum(sq))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "max rel err {err}");
    }

    #[test]
    fn softmax_then_dot_with_constants() {
        let point = Tensor::from_vec(vec![0.1, 0.9, 0.4, 0.2, 0.6]);
        let err = finite_diff_gradcheck(
            |tape, x| {
                let w = tape.softmax_temp(x, 1.0 / 3.0)?;
                let c = tape.constant(Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.0, 1.5]));
                tape.dot(w, c)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn rejects_non_scalar_outputs() {
        let point = Tensor::from_vec(vec![1.0, 2.0]);
        let res = finite_diff_gradcheck(|tape, x| Ok(tape.square(x)), &point, 1e-5);
        assert!(res.is_err());
    }
}
