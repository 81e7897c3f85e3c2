use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// central finite differences with the given step.
///
/// Per coordinate the error is `|analytic - numeric| / max(|analytic|,
/// |numeric|, 1e-8)`. `f` is re-run on a fresh tape for every perturbation.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.wrt(xv);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let o = f(&mut t, v)?;
        t.scalar(o)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = Tensor::row_vector(&[1.0, 2.0]);
        let err = finite_difference_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::row_vector(&[1.0, 2.0, 3.0]);
        let err =
            finite_difference_check(|t, _| Ok(t.constant(Tensor::scalar(7.0))), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // relu at a kink: analytic picks one side, numeric averages both
        let x = Tensor::row_vector(&[0.0]);
        let err = finite_difference_check(
            |t, x| {
                let r = t.relu(x);
                Ok(t.sum_all(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
