use super::tape::{Tape, Var};
use super::tensor::NdTensor;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Maximum relative error between the reverse-mode gradient of `f` at `x` and
/// a central finite difference, over all coordinates of `x`.
///
/// `f` receives a fresh tape and the trainable leaf holding `x`, and must
/// return a scalar node. Relative error is `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &NdTensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |point: &NdTensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.param(point.clone());
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar-valued function, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&mut tape, leaf)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| NdTensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = NdTensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let s = t.square(x);
                Ok(t.sum_all(s))
            },
            &x,
            DEFAULT_FD_EPS,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let x = NdTensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(|t, x| Ok(t.square(x)), &x, DEFAULT_FD_EPS);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
