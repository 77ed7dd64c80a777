use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Gradient magnitude below which central differences at `eps >= 1e-6`
/// are dominated by round-off; used as the relative-error denominator floor.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst element-wise relative error
/// `|analytic - numeric| / max(|analytic| + |numeric|, GRAD_FLOOR)`.
///
/// `f` receives a fresh tape and the handle of `x` on it, and must return a
/// one-element loss. It is called once with gradients enabled and twice per
/// element of `x` on inference tapes.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside [1e-6, 1e-3]")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true)?;
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let v = t.leaf(probe, false).map_err(|_| Error::NonFinite("grad_check perturbation"))?;
        let out = f(&mut t, v).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite("grad_check perturbation"),
            other => other,
        })?;
        let val = t.data(out)[0];
        if !val.is_finite() {
            return Err(Error::NonFinite("grad_check perturbation"));
        }
        Ok(val)
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
