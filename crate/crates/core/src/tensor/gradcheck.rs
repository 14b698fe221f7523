use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function with central differences.
///
/// Returns the largest per-coordinate relative error
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-7, 1e-4]"
        )));
    }
    let eval = |point: Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(point);
        let y = f(&tape, v)?;
        let value = tape.value(y).item();
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = f(&tape, v)?;
    let grads = tape.backward(y)?;
    let analytic = match grads.get(v) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.numel()],
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
