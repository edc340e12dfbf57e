//! Central-difference validation of tape gradients.

use std::collections::BTreeMap;

use super::{DenseTensor, Tape, TensorError, TensorId};

/// Compares analytic gradients against central differences for every
/// coordinate of every value in `values`. The builder must register one
/// param per entry (same names) and return a scalar loss. Any error type
/// that absorbs tape errors works, so builders may call higher layers.
///
/// Returns the worst relative error
/// `|analytic - numeric| / max(|analytic|, 1e-8)` over all coordinates,
/// where `numeric = (f(x+h) - f(x-h)) / 2h`.
pub fn grad_check<F, E>(
    values: &BTreeMap<String, DenseTensor>,
    h: f64,
    build: F,
) -> std::result::Result<f64, E>
where
    F: Fn(&mut Tape, &BTreeMap<String, TensorId>) -> std::result::Result<TensorId, E>,
    E: From<TensorError>,
{
    let eval = |vals: &BTreeMap<String, DenseTensor>| -> std::result::Result<(f64, Tape, TensorId), E> {
        let mut tape = Tape::new();
        let mut ids = BTreeMap::new();
        for (name, v) in vals {
            let id = tape.param(name, v.clone())?;
            ids.insert(name.clone(), id);
        }
        let loss = build(&mut tape, &ids)?;
        let value = tape.value(loss).item()?;
        Ok((value, tape, loss))
    };

    let (_, tape, loss) = eval(values)?;
    let analytic = tape.backward(loss)?.into_named(&tape);

    let mut worst = 0.0f64;
    for (name, base) in values {
        let grad = &analytic[name];
        for i in 0..base.numel() {
            let mut plus = values.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let (f_plus, _, _) = eval(&plus)?;

            let mut minus = values.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let (f_minus, _, _) = eval(&minus)?;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
