//! Central finite differences against the tape's analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `‖a - n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares gradients of the scalar built by `f` with respect to each input.
/// `f` receives one leaf per input, all requiring gradients, and must be
/// deterministic. Returns one relative error per input.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    step: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Shape("gradient check needs a scalar output".into()));
    }
    tape.backward(out)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut values = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = match tape.grad(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + step;
            let plus = eval(&values)?;
            values[i].data_mut()[j] = orig - step;
            let minus = eval(&values)?;
            values[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_of_equal_vectors_is_zero() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scale_passes() {
        let x = Tensor::from_f64(vec![3], &[0.3, -1.0, 2.0]).unwrap();
        let e = check_gradients(&[x], 1e-4, |t, v| {
            let y = t.scale(v[0], 2.0);
            Ok(t.mean(y))
        })
        .unwrap();
        assert!(e[0] < 1e-8);
    }
}
