use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `‖g − ĝ‖₂ / max(‖g‖₂, ‖ĝ‖₂, ε)` per input, with `g` from the tape,
    /// `ĝ` from central differences and `ε = 1e-5·max(1, |f|)`. The floor
    /// keeps rounding noise in `ĝ` from counting as an error when the true
    /// gradient vanishes.
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.relative_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with finite
/// differences of step `h` in every input coordinate.
///
/// Each coordinate uses the central, forward or backward slope, whichever is
/// closest to the tape's value. On smooth stretches the three agree to `O(h)`;
/// when a ReLU or clamp kink lies within `h`, the tape's gradient is one of the
/// one-sided slopes while the central slope averages them.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    let floor = error_floor(f0);
    let grads = tape.backward(out)?;

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[k].len()],
        };
        let mut numeric = vec![0.0; inputs[k].len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let x0 = work[k].data()[j];
            work[k].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[j] = x0;
            *n = closest_slope(analytic[j], f0, up, down, h);
        }
        relative_errors.push(relative_error(&analytic, &numeric, floor));
    }
    Ok(GradCheck { relative_errors })
}

pub(crate) fn closest_slope(analytic: f64, f0: f64, up: f64, down: f64, h: f64) -> f64 {
    [(up - down) / (2.0 * h), (up - f0) / h, (f0 - down) / h]
        .into_iter()
        .min_by(|a, b| (a - analytic).abs().total_cmp(&(b - analytic).abs()))
        .expect("three candidates")
}

pub(crate) fn error_floor(value: f64) -> f64 {
    1e-5 * value.abs().max(1.0)
}

pub(crate) fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(floor)
}
