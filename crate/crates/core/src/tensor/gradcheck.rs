use thiserror::Error;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("function value is not finite at coordinate {coord:?}")]
    NonFinite { coord: Option<usize> },
    #[error("function must return a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("step must be positive, got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("function failed: {0}")]
    Function(Box<dyn std::error::Error + Send + Sync>),
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F, E>(mut f: F, point: &Tensor, h: f64) -> Result<f64, GradCheckError>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, E>,
    E: std::error::Error + Send + Sync + 'static,
{
    let wrap = |e: E| GradCheckError::Function(Box::new(e));
    if !(h > 0.0) {
        return Err(GradCheckError::BadStep(h));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x).map_err(wrap)?;
    let value = tape.value(y);
    if value.numel() != 1 {
        return Err(GradCheckError::NotScalar(value.shape().to_vec()));
    }
    if !value.item().is_finite() {
        return Err(GradCheckError::NonFinite { coord: None });
    }
    tape.backward(y)?;
    let analytic = tape.grad(x).expect("point is a parameter");

    let mut eval = |p: Tensor, coord: usize| -> Result<f64, GradCheckError> {
        let mut t = Tape::new();
        let xv = t.constant(p);
        let yv = f(&mut t, xv).map_err(wrap)?;
        let v = t.value(yv).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(GradCheckError::NonFinite { coord: Some(coord) })
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus, i)? - eval(minus, i)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
