//! Step-length constraint applied to every predicted displacement.

use crate::error::{CatpError, Result};
use crate::sample::Point;
use crate::scalar::{step_fraction, Scalar};

/// Below this raw displacement norm the unit stays in place.
pub const ZERO_STEP_EPS: f64 = 1e-8;

/// Scales `raw` to length `sigmoid(|raw|) · max_step` and adds it to `prev`.
///
/// The realised step is therefore always strictly shorter than `max_step`.
/// A raw displacement shorter than [`ZERO_STEP_EPS`] has no direction and
/// leaves the location unchanged.
pub fn apply_step_constraint<T: Scalar>(prev: Point<T>, raw: Point<T>, max_step: T) -> Result<Point<T>> {
    if !(max_step.is_finite() && max_step > T::zero()) {
        return Err(CatpError::invalid(format!("max_step must be positive, got {max_step}")));
    }
    if !prev.iter().chain(raw.iter()).all(|v| v.is_finite()) {
        return Err(CatpError::invalid("non-finite location or displacement"));
    }
    let norm = (raw[0] * raw[0] + raw[1] * raw[1]).sqrt();
    if norm < T::lit(ZERO_STEP_EPS) {
        return Ok(prev);
    }
    let scale = step_fraction(norm) * max_step / norm;
    Ok([prev[0] + scale * raw[0], prev[1] + scale * raw[1]])
}
