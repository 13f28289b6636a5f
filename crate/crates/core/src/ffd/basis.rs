use super::FfdError;

/// Uniform cubic B-spline weights `(B0, B1, B2, B3)` at fractional position `t ∈ [0, 1)`.
pub fn bspline_basis(t: f64) -> Result<[f64; 4], FfdError> {
    if !(0.0..1.0).contains(&t) {
        return Err(FfdError::Domain(t));
    }
    Ok(weights(t))
}

/// Same polynomials without the domain check; the grid evaluators also use
/// `t = 1` at the closing edge of the last cell.
#[inline]
pub(crate) fn weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}
