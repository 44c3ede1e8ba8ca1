//! Central finite differences, used as an independent oracle for every
//! analytic gradient in the crate.
//!
//! The checkers only ever evaluate forward passes, so agreement with a
//! recorded backward pass is evidence, not circularity. Errors are reported
//! as the euclidean distance between gradient vectors relative to the larger
//! norm, which stays meaningful when individual coordinates vanish.

use crate::error::Result;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_diff(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe)?;
        probe[i] = orig - h;
        let minus = f(&probe)?;
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_recovered() {
        let f = |x: &[f64]| Ok(x[0] * x[0] + 3.0 * x[0] * x[1]);
        let g = central_diff(f, &[2.0, -1.0], 1e-5).unwrap();
        // Analytic: [2x + 3y, 3x] = [1, 6].
        assert!(rel_err(&g, &[1.0, 6.0], 1e-12) < 1e-9);
    }
}
