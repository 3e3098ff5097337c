//! Central finite differences, the independent oracle for every reverse-mode
//! gradient in the crate.

use alloc::vec::Vec;

/// Default step for `f64` checks.
pub const STEP: f64 = 1e-4;

/// `∂f/∂xᵢ ≈ (f(x + h eᵢ) − f(x − h eᵢ)) / 2h` for every coordinate.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(floor, f64::max);
    diff / scale
}
