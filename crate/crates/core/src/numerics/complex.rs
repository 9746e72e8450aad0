//! Interleaved `(re, im)` helpers.
//!
//! `Complex64` is `#[repr(C)]` with `re` before `im`, so a `Vec<Complex64>`
//! already has the interleaved layout; these helpers convert to and from
//! flat real buffers used by the tape.

use num_complex::Complex64;

/// `e^{jθ}`.
pub fn expj(theta: f64) -> Complex64 {
    let (s, c) = theta.sin_cos();
    Complex64::new(c, s)
}

pub fn interleave(values: &[Complex64]) -> Vec<f64> {
    values.iter().flat_map(|z| [z.re, z.im]).collect()
}

/// Inverse of [`interleave`]; panics on odd-length input.
pub fn deinterleave(values: &[f64]) -> Vec<Complex64> {
    assert!(values.len() % 2 == 0, "interleaved buffer must have even length");
    values.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}
