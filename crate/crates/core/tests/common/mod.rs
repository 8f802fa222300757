//! Oracles shared by several test binaries.
#![allow(dead_code)]

use std::f64::consts::PI;

use num::{BigRational, ToPrimitive};
use num_complex::Complex64;

/// Substitutes `s = a(z−1)/(z+1)` into `g·ωₙ²/(s² + 2ζωₙs + ωₙ²)` exactly over
/// the rationals (f64 inputs are exact dyadic rationals) and returns the
/// controllable companion realization `(A, C, D)` rounded to f64.
pub fn exact_companion(wn: f64, zeta: f64, gain: f64, ts: f64) -> ([[f64; 2]; 2], [f64; 2], f64) {
    let q = |v: f64| BigRational::from_float(v).expect("finite");
    let (wn, zeta, gain, ts) = (q(wn), q(zeta), q(gain), q(ts));
    let two = BigRational::from_integer(2.into());
    let a = &two / &ts;
    let w2 = &wn * &wn;
    let zwa = &two * &zeta * &wn * &a;
    let a2 = &a * &a;
    let d0 = &a2 + &zwa + &w2;
    let d1 = (&w2 - &a2) * &two;
    let d2 = &a2 - &zwa + &w2;
    let n = &gain * &w2;
    let (b0, b1, b2) = (&n / &d0, &n * &two / &d0, &n / &d0);
    let (a1, a2) = (&d1 / &d0, &d2 / &d0);
    let f = |r: &BigRational| r.to_f64().expect("in range");
    (
        [[0.0, 1.0], [f(&-&a2), f(&-&a1)]],
        [f(&(&b2 - &a2 * &b0)), f(&(&b1 - &a1 * &b0))],
        f(&b0),
    )
}

/// Hann-windowed DFT of `x[start..start+len]` at `f`, time measured from
/// `origin_shift` samples before `start`.
pub fn direct_dft(x: &[f64], f: f64, fs: f64, start: usize, len: usize, origin_shift: usize) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for k in 0..len {
        let g = 0.5 * (1.0 - (2.0 * PI * k as f64 / len as f64).cos());
        let t = (k + origin_shift) as f64 / fs;
        acc += x[start + k] * g * Complex64::from_polar(1.0, -2.0 * PI * f * t);
    }
    acc
}
