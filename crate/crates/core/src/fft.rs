//! Unitary-normalized 2-D DFT on row-major complex buffers.
//!
//! Both directions are scaled by `1/sqrt(h*w)`, so the inverse is also the
//! adjoint. Index `(0, 0)` holds the DC bin.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((len, inverse))
            .or_insert_with(|| {
                let dir = if inverse {
                    FftDirection::Inverse
                } else {
                    FftDirection::Forward
                };
                planner.plan_fft(len, dir)
            })
            .clone()
    })
}

fn transpose(src: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn fft2_impl(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    assert_eq!(data.len(), h * w, "fft2 buffer does not match {h}x{w}");
    plan(w, inverse).process(data);
    let mut t = transpose(data, h, w);
    plan(h, inverse).process(&mut t);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for r in 0..w {
        for c in 0..h {
            data[c * w + r] = t[r * h + c] * scale;
        }
    }
}

/// In-place unitary forward transform.
pub fn fft2_inplace(data: &mut [Complex64], h: usize, w: usize) {
    fft2_impl(data, h, w, false);
}

/// In-place unitary inverse transform.
pub fn ifft2_inplace(data: &mut [Complex64], h: usize, w: usize) {
    fft2_impl(data, h, w, true);
}

pub fn fft2(data: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = data.to_vec();
    fft2_inplace(&mut out, h, w);
    out
}

pub fn ifft2(data: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    let mut out = data.to_vec();
    ifft2_inplace(&mut out, h, w);
    out
}

/// Maps a DC-centered index to its unshifted DFT index along one axis.
#[inline]
pub fn centered_to_fft(c: usize, n: usize) -> usize {
    (c + n - n / 2) % n
}

/// Maps an unshifted DFT index to its DC-centered position along one axis.
#[inline]
pub fn fft_to_centered(u: usize, n: usize) -> usize {
    (u + n / 2) % n
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive_dft(x: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..h {
                    for c in 0..w {
                        let ang = -2.0 * PI * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                        acc += x[r * w + c] * Complex64::from_polar(1.0, ang);
                    }
                }
                out[u * w + v] = acc / ((h * w) as f64).sqrt();
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft_on_rectangular_grid() {
        let (h, w) = (5, 6);
        let x: Vec<Complex64> = (0..h * w)
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let fast = fft2(&x, h, w);
        let slow = naive_dft(&x, h, w);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-12);
        }
        let back = ifft2(&fast, h, w);
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn shift_maps_are_inverse() {
        for n in [1, 2, 7, 8] {
            for c in 0..n {
                assert_eq!(fft_to_centered(centered_to_fft(c, n), n), c);
            }
            assert_eq!(centered_to_fft(n / 2, n), 0);
        }
    }
}
