use std::collections::BTreeSet;
use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::fft::{centered_to_fft, fft2_inplace, fft_to_centered, ifft2_inplace};

/// Pixels (as DC-centered offsets) covered by a full-diameter line at `angle`.
fn spoke_offsets(angle: f64, h: usize, w: usize) -> Vec<(i64, i64)> {
    let reach = h.max(w) as i64;
    let (s, c) = angle.sin_cos();
    let hh = (h / 2) as i64;
    let hw = (w / 2) as i64;
    let mut out = Vec::with_capacity(4 * reach as usize + 1);
    // symmetric sample grid so that every offset d comes with -d
    for i in -2 * reach..=2 * reach {
        let t = i as f64 * 0.5;
        let dy = (t * s).round() as i64;
        let dx = (t * c).round() as i64;
        // +N/2 wraps onto the self-mirrored -N/2 bin for even sizes
        let in_y = dy.abs() <= hh;
        let in_x = dx.abs() <= hw;
        if in_y && in_x {
            out.push((dy, dx));
        }
    }
    out
}

fn wrap(offset: i64, n: usize) -> usize {
    // centered index of an offset from the DC bin
    let c = offset + (n / 2) as i64;
    c.rem_euclid(n as i64) as usize
}

fn spoke_mask(count: usize, phase: f64, h: usize, w: usize) -> Array2<bool> {
    let mut mask = Array2::from_elem((h, w), false);
    mask[[h / 2, w / 2]] = true;
    for k in 0..count {
        let angle = phase + k as f64 * PI / count as f64;
        for (dy, dx) in spoke_offsets(angle, h, w) {
            mask[[wrap(dy, h), wrap(dx, w)]] = true;
        }
    }
    mask
}

/// Centered mirror of `(r, c)` under `k -> -k` on the DFT grid.
fn mirror(r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
    let ur = centered_to_fft(r, h);
    let uc = centered_to_fft(c, w);
    (fft_to_centered((h - ur) % h, h), fft_to_centered((w - uc) % w, w))
}

/// Pseudo-radial k-space mask in DC-centered layout (DC at `(h/2, w/2)`).
///
/// The spoke count is found by bisection so the mask reaches
/// `round(eta*h*w)` samples; the outermost samples are then trimmed in
/// conjugate-symmetric pairs to land on the target. The seed rotates the spokes.
pub fn make_radial_mask(h: usize, w: usize, eta: f64, seed: u64) -> Result<Array2<bool>> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "sampling ratio must be in (0, 1], got {eta}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(dim_err("mask must be at least 1x1"));
    }
    let total = h * w;
    let target = ((eta * total as f64).round() as usize).clamp(1, total);
    if target == total {
        return Ok(Array2::from_elem((h, w), true));
    }

    let max_spokes = 4 * h.max(w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random();
    let count_for = |n: usize| {
        let phase = u * PI / n as f64;
        spoke_mask(n, phase, h, w)
    };
    let size = |m: &Array2<bool>| m.iter().filter(|&&b| b).count();

    let (mut lo, mut hi) = (1usize, max_spokes);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if size(&count_for(mid)) >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let mut spokes = lo;
    let mut mask = count_for(spokes);
    while size(&mask) < target && spokes < max_spokes {
        spokes += 1;
        mask = count_for(spokes);
    }
    if size(&mask) < target {
        // spokes saturate before the target; fill the remaining low frequencies
        let mut rest: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &b)| !b).map(|(i, _)| i).collect();
        rest.sort_by(|a, b| radius(*a, h, w).total_cmp(&radius(*b, h, w)).then(a.cmp(b)));
        let mut have = size(&mask);
        for (r, c) in rest {
            if have >= target {
                break;
            }
            let (mr, mc) = mirror(r, c, h, w);
            if !mask[[r, c]] {
                mask[[r, c]] = true;
                have += 1;
            }
            if !mask[[mr, mc]] {
                mask[[mr, mc]] = true;
                have += 1;
            }
        }
        return Ok(mask);
    }

    // trim the outermost samples, keeping conjugate symmetry
    let mut selected: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    selected.sort_by(|a, b| radius(*b, h, w).total_cmp(&radius(*a, h, w)).then(b.cmp(a)));
    let mut have = selected.len();
    let dc = (h / 2, w / 2);
    for (r, c) in selected {
        if have <= target {
            break;
        }
        if (r, c) == dc || !mask[[r, c]] {
            continue;
        }
        let m = mirror(r, c, h, w);
        let removes = if m == (r, c) { 1 } else { 2 };
        // a pair would overshoot by one; keep within one sample of the target either way
        if have - removes + 1 < target {
            continue;
        }
        mask[[r, c]] = false;
        mask[[m.0, m.1]] = false;
        have -= removes;
    }
    Ok(mask)
}

fn radius((r, c): (usize, usize), h: usize, w: usize) -> f64 {
    let dy = r as f64 - (h / 2) as f64;
    let dx = c as f64 - (w / 2) as f64;
    (dy * dy + dx * dx).sqrt()
}

/// Single-coil Cartesian MRI operator `Phi = P F` with a DC-centered mask.
///
/// Measurements are ordered by ascending row-major index of the unshifted DFT grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MriModel {
    mask: Array2<bool>,
    sampling_ratio: f64,
    seed: u64,
    indices: Vec<usize>,
}

impl MriModel {
    pub fn new(h: usize, w: usize, eta: f64, seed: u64) -> Result<Self> {
        let mask = make_radial_mask(h, w, eta, seed)?;
        let mut model = Self::from_mask(mask)?;
        model.sampling_ratio = eta;
        model.seed = seed;
        Ok(model)
    }

    pub fn from_mask(mask: Array2<bool>) -> Result<Self> {
        let (h, w) = mask.dim();
        if h == 0 || w == 0 {
            return Err(dim_err("mask must be at least 1x1"));
        }
        let mut idx = BTreeSet::new();
        for ((r, c), &on) in mask.indexed_iter() {
            if on {
                idx.insert(centered_to_fft(r, h) * w + centered_to_fft(c, w));
            }
        }
        if idx.is_empty() {
            return Err(Error::InvalidParameter("mask selects no samples".into()));
        }
        let indices: Vec<usize> = idx.into_iter().collect();
        Ok(Self {
            sampling_ratio: indices.len() as f64 / (h * w) as f64,
            mask,
            seed: 0,
            indices,
        })
    }

    pub(crate) fn with_meta(mut self, eta: f64, seed: u64) -> Self {
        self.sampling_ratio = eta;
        self.seed = seed;
        self
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }
    pub fn shape(&self) -> (usize, usize) {
        self.mask.dim()
    }
    pub fn sampling_ratio(&self) -> f64 {
        self.sampling_ratio
    }
    pub fn achieved_ratio(&self) -> f64 {
        let (h, w) = self.shape();
        self.indices.len() as f64 / (h * w) as f64
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    /// Flat unshifted DFT indices of the sampled bins.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
    pub fn num_samples(&self) -> usize {
        self.indices.len()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array1<Complex64>> {
        self.forward_complex(&x.mapv(|v| Complex64::new(v, 0.0)))
    }

    pub fn forward_complex(&self, x: &Array2<Complex64>) -> Result<Array1<Complex64>> {
        let (h, w) = self.shape();
        if x.dim() != (h, w) {
            return Err(dim_err(format!("image is {:?}, mask is {h}x{w}", x.dim())));
        }
        let mut buf: Vec<Complex64> = x.iter().copied().collect();
        fft2_inplace(&mut buf, h, w);
        Ok(self.indices.iter().map(|&i| buf[i]).collect())
    }

    /// Zero-filled unitary inverse transform; also the MRI initializer.
    pub fn adjoint(&self, y: &Array1<Complex64>) -> Result<Array2<Complex64>> {
        let (h, w) = self.shape();
        if y.len() != self.indices.len() {
            return Err(dim_err(format!(
                "k-space vector has length {}, mask selects {}",
                y.len(),
                self.indices.len()
            )));
        }
        let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
        for (&i, &v) in self.indices.iter().zip(y.iter()) {
            buf[i] = v;
        }
        ifft2_inplace(&mut buf, h, w);
        Ok(Array2::from_shape_vec((h, w), buf).expect("shape"))
    }
}
