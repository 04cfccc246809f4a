use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::fft::{fft2_inplace, ifft2_inplace};

/// Coded diffraction operator `A = J F M` for compressive phase retrieval.
///
/// `M` is a diagonal unit-modulus phase mask, `F` the unitary 2-D DFT and `J`
/// keeps `m` distinct rows of the identity (stored sorted).
#[derive(Debug, Clone, PartialEq)]
pub struct CdpModel {
    phase_mask: Array2<Complex64>,
    row_selector: Vec<usize>,
    sampling_ratio: f64,
    seed: u64,
}

impl CdpModel {
    pub fn new(h: usize, w: usize, eta: f64, seed: u64) -> Result<Self> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "sampling ratio must be in (0, 1], got {eta}"
            )));
        }
        if h == 0 || w == 0 {
            return Err(dim_err("phase mask must be at least 1x1"));
        }
        let n = h * w;
        let m = ((eta * n as f64).round() as usize).clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase_mask =
            Array2::from_shape_simple_fn((h, w), || Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI)));
        let mut row_selector = rand::seq::index::sample(&mut rng, n, m).into_vec();
        row_selector.sort_unstable();
        Ok(Self {
            phase_mask,
            row_selector,
            sampling_ratio: eta,
            seed,
        })
    }

    pub fn from_parts(phase_mask: Array2<Complex64>, row_selector: Vec<usize>) -> Result<Self> {
        let n = phase_mask.len();
        if n == 0 {
            return Err(dim_err("phase mask must be at least 1x1"));
        }
        if phase_mask.iter().any(|z| (z.norm() - 1.0).abs() > 1e-12) {
            return Err(Error::InvalidParameter(
                "phase mask entries must have unit modulus".into(),
            ));
        }
        let mut sel = row_selector;
        sel.sort_unstable();
        if sel.is_empty() || sel.windows(2).any(|p| p[0] == p[1]) || sel.last().is_some_and(|&i| i >= n) {
            return Err(Error::InvalidParameter(
                "row selector must be non-empty, distinct and in range".into(),
            ));
        }
        Ok(Self {
            sampling_ratio: sel.len() as f64 / n as f64,
            phase_mask,
            row_selector: sel,
            seed: 0,
        })
    }

    /// Identity phase mask with every row kept: `A` is the unitary DFT.
    pub fn identity(h: usize, w: usize) -> Result<Self> {
        Self::from_parts(
            Array2::from_elem((h, w), Complex64::new(1.0, 0.0)),
            (0..h * w).collect(),
        )
    }

    pub(crate) fn with_meta(mut self, eta: f64, seed: u64) -> Self {
        self.sampling_ratio = eta;
        self.seed = seed;
        self
    }

    pub fn phase_mask(&self) -> &Array2<Complex64> {
        &self.phase_mask
    }
    pub fn row_selector(&self) -> &[usize] {
        &self.row_selector
    }
    pub fn shape(&self) -> (usize, usize) {
        self.phase_mask.dim()
    }
    pub fn sampling_ratio(&self) -> f64 {
        self.sampling_ratio
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn num_measurements(&self) -> usize {
        self.row_selector.len()
    }

    fn check_shape<T>(&self, x: &Array2<T>) -> Result<()> {
        if x.dim() != self.shape() {
            return Err(dim_err(format!(
                "image is {:?}, phase mask is {:?}",
                x.dim(),
                self.shape()
            )));
        }
        Ok(())
    }

    /// `A x` for a real image.
    pub fn apply(&self, x: &Array2<f64>) -> Result<Array1<Complex64>> {
        self.check_shape(x)?;
        Ok(self.apply_slice(x.as_slice().expect("standard layout")))
    }

    /// `A x` for a complex image.
    pub fn apply_complex(&self, x: &Array2<Complex64>) -> Result<Array1<Complex64>> {
        self.check_shape(x)?;
        let (h, w) = self.shape();
        let mut buf: Vec<Complex64> = x.iter().zip(self.phase_mask.iter()).map(|(a, m)| a * m).collect();
        fft2_inplace(&mut buf, h, w);
        Ok(self.row_selector.iter().map(|&i| buf[i]).collect())
    }

    pub(crate) fn apply_slice(&self, x: &[f64]) -> Array1<Complex64> {
        let (h, w) = self.shape();
        let mut buf: Vec<Complex64> = x.iter().zip(self.phase_mask.iter()).map(|(&a, m)| m * a).collect();
        fft2_inplace(&mut buf, h, w);
        self.row_selector.iter().map(|&i| buf[i]).collect()
    }

    /// `A^H v`.
    pub fn apply_adjoint(&self, v: &Array1<Complex64>) -> Result<Array2<Complex64>> {
        if v.len() != self.row_selector.len() {
            return Err(dim_err(format!(
                "vector has length {}, operator has {} rows",
                v.len(),
                self.row_selector.len()
            )));
        }
        let (h, w) = self.shape();
        Ok(Array2::from_shape_vec((h, w), self.adjoint_slice(v.as_slice().expect("contiguous"))).expect("shape"))
    }

    pub(crate) fn adjoint_slice(&self, v: &[Complex64]) -> Vec<Complex64> {
        let (h, w) = self.shape();
        let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
        for (&i, &z) in self.row_selector.iter().zip(v) {
            buf[i] = z;
        }
        ifft2_inplace(&mut buf, h, w);
        for (b, m) in buf.iter_mut().zip(self.phase_mask.iter()) {
            *b *= m.conj();
        }
        buf
    }

    /// Noiseless intensities `|A x|^2`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self.apply(x)?.mapv(|z| z.norm_sqr()))
    }

    /// Phase-retrieval initializer: the all-ones image.
    pub fn init(&self) -> Array2<f64> {
        Array2::ones(self.shape())
    }
}
