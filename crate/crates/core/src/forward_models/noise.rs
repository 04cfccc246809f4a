use ndarray::Array1;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default scale applied to the noise level: `alpha` is quoted on the 8-bit
/// intensity range while images live in `[0, 1]`.
pub const EIGHT_BIT_SCALE: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// `y + alpha * scale * g`
    GaussianAdditive,
    /// `max(0, y + alpha * scale * sqrt(y) * g)`, variance proportional to the signal
    Shot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub level: f64,
    pub scale: f64,
}

impl NoiseSpec {
    pub fn gaussian(level: f64) -> Self {
        Self {
            kind: NoiseKind::GaussianAdditive,
            level,
            scale: EIGHT_BIT_SCALE,
        }
    }

    pub fn shot(level: f64) -> Self {
        Self {
            kind: NoiseKind::Shot,
            level,
            scale: EIGHT_BIT_SCALE,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    fn sigma(&self) -> f64 {
        self.level * self.scale
    }
}

pub fn add_noise(y: &Array1<f64>, spec: &NoiseSpec, seed: u64) -> Result<Array1<f64>> {
    if !(spec.level >= 0.0) || !spec.level.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise level must be finite and >= 0, got {}",
            spec.level
        )));
    }
    if spec.kind == NoiseKind::Shot && y.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidInput("shot noise needs non-negative intensities".into()));
    }
    if spec.level == 0.0 {
        return Ok(y.clone());
    }
    let sigma = spec.sigma();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match spec.kind {
        NoiseKind::GaussianAdditive => y.mapv(|v| {
            let g: f64 = StandardNormal.sample(&mut rng);
            v + sigma * g
        }),
        NoiseKind::Shot => y.mapv(|v| {
            let g: f64 = StandardNormal.sample(&mut rng);
            (v + sigma * v.sqrt() * g).max(0.0)
        }),
    };
    Ok(out)
}

/// Complex Gaussian noise for k-space: independent draws on both parts.
pub fn add_noise_complex(y: &Array1<Complex64>, spec: &NoiseSpec, seed: u64) -> Result<Array1<Complex64>> {
    if spec.kind != NoiseKind::GaussianAdditive {
        return Err(Error::InvalidParameter(
            "complex measurements only support additive Gaussian noise".into(),
        ));
    }
    let flat: Array1<f64> = y.iter().flat_map(|z| [z.re, z.im]).collect();
    let noisy = add_noise(&flat, spec, seed)?;
    Ok(noisy
        .as_slice()
        .expect("contiguous")
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect())
}
