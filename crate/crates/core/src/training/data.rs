use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fft::ifft2;
use crate::forward_models::Image;

/// Zero-mean, unit-variance random field with amplitude spectrum `1/f^beta`.
fn fractal_field(h: usize, w: usize, beta: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut spec = vec![Complex64::new(0.0, 0.0); h * w];
    for i in 0..h {
        let fi = i.min(h - i) as f64 / h as f64;
        for j in 0..w {
            let fj = j.min(w - j) as f64 / w as f64;
            let f = (fi * fi + fj * fj).sqrt();
            if f > 0.0 {
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                spec[i * w + j] = Complex64::from_polar(f.powf(-beta), phase);
            }
        }
    }
    let field: Vec<f64> = ifft2(&spec, h, w).iter().map(|z| z.re).collect();
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let sd = (field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    field
        .iter()
        .map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 })
        .collect()
}

/// A test image in `[0, 1]` with roughly natural statistics: a `1/f`
/// background, overlapping sharp-edged rectangles and ellipses, and fine
/// broadband texture.
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean = rng.random_range(0.3..0.7);
    let contrast = rng.random_range(0.02..0.06);
    let beta = rng.random_range(1.5..2.0);
    let bg = fractal_field(h, w, beta, &mut rng);
    let mut img = Image::from_shape_fn((h, w), |(i, j)| mean + contrast * bg[i * w + j]);
    let shapes = rng.random_range(6..17);
    for _ in 0..shapes {
        let (ci, cj) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let (ri, rj) = (
            rng.random_range(0.05..0.3) * h as f64,
            rng.random_range(0.05..0.3) * w as f64,
        );
        let value = rng.random_range(0.0..1.0);
        let ellipse = rng.random_bool(0.5);
        let soft = rng.random_range(0.1..0.5);
        for ((i, j), px) in img.indexed_iter_mut() {
            let (di, dj) = ((i as f64 - ci) / ri, (j as f64 - cj) / rj);
            let d = if ellipse {
                (di * di + dj * dj).sqrt()
            } else {
                di.abs().max(dj.abs())
            };
            // signed distance to the boundary in pixels, roughly
            let edge = (1.0 - d) * ri.min(rj) / soft;
            let a = 1.0 / (1.0 + (-edge).exp());
            *px = (1.0 - a) * *px + a * value;
        }
    }
    let amp = rng.random_range(0.0..0.003);
    let fine = fractal_field(h, w, 1.0, &mut rng);
    img.indexed_iter_mut().for_each(|((i, j), px)| {
        *px = (*px + amp * fine[i * w + j]).clamp(0.0, 1.0);
    });
    img
}

/// Training patches and the images they were cropped from.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub patches: Vec<Image>,
    sources: Vec<Image>,
}

fn crop(img: &Image, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = img.dim();
    let i0 = rng.random_range(0..=h - size);
    let j0 = rng.random_range(0..=w - size);
    img.slice(ndarray::s![i0..i0 + size, j0..j0 + size]).to_owned()
}

impl Dataset {
    /// `count` random `size x size` crops from `images`.
    pub fn from_images(images: Vec<Image>, size: usize, count: usize, seed: u64) -> Result<Self> {
        let usable: Vec<Image> = images
            .into_iter()
            .filter(|im| im.nrows() >= size && im.ncols() >= size)
            .collect();
        if usable.is_empty() {
            return Err(Error::InvalidInput(format!("no image is at least {size}x{size}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = (0..count)
            .map(|k| crop(&usable[k % usable.len()], size, &mut rng))
            .collect();
        Ok(Self {
            patches,
            sources: usable,
        })
    }

    /// Patches cropped from synthetic images of side `4 * size`.
    pub fn synthetic(count: usize, size: usize, seed: u64) -> Self {
        let n_src = count.div_ceil(4).max(1);
        let images = (0..n_src)
            .map(|k| synthetic_image(4 * size, 4 * size, seed.wrapping_mul(1_000_003).wrapping_add(k as u64)))
            .collect();
        Self::from_images(images, size, count, seed ^ 0x5eed).expect("synthetic sources are large enough")
    }

    /// Uses `patches` as they are.
    pub fn from_patches(patches: Vec<Image>) -> Self {
        Self {
            sources: patches.clone(),
            patches,
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_shape(&self) -> Option<(usize, usize)> {
        self.patches.first().map(|p| p.dim())
    }

    /// `count` crops of side `size` from the source images, for fitting
    /// linear initializers.
    pub fn fit_blocks(&self, size: usize, count: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let usable: Vec<&Image> = self
            .sources
            .iter()
            .filter(|im| im.nrows() >= size && im.ncols() >= size)
            .collect();
        if usable.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|k| crop(usable[k % usable.len()], size, &mut rng))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic_image(40, 30, 5);
        assert_eq!(a, synthetic_image(40, 30, 5));
        assert_ne!(a, synthetic_image(40, 30, 6));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        let spread = a.iter().cloned().fold(f64::MIN, f64::max) - a.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.1);
    }

    #[test]
    fn dataset_shapes() {
        let d = Dataset::synthetic(10, 33, 1);
        assert_eq!(d.len(), 10);
        assert_eq!(d.patch_shape(), Some((33, 33)));
        assert_eq!(d.fit_blocks(33, 7, 0).len(), 7);
        assert!(Dataset::from_images(vec![Image::zeros((4, 4))], 8, 1, 0).is_err());
    }
}
