#![allow(dead_code)]

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dpunet::dyn_prox::{HyperConfig, ThetaLayout, Variant};
use dpunet::unroll::{Framework, Network, NetworkConfig, UnrollConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

pub fn real_vec(r: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    (0..n).map(|_| normal(r)).collect()
}

pub fn complex_vec(r: &mut ChaCha8Rng, n: usize) -> Array1<Complex64> {
    (0..n).map(|_| Complex64::new(normal(r), normal(r))).collect()
}

pub fn real_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((h, w), || normal(r))
}

pub fn complex_image(r: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<Complex64> {
    Array2::from_shape_simple_fn((h, w), || Complex64::new(normal(r), normal(r)))
}

/// `<a, b> = sum conj(a) b`.
pub fn cdot<'a>(a: impl IntoIterator<Item = &'a Complex64>, b: impl IntoIterator<Item = &'a Complex64>) -> Complex64 {
    a.into_iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn cnorm<'a>(a: impl IntoIterator<Item = &'a Complex64>) -> f64 {
    a.into_iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A small network with the given framework, channels and iterations.
pub fn network(framework: Framework, variant: Variant, channels: usize, iterations: usize, seed: u64) -> Network {
    let theta = ThetaLayout::eta_alpha(0.5, 50.0);
    let hyper = HyperConfig {
        channels,
        iterations,
        ..variant.config(theta.dim())
    };
    let config = NetworkConfig {
        theta,
        hyper,
        unroll: UnrollConfig {
            framework,
            ..UnrollConfig::default()
        },
        prox: Default::default(),
    };
    Network::new(config, seed).unwrap()
}

/// Overwrites every entry of the named arrays with `v`.
pub fn fill(net: &mut Network, pred: impl Fn(&str) -> bool, v: f64) {
    for (name, t) in net.param_iter_mut() {
        if pred(name) {
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
    }
}
