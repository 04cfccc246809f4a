//! Dynamic proximal unrolling for compressive imaging.
//!
//! Measurement operators for block compressive sensing, radial CS-MRI and
//! coded-diffraction phase retrieval live in [`forward_models`]; the learned
//! reconstruction is assembled from [`dyn_prox`] and [`unroll`] on top of the
//! small reverse-mode engine in [`autodiff`], and trained by [`training`].

pub mod autodiff;
pub mod dyn_prox;
pub mod error;
pub mod eval;
pub mod fft;
pub mod fidelity;
pub mod forward_models;
pub mod image_io;
pub mod training;
pub mod unroll;

pub use error::{Error, Result};
