//! Measurement operators for block compressive sensing, single-coil CS-MRI and
//! coded-diffraction phase retrieval, plus noise models and initializers.

mod bcs;
mod blocks;
mod cdp;
mod mri;
mod noise;
mod serialize;

pub use bcs::{fit_bcs_init, make_gaussian_matrix, measurement_count, BcsModel, Ridge};
pub use blocks::{tile_blocks, untile_blocks, BlockGrid};
pub use cdp::CdpModel;
pub use mri::{make_radial_mask, MriModel};
pub use noise::{add_noise, add_noise_complex, NoiseKind, NoiseSpec, EIGHT_BIT_SCALE};
pub use serialize::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real image on the `[0, 1]` intensity scale.
pub type Image = Array2<f64>;
pub type ComplexImage = Array2<Complex64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Bcs,
    Mri,
    Cpr,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Bcs, Task::Mri, Task::Cpr];

    pub fn name(self) -> &'static str {
        match self {
            Task::Bcs => "bcs",
            Task::Mri => "mri",
            Task::Cpr => "cpr",
        }
    }

    /// Task code `kappa` before normalization.
    pub fn code(self) -> f64 {
        match self {
            Task::Bcs => 1.0,
            Task::Mri => 2.0,
            Task::Cpr => 3.0,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bcs" | "cs" => Ok(Task::Bcs),
            "mri" | "cs-mri" => Ok(Task::Mri),
            "cpr" | "cdp" | "pr" => Ok(Task::Cpr),
            other => Err(Error::InvalidParameter(format!("unknown task `{other}`"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementModel {
    Bcs(BcsModel),
    Mri(MriModel),
    Cdp(CdpModel),
}

/// Measurement vector: real for BCS and CDP intensities, complex for k-space.
#[derive(Debug, Clone, PartialEq)]
pub enum Measurement {
    Real(Array1<f64>),
    Complex(Array1<Complex64>),
}

impl Measurement {
    pub fn len(&self) -> usize {
        match self {
            Measurement::Real(v) => v.len(),
            Measurement::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_real(&self) -> Result<&Array1<f64>> {
        match self {
            Measurement::Real(v) => Ok(v),
            Measurement::Complex(_) => Err(Error::InvalidInput("expected a real measurement".into())),
        }
    }

    pub fn as_complex(&self) -> Result<&Array1<Complex64>> {
        match self {
            Measurement::Complex(v) => Ok(v),
            Measurement::Real(_) => Err(Error::InvalidInput("expected a complex measurement".into())),
        }
    }
}

impl MeasurementModel {
    pub fn task(&self) -> Task {
        match self {
            MeasurementModel::Bcs(_) => Task::Bcs,
            MeasurementModel::Mri(_) => Task::Mri,
            MeasurementModel::Cdp(_) => Task::Cpr,
        }
    }

    pub fn sampling_ratio(&self) -> f64 {
        match self {
            MeasurementModel::Bcs(m) => m.sampling_ratio(),
            MeasurementModel::Mri(m) => m.sampling_ratio(),
            MeasurementModel::Cdp(m) => m.sampling_ratio(),
        }
    }

    /// Spatial shape of the signal the operator acts on.
    pub fn signal_shape(&self) -> (usize, usize) {
        match self {
            MeasurementModel::Bcs(m) => (m.block_size(), m.block_size()),
            MeasurementModel::Mri(m) => m.shape(),
            MeasurementModel::Cdp(m) => m.shape(),
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, MeasurementModel::Cdp(_))
    }

    /// Noiseless measurement of a real image (a single block for BCS).
    pub fn measure(&self, x: &Image) -> Result<Measurement> {
        match self {
            MeasurementModel::Bcs(m) => {
                check_shape(x, self.signal_shape())?;
                let flat = Array1::from_iter(x.iter().copied());
                Ok(Measurement::Real(m.forward(&flat)?))
            }
            MeasurementModel::Mri(m) => Ok(Measurement::Complex(m.forward(x)?)),
            MeasurementModel::Cdp(m) => Ok(Measurement::Real(m.forward(x)?)),
        }
    }

    /// Measurement with noise at level `alpha` using the modality's noise model.
    pub fn measure_noisy(&self, x: &Image, alpha: f64, noise_scale: f64, seed: u64) -> Result<Measurement> {
        let clean = self.measure(x)?;
        match (self, clean) {
            (MeasurementModel::Cdp(_), Measurement::Real(y)) => Ok(Measurement::Real(add_noise(
                &y,
                &NoiseSpec::shot(alpha).with_scale(noise_scale),
                seed,
            )?)),
            (_, Measurement::Real(y)) => Ok(Measurement::Real(add_noise(
                &y,
                &NoiseSpec::gaussian(alpha).with_scale(noise_scale),
                seed,
            )?)),
            (_, Measurement::Complex(y)) => Ok(Measurement::Complex(add_noise_complex(
                &y,
                &NoiseSpec::gaussian(alpha).with_scale(noise_scale),
                seed,
            )?)),
        }
    }

    /// Per-modality initial estimate `x0`, complex for MRI.
    pub fn initialize(&self, y: &Measurement) -> Result<ComplexImage> {
        match self {
            MeasurementModel::Bcs(m) => {
                let x0 = m.init(y.as_real()?)?;
                let b = m.block_size();
                Ok(Array2::from_shape_fn((b, b), |(i, j)| {
                    Complex64::new(x0[i * b + j], 0.0)
                }))
            }
            MeasurementModel::Mri(m) => m.adjoint(y.as_complex()?),
            MeasurementModel::Cdp(m) => Ok(m.init().mapv(|v| Complex64::new(v, 0.0))),
        }
    }
}

pub(crate) fn check_shape<T>(x: &Array2<T>, shape: (usize, usize)) -> Result<()> {
    if x.dim() != shape {
        return Err(Error::InvalidDimension(format!(
            "signal is {:?}, model expects {:?}",
            x.dim(),
            shape
        )));
    }
    Ok(())
}
