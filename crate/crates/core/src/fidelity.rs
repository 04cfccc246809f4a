//! Data-fidelity terms `D(x)` and their gradients.
//!
//! Linear models use `D(x) = 1/2 ||y - Phi x||^2` with gradient
//! `Phi^H (Phi x - y)`. Coded diffraction uses the amplitude loss
//! `D(x) = 1/2 || sqrt(y) - |A x| ||^2`, whose gradient with respect to a real
//! image is `Re A^H ((|Ax| - sqrt(y)) . Ax/|Ax|)`. No factor of two appears:
//! this is exactly the derivative of the real loss along real directions,
//! which the finite-difference tests pin down.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::forward_models::{check_shape, CdpModel, ComplexImage, Image, Measurement, MeasurementModel};

/// Floor on `|Ax|` when forming the phase `Ax / |Ax|`.
pub const EPS_MAG: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FidelityKind {
    LinearLeastSquares,
    Amplitude,
}

impl FidelityKind {
    fn name(self) -> &'static str {
        match self {
            FidelityKind::LinearLeastSquares => "linear-least-squares",
            FidelityKind::Amplitude => "amplitude",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FidelityTerm<'a> {
    kind: FidelityKind,
    model: &'a MeasurementModel,
    y: &'a Measurement,
}

impl<'a> FidelityTerm<'a> {
    pub fn linear(model: &'a MeasurementModel, y: &'a Measurement) -> Result<Self> {
        let expected = match model {
            MeasurementModel::Bcs(m) => {
                y.as_real()?;
                m.m()
            }
            MeasurementModel::Mri(m) => {
                y.as_complex()?;
                m.num_samples()
            }
            MeasurementModel::Cdp(_) => {
                return Err(Error::InvalidParameter(
                    "coded diffraction intensities need the amplitude fidelity".into(),
                ))
            }
        };
        check_len(y.len(), expected)?;
        Ok(Self {
            kind: FidelityKind::LinearLeastSquares,
            model,
            y,
        })
    }

    pub fn amplitude(model: &'a MeasurementModel, y: &'a Measurement) -> Result<Self> {
        let MeasurementModel::Cdp(m) = model else {
            return Err(Error::InvalidParameter(
                "the amplitude fidelity needs a coded diffraction model".into(),
            ));
        };
        let yr = y.as_real()?;
        check_len(yr.len(), m.num_measurements())?;
        if yr.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "amplitude fidelity needs finite non-negative intensities".into(),
            ));
        }
        Ok(Self {
            kind: FidelityKind::Amplitude,
            model,
            y,
        })
    }

    /// Linear fidelity for linear models, amplitude fidelity for coded diffraction.
    pub fn for_model(model: &'a MeasurementModel, y: &'a Measurement) -> Result<Self> {
        if model.is_linear() {
            Self::linear(model, y)
        } else {
            Self::amplitude(model, y)
        }
    }

    pub fn kind(&self) -> FidelityKind {
        self.kind
    }
    pub fn model(&self) -> &'a MeasurementModel {
        self.model
    }
    pub fn measurement(&self) -> &'a Measurement {
        self.y
    }
}

fn check_len(got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::InvalidDimension(format!(
            "measurement has length {got}, model produces {expected}"
        )));
    }
    Ok(())
}

fn to_complex(x: &Image) -> ComplexImage {
    x.mapv(|v| Complex64::new(v, 0.0))
}

/// `Phi x - y` for linear models, returned as complex for uniformity.
fn linear_residual(x: &ComplexImage, term: &FidelityTerm) -> Result<Array1<Complex64>> {
    check_shape(x, term.model.signal_shape())?;
    match term.model {
        MeasurementModel::Bcs(m) => {
            let y = term.y.as_real()?;
            let flat = x.as_slice().expect("standard layout");
            let re: Array1<f64> = flat.iter().map(|z| z.re).collect();
            let im: Array1<f64> = flat.iter().map(|z| z.im).collect();
            let pr = m.phi().dot(&re) - y;
            let pi = m.phi().dot(&im);
            Ok(pr.iter().zip(pi.iter()).map(|(&a, &b)| Complex64::new(a, b)).collect())
        }
        MeasurementModel::Mri(m) => Ok(m.forward_complex(x)? - term.y.as_complex()?),
        MeasurementModel::Cdp(_) => unreachable!("linear term on coded diffraction"),
    }
}

fn linear_adjoint(r: &Array1<Complex64>, term: &FidelityTerm) -> Result<ComplexImage> {
    match term.model {
        MeasurementModel::Bcs(m) => {
            let re: Array1<f64> = r.iter().map(|z| z.re).collect();
            let im: Array1<f64> = r.iter().map(|z| z.im).collect();
            let gr = m.adjoint(&re)?;
            let gi = m.adjoint(&im)?;
            let b = m.block_size();
            Ok(Array2::from_shape_fn((b, b), |(i, j)| {
                Complex64::new(gr[i * b + j], gi[i * b + j])
            }))
        }
        MeasurementModel::Mri(m) => m.adjoint(r),
        MeasurementModel::Cdp(_) => unreachable!("linear term on coded diffraction"),
    }
}

/// Exact value of the fidelity for a real estimate.
pub fn fidelity_value(x: &Image, term: &FidelityTerm) -> Result<f64> {
    match term.kind {
        FidelityKind::LinearLeastSquares => fidelity_value_complex(&to_complex(x), term),
        FidelityKind::Amplitude => {
            let MeasurementModel::Cdp(m) = term.model else {
                unreachable!()
            };
            let ax = m.apply(x)?;
            let y = term.y.as_real()?;
            Ok(0.5
                * ax.iter()
                    .zip(y.iter())
                    .map(|(z, &yi)| (yi.sqrt() - z.norm()).powi(2))
                    .sum::<f64>())
        }
    }
}

/// Fidelity for a complex estimate (the MRI iterate).
pub fn fidelity_value_complex(x: &ComplexImage, term: &FidelityTerm) -> Result<f64> {
    match term.kind {
        FidelityKind::LinearLeastSquares => {
            let r = linear_residual(x, term)?;
            Ok(0.5 * r.iter().map(|z| z.norm_sqr()).sum::<f64>())
        }
        FidelityKind::Amplitude => {
            let MeasurementModel::Cdp(m) = term.model else {
                unreachable!()
            };
            let ax = m.apply_complex(x)?;
            let y = term.y.as_real()?;
            Ok(0.5
                * ax.iter()
                    .zip(y.iter())
                    .map(|(z, &yi)| (yi.sqrt() - z.norm()).powi(2))
                    .sum::<f64>())
        }
    }
}

fn require_linear(term: &FidelityTerm) -> Result<()> {
    if term.kind != FidelityKind::LinearLeastSquares {
        return Err(Error::WrongFidelity {
            expected: FidelityKind::LinearLeastSquares.name(),
            got: term.kind.name(),
        });
    }
    Ok(())
}

/// `Phi^H (Phi x - y)` for a complex estimate.
pub fn grad_linear_complex(x: &ComplexImage, term: &FidelityTerm) -> Result<ComplexImage> {
    require_linear(term)?;
    let r = linear_residual(x, term)?;
    linear_adjoint(&r, term)
}

/// Real part of `Phi^H (Phi x - y)`: the gradient over real images.
pub fn grad_linear(x: &Image, term: &FidelityTerm) -> Result<Image> {
    Ok(grad_linear_complex(&to_complex(x), term)?.mapv(|z| z.re))
}

/// Wirtinger-flow gradient of the amplitude loss, projected onto real images.
pub fn grad_amplitude(x: &Image, term: &FidelityTerm) -> Result<Image> {
    if term.kind != FidelityKind::Amplitude {
        return Err(Error::WrongFidelity {
            expected: FidelityKind::Amplitude.name(),
            got: term.kind.name(),
        });
    }
    let MeasurementModel::Cdp(m) = term.model else {
        unreachable!()
    };
    check_shape(x, m.shape())?;
    let sqrt_y: Vec<f64> = term.y.as_real()?.iter().map(|v| v.sqrt()).collect();
    let g = amplitude_gradient(m, &sqrt_y, x.as_slice().expect("standard layout"));
    Ok(Array2::from_shape_vec(m.shape(), g).expect("shape"))
}

/// `Re A^H ((|v| - s) . v/|v|)` with `v = A x` and `|v|` floored at [`EPS_MAG`].
pub(crate) fn amplitude_gradient(model: &CdpModel, sqrt_y: &[f64], x: &[f64]) -> Vec<f64> {
    let v = model.apply_slice(x);
    let w: Vec<Complex64> = v
        .iter()
        .zip(sqrt_y)
        .map(|(&vi, &s)| {
            let mag = vi.norm().max(EPS_MAG);
            vi * ((vi.norm() - s) / mag)
        })
        .collect();
    model.adjoint_slice(&w).into_iter().map(|z| z.re).collect()
}

/// Vector-Jacobian product of [`amplitude_gradient`] with respect to `x`.
///
/// The map is the gradient of a real function, so its Jacobian is the
/// (symmetric) Hessian `Re A^H L A`, where `L` acts per entry on `dv` as
/// `dv - (s/|v|) * i u Im(conj(u) dv)` with `u = v/|v|`.
pub(crate) fn amplitude_gradient_vjp(model: &CdpModel, sqrt_y: &[f64], x: &[f64], upstream: &[f64]) -> Vec<f64> {
    let v = model.apply_slice(x);
    let dv = model.apply_slice(upstream);
    let lw: Vec<Complex64> = v
        .iter()
        .zip(dv.iter())
        .zip(sqrt_y)
        .map(|((&vi, &di), &s)| {
            let mag = vi.norm();
            if mag < EPS_MAG {
                // w = v (1 - s/eps) is linear below the floor
                di * (1.0 - s / EPS_MAG)
            } else {
                let u = vi / mag;
                let along = (u.conj() * di).im;
                di - Complex64::i() * u * (s / mag * along)
            }
        })
        .collect();
    model.adjoint_slice(&lw).into_iter().map(|z| z.re).collect()
}
