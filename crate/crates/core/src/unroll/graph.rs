//! Tape construction for the unrolled iterations.

use std::sync::Arc;

use crate::autodiff::{Tape, Tensor, Var};
use crate::dyn_prox::prox_on_tape;
use crate::error::{Error, Result};
use crate::forward_models::{ComplexImage, Measurement, MeasurementModel};

use super::{Framework, Network};

enum Operator {
    Bcs {
        phi: Tensor,
        n: usize,
    },
    Mri {
        indices: Arc<[usize]>,
    },
    Cdp {
        model: Arc<crate::forward_models::CdpModel>,
        sqrt_y: Arc<[f64]>,
    },
}

/// Per-measurement constants shared by every iteration.
pub(crate) struct Problem {
    op: Operator,
    y: Option<Tensor>,
    theta: Tensor,
    pub(crate) shape: (usize, usize),
    pub(crate) complex: bool,
}

impl Problem {
    pub(crate) fn new(model: &MeasurementModel, y: &Measurement, theta: Vec<f64>) -> Result<Self> {
        let shape = model.signal_shape();
        let (op, yt, complex) = match model {
            MeasurementModel::Bcs(m) => {
                let phi = m.phi();
                let (rows, cols) = phi.dim();
                let yv = y.as_real()?;
                if yv.len() != rows {
                    return Err(Error::InvalidDimension(format!(
                        "measurement has {} entries, operator has {rows} rows",
                        yv.len()
                    )));
                }
                (
                    Operator::Bcs {
                        phi: Tensor::new(vec![rows, cols], phi.iter().copied().collect())?,
                        n: cols,
                    },
                    Some(Tensor::vector(yv.to_vec())),
                    false,
                )
            }
            MeasurementModel::Mri(m) => {
                let yv = y.as_complex()?;
                if yv.len() != m.num_samples() {
                    return Err(Error::InvalidDimension(format!(
                        "measurement has {} entries, mask selects {}",
                        yv.len(),
                        m.num_samples()
                    )));
                }
                (
                    Operator::Mri {
                        indices: m.indices().to_vec().into(),
                    },
                    Some(Tensor::new(
                        vec![yv.len(), 2],
                        yv.iter().flat_map(|z| [z.re, z.im]).collect(),
                    )?),
                    true,
                )
            }
            MeasurementModel::Cdp(m) => {
                let yv = y.as_real()?;
                if yv.len() != m.num_measurements() {
                    return Err(Error::InvalidDimension(format!(
                        "measurement has {} entries, operator has {} rows",
                        yv.len(),
                        m.num_measurements()
                    )));
                }
                if yv.iter().any(|&v| v < 0.0) {
                    return Err(Error::InvalidInput("intensities must be nonnegative".into()));
                }
                (
                    Operator::Cdp {
                        model: Arc::new(m.clone()),
                        sqrt_y: yv.iter().map(|v| v.sqrt()).collect::<Vec<_>>().into(),
                    },
                    None,
                    false,
                )
            }
        };
        Ok(Self {
            op,
            y: yt,
            theta: Tensor::vector(theta),
            shape,
            complex,
        })
    }

    pub(crate) fn is_linear(&self) -> bool {
        !matches!(self.op, Operator::Cdp { .. })
    }

    /// Converts a per-modality initial estimate into the iteration state.
    pub(crate) fn state_tensor(&self, x0: &ComplexImage) -> Result<Tensor> {
        let (h, w) = self.shape;
        if x0.dim() != (h, w) {
            return Err(Error::InvalidDimension(format!(
                "initial estimate is {:?}, expected {:?}",
                x0.dim(),
                self.shape
            )));
        }
        if self.complex {
            Tensor::new(vec![h, w, 2], x0.iter().flat_map(|z| [z.re, z.im]).collect())
        } else {
            Tensor::new(vec![h, w], x0.iter().map(|z| z.re).collect())
        }
    }

    /// Target tensor in state layout for a real ground truth.
    pub(crate) fn target_tensor(&self, truth: &crate::forward_models::Image) -> Result<Tensor> {
        let (h, w) = self.shape;
        if truth.dim() != (h, w) {
            return Err(Error::InvalidDimension(format!(
                "ground truth is {:?}, expected {:?}",
                truth.dim(),
                self.shape
            )));
        }
        if self.complex {
            Tensor::new(vec![h, w, 2], truth.iter().flat_map(|&v| [v, 0.0]).collect())
        } else {
            Tensor::new(vec![h, w], truth.iter().copied().collect())
        }
    }
}

/// Problem constants registered on one tape.
pub(crate) struct Consts {
    phi: Option<Var>,
    y: Option<Var>,
    theta: Var,
}

impl Consts {
    pub(crate) fn register(tape: &mut Tape, p: &Problem) -> Self {
        Self {
            phi: match &p.op {
                Operator::Bcs { phi, .. } => Some(tape.constant(phi.clone())),
                _ => None,
            },
            y: p.y.as_ref().map(|y| tape.constant(y.clone())),
            theta: tape.constant(p.theta.clone()),
        }
    }
}

/// Loop variables of the unrolled iteration.
#[derive(Debug, Clone, Copy)]
pub(crate) struct State {
    pub x: Var,
    pub z: Var,
    pub u: Option<Var>,
}

fn data_grad(tape: &mut Tape, p: &Problem, c: &Consts, x: Var) -> Result<Var> {
    let (h, w) = p.shape;
    match &p.op {
        Operator::Bcs { n, .. } => {
            let phi = c.phi.expect("registered");
            let flat = tape.reshape(x, &[*n])?;
            let ax = tape.matvec(phi, flat, false)?;
            let r = tape.sub(ax, c.y.expect("registered"))?;
            let g = tape.matvec(phi, r, true)?;
            tape.reshape(g, &[h, w])
        }
        Operator::Mri { indices } => {
            let k = tape.fft2(x)?;
            let s = tape.masked_select(k, indices.clone(), true)?;
            let r = tape.sub(s, c.y.expect("registered"))?;
            let full = tape.masked_scatter(r, indices.clone(), true, &[h, w, 2])?;
            tape.ifft2(full)
        }
        Operator::Cdp { model, sqrt_y } => tape.amplitude_grad(x, model.clone(), sqrt_y.clone()),
    }
}

fn prox(tape: &mut Tape, net: &Network, p: &Problem, c: &Consts, k: usize, x: Var) -> Result<Var> {
    let vars = net.hyper.generate_on_tape(tape, k, c.theta)?;
    let (h, w) = p.shape;
    if p.complex {
        let planar = tape.complex_split(x)?;
        let batch = tape.reshape(planar, &[2, 1, h, w])?;
        let out = prox_on_tape(tape, batch, &vars, &net.config.prox)?;
        let planar = tape.reshape(out, &[2, h, w])?;
        tape.complex_merge(planar)
    } else {
        let batch = tape.reshape(x, &[1, 1, h, w])?;
        let out = prox_on_tape(tape, batch, &vars, &net.config.prox)?;
        tape.reshape(out, &[h, w])
    }
}

pub(crate) fn step_name(k: usize) -> String {
    format!("step.{k}")
}

pub(crate) fn penalty_name(k: usize) -> String {
    format!("penalty.{k}")
}

/// Records iteration `k` (0-based), advancing `s`.
pub(crate) fn iteration(
    tape: &mut Tape,
    net: &Network,
    framework: Framework,
    p: &Problem,
    c: &Consts,
    k: usize,
    s: State,
) -> Result<State> {
    let r = tape.leaf(&step_name(k), &net.unroll_params[&step_name(k)]);
    let mu = |tape: &mut Tape| -> Result<Var> {
        let name = penalty_name(k);
        let raw = net
            .unroll_params
            .get(&name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing penalty {name}")))?;
        let rho = tape.leaf(&name, raw);
        tape.softplus(rho)
    };
    match framework {
        Framework::Pgd => {
            let g = data_grad(tape, p, c, s.x)?;
            let rg = tape.scalar_mul(r, g)?;
            let z = tape.sub(s.x, rg)?;
            let x = prox(tape, net, p, c, k, z)?;
            Ok(State { x, z, u: None })
        }
        Framework::Hqs => {
            let mu = mu(tape)?;
            let g = data_grad(tape, p, c, s.z)?;
            let gap = tape.sub(s.z, s.x)?;
            let pen = tape.scalar_mul(mu, gap)?;
            let total = tape.add(g, pen)?;
            let step = tape.scalar_mul(r, total)?;
            let z = tape.sub(s.z, step)?;
            let x = prox(tape, net, p, c, k, z)?;
            Ok(State { x, z, u: None })
        }
        Framework::Admm => {
            let mu = mu(tape)?;
            let u = s.u.expect("dual variable");
            let arg = tape.sub(s.z, u)?;
            let x = prox(tape, net, p, c, k, arg)?;
            let v = tape.add(x, u)?;
            let g = data_grad(tape, p, c, v)?;
            let inv = tape.reciprocal(mu)?;
            let scaled = tape.scalar_mul(inv, g)?;
            let step = tape.scalar_mul(r, scaled)?;
            let z = tape.sub(v, step)?;
            let xu = tape.add(u, x)?;
            let u = tape.sub(xu, z)?;
            Ok(State { x, z, u: Some(u) })
        }
    }
}
