//! Unrolled proximal-gradient, half-quadratic-splitting and ADMM
//! reconstruction with learned step sizes and penalties.

mod graph;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{check_gradients, GradCheckOptions, GradCheckReport, ParamSet, Tape, Tensor, Var};
use crate::dyn_prox::{HyperConfig, HyperNetParams, ImagingParams, ProxOptions, ThetaLayout};
use crate::error::{Error, Result};
use crate::fidelity::{fidelity_value, fidelity_value_complex, FidelityTerm};
use crate::forward_models::{ComplexImage, Image, Measurement, MeasurementModel, Task};

use graph::{iteration, Consts, Problem, State};
pub(crate) use graph::{penalty_name, step_name};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    #[default]
    Pgd,
    Hqs,
    Admm,
}

impl Framework {
    pub fn name(self) -> &'static str {
        match self {
            Framework::Pgd => "pgd",
            Framework::Hqs => "hqs",
            Framework::Admm => "admm",
        }
    }

    fn has_penalty(self) -> bool {
        self != Framework::Pgd
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Framework {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgd" => Ok(Framework::Pgd),
            "hqs" => Ok(Framework::Hqs),
            "admm" => Ok(Framework::Admm),
            _ => Err(Error::InvalidConfig(format!("unknown framework {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnrollConfig {
    pub framework: Framework,
    /// Initial value of every step size.
    pub step_init: f64,
    /// Initial value of every penalty (HQS/ADMM).
    pub penalty_init: f64,
    /// Clamp the returned image to `[0, 1]`.
    pub clamp_output: bool,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        Self {
            framework: Framework::Pgd,
            step_init: 0.5,
            penalty_init: 0.1,
            clamp_output: true,
        }
    }
}

impl UnrollConfig {
    /// Step sizes start at 0.5 for linear tasks and 0.1 for phase retrieval.
    pub fn for_task(task: Task) -> Self {
        Self {
            step_init: if task == Task::Cpr { 0.1 } else { 0.5 },
            ..Self::default()
        }
    }
}

/// Everything that fixes the architecture of a reconstruction network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub theta: ThetaLayout,
    pub hyper: HyperConfig,
    #[serde(default)]
    pub unroll: UnrollConfig,
    #[serde(default)]
    pub prox: ProxOptions,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        self.hyper.validate()?;
        if self.theta.dim() != self.hyper.theta_dim {
            return Err(Error::InvalidConfig(format!(
                "conditioning layout has {} components, generators expect {}",
                self.theta.dim(),
                self.hyper.theta_dim
            )));
        }
        Ok(())
    }
}

/// Softplus inverse, used to store positive penalties unconstrained.
fn inv_softplus(v: f64) -> f64 {
    v + (-(-v).exp_m1()).ln()
}

/// A trainable unrolled reconstruction network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub hyper: HyperNetParams,
    /// `step.k` and (HQS/ADMM) raw `penalty.k`, each of shape `[1]`;
    /// the penalty is `softplus(raw)`.
    pub unroll_params: ParamSet,
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let hyper = HyperNetParams::new(config.hyper, seed)?;
        let mut unroll_params = ParamSet::new();
        for k in 0..config.hyper.iterations {
            unroll_params.insert(step_name(k), Tensor::scalar(config.unroll.step_init));
        }
        if config.unroll.framework.has_penalty() {
            for k in 0..config.hyper.iterations {
                unroll_params.insert(
                    penalty_name(k),
                    Tensor::scalar(inv_softplus(config.unroll.penalty_init)),
                );
            }
        }
        Ok(Self {
            config,
            hyper,
            unroll_params,
        })
    }

    pub fn iterations(&self) -> usize {
        self.config.hyper.iterations
    }

    pub fn theta(&self, p: &ImagingParams) -> Vec<f64> {
        self.config.theta.encode(p)
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        (0..self.iterations())
            .map(|k| self.unroll_params[&step_name(k)].data()[0])
            .collect()
    }

    pub fn set_step_sizes(&mut self, r: f64) {
        for k in 0..self.iterations() {
            self.unroll_params.insert(step_name(k), Tensor::scalar(r));
        }
    }

    /// Effective penalties `softplus(raw)`; empty for PGD networks.
    pub fn penalties(&self) -> Vec<f64> {
        (0..self.iterations())
            .filter_map(|k| self.unroll_params.get(&penalty_name(k)))
            .map(|t| {
                let r = t.data()[0];
                if r < -40.0 {
                    r.exp()
                } else {
                    r.exp().ln_1p()
                }
            })
            .collect()
    }

    /// Sets every penalty; `0` is represented exactly by a raw value of `-inf`.
    pub fn set_penalties(&mut self, mu: f64) {
        let raw = if mu == 0.0 { f64::NEG_INFINITY } else { inv_softplus(mu) };
        for k in 0..self.iterations() {
            self.unroll_params.insert(penalty_name(k), Tensor::scalar(raw));
        }
    }

    /// All trainable arrays: generators followed by step sizes and penalties.
    pub fn param_iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.hyper.params().iter().chain(self.unroll_params.iter())
    }

    pub fn param_iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.hyper.params_mut().iter_mut().chain(self.unroll_params.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.param_iter().map(|(_, t)| t.len()).sum()
    }
}

/// Options for a single reconstruction.
#[derive(Debug, Clone, Default)]
pub struct ReconOptions<'a> {
    /// Record fidelity (and PSNR, with ground truth) per iteration.
    pub trace: bool,
    pub ground_truth: Option<&'a Image>,
    /// Replaces the per-modality initialization.
    pub init: Option<ComplexImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub fidelity: f64,
    pub psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// Output image after optional clamping.
    pub image: Image,
    /// Final state before clamping (complex for MRI).
    pub state: ComplexImage,
    /// `T + 1` entries (initialization first) when tracing was requested.
    pub trace: Option<Vec<TraceEntry>>,
}

fn state_to_complex(p: &Problem, t: &Tensor) -> ComplexImage {
    let (h, w) = p.shape;
    let d = t.data();
    if p.complex {
        ComplexImage::from_shape_fn((h, w), |(i, j)| {
            let o = 2 * (i * w + j);
            num_complex::Complex64::new(d[o], d[o + 1])
        })
    } else {
        ComplexImage::from_shape_fn((h, w), |(i, j)| num_complex::Complex64::new(d[i * w + j], 0.0))
    }
}

fn output_image(state: &ComplexImage, clamp: bool) -> Image {
    state.mapv(|z| if clamp { z.re.clamp(0.0, 1.0) } else { z.re })
}

fn initial_state(model: &MeasurementModel, y: &Measurement, p: &Problem, opts: &ReconOptions) -> Result<Tensor> {
    let x0 = match &opts.init {
        Some(x) => x.clone(),
        None => model.initialize(y)?,
    };
    p.state_tensor(&x0)
}

fn trace_entry(
    k: usize,
    state: &ComplexImage,
    term: &FidelityTerm,
    truth: Option<&Image>,
    clamp: bool,
    complex: bool,
) -> Result<TraceEntry> {
    let fidelity = if complex {
        fidelity_value_complex(state, term)?
    } else {
        fidelity_value(&state.mapv(|z| z.re), term)?
    };
    let psnr = truth
        .map(|t| crate::eval::psnr(&output_image(state, clamp), t))
        .transpose()?;
    Ok(TraceEntry {
        iteration: k,
        fidelity,
        psnr,
    })
}

fn check_framework(framework: Framework, p: &Problem) -> Result<()> {
    if framework != Framework::Pgd && !p.is_linear() {
        return Err(Error::UnsupportedFramework {
            framework: framework.name(),
            reason: "the nonlinear amplitude fidelity",
        });
    }
    Ok(())
}

fn run(
    framework: Framework,
    model: &MeasurementModel,
    y: &Measurement,
    params: &ImagingParams,
    net: &Network,
    opts: &ReconOptions,
) -> Result<Reconstruction> {
    let p = Problem::new(model, y, net.theta(params))?;
    check_framework(framework, &p)?;
    if framework.has_penalty() && net.penalties().len() != net.iterations() {
        return Err(Error::InvalidConfig(format!(
            "{framework} needs penalties; network was built for {}",
            net.config.unroll.framework
        )));
    }
    let clamp = net.config.unroll.clamp_output;
    let term = FidelityTerm::for_model(model, y)?;
    let x0 = initial_state(model, y, &p, opts)?;
    let mut trace = Vec::new();
    if opts.trace {
        trace.push(trace_entry(
            0,
            &state_to_complex(&p, &x0),
            &term,
            opts.ground_truth,
            clamp,
            p.complex,
        )?);
    }
    let zeros = Tensor::zeros(x0.shape());
    let (mut x, mut z, mut u) = (x0.clone(), x0, (framework == Framework::Admm).then_some(zeros));
    for k in 0..net.iterations() {
        // A fresh tape per iteration keeps inference memory flat in T.
        let mut tape = Tape::with_precision(net.config.prox.precision);
        let c = Consts::register(&mut tape, &p);
        let s = State {
            x: tape.constant(x),
            z: tape.constant(z),
            u: u.map(|u| tape.constant(u)),
        };
        let s = iteration(&mut tape, net, framework, &p, &c, k, s)?;
        x = tape.value(s.x).clone();
        z = tape.value(s.z).clone();
        u = s.u.map(|v| tape.value(v).clone());
        if !(x.is_finite() && z.is_finite() && u.as_ref().is_none_or(Tensor::is_finite)) {
            return Err(Error::NumericalDivergence { iteration: k + 1 });
        }
        if opts.trace {
            trace.push(trace_entry(
                k + 1,
                &state_to_complex(&p, &x),
                &term,
                opts.ground_truth,
                clamp,
                p.complex,
            )?);
        }
    }
    let state = state_to_complex(&p, &x);
    Ok(Reconstruction {
        image: output_image(&state, clamp),
        state,
        trace: opts.trace.then_some(trace),
    })
}

/// Runs the network's configured framework.
pub fn reconstruct(
    model: &MeasurementModel,
    y: &Measurement,
    params: &ImagingParams,
    net: &Network,
    opts: &ReconOptions,
) -> Result<Reconstruction> {
    run(net.config.unroll.framework, model, y, params, net, opts)
}

pub fn pgd_reconstruct(
    model: &MeasurementModel,
    y: &Measurement,
    params: &ImagingParams,
    net: &Network,
) -> Result<Image> {
    Ok(run(Framework::Pgd, model, y, params, net, &ReconOptions::default())?.image)
}

pub fn hqs_reconstruct(
    model: &MeasurementModel,
    y: &Measurement,
    params: &ImagingParams,
    net: &Network,
) -> Result<Image> {
    Ok(run(Framework::Hqs, model, y, params, net, &ReconOptions::default())?.image)
}

pub fn admm_reconstruct(
    model: &MeasurementModel,
    y: &Measurement,
    params: &ImagingParams,
    net: &Network,
) -> Result<Image> {
    Ok(run(Framework::Admm, model, y, params, net, &ReconOptions::default())?.image)
}

/// Handles of a full unrolled graph recorded on one tape.
#[derive(Debug, Clone)]
pub struct UnrolledGraph {
    /// `x_0 .. x_T` in state layout.
    pub iterates: Vec<Var>,
    /// Mean squared error of `x_T` against the ground truth.
    pub loss: Var,
}

/// Records the whole reconstruction and its pixel-wise L2 loss for training.
pub fn record_loss(
    tape: &mut Tape,
    model: &MeasurementModel,
    y: &Measurement,
    params: &ImagingParams,
    truth: &Image,
    net: &Network,
) -> Result<UnrolledGraph> {
    let framework = net.config.unroll.framework;
    let p = Problem::new(model, y, net.theta(params))?;
    check_framework(framework, &p)?;
    let x0 = initial_state(model, y, &p, &ReconOptions::default())?;
    let target = p.target_tensor(truth)?;
    let c = Consts::register(tape, &p);
    let xv = tape.constant(x0);
    let u = (framework == Framework::Admm).then(|| tape.constant(Tensor::zeros(target.shape())));
    let mut s = State { x: xv, z: xv, u };
    let mut iterates = vec![xv];
    for k in 0..net.iterations() {
        s = iteration(tape, net, framework, &p, &c, k, s)?;
        iterates.push(s.x);
    }
    let t = tape.constant(target);
    let loss = tape.l2_loss(s.x, t)?;
    Ok(UnrolledGraph { iterates, loss })
}

/// Kinds of trainable arrays, for grouping gradient checks and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LeafClass {
    /// Coefficients on the conditioning vector in convolution generators.
    ConvCoef,
    /// Biases of convolution generators (the static weights when `theta = 0`).
    ConvBias,
    /// Weights of the instance-norm generators.
    NormCoef,
    /// Biases of the instance-norm generators.
    NormBias,
    StepSize,
    Penalty,
}

impl LeafClass {
    pub fn name(self) -> &'static str {
        match self {
            LeafClass::ConvCoef => "conv-coef",
            LeafClass::ConvBias => "conv-bias",
            LeafClass::NormCoef => "norm-coef",
            LeafClass::NormBias => "norm-bias",
            LeafClass::StepSize => "step-size",
            LeafClass::Penalty => "penalty",
        }
    }

    pub fn of(name: &str) -> Self {
        if name.starts_with("step.") {
            LeafClass::StepSize
        } else if name.starts_with("penalty.") {
            LeafClass::Penalty
        } else {
            // depth-0 generators hold the static weights themselves
            let bias = name.ends_with(".b") || !name.contains(".fc");
            match (name.contains(".conv"), bias) {
                (true, false) => LeafClass::ConvCoef,
                (true, true) => LeafClass::ConvBias,
                (false, false) => LeafClass::NormCoef,
                (false, true) => LeafClass::NormBias,
            }
        }
    }
}

/// Picks up to `per_class` scalar coordinates of every leaf class, spread
/// evenly over the concatenation of that class's arrays.
pub fn class_coordinates(net: &Network, per_class: usize) -> indexmap::IndexMap<LeafClass, Vec<(String, usize)>> {
    let mut sizes: indexmap::IndexMap<LeafClass, Vec<(String, usize)>> = indexmap::IndexMap::new();
    for (name, t) in net.param_iter() {
        sizes
            .entry(LeafClass::of(name))
            .or_default()
            .push((name.clone(), t.len()));
    }
    sizes.sort_keys();
    sizes
        .into_iter()
        .map(|(class, leaves)| {
            let total: usize = leaves.iter().map(|l| l.1).sum();
            let k = per_class.min(total);
            let picks = (0..k)
                .map(|i| {
                    let mut g = i * total / k + total / (2 * k);
                    for (name, n) in &leaves {
                        if g < *n {
                            return (name.clone(), g);
                        }
                        g -= n;
                    }
                    unreachable!("index below total")
                })
                .collect();
            (class, picks)
        })
        .collect()
}

/// Compares the gradients of the [`record_loss`] objective for every
/// trainable array against central differences.
pub fn loss_gradcheck(
    model: &MeasurementModel,
    y: &Measurement,
    params: &ImagingParams,
    truth: &Image,
    net: &Network,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let leaves: ParamSet = net.param_iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    // record_loss looks its parameters up by name, so it picks up the
    // perturbed leaves registered by the checker.
    check_gradients(
        &leaves,
        |tape: &mut Tape, _: &indexmap::IndexMap<String, Var>| {
            Ok(record_loss(tape, model, y, params, truth, net)?.loss)
        },
        opts,
    )
}

/// Runs [`loss_gradcheck`] once per [`LeafClass`] on up to `per_class`
/// coordinates spread over that class.
///
/// The error floor of each class is `rel_floor` times the largest analytic
/// gradient among its checked coordinates. Some gradients vanish
/// structurally, like the first step size after a data-consistent
/// initializer, and their central difference is pure roundoff.
#[allow(clippy::too_many_arguments)]
pub fn class_gradcheck(
    model: &MeasurementModel,
    y: &Measurement,
    params: &ImagingParams,
    truth: &Image,
    net: &Network,
    per_class: usize,
    rel_floor: f64,
    opts: &GradCheckOptions,
) -> Result<Vec<(LeafClass, GradCheckReport)>> {
    let mut tape = Tape::new();
    let loss = record_loss(&mut tape, model, y, params, truth, net)?.loss;
    let grads = tape.backward(loss, &Tensor::scalar(1.0))?;
    class_coordinates(net, per_class)
        .into_iter()
        .map(|(class, picks)| {
            let scale = picks
                .iter()
                .filter_map(|(n, i)| grads.param(n).map(|g| g.data()[*i].abs()))
                .fold(0.0_f64, f64::max);
            let mut coordinates: indexmap::IndexMap<String, Vec<usize>> = indexmap::IndexMap::new();
            for (name, i) in picks {
                coordinates.entry(name).or_default().push(i);
            }
            let o = GradCheckOptions {
                floor: (rel_floor * scale).max(f64::MIN_POSITIVE),
                coordinates: Some(coordinates),
                ..opts.clone()
            };
            Ok((class, loss_gradcheck(model, y, params, truth, net, &o)?))
        })
        .collect()
}

/// Output image of a recorded state, for inspection after [`record_loss`].
pub fn state_image(tape: &mut Tape, model: &MeasurementModel, x: Var) -> Result<Var> {
    if matches!(model, MeasurementModel::Mri(_)) {
        tape.complex_re(x)
    } else {
        Ok(x)
    }
}

/// Writes `iteration,fidelity,psnr` rows; PSNR is empty when unavailable.
pub fn write_trace_csv<W: Write>(trace: &[TraceEntry], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,fidelity,psnr")?;
    for e in trace {
        let psnr = e.psnr.map(crate::eval::format_db).unwrap_or_default();
        writeln!(out, "{},{:e},{}", e.iteration, e.fidelity, psnr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_models::{BcsModel, MriModel};

    fn tiny_net(framework: Framework) -> Network {
        let config = NetworkConfig {
            theta: ThetaLayout::eta_only(0.5),
            hyper: HyperConfig {
                channels: 4,
                iterations: 3,
                ..HyperConfig::default()
            },
            unroll: UnrollConfig {
                framework,
                ..UnrollConfig::default()
            },
            prox: ProxOptions::default(),
        };
        Network::new(config, 11).unwrap()
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for v in [1e-3, 0.1, 1.0, 20.0] {
            assert!(((inv_softplus(v)).exp().ln_1p() - v).abs() < 1e-12 * v.max(1.0));
        }
        let mut net = tiny_net(Framework::Hqs);
        assert!(net.penalties().iter().all(|m| (m - 0.1).abs() < 1e-12));
        net.set_penalties(0.0);
        assert!(net.penalties().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn trace_has_t_plus_one_entries() {
        let net = tiny_net(Framework::Pgd);
        let model = MeasurementModel::Mri(MriModel::new(8, 8, 0.5, 1).unwrap());
        let x = Image::from_shape_fn((8, 8), |(i, j)| ((i + j) % 3) as f64 / 3.0);
        let y = model.measure(&x).unwrap();
        let p = ImagingParams::new(Task::Mri, 0.5, 0.0);
        let opts = ReconOptions {
            trace: true,
            ground_truth: Some(&x),
            ..Default::default()
        };
        let r = reconstruct(&model, &y, &p, &net, &opts).unwrap();
        let trace = r.trace.as_ref().unwrap();
        assert_eq!(trace.len(), 4);
        assert!(trace.iter().all(|e| e.psnr.is_some()));
        let plain = reconstruct(&model, &y, &p, &net, &ReconOptions::default()).unwrap();
        assert_eq!(plain.image, r.image);
        assert_eq!(pgd_reconstruct(&model, &y, &p, &net).unwrap(), r.image);
        let mut csv = Vec::new();
        write_trace_csv(trace, &mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
    }

    #[test]
    fn splitting_rejects_amplitude_model() {
        let net = tiny_net(Framework::Hqs);
        let model = MeasurementModel::Cdp(crate::forward_models::CdpModel::new(6, 6, 0.5, 0).unwrap());
        let y = model.measure(&Image::from_elem((6, 6), 0.5)).unwrap();
        let p = ImagingParams::new(Task::Cpr, 0.5, 0.0);
        assert!(matches!(
            hqs_reconstruct(&model, &y, &p, &net),
            Err(Error::UnsupportedFramework { .. })
        ));
    }

    #[test]
    fn divergence_reports_iteration() {
        let mut net = tiny_net(Framework::Pgd);
        net.set_step_sizes(1e308);
        let mut bcs = BcsModel::new(6, 0.5, 2).unwrap();
        let n = 36;
        let m = bcs.m();
        bcs.set_init_map(ndarray::Array2::zeros((n, m))).unwrap();
        let model = MeasurementModel::Bcs(bcs);
        let y = Measurement::Real(ndarray::Array1::from_elem(m, 1e10));
        let p = ImagingParams::new(Task::Bcs, 0.5, 0.0);
        assert!(matches!(
            pgd_reconstruct(&model, &y, &p, &net),
            Err(Error::NumericalDivergence { iteration: 1 })
        ));
    }

    #[test]
    fn taped_loss_graph_matches_inference() {
        let net = tiny_net(Framework::Admm);
        let model = MeasurementModel::Mri(MriModel::new(8, 8, 0.4, 3).unwrap());
        let x = Image::from_shape_fn((8, 8), |(i, j)| ((i * j) % 5) as f64 / 5.0);
        let y = model.measure(&x).unwrap();
        let p = ImagingParams::new(Task::Mri, 0.4, 0.0);
        let r = reconstruct(&model, &y, &p, &net, &ReconOptions::default()).unwrap();
        let mut tape = Tape::new();
        let g = record_loss(&mut tape, &model, &y, &p, &x, &net).unwrap();
        let last = *g.iterates.last().unwrap();
        let re = state_image(&mut tape, &model, last).unwrap();
        let got = tape.value(re).data();
        for (a, z) in got.iter().zip(r.state.iter()) {
            assert_eq!(*a, z.re);
        }
    }
}
