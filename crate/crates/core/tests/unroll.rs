mod common;

use ndarray::{arr2, Array1, Array2};
use num_complex::Complex64;

use common::*;
use dpunet::autodiff::Tensor;
use dpunet::dyn_prox::{HyperConfig, ImagingParams, ThetaLayout, Variant};
use dpunet::fidelity::{fidelity_value, FidelityTerm};
use dpunet::forward_models::{BcsModel, Image, Measurement, MeasurementModel, MriModel};
use dpunet::training::synthetic_image;
use dpunet::unroll::{reconstruct, Framework, Network, NetworkConfig, ReconOptions, Reconstruction, UnrollConfig};

fn unclamped(mut net: Network) -> Network {
    net.config.unroll.clamp_output = false;
    net
}

fn run(model: &MeasurementModel, y: &Measurement, net: &Network, init: Option<Image>) -> Reconstruction {
    let task = model.task();
    let params = ImagingParams::new(task, 0.5, 0.0);
    let opts = ReconOptions {
        trace: true,
        init: init.map(|x| x.mapv(|v| Complex64::new(v, 0.0))),
        ..Default::default()
    };
    reconstruct(model, y, &params, net, &opts).unwrap()
}

#[test]
fn full_mask_mri_recovers_in_one_iteration() {
    let model = MeasurementModel::Mri(MriModel::new(16, 12, 1.0, 0).unwrap());
    let truth = synthetic_image(16, 12, 5);
    let y = model.measure(&truth).unwrap();
    let mut net = network(Framework::Pgd, Variant::Dpunet, 4, 1, 3);
    net.hyper.zero_output_layer();
    net.set_step_sizes(1.0);
    // from the zero-filled initializer and from an all-zero start
    for init in [None, Some(Image::zeros((16, 12)))] {
        let r = run(&model, &y, &net, init);
        for (got, want) in r.state.iter().zip(truth.iter()) {
            assert!((got - Complex64::new(*want, 0.0)).norm() <= 1e-8);
        }
    }
}

#[test]
fn consistent_fixed_point_is_stationary() {
    let mut bcs = BcsModel::new(6, 0.4, 1).unwrap();
    bcs.set_init_map(Array2::zeros((36, bcs.m()))).unwrap();
    let linear = [
        MeasurementModel::Bcs(bcs),
        MeasurementModel::Mri(MriModel::new(8, 8, 0.3, 2).unwrap()),
    ];
    for model in linear {
        let (h, w) = model.signal_shape();
        let truth = synthetic_image(h, w, 8);
        let y = model.measure(&truth).unwrap();
        for f in [Framework::Pgd, Framework::Hqs, Framework::Admm] {
            let mut net = network(f, Variant::Dpunet, 4, 3, 4);
            net.hyper.zero_output_layer();
            let r = run(&model, &y, &net, Some(truth.clone()));
            let re: Vec<f64> = r.state.iter().map(|z| z.re).collect();
            assert!(
                max_abs_diff(&re, truth.as_slice().unwrap()) <= 1e-12,
                "{} {f}",
                model.task()
            );
        }
    }
}

/// Gradient descent on `1/2 ||y - Phi x||^2`, written out directly.
fn gradient_descent(phi: &Array2<f64>, y: &Array1<f64>, x0: &Array1<f64>, r: f64, steps: usize) -> Vec<Array1<f64>> {
    let mut xs = vec![x0.clone()];
    for _ in 0..steps {
        let x = xs.last().unwrap();
        let g = phi.t().dot(&(phi.dot(x) - y));
        xs.push(x - &(g * r));
    }
    xs
}

fn spectral_norm_sq(phi: &Array2<f64>) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(phi.nrows(), phi.ncols(), phi.as_slice().unwrap());
    m.singular_values().max().powi(2)
}

#[test]
fn zero_prox_pgd_is_gradient_descent_with_monotone_fidelity() {
    let mut bcs = BcsModel::new(7, 0.3, 5).unwrap();
    bcs.set_init_map(Array2::zeros((49, bcs.m()))).unwrap();
    let phi = bcs.phi().clone();
    let model = MeasurementModel::Bcs(bcs);
    let truth = synthetic_image(7, 7, 1);
    let y = model.measure(&truth).unwrap();
    let r = 1.9 / spectral_norm_sq(&phi);
    let t = 6;
    let mut net = unclamped(network(Framework::Pgd, Variant::Dpunet, 4, t, 2));
    net.hyper.zero_output_layer();
    net.set_step_sizes(r);
    let x0 = synthetic_image(7, 7, 99);
    let rec = run(&model, &y, &net, Some(x0.clone()));

    let flat = Array1::from_iter(x0.iter().copied());
    let want = gradient_descent(&phi, y.as_real().unwrap(), &flat, r, t);
    let got: Vec<f64> = rec.state.iter().map(|z| z.re).collect();
    assert!(max_abs_diff(&got, want[t].as_slice().unwrap()) <= 1e-12);

    let trace = rec.trace.unwrap();
    assert_eq!(trace.len(), t + 1);
    let term = FidelityTerm::linear(&model, &y).unwrap();
    for (k, e) in trace.iter().enumerate() {
        let xk = Image::from_shape_vec((7, 7), want[k].to_vec()).unwrap();
        assert!((e.fidelity - fidelity_value(&xk, &term).unwrap()).abs() <= 1e-12 * (1.0 + e.fidelity));
    }
    assert!(trace.windows(2).all(|w| w[1].fidelity <= w[0].fidelity));
}

#[test]
fn hqs_without_penalty_follows_pgd() {
    let mut bcs = BcsModel::new(6, 0.5, 3).unwrap();
    let blocks = Array2::from_shape_fn((36, 200), |(i, j)| synthetic_image(6, 6, j as u64)[[i / 6, i % 6]]);
    let q = dpunet::forward_models::fit_bcs_init(&blocks, &bcs, Default::default()).unwrap();
    bcs.set_init_map(q).unwrap();
    let model = MeasurementModel::Bcs(bcs);
    let truth = synthetic_image(6, 6, 1234);
    let y = model.measure_noisy(&truth, 20.0, 1.0 / 255.0, 1).unwrap();

    let pgd_net = |t: usize, zero_prox: bool| {
        let mut n = unclamped(network(Framework::Pgd, Variant::Dpunet, 4, t, 6));
        if zero_prox {
            n.hyper.zero_output_layer();
        }
        n
    };
    let hqs_of = |pgd: &Network| {
        let mut n = pgd.clone();
        n.config.unroll.framework = Framework::Hqs;
        n.set_penalties(0.0);
        n
    };
    // with an identity prox the z-iterates of both schemes coincide at every k
    let pgd = pgd_net(5, true);
    let a = run(&model, &y, &pgd, None);
    let b = run(&model, &y, &hqs_of(&pgd), None);
    let (ta, tb) = (a.trace.as_ref().unwrap(), b.trace.as_ref().unwrap());
    for (p, q) in ta.iter().zip(tb) {
        assert!((p.fidelity - q.fidelity).abs() <= 1e-12 * (1.0 + p.fidelity));
    }
    let re = |r: &Reconstruction| r.state.iter().map(|z| z.re).collect::<Vec<_>>();
    assert!(max_abs_diff(&re(&a), &re(&b)) <= 1e-12);
    // with a learned prox they agree on the first iteration, where z0 = x0
    let pgd = pgd_net(1, false);
    let a = run(&model, &y, &pgd, None);
    let b = run(&model, &y, &hqs_of(&pgd), None);
    assert!(max_abs_diff(&re(&a), &re(&b)) <= 1e-12);
}

/// One-channel, 1x1-kernel network whose CNN weights do not depend on theta,
/// so that every iteration can be expanded by hand.
struct Scalars {
    w: [[f64; 5]; 2],
    gamma: [[f64; 4]; 2],
    beta: [[f64; 4]; 2],
    step: [f64; 2],
    raw_penalty: [f64; 2],
}

const S: Scalars = Scalars {
    w: [[1.3, -0.8, 0.6, 1.1, 0.45], [0.9, 1.2, -0.7, 0.5, -0.3]],
    gamma: [[1.1, 0.9, 1.4, 0.7], [0.8, 1.2, 1.0, 1.3]],
    beta: [[0.2, 0.5, -0.1, 0.3], [0.4, 0.1, 0.6, -0.2]],
    step: [0.35, 0.6],
    raw_penalty: [0.4, -0.9],
};

fn scalar_network(framework: Framework) -> Network {
    let theta = ThetaLayout::eta_alpha(0.5, 50.0);
    let config = NetworkConfig {
        theta,
        hyper: HyperConfig {
            channels: 1,
            kernel: 1,
            iterations: 2,
            theta_dim: 2,
            ..HyperConfig::default()
        },
        unroll: UnrollConfig {
            framework,
            clamp_output: false,
            ..UnrollConfig::default()
        },
        prox: Default::default(),
    };
    let mut net = Network::new(config, 0).unwrap();
    for (name, t) in net.param_iter_mut() {
        let k: usize = name[2..3].parse().unwrap_or(0);
        let v = if let Some(i) = name.strip_prefix("step.") {
            S.step[i.parse::<usize>().unwrap()]
        } else if let Some(i) = name.strip_prefix("penalty.") {
            S.raw_penalty[i.parse::<usize>().unwrap()]
        } else if name.ends_with(".A") {
            0.0
        } else if let Some(j) = name.find(".conv") {
            S.w[k][name[j + 5..j + 6].parse::<usize>().unwrap() - 1]
        } else if name.ends_with("fc1.b") {
            let j: usize = name[name.find(".in").unwrap() + 3..][..1].parse().unwrap();
            if name.contains(".gamma") {
                S.gamma[k][j - 1]
            } else {
                S.beta[k][j - 1]
            }
        } else {
            t.data()[0]
        };
        *t = Tensor::full(t.shape(), v);
    }
    net
}

/// `gamma ((v - mean) / max(sd, eps) + beta)` over the four pixels.
fn norm4(v: [f64; 4], gamma: f64, beta: f64) -> [f64; 4] {
    let mean = (v[0] + v[1] + v[2] + v[3]) / 4.0;
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 4.0;
    let sd = var.sqrt().max(1e-5);
    v.map(|a| gamma * ((a - mean) / sd + beta))
}

fn prox4(k: usize, z: [f64; 4]) -> [f64; 4] {
    let mut f = z;
    for j in 0..4 {
        f = norm4(f.map(|a| S.w[k][j] * a), S.gamma[k][j], S.beta[k][j]).map(|a| a.max(0.0));
    }
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = S.w[k][4] * f[i] + z[i];
    }
    out
}

fn softplus(v: f64) -> f64 {
    v.exp().ln_1p()
}

const PHI: [[f64; 4]; 2] = [[0.9, -0.4, 0.3, 0.7], [0.2, 0.8, -0.6, 0.5]];
const X0: [f64; 4] = [0.3, 0.8, 0.55, 0.1];
const TRUTH: [f64; 4] = [0.6, 0.2, 0.9, 0.4];

/// `Phi^T (Phi v - y)` for the fixed 2x4 system.
fn grad4(v: [f64; 4], y: [f64; 2]) -> [f64; 4] {
    let r0 = PHI[0][0] * v[0] + PHI[0][1] * v[1] + PHI[0][2] * v[2] + PHI[0][3] * v[3] - y[0];
    let r1 = PHI[1][0] * v[0] + PHI[1][1] * v[1] + PHI[1][2] * v[2] + PHI[1][3] * v[3] - y[1];
    [0, 1, 2, 3].map(|i| PHI[0][i] * r0 + PHI[1][i] * r1)
}

fn y4() -> [f64; 2] {
    [0, 1].map(|m| (0..4).map(|i| PHI[m][i] * TRUTH[i]).sum())
}

fn scalar_problem() -> (MeasurementModel, Measurement) {
    let phi = arr2(&PHI);
    let mut bcs = BcsModel::from_matrix(phi, 2).unwrap();
    bcs.set_init_map(Array2::zeros((4, 2))).unwrap();
    let model = MeasurementModel::Bcs(bcs);
    let y = Measurement::Real(Array1::from(y4().to_vec()));
    (model, y)
}

fn framework_state(framework: Framework) -> Vec<f64> {
    let (model, y) = scalar_problem();
    let net = scalar_network(framework);
    let x0 = Image::from_shape_vec((2, 2), X0.to_vec()).unwrap();
    run(&model, &y, &net, Some(x0)).state.iter().map(|z| z.re).collect()
}

fn close(got: &[f64], want: [f64; 4]) {
    let d = max_abs_diff(got, &want);
    assert!(d <= 1e-12, "{got:?} vs {want:?}: {d:e}");
}

#[test]
fn hqs_iterations_match_hand_expansion() {
    let y = y4();
    let (mut x, mut z) = (X0, X0);
    for k in 0..2 {
        let (r, mu) = (S.step[k], softplus(S.raw_penalty[k]));
        let g = grad4(z, y);
        for i in 0..4 {
            z[i] -= r * (g[i] + mu * (z[i] - x[i]));
        }
        x = prox4(k, z);
    }
    close(&framework_state(Framework::Hqs), x);
}

#[test]
fn admm_iterations_match_hand_expansion() {
    let y = y4();
    let (mut x, mut z, mut u) = ([0.0; 4], X0, [0.0; 4]);
    for k in 0..2 {
        let (r, mu) = (S.step[k], softplus(S.raw_penalty[k]));
        x = prox4(k, [0, 1, 2, 3].map(|i| z[i] - u[i]));
        let v = [0, 1, 2, 3].map(|i| x[i] + u[i]);
        let g = grad4(v, y);
        z = [0, 1, 2, 3].map(|i| v[i] - r / mu * g[i]);
        u = [0, 1, 2, 3].map(|i| u[i] + x[i] - z[i]);
    }
    close(&framework_state(Framework::Admm), x);
}

#[test]
fn pgd_iterations_match_hand_expansion() {
    let y = y4();
    let mut x = X0;
    for k in 0..2 {
        let g = grad4(x, y);
        x = prox4(k, [0, 1, 2, 3].map(|i| x[i] - S.step[k] * g[i]));
    }
    close(&framework_state(Framework::Pgd), x);
}

#[test]
fn reconstruction_is_deterministic() {
    let model = MeasurementModel::Mri(MriModel::new(10, 10, 0.3, 4).unwrap());
    let truth = synthetic_image(10, 10, 2);
    let y = model.measure_noisy(&truth, 10.0, 1.0 / 255.0, 3).unwrap();
    for f in [Framework::Pgd, Framework::Hqs, Framework::Admm] {
        let net = network(f, Variant::Dpunet, 4, 3, 1);
        let a = run(&model, &y, &net, None);
        let b = run(&model, &y, &net, None);
        assert_eq!(a, b);
    }
}

#[test]
fn hand_expanded_prox_is_not_the_identity() {
    for k in 0..2 {
        let out = prox4(k, X0);
        assert!(max_abs_diff(&out, &X0) > 1e-2, "{out:?}");
    }
}
