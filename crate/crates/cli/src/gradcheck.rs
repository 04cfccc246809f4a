use clap::Args;

use dpunet::autodiff::GradCheckOptions;
use dpunet::dyn_prox::{ImagingParams, ThetaLayout, Variant};
use dpunet::forward_models::{Task, EIGHT_BIT_SCALE};
use dpunet::training::{mix, synthetic_image, OperatorBank};
use dpunet::unroll::{class_gradcheck, Framework, Network, NetworkConfig, UnrollConfig};

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "bcs")]
    task: Task,
    #[arg(long, default_value = "dpunet")]
    variant: Variant,
    #[arg(long, default_value = "pgd")]
    framework: Framework,
    /// Side length of the toy image
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
    /// Coordinates checked per leaf class
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Error denominator floor, relative to the largest checked gradient
    /// entry of the same class
    #[arg(long, default_value_t = 1e-3)]
    floor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Returns whether every leaf class passed.
pub fn run(a: GradcheckArgs) -> anyhow::Result<bool> {
    let theta = ThetaLayout::eta_alpha(0.5_f64.max(a.eta), 50.0);
    let mut hyper = a.variant.config(theta.dim());
    hyper.channels = a.channels;
    hyper.iterations = a.iterations;
    // trained-scale weights, so that no leaf class has vanishing gradients
    hyper.output_gain = 1.0;
    hyper.coef_std = 0.1;
    let config = NetworkConfig {
        theta,
        hyper,
        unroll: UnrollConfig {
            framework: a.framework,
            ..UnrollConfig::for_task(a.task)
        },
        prox: Default::default(),
    };
    let net = Network::new(config, mix(&[a.seed, 1]))?;

    let mut bank = OperatorBank::new(mix(&[a.seed, 2]));
    let n = a.size;
    let model = if a.task == Task::Bcs {
        let blocks: Vec<_> = (0..4 * n * n)
            .map(|i| synthetic_image(n, n, mix(&[a.seed, 3, i as u64])))
            .collect();
        bank.prepare_bcs(a.eta, n, &blocks)?
    } else {
        bank.get(a.task, a.eta, (n, n))?
    };
    let truth = synthetic_image(n, n, mix(&[a.seed, 4]));
    let y = model.measure_noisy(&truth, a.alpha, EIGHT_BIT_SCALE, mix(&[a.seed, 5]))?;
    let params = ImagingParams::new(a.task, a.eta, a.alpha);

    let opts = GradCheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        ..Default::default()
    };
    let reports = class_gradcheck(&model, &y, &params, &truth, &net, a.samples, a.floor, &opts)?;

    println!("class,checked,kinks,max_rel_error,status");
    let mut ok = true;
    for (class, report) in reports {
        let checked: usize = report.leaves.iter().map(|l| l.checked).sum();
        let kinks: usize = report.leaves.iter().map(|l| l.kinks.len()).sum();
        let pass = report.passed() && checked > 0;
        ok &= pass;
        println!(
            "{},{checked},{kinks},{:.3e},{}",
            class.name(),
            report.max_rel_error(),
            if pass { "pass" } else { "FAIL" }
        );
    }
    Ok(ok)
}
