//! The dynamic proximal network: a five-layer CNN with instance normalization
//! and a residual skip, whose weights are emitted by small fully connected
//! hypernetworks from the imaging parameters.

mod hyper;
mod theta;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AffineForm, Precision, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::forward_models::Image;

pub use hyper::{count_params, HyperConfig, HyperNetParams, ProxVars, Variant};
pub use theta::{ImagingParams, ThetaLayout};

/// Evaluation options of the proximal CNN that are not learned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxOptions {
    /// Floor on the per-channel standard deviation.
    pub norm_eps: f64,
    pub affine_form: AffineForm,
    pub precision: Precision,
}

impl Default for ProxOptions {
    fn default() -> Self {
        Self {
            norm_eps: 1e-5,
            affine_form: AffineForm::ScaledShift,
            precision: Precision::F64,
        }
    }
}

/// Concrete weights of one proximal CNN.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxNetParams {
    /// `W1: [C, 1, k, k]`, `W2..W4: [C, C, k, k]`, `W5: [1, C, k, k]`.
    pub conv_weights: Vec<Array4<f64>>,
    pub in_gamma: Vec<Vec<f64>>,
    pub in_beta: Vec<Vec<f64>>,
}

impl ProxNetParams {
    /// All-zero weights with unit `gamma`: the network reduces to its skip.
    pub fn zeros(channels: usize, kernel: usize) -> Self {
        let shapes = hyper::conv_shapes(channels, kernel);
        Self {
            conv_weights: shapes.iter().map(|s| Array4::zeros(*s)).collect(),
            in_gamma: vec![vec![1.0; channels]; 4],
            in_beta: vec![vec![0.0; channels]; 4],
        }
    }

    pub fn channels(&self) -> usize {
        self.in_gamma.first().map_or(0, |g| g.len())
    }

    fn validate(&self) -> Result<()> {
        if self.conv_weights.len() != 5 || self.in_gamma.len() != 4 || self.in_beta.len() != 4 {
            return Err(Error::InvalidParameter(
                "proximal network needs 5 conv weights and 4 affine pairs".into(),
            ));
        }
        let c = self.channels();
        let k = self.conv_weights[0].dim().2;
        let want = hyper::conv_shapes(c, k);
        for (w, s) in self.conv_weights.iter().zip(&want) {
            if w.dim() != *s {
                return Err(dim_err(format!("conv weight is {:?}, expected {s:?}", w.dim())));
            }
        }
        if self.in_gamma.iter().chain(&self.in_beta).any(|v| v.len() != c) {
            return Err(dim_err("affine vectors must all have C entries"));
        }
        Ok(())
    }
}

fn tensor4(a: &Array4<f64>) -> Tensor {
    let (a0, a1, a2, a3) = a.dim();
    Tensor::new(vec![a0, a1, a2, a3], a.iter().copied().collect()).expect("shape")
}

/// Records the CNN on `input: [n, 1, h, w]` and returns the `[n, 1, h, w]` output.
pub fn prox_on_tape(tape: &mut Tape, input: Var, p: &ProxVars, opts: &ProxOptions) -> Result<Var> {
    let mut f = input;
    for j in 0..4 {
        let c = tape.conv2d(f, p.conv[j])?;
        let n = tape.instance_norm(c, p.gamma[j], p.beta[j], opts.norm_eps, opts.affine_form)?;
        f = tape.relu(n)?;
    }
    let last = tape.conv2d(f, p.conv[4])?;
    tape.add(last, input)
}

/// `f0 = z; f_j = ReLU(IN_j(W_j * f_{j-1})); out = W5 * f4 + f0`.
pub fn prox_forward(z: &Image, params: &ProxNetParams, opts: &ProxOptions) -> Result<Image> {
    params.validate()?;
    let (h, w) = z.dim();
    let mut tape = Tape::with_precision(opts.precision);
    let x = tape.constant(Tensor::new(vec![1, 1, h, w], z.iter().copied().collect())?);
    let vars = ProxVars {
        conv: params.conv_weights.iter().map(|a| tape.constant(tensor4(a))).collect(),
        gamma: params
            .in_gamma
            .iter()
            .map(|g| tape.constant(Tensor::vector(g.clone())))
            .collect(),
        beta: params
            .in_beta
            .iter()
            .map(|b| tape.constant(Tensor::vector(b.clone())))
            .collect(),
    };
    let out = prox_on_tape(&mut tape, x, &vars, opts)?;
    Ok(Image::from_shape_vec((h, w), tape.value(out).data().to_vec()).expect("shape"))
}

/// Per-channel standardization over the spatial axes of `x: [C, H, W]`,
/// followed by the selected affine form.
pub fn instance_norm(x: &Array3<f64>, gamma: &[f64], beta: &[f64], opts: &ProxOptions) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    if h * w < 2 {
        return Err(Error::DegenerateStatistics(h * w));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(dim_err(format!(
            "affine vectors must have {c} entries, got {} and {}",
            gamma.len(),
            beta.len()
        )));
    }
    let data: Vec<f64> = x.iter().copied().collect();
    let (y, _) = crate::autodiff::kernels::instance_norm(&data, gamma, beta, c, opts.norm_eps, opts.affine_form);
    Ok(Array3::from_shape_vec((c, h, w), y).expect("shape"))
}

/// Weights of iteration `iteration` for imaging parameters `theta`.
pub fn generate_params(theta: &[f64], hyper: &HyperNetParams, iteration: usize) -> Result<ProxNetParams> {
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::vector(theta.to_vec()));
    let vars = hyper.generate_on_tape(&mut tape, iteration, t)?;
    let c = hyper.config().channels;
    let k = hyper.config().kernel;
    let shapes = hyper::conv_shapes(c, k);
    Ok(ProxNetParams {
        conv_weights: vars
            .conv
            .iter()
            .zip(&shapes)
            .map(|(&v, s)| Array4::from_shape_vec(*s, tape.value(v).data().to_vec()).expect("shape"))
            .collect(),
        in_gamma: vars.gamma.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
        in_beta: vars.beta.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
    })
}
