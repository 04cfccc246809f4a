//! Dense kernels behind the convolution and instance-norm primitives.

use serde::{Deserialize, Serialize};

/// Arithmetic used for the convolution GEMMs. Everything else stays `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Geometry of a stride-1, same-padded 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvShape {
    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
    fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds `[in_ch, h, w]` into `[in_ch*k*k, h*w]` with zero padding.
fn im2col(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let (h, w, k) = (s.height, s.width, s.kernel);
    let pad = (k / 2) as isize;
    let hw = s.pixels();
    let mut cols = vec![0.0; s.patch() * hw];
    for c in 0..s.in_ch {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src_row = &plane[si as usize * w..(si as usize + 1) * w];
                    let j0 = (-dj).max(0) as usize;
                    let j1 = (w as isize - dj).min(w as isize).max(0) as usize;
                    if j0 < j1 {
                        let s0 = (j0 as isize + dj) as usize;
                        dst[i * w + j0..i * w + j1].copy_from_slice(&src_row[s0..s0 + j1 - j0]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto `[in_ch, h, w]`.
fn col2im(cols: &[f64], s: &ConvShape) -> Vec<f64> {
    let (h, w, k) = (s.height, s.width, s.kernel);
    let pad = (k / 2) as isize;
    let hw = s.pixels();
    let mut x = vec![0.0; s.in_ch * hw];
    for c in 0..s.in_ch {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let j0 = (-dj).max(0) as usize;
                    let j1 = (w as isize - dj).min(w as isize).max(0) as usize;
                    if j0 < j1 {
                        let base = si as usize * w + (j0 as isize + dj) as usize;
                        for (p, &v) in plane[base..base + j1 - j0].iter_mut().zip(&src[i * w + j0..i * w + j1]) {
                            *p += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `C = A B` for row-major operands given as (rows, cols, row-stride, col-stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    precision: Precision,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    match precision {
        Precision::F64 => unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0,
                a_strides.1,
                b.as_ptr(),
                b_strides.0,
                b_strides.1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        },
        Precision::F32 => {
            let a32: Vec<f32> = a.iter().map(|&v| v as f32).collect();
            let b32: Vec<f32> = b.iter().map(|&v| v as f32).collect();
            let mut c32 = vec![0f32; m * n];
            unsafe {
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    a_strides.0,
                    a_strides.1,
                    b32.as_ptr(),
                    b_strides.0,
                    b_strides.1,
                    0.0,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for (dst, src) in c.iter_mut().zip(c32) {
                *dst = src as f64;
            }
        }
    }
}

/// Cross-correlation of `x: [in_ch, h, w]` with `weight: [out_ch, in_ch, k, k]`.
pub fn conv2d_same(x: &[f64], weight: &[f64], s: &ConvShape, precision: Precision) -> Vec<f64> {
    let cols = im2col(x, s);
    let (p, hw) = (s.patch(), s.pixels());
    let mut out = vec![0.0; s.out_ch * hw];
    gemm(
        precision,
        s.out_ch,
        p,
        hw,
        weight,
        (p as isize, 1),
        &cols,
        (hw as isize, 1),
        &mut out,
    );
    out
}

/// Gradients of [`conv2d_same`] with respect to the input and the weights.
pub fn conv2d_same_backward(
    x: &[f64],
    weight: &[f64],
    upstream: &[f64],
    s: &ConvShape,
    precision: Precision,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (p, hw) = (s.patch(), s.pixels());
    let dw = need_weight.then(|| {
        let cols = im2col(x, s);
        let mut dw = vec![0.0; s.out_ch * p];
        // dW = dY cols^T
        gemm(
            precision,
            s.out_ch,
            hw,
            p,
            upstream,
            (hw as isize, 1),
            &cols,
            (1, hw as isize),
            &mut dw,
        );
        dw
    });
    let dx = need_input.then(|| {
        let mut dcols = vec![0.0; p * hw];
        // dcols = W^T dY
        gemm(
            precision,
            p,
            s.out_ch,
            hw,
            weight,
            (1, p as isize),
            upstream,
            (hw as isize, 1),
            &mut dcols,
        );
        col2im(&dcols, s)
    });
    (dx, dw)
}

/// How the instance-norm affine parameters enter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AffineForm {
    /// `gamma * (xhat + beta)`
    #[default]
    ScaledShift,
    /// `gamma * xhat + beta`
    Conventional,
}

/// Saved statistics from the instance-norm forward pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub xhat: Vec<f64>,
    pub sigma: Vec<f64>,
    pub floored: Vec<bool>,
}

/// Per-channel standardization over `[c, hw]`, with `sigma` floored at `eps`.
pub fn instance_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    channels: usize,
    eps: f64,
    form: AffineForm,
) -> (Vec<f64>, NormStats) {
    let hw = x.len() / channels;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut sigmas = Vec::with_capacity(channels);
    let mut floored = Vec::with_capacity(channels);
    for c in 0..channels {
        let xs = &x[c * hw..(c + 1) * hw];
        let mean = xs.iter().sum::<f64>() / hw as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        let sd = var.sqrt();
        let is_floored = sd < eps;
        let sigma = if is_floored { eps } else { sd };
        let inv = 1.0 / sigma;
        let (g, b) = (gamma[c], beta[c]);
        for i in 0..hw {
            let xh = (xs[i] - mean) * inv;
            xhat[c * hw + i] = xh;
            out[c * hw + i] = match form {
                AffineForm::ScaledShift => g * (xh + b),
                AffineForm::Conventional => g * xh + b,
            };
        }
        sigmas.push(sigma);
        floored.push(is_floored);
    }
    (
        out,
        NormStats {
            xhat,
            sigma: sigmas,
            floored,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)` for [`instance_norm`].
pub fn instance_norm_backward(
    upstream: &[f64],
    gamma: &[f64],
    beta: &[f64],
    stats: &NormStats,
    channels: usize,
    form: AffineForm,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = upstream.len() / channels;
    let n = hw as f64;
    let mut dx = vec![0.0; upstream.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        let dy = &upstream[c * hw..(c + 1) * hw];
        let xh = &stats.xhat[c * hw..(c + 1) * hw];
        let g = gamma[c];
        let (mut sdy, mut sdy_xh) = (0.0, 0.0);
        for i in 0..hw {
            sdy += dy[i];
            sdy_xh += dy[i] * xh[i];
        }
        match form {
            AffineForm::ScaledShift => {
                dgamma[c] = sdy_xh + beta[c] * sdy;
                dbeta[c] = g * sdy;
            }
            AffineForm::Conventional => {
                dgamma[c] = sdy_xh;
                dbeta[c] = sdy;
            }
        }
        // dxhat = g * dy
        let mean_d = g * sdy / n;
        let mean_dx = g * sdy_xh / n;
        let inv = 1.0 / stats.sigma[c];
        let out = &mut dx[c * hw..(c + 1) * hw];
        if stats.floored[c] {
            for i in 0..hw {
                out[i] = (g * dy[i] - mean_d) * inv;
            }
        } else {
            for i in 0..hw {
                out[i] = (g * dy[i] - mean_d - xh[i] * mean_dx) * inv;
            }
        }
    }
    (dx, dgamma, dbeta)
}
