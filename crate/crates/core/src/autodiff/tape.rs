use std::sync::Arc;

use indexmap::IndexMap;
use num_complex::Complex64;

use super::kernels::{self, AffineForm, ConvShape, NormStats, Precision};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::fft::{fft2_inplace, ifft2_inplace};
use crate::fidelity::{amplitude_gradient, amplitude_gradient_vjp, EPS_MAG};
use crate::forward_models::CdpModel;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable arrays.
pub type ParamSet = IndexMap<String, Tensor>;

/// The closed set of differentiable primitives.
#[derive(Debug, Clone)]
pub enum Op {
    /// `[n, cin, h, w] * [cout, cin, k, k] -> [n, cout, h, w]`, stride 1, zero "same" padding.
    Conv2dSame,
    /// `[n, c, h, w], gamma [c], beta [c]`; statistics per sample and channel.
    InstanceNorm {
        eps: f64,
        form: AffineForm,
    },
    /// Subgradient at 0 is 0.
    Relu,
    Add,
    Sub,
    /// Multiplication by a fixed constant.
    Scale(f64),
    /// `[1] x t`: a differentiable scalar times a tensor.
    ScalarMul,
    Reciprocal,
    Softplus,
    /// `A x` (or `A^T x`) for `A: [m, n]`.
    Matvec {
        transpose: bool,
    },
    /// Unitary 2-D DFT on `[h, w, 2]`.
    Fft2,
    Ifft2,
    /// `[.., 2] -> [..]`.
    ComplexModulus,
    ElementwiseMul,
    Reshape(Vec<usize>),
    /// Mean squared difference of two same-shape tensors.
    L2Loss,
    /// Gathers entries of the flattened input; complex entries when `complex`.
    MaskedSelect {
        indices: Arc<[usize]>,
        complex: bool,
    },
    /// Adjoint of [`Op::MaskedSelect`]: scatters into a zero tensor of `shape`.
    MaskedScatter {
        indices: Arc<[usize]>,
        complex: bool,
        shape: Vec<usize>,
    },
    /// `[..] -> [.., 2]` with zero imaginary part.
    RealToComplex,
    /// `[.., 2] -> [..]` real part.
    ComplexRe,
    /// Interleaved `[.., 2]` to planar `[2, ..]`.
    ComplexSplit,
    /// Planar `[2, ..]` to interleaved `[.., 2]`.
    ComplexMerge,
    /// `Re A^H((|Ax| - s) Ax/|Ax|)` for a real image `[h, w]`.
    AmplitudeGrad {
        model: Arc<CdpModel>,
        sqrt_y: Arc<[f64]>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2dSame => "conv2d-same",
            Op::InstanceNorm { .. } => "instance-norm",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Scale(_) => "scale",
            Op::ScalarMul => "scalar-mul",
            Op::Reciprocal => "reciprocal",
            Op::Softplus => "softplus",
            Op::Matvec { .. } => "matvec",
            Op::Fft2 => "fft2",
            Op::Ifft2 => "ifft2",
            Op::ComplexModulus => "complex-modulus",
            Op::ElementwiseMul => "elementwise-mul",
            Op::Reshape(_) => "reshape",
            Op::L2Loss => "l2-loss",
            Op::MaskedSelect { .. } => "masked-select",
            Op::MaskedScatter { .. } => "masked-scatter",
            Op::RealToComplex => "real-to-complex",
            Op::ComplexRe => "complex-re",
            Op::ComplexSplit => "complex-split",
            Op::ComplexMerge => "complex-merge",
            Op::AmplitudeGrad { .. } => "amplitude-grad",
        }
    }

    /// Parses the primitives that carry no attributes (or default ones).
    pub fn from_name(name: &str) -> Result<Op> {
        Ok(match name {
            "conv2d-same" => Op::Conv2dSame,
            "instance-norm" => Op::InstanceNorm {
                eps: 1e-5,
                form: AffineForm::default(),
            },
            "relu" => Op::Relu,
            "add" => Op::Add,
            "sub" => Op::Sub,
            "scalar-mul" => Op::ScalarMul,
            "reciprocal" => Op::Reciprocal,
            "softplus" => Op::Softplus,
            "matvec" => Op::Matvec { transpose: false },
            "fft2" => Op::Fft2,
            "ifft2" => Op::Ifft2,
            "complex-modulus" => Op::ComplexModulus,
            "elementwise-mul" => Op::ElementwiseMul,
            "l2-loss" => Op::L2Loss,
            "real-to-complex" => Op::RealToComplex,
            "complex-re" => Op::ComplexRe,
            "complex-split" => Op::ComplexSplit,
            "complex-merge" => Op::ComplexMerge,
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }

    fn arity(&self) -> usize {
        match self {
            Op::InstanceNorm { .. } => 3,
            Op::Conv2dSame
            | Op::Add
            | Op::Sub
            | Op::ScalarMul
            | Op::Matvec { .. }
            | Op::ElementwiseMul
            | Op::L2Loss => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
enum Saved {
    None,
    Norm(NormStats),
}

#[derive(Debug, Clone)]
enum Kind {
    Param,
    Constant,
    Op(Op),
}

#[derive(Debug, Clone)]
struct Node {
    kind: Kind,
    inputs: Vec<Var>,
    value: Tensor,
    saved: Saved,
    requires_grad: bool,
}

/// Records primitive applications for reverse-mode differentiation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    precision: Precision,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
    params: ParamSet,
}

impl Gradients {
    pub fn params(&self) -> &ParamSet {
        &self.params
    }
    pub fn into_params(self) -> ParamSet {
        self.params
    }
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }
    /// Gradient with respect to any recorded value; `None` if unreachable.
    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    fn push(&mut self, kind: Kind, inputs: Vec<Var>, value: Tensor, saved: Saved, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            saved,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named trainable leaf. Registering a name twice returns the
    /// existing leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(Kind::Param, Vec::new(), value, Saved::None, true);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Like [`Tape::param`] but clones `value` only when `name` is new.
    pub fn leaf(&mut self, name: &str, value: &Tensor) -> Var {
        match self.params.get(name) {
            Some(&v) => v,
            None => self.param(name, value.clone()),
        }
    }

    /// Registers every entry of `set` as a leaf, returning their handles by name.
    pub fn params_from(&mut self, set: &ParamSet) -> IndexMap<String, Var> {
        set.iter().map(|(k, t)| (k.clone(), self.param(k, t.clone()))).collect()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Kind::Constant, Vec::new(), value, Saved::None, false)
    }

    /// Applies `op` to `inputs`, appending a node.
    pub fn record(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() {
            return Err(Error::InvalidParameter(format!(
                "{} takes {} inputs, got {}",
                op.name(),
                op.arity(),
                inputs.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::InvalidParameter(format!("unknown variable {}", bad.0)));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = forward(&op, &vals, self.precision)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Kind::Op(op), inputs.to_vec(), value, saved, rg))
    }

    /// Records a primitive looked up by name.
    pub fn record_named(&mut self, name: &str, inputs: &[Var]) -> Result<Var> {
        self.record(Op::from_name(name)?, inputs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        self.record(Op::Conv2dSame, &[x, w])
    }
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, form: AffineForm) -> Result<Var> {
        self.record(Op::InstanceNorm { eps, form }, &[x, gamma, beta])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu, &[x])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub, &[a, b])
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(c), &[x])
    }
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        self.record(Op::ScalarMul, &[s, x])
    }
    pub fn reciprocal(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Reciprocal, &[x])
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Softplus, &[x])
    }
    pub fn matvec(&mut self, a: Var, x: Var, transpose: bool) -> Result<Var> {
        self.record(Op::Matvec { transpose }, &[a, x])
    }
    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Fft2, &[x])
    }
    pub fn ifft2(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Ifft2, &[x])
    }
    pub fn complex_modulus(&mut self, x: Var) -> Result<Var> {
        self.record(Op::ComplexModulus, &[x])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::ElementwiseMul, &[a, b])
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(shape.to_vec()), &[x])
    }
    pub fn l2_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::L2Loss, &[a, b])
    }
    pub fn masked_select(&mut self, x: Var, indices: Arc<[usize]>, complex: bool) -> Result<Var> {
        self.record(Op::MaskedSelect { indices, complex }, &[x])
    }
    pub fn masked_scatter(&mut self, x: Var, indices: Arc<[usize]>, complex: bool, shape: &[usize]) -> Result<Var> {
        self.record(
            Op::MaskedScatter {
                indices,
                complex,
                shape: shape.to_vec(),
            },
            &[x],
        )
    }
    pub fn real_to_complex(&mut self, x: Var) -> Result<Var> {
        self.record(Op::RealToComplex, &[x])
    }
    pub fn complex_re(&mut self, x: Var) -> Result<Var> {
        self.record(Op::ComplexRe, &[x])
    }
    pub fn complex_split(&mut self, x: Var) -> Result<Var> {
        self.record(Op::ComplexSplit, &[x])
    }
    pub fn complex_merge(&mut self, x: Var) -> Result<Var> {
        self.record(Op::ComplexMerge, &[x])
    }
    pub fn amplitude_grad(&mut self, x: Var, model: Arc<CdpModel>, sqrt_y: Arc<[f64]>) -> Result<Var> {
        self.record(Op::AmplitudeGrad { model, sqrt_y }, &[x])
    }

    /// Recomputes every non-leaf node from its inputs and returns all values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.kind {
                Kind::Op(op) => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &values[v.0]).collect();
                    forward(op, &ins, self.precision)?.0
                }
                _ => node.value.clone(),
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Signs of every relu input, used to detect kinks in finite differences.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Kind::Op(Op::Relu) = node.kind {
                out.extend(self.nodes[node.inputs[0].0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Reverse sweep from `output` seeded with `seed`.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let out = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown variable {}", output.0)))?;
        if out.value.shape() != seed.shape() {
            return Err(dim_err(format!(
                "seed has shape {:?}, output has {:?}",
                seed.shape(),
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Kind::Op(op) = &node.kind else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let in_grads = vjp(op, &ins, &node.value, &node.saved, &g, &needs, self.precision);
            grads[idx] = Some(g);
            for (v, ig) in node.inputs.iter().zip(in_grads) {
                if let Some(ig) = ig {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&ig),
                        slot => *slot = Some(ig),
                    }
                }
            }
        }
        let params = self
            .params
            .iter()
            .map(|(name, &v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { by_var: grads, params })
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn complex_dims(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().last() != Some(&2) {
        return Err(dim_err(format!(
            "{what} needs a trailing complex axis of 2, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn image_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[h, w, 2] => Ok((h, w)),
        s => Err(dim_err(format!("{what} needs shape [h, w, 2], got {s:?}"))),
    }
}

fn to_complex(data: &[f64]) -> Vec<Complex64> {
    data.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

fn from_complex(data: &[Complex64]) -> Vec<f64> {
    data.iter().flat_map(|z| [z.re, z.im]).collect()
}

fn dft(x: &Tensor, inverse: bool) -> Tensor {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let mut buf = to_complex(x.data());
    if inverse {
        ifft2_inplace(&mut buf, h, w);
    } else {
        fft2_inplace(&mut buf, h, w);
    }
    Tensor::new(x.shape().to_vec(), from_complex(&buf)).expect("shape")
}

fn conv_shape(x: &Tensor, w: &Tensor) -> Result<(usize, ConvShape)> {
    let (&[n, cin, h, wd], &[cout, wcin, k, k2]) = (x.shape(), w.shape()) else {
        return Err(dim_err(format!(
            "conv2d-same needs [n, c, h, w] and [cout, cin, k, k], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    };
    if wcin != cin || k != k2 || k % 2 == 0 {
        return Err(dim_err(format!(
            "weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    if h < k || wd < k {
        return Err(dim_err(format!(
            "spatial size {h}x{wd} smaller than the {k}x{k} kernel"
        )));
    }
    Ok((
        n,
        ConvShape {
            in_ch: cin,
            out_ch: cout,
            height: h,
            width: wd,
            kernel: k,
        },
    ))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else if x < -40.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn forward(op: &Op, ins: &[&Tensor], precision: Precision) -> Result<(Tensor, Saved)> {
    let plain = |t: Tensor| Ok((t, Saved::None));
    match op {
        Op::Conv2dSame => {
            let (n, s) = conv_shape(ins[0], ins[1])?;
            let (xin, xout) = (s.in_ch * s.height * s.width, s.out_ch * s.height * s.width);
            let mut out = Vec::with_capacity(n * xout);
            for b in 0..n {
                out.extend(kernels::conv2d_same(
                    &ins[0].data()[b * xin..(b + 1) * xin],
                    ins[1].data(),
                    &s,
                    precision,
                ));
            }
            plain(Tensor::new(vec![n, s.out_ch, s.height, s.width], out)?)
        }
        Op::InstanceNorm { eps, form } => {
            let &[n, c, h, w] = ins[0].shape() else {
                return Err(dim_err(format!(
                    "instance-norm needs [n, c, h, w], got {:?}",
                    ins[0].shape()
                )));
            };
            if ins[1].len() != c || ins[2].len() != c {
                return Err(dim_err(format!(
                    "affine vectors must have {c} entries, got {} and {}",
                    ins[1].len(),
                    ins[2].len()
                )));
            }
            if h * w < 2 {
                return Err(Error::DegenerateStatistics(h * w));
            }
            let per = c * h * w;
            let mut out = Vec::with_capacity(n * per);
            let mut stats = NormStats {
                xhat: Vec::with_capacity(n * per),
                sigma: Vec::with_capacity(n * c),
                floored: Vec::with_capacity(n * c),
            };
            for b in 0..n {
                let (y, st) = kernels::instance_norm(
                    &ins[0].data()[b * per..(b + 1) * per],
                    ins[1].data(),
                    ins[2].data(),
                    c,
                    *eps,
                    *form,
                );
                out.extend(y);
                stats.xhat.extend(st.xhat);
                stats.sigma.extend(st.sigma);
                stats.floored.extend(st.floored);
            }
            Ok((Tensor::new(ins[0].shape().to_vec(), out)?, Saved::Norm(stats)))
        }
        Op::Relu => plain(ins[0].map(|v| v.max(0.0))),
        Op::Add | Op::Sub | Op::ElementwiseMul => {
            same_shape(ins[0], ins[1], op.name())?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |a, b| a + b,
                Op::Sub => |a, b| a - b,
                _ => |a, b| a * b,
            };
            let data = ins[0]
                .data()
                .iter()
                .zip(ins[1].data())
                .map(|(&a, &b)| f(a, b))
                .collect();
            plain(Tensor::new(ins[0].shape().to_vec(), data)?)
        }
        Op::Scale(c) => plain(ins[0].map(|v| v * c)),
        Op::ScalarMul => {
            if ins[0].len() != 1 {
                return Err(dim_err(format!(
                    "scalar-mul needs a 1-element scale, got {:?}",
                    ins[0].shape()
                )));
            }
            let s = ins[0].data()[0];
            plain(ins[1].map(|v| s * v))
        }
        Op::Reciprocal => plain(ins[0].map(|v| 1.0 / v)),
        Op::Softplus => plain(ins[0].map(softplus)),
        Op::Matvec { transpose } => {
            let &[m, n] = ins[0].shape() else {
                return Err(dim_err(format!("matvec needs a 2-D matrix, got {:?}", ins[0].shape())));
            };
            let (rows, cols) = if *transpose { (n, m) } else { (m, n) };
            if ins[1].len() != cols {
                return Err(dim_err(format!(
                    "matvec: vector has {} entries, expected {cols}",
                    ins[1].len()
                )));
            }
            let (a, x) = (ins[0].data(), ins[1].data());
            let out = if *transpose {
                let mut out = vec![0.0; rows];
                for (i, &xi) in x.iter().enumerate() {
                    for (o, &aij) in out.iter_mut().zip(&a[i * n..(i + 1) * n]) {
                        *o += aij * xi;
                    }
                }
                out
            } else {
                (0..rows)
                    .map(|i| a[i * n..(i + 1) * n].iter().zip(x).map(|(p, q)| p * q).sum())
                    .collect()
            };
            plain(Tensor::vector(out))
        }
        Op::Fft2 | Op::Ifft2 => {
            image_dims(ins[0], op.name())?;
            plain(dft(ins[0], matches!(op, Op::Ifft2)))
        }
        Op::ComplexModulus => {
            complex_dims(ins[0], op.name())?;
            let data = ins[0].data().chunks_exact(2).map(|p| p[0].hypot(p[1])).collect();
            let shape = ins[0].shape()[..ins[0].shape().len() - 1].to_vec();
            plain(Tensor::new(shape, data)?)
        }
        Op::Reshape(shape) => plain(ins[0].clone().reshaped(shape.clone())?),
        Op::L2Loss => {
            same_shape(ins[0], ins[1], op.name())?;
            let n = ins[0].len().max(1) as f64;
            let s: f64 = ins[0]
                .data()
                .iter()
                .zip(ins[1].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            plain(Tensor::scalar(s / n))
        }
        Op::MaskedSelect { indices, complex } => {
            let k = if *complex { 2 } else { 1 };
            if *complex {
                complex_dims(ins[0], op.name())?;
            }
            let count = ins[0].len() / k;
            if let Some(&bad) = indices.iter().find(|&&i| i >= count) {
                return Err(dim_err(format!("index {bad} out of range for {count} entries")));
            }
            let d = ins[0].data();
            let data: Vec<f64> = indices
                .iter()
                .flat_map(|&i| d[i * k..(i + 1) * k].iter().copied())
                .collect();
            let shape = if *complex {
                vec![indices.len(), 2]
            } else {
                vec![indices.len()]
            };
            plain(Tensor::new(shape, data)?)
        }
        Op::MaskedScatter {
            indices,
            complex,
            shape,
        } => {
            let k = if *complex { 2 } else { 1 };
            let total: usize = shape.iter().product();
            if ins[0].len() != indices.len() * k {
                return Err(dim_err(format!(
                    "masked-scatter: {} values for {} indices",
                    ins[0].len(),
                    indices.len()
                )));
            }
            if let Some(&bad) = indices.iter().find(|&&i| (i + 1) * k > total) {
                return Err(dim_err(format!("index {bad} out of range for shape {shape:?}")));
            }
            let mut out = vec![0.0; total];
            for (j, &i) in indices.iter().enumerate() {
                out[i * k..(i + 1) * k].copy_from_slice(&ins[0].data()[j * k..(j + 1) * k]);
            }
            plain(Tensor::new(shape.clone(), out)?)
        }
        Op::RealToComplex => {
            let mut shape = ins[0].shape().to_vec();
            shape.push(2);
            plain(Tensor::new(
                shape,
                ins[0].data().iter().flat_map(|&v| [v, 0.0]).collect(),
            )?)
        }
        Op::ComplexRe => {
            complex_dims(ins[0], op.name())?;
            let shape = ins[0].shape()[..ins[0].shape().len() - 1].to_vec();
            plain(Tensor::new(shape, ins[0].data().iter().step_by(2).copied().collect())?)
        }
        Op::ComplexSplit => {
            complex_dims(ins[0], op.name())?;
            let d = ins[0].data();
            let mut data: Vec<f64> = d.iter().step_by(2).copied().collect();
            data.extend(d.iter().skip(1).step_by(2));
            let mut shape = vec![2];
            shape.extend_from_slice(&ins[0].shape()[..ins[0].shape().len() - 1]);
            plain(Tensor::new(shape, data)?)
        }
        Op::ComplexMerge => {
            if ins[0].shape().first() != Some(&2) {
                return Err(dim_err(format!(
                    "complex-merge needs a leading axis of 2, got {:?}",
                    ins[0].shape()
                )));
            }
            let half = ins[0].len() / 2;
            let d = ins[0].data();
            let data = (0..half).flat_map(|i| [d[i], d[half + i]]).collect();
            let mut shape = ins[0].shape()[1..].to_vec();
            shape.push(2);
            plain(Tensor::new(shape, data)?)
        }
        Op::AmplitudeGrad { model, sqrt_y } => {
            let (h, w) = model.shape();
            if ins[0].shape() != [h, w] {
                return Err(dim_err(format!(
                    "amplitude-grad expects [{h}, {w}], got {:?}",
                    ins[0].shape()
                )));
            }
            if sqrt_y.len() != model.num_measurements() {
                return Err(dim_err("measurement length does not match the operator"));
            }
            plain(Tensor::new(
                vec![h, w],
                amplitude_gradient(model, sqrt_y, ins[0].data()),
            )?)
        }
    }
}

fn vjp(
    op: &Op,
    ins: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    g: &Tensor,
    needs: &[bool],
    precision: Precision,
) -> Vec<Option<Tensor>> {
    let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data).expect("shape");
    match op {
        Op::Conv2dSame => {
            let (n, s) = conv_shape(ins[0], ins[1]).expect("validated in forward");
            let (xin, xout) = (s.in_ch * s.height * s.width, s.out_ch * s.height * s.width);
            let mut dx = needs[0].then(|| Vec::with_capacity(ins[0].len()));
            let mut dw = needs[1].then(|| vec![0.0; ins[1].len()]);
            for b in 0..n {
                let (bx, bw) = kernels::conv2d_same_backward(
                    &ins[0].data()[b * xin..(b + 1) * xin],
                    ins[1].data(),
                    &g.data()[b * xout..(b + 1) * xout],
                    &s,
                    precision,
                    needs[0],
                    needs[1],
                );
                if let (Some(dx), Some(bx)) = (dx.as_mut(), bx) {
                    dx.extend(bx);
                }
                if let (Some(dw), Some(bw)) = (dw.as_mut(), bw) {
                    for (a, b) in dw.iter_mut().zip(bw) {
                        *a += b;
                    }
                }
            }
            vec![dx.map(|d| like(ins[0], d)), dw.map(|d| like(ins[1], d))]
        }
        Op::InstanceNorm { form, .. } => {
            let Saved::Norm(stats) = saved else {
                unreachable!("instance-norm saves statistics")
            };
            let &[n, c, h, w] = ins[0].shape() else { unreachable!() };
            let per = c * h * w;
            let mut dx = Vec::with_capacity(ins[0].len());
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                let st = NormStats {
                    xhat: stats.xhat[b * per..(b + 1) * per].to_vec(),
                    sigma: stats.sigma[b * c..(b + 1) * c].to_vec(),
                    floored: stats.floored[b * c..(b + 1) * c].to_vec(),
                };
                let (bx, bg, bb) = kernels::instance_norm_backward(
                    &g.data()[b * per..(b + 1) * per],
                    ins[1].data(),
                    ins[2].data(),
                    &st,
                    c,
                    *form,
                );
                dx.extend(bx);
                for i in 0..c {
                    dgamma[i] += bg[i];
                    dbeta[i] += bb[i];
                }
            }
            vec![
                needs[0].then(|| like(ins[0], dx)),
                needs[1].then(|| like(ins[1], dgamma)),
                needs[2].then(|| like(ins[2], dbeta)),
            ]
        }
        Op::Relu => {
            let d = ins[0]
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                .collect();
            vec![Some(like(ins[0], d))]
        }
        Op::Add => vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())],
        Op::Sub => vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))],
        Op::ElementwiseMul => {
            let prod = |t: &Tensor| like(t, t.data().iter().zip(g.data()).map(|(a, b)| a * b).collect());
            vec![needs[0].then(|| prod(ins[1])), needs[1].then(|| prod(ins[0]))]
        }
        Op::Scale(c) => vec![Some(g.map(|v| v * c))],
        Op::ScalarMul => {
            let s = ins[0].data()[0];
            let ds: f64 = ins[1].data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            vec![
                needs[0].then(|| like(ins[0], vec![ds])),
                needs[1].then(|| g.map(|v| s * v)),
            ]
        }
        Op::Reciprocal => {
            let d = out.data().iter().zip(g.data()).map(|(&r, &gi)| -gi * r * r).collect();
            vec![Some(like(ins[0], d))]
        }
        Op::Softplus => {
            let d = ins[0]
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &gi)| gi * sigmoid(x))
                .collect();
            vec![Some(like(ins[0], d))]
        }
        Op::Matvec { transpose } => {
            let &[m, n] = ins[0].shape() else { unreachable!() };
            let (a, x, gd) = (ins[0].data(), ins[1].data(), g.data());
            // y = A x: dA = g x^T, dx = A^T g.  y = A^T x: dA = x g^T, dx = A g.
            let (left, right) = if *transpose { (x, gd) } else { (gd, x) };
            let da = needs[0].then(|| {
                let mut da = vec![0.0; m * n];
                for (i, &li) in left.iter().enumerate() {
                    if li != 0.0 {
                        for (d, &rj) in da[i * n..(i + 1) * n].iter_mut().zip(right) {
                            *d = li * rj;
                        }
                    }
                }
                like(ins[0], da)
            });
            let dx = needs[1].then(|| {
                let data = if *transpose {
                    (0..m)
                        .map(|i| a[i * n..(i + 1) * n].iter().zip(gd).map(|(p, q)| p * q).sum())
                        .collect()
                } else {
                    let mut out = vec![0.0; n];
                    for (i, &gi) in gd.iter().enumerate() {
                        for (o, &aij) in out.iter_mut().zip(&a[i * n..(i + 1) * n]) {
                            *o += aij * gi;
                        }
                    }
                    out
                };
                like(ins[1], data)
            });
            vec![da, dx]
        }
        Op::Fft2 => vec![Some(dft(g, true))],
        Op::Ifft2 => vec![Some(dft(g, false))],
        Op::ComplexModulus => {
            let d = ins[0]
                .data()
                .chunks_exact(2)
                .zip(out.data())
                .zip(g.data())
                .flat_map(|((z, &m), &gi)| {
                    if m < EPS_MAG {
                        [0.0, 0.0]
                    } else {
                        [gi * z[0] / m, gi * z[1] / m]
                    }
                })
                .collect();
            vec![Some(like(ins[0], d))]
        }
        Op::Reshape(_) => vec![Some(like(ins[0], g.data().to_vec()))],
        Op::L2Loss => {
            let n = ins[0].len().max(1) as f64;
            let c = 2.0 * g.data()[0] / n;
            let diff: Vec<f64> = ins[0]
                .data()
                .iter()
                .zip(ins[1].data())
                .map(|(a, b)| c * (a - b))
                .collect();
            vec![
                needs[0].then(|| like(ins[0], diff.clone())),
                needs[1].then(|| like(ins[1], diff.iter().map(|v| -v).collect())),
            ]
        }
        Op::MaskedSelect { indices, complex } => {
            let k = if *complex { 2 } else { 1 };
            let mut d = vec![0.0; ins[0].len()];
            for (j, &i) in indices.iter().enumerate() {
                for t in 0..k {
                    d[i * k + t] += g.data()[j * k + t];
                }
            }
            vec![Some(like(ins[0], d))]
        }
        Op::MaskedScatter { indices, complex, .. } => {
            let k = if *complex { 2 } else { 1 };
            let d = indices
                .iter()
                .flat_map(|&i| g.data()[i * k..(i + 1) * k].iter().copied())
                .collect();
            vec![Some(like(ins[0], d))]
        }
        Op::RealToComplex => vec![Some(like(ins[0], g.data().iter().step_by(2).copied().collect()))],
        Op::ComplexRe => vec![Some(like(ins[0], g.data().iter().flat_map(|&v| [v, 0.0]).collect()))],
        Op::ComplexSplit => {
            let half = g.len() / 2;
            let d = g.data();
            vec![Some(like(
                ins[0],
                (0..half).flat_map(|i| [d[i], d[half + i]]).collect(),
            ))]
        }
        Op::ComplexMerge => {
            let d = g.data();
            let mut data: Vec<f64> = d.iter().step_by(2).copied().collect();
            data.extend(d.iter().skip(1).step_by(2));
            vec![Some(like(ins[0], data))]
        }
        Op::AmplitudeGrad { model, sqrt_y } => vec![Some(like(
            ins[0],
            amplitude_gradient_vjp(model, sqrt_y, ins[0].data(), g.data()),
        ))],
    }
}
