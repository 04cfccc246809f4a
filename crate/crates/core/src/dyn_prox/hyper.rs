use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Architecture of the weight generators.
///
/// A generator of depth 0 is a plain learned array; depth `d >= 1` is a stack
/// of `d` fully connected layers from `theta` to the target, with `hidden`
/// units and a ReLU between layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperConfig {
    pub channels: usize,
    pub kernel: usize,
    pub iterations: usize,
    pub theta_dim: usize,
    pub conv_depth: usize,
    pub norm_depth: usize,
    /// Width of hidden layers; `0` means `channels`.
    pub hidden: usize,
    /// Share one generator across all iterations.
    pub tied: bool,
    /// Scale of the initial output-layer weights relative to fan-in init.
    pub output_gain: f64,
    /// Standard deviation of the initial `theta` coefficients.
    pub coef_std: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            kernel: 3,
            iterations: 10,
            theta_dim: 1,
            conv_depth: 1,
            norm_depth: 2,
            hidden: 0,
            tied: false,
            output_gain: 0.001,
            coef_std: 1e-3,
        }
    }
}

/// The generator combinations of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Punet,
    Dconv1,
    Dconv2,
    Din1,
    Din2,
    Din3,
    Dconv1In1,
    Dconv2In1,
    Dconv2In2,
    Dpunet,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Punet,
        Variant::Dconv1,
        Variant::Dconv2,
        Variant::Din1,
        Variant::Din2,
        Variant::Din3,
        Variant::Dconv1In1,
        Variant::Dconv2In1,
        Variant::Dconv2In2,
        Variant::Dpunet,
    ];

    /// `(conv_depth, norm_depth)`.
    pub fn depths(self) -> (usize, usize) {
        match self {
            Variant::Punet => (0, 0),
            Variant::Dconv1 => (1, 0),
            Variant::Dconv2 => (2, 0),
            Variant::Din1 => (0, 1),
            Variant::Din2 => (0, 2),
            Variant::Din3 => (0, 3),
            Variant::Dconv1In1 => (1, 1),
            Variant::Dconv2In1 => (2, 1),
            Variant::Dconv2In2 => (2, 2),
            Variant::Dpunet => (1, 2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Punet => "punet",
            Variant::Dconv1 => "dconv1",
            Variant::Dconv2 => "dconv2",
            Variant::Din1 => "din1",
            Variant::Din2 => "din2",
            Variant::Din3 => "din3",
            Variant::Dconv1In1 => "dconv1-in1",
            Variant::Dconv2In1 => "dconv2-in1",
            Variant::Dconv2In2 => "dconv2-in2",
            Variant::Dpunet => "dpunet",
        }
    }

    pub fn config(self, theta_dim: usize) -> HyperConfig {
        let (conv_depth, norm_depth) = self.depths();
        HyperConfig {
            theta_dim,
            conv_depth,
            norm_depth,
            ..HyperConfig::default()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

pub(crate) fn conv_shapes(c: usize, k: usize) -> [(usize, usize, usize, usize); 5] {
    [(c, 1, k, k), (c, c, k, k), (c, c, k, k), (c, c, k, k), (1, c, k, k)]
}

impl HyperConfig {
    fn hidden_width(&self) -> usize {
        if self.hidden == 0 {
            self.channels
        } else {
            self.hidden
        }
    }

    fn generator_count(&self) -> usize {
        if self.tied {
            1
        } else {
            self.iterations
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.iterations == 0 || self.theta_dim == 0 {
            return Err(Error::InvalidConfig(
                "channels, iterations and theta_dim must be positive".into(),
            ));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("kernel must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    fn prefix(&self, iteration: usize) -> String {
        if self.tied {
            "shared".to_string()
        } else {
            format!("it{iteration}")
        }
    }

    /// `(name, shape)` of every array a depth-`depth` generator of an
    /// `out`-sized target owns.
    fn stack_shapes(&self, base: &str, depth: usize, target: &[usize]) -> Vec<(String, Vec<usize>)> {
        if depth == 0 {
            return vec![(base.to_string(), target.to_vec())];
        }
        let out: usize = target.iter().product();
        let h = self.hidden_width();
        (0..depth)
            .flat_map(|i| {
                let fan_in = if i == 0 { self.theta_dim } else { h };
                let fan_out = if i + 1 == depth { out } else { h };
                [
                    (format!("{base}.fc{i}.A"), vec![fan_out, fan_in]),
                    (format!("{base}.fc{i}.b"), vec![fan_out]),
                ]
            })
            .collect()
    }

    /// Every learnable array, in a fixed order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, k) = (self.channels, self.kernel);
        let mut out = Vec::new();
        for it in 0..self.generator_count() {
            let p = self.prefix(it);
            for (j, s) in conv_shapes(c, k).iter().enumerate() {
                let target = [s.0, s.1, s.2, s.3];
                out.extend(self.stack_shapes(&format!("{p}.conv{}", j + 1), self.conv_depth, &target));
            }
            for j in 1..=4 {
                for which in ["gamma", "beta"] {
                    out.extend(self.stack_shapes(&format!("{p}.in{j}.{which}"), self.norm_depth, &[c]));
                }
            }
        }
        out
    }
}

/// Number of trainable scalars in the generators described by `config`.
pub fn count_params(config: &HyperConfig) -> usize {
    config.shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Handles to one iteration's generated CNN weights on a tape.
#[derive(Debug, Clone)]
pub struct ProxVars {
    pub conv: Vec<Var>,
    pub gamma: Vec<Var>,
    pub beta: Vec<Var>,
}

/// The generator parameters of a dynamic proximal network.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNetParams {
    config: HyperConfig,
    params: ParamSet,
}

impl HyperNetParams {
    /// Random initialization: fan-in scaled output biases, small `theta`
    /// coefficients, unit `gamma` and zero `beta`.
    pub fn new(config: HyperConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coef = Normal::new(0.0, config.coef_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let k2 = config.kernel * config.kernel;
        let mut params = ParamSet::new();
        for (name, shape) in config.shapes() {
            let n: usize = shape.iter().product();
            let is_norm = name.contains(".in");
            let is_gamma = name.contains(".gamma");
            let data: Vec<f64> = if name.ends_with(".A") {
                (0..n).map(|_| coef.sample(&mut rng)).collect()
            } else if name.contains(".fc") && !is_final_layer(&name, &config, is_norm) {
                vec![0.1; n]
            } else if is_norm {
                vec![if is_gamma { 1.0 } else { 0.0 }; n]
            } else {
                let layer: usize = conv_layer(&name);
                let cin = if layer == 1 { 1 } else { config.channels };
                let gain = if layer == 5 { config.output_gain } else { 1.0 };
                let std = gain * (2.0 / (cin * k2) as f64).sqrt();
                let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing arrays, checking names and shapes against `config`.
    pub fn from_parts(config: HyperConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let shapes = config.shapes();
        if shapes.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} generator arrays, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &shapes {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::InvalidConfig(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::InvalidConfig(format!("missing generator array {name}"))),
            }
        }
        let params = shapes.into_iter().map(|(n, _)| {
            let t = params[&n].clone();
            (n, t)
        });
        Ok(Self {
            config,
            params: params.collect(),
        })
    }

    pub fn config(&self) -> &HyperConfig {
        &self.config
    }
    pub fn params(&self) -> &ParamSet {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Zeroes every generator of the last convolution, so the CNN reduces to
    /// its skip connection for every `theta`.
    pub fn zero_output_layer(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if conv_layer_opt(name) == Some(5) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Zeroes every conv generator.
    pub fn zero_conv(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if conv_layer_opt(name).is_some() {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    fn stack_on_tape(&self, tape: &mut Tape, base: &str, depth: usize, theta: Var) -> Result<Var> {
        if depth == 0 {
            return Ok(tape.leaf(base, &self.params[base]));
        }
        let mut h = theta;
        for i in 0..depth {
            let a_name = format!("{base}.fc{i}.A");
            let b_name = format!("{base}.fc{i}.b");
            let a = tape.leaf(&a_name, &self.params[&a_name]);
            let b = tape.leaf(&b_name, &self.params[&b_name]);
            let ah = tape.matvec(a, h, false)?;
            h = tape.add(ah, b)?;
            if i + 1 < depth {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Records the generators of `iteration` applied to `theta: [l]`.
    pub fn generate_on_tape(&self, tape: &mut Tape, iteration: usize, theta: Var) -> Result<ProxVars> {
        let cfg = &self.config;
        if tape.value(theta).len() != cfg.theta_dim {
            return Err(Error::InvalidParameter(format!(
                "theta has {} components, generators expect {}",
                tape.value(theta).len(),
                cfg.theta_dim
            )));
        }
        if iteration >= cfg.iterations {
            return Err(Error::InvalidParameter(format!(
                "iteration {iteration} out of range for {} iterations",
                cfg.iterations
            )));
        }
        let p = cfg.prefix(iteration);
        let mut conv = Vec::with_capacity(5);
        for (j, s) in conv_shapes(cfg.channels, cfg.kernel).iter().enumerate() {
            let v = self.stack_on_tape(tape, &format!("{p}.conv{}", j + 1), cfg.conv_depth, theta)?;
            conv.push(if cfg.conv_depth == 0 {
                v
            } else {
                tape.reshape(v, &[s.0, s.1, s.2, s.3])?
            });
        }
        let mut gamma = Vec::with_capacity(4);
        let mut beta = Vec::with_capacity(4);
        for j in 1..=4 {
            gamma.push(self.stack_on_tape(tape, &format!("{p}.in{j}.gamma"), cfg.norm_depth, theta)?);
            beta.push(self.stack_on_tape(tape, &format!("{p}.in{j}.beta"), cfg.norm_depth, theta)?);
        }
        Ok(ProxVars { conv, gamma, beta })
    }
}

fn conv_layer_opt(name: &str) -> Option<usize> {
    let rest = name.split('.').nth(1)?;
    rest.strip_prefix("conv")?.parse().ok()
}

fn conv_layer(name: &str) -> usize {
    conv_layer_opt(name).expect("conv generator name")
}

fn is_final_layer(name: &str, cfg: &HyperConfig, is_norm: bool) -> bool {
    let depth = if is_norm { cfg.norm_depth } else { cfg.conv_depth };
    name.ends_with(&format!(".fc{}.b", depth.saturating_sub(1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_iteration_conv_and_affine_sizes() {
        let cfg = Variant::Punet.config(1);
        let per_iter: usize = count_params(&cfg) / 10;
        assert_eq!(per_iter, 576 + 3 * 36864 + 576 + 8 * 64);
    }

    #[test]
    fn initialized_counts_match_analytic() {
        for v in [Variant::Punet, Variant::Dconv1, Variant::Din2, Variant::Dpunet] {
            let cfg = HyperConfig {
                channels: 4,
                iterations: 2,
                theta_dim: 2,
                ..v.config(2)
            };
            let h = HyperNetParams::new(cfg, 0).unwrap();
            assert_eq!(h.num_params(), count_params(&cfg), "{v}");
        }
    }

    #[test]
    fn tying_divides_by_iterations() {
        let untied = Variant::Dpunet.config(1);
        let tied = HyperConfig { tied: true, ..untied };
        assert_eq!(count_params(&untied), 10 * count_params(&tied));
    }

    #[test]
    fn initial_affine_outputs() {
        let cfg = HyperConfig {
            channels: 3,
            iterations: 1,
            ..Variant::Dpunet.config(1)
        };
        let h = HyperNetParams::new(cfg, 4).unwrap();
        assert!(h.params()["it0.in1.gamma.fc1.b"].data().iter().all(|&v| v == 1.0));
        assert!(h.params()["it0.in1.beta.fc1.b"].data().iter().all(|&v| v == 0.0));
        assert!(h.params()["it0.in1.gamma.fc0.b"].data().iter().all(|&v| v == 0.1));
        let a = h.params()["it0.conv2.fc0.A"].data();
        assert!(a.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn from_parts_checks_shapes() {
        let cfg = HyperConfig {
            channels: 2,
            iterations: 1,
            ..Variant::Dconv1.config(1)
        };
        let h = HyperNetParams::new(cfg, 1).unwrap();
        assert!(HyperNetParams::from_parts(cfg, h.params().clone()).is_ok());
        let mut bad = h.params().clone();
        bad.insert("it0.conv1.fc0.b".into(), Tensor::zeros(&[3]));
        assert!(HyperNetParams::from_parts(cfg, bad).is_err());
        assert!("dconv2-in2".parse::<Variant>().is_ok());
        assert!("dconv9".parse::<Variant>().is_err());
    }
}
