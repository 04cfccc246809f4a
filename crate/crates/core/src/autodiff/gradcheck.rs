use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{ParamSet, Tape, Var};
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the per-leaf maximum relative error.
    pub tolerance: f64,
    /// Coordinates checked per leaf; `None` checks all of them.
    pub samples_per_leaf: Option<usize>,
    /// Denominator floor: errors are `|a - b| / max(|a|, |b|, floor)`.
    pub floor: f64,
    pub seed: u64,
    /// Explicit coordinates per leaf; leaves not listed are registered but
    /// not checked. Overrides `samples_per_leaf`.
    pub coordinates: Option<IndexMap<String, Vec<usize>>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            samples_per_leaf: Some(20),
            floor: 1e-5,
            seed: 0,
            coordinates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a relu input changed sign within the step.
    pub kinks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn leaf(&self, name: &str) -> Option<&LeafReport> {
        self.leaves.iter().find(|l| l.name == name)
    }
}

fn run<F>(params: &ParamSet, program: &F) -> Result<(Tape, Var)>
where
    F: Fn(&mut Tape, &IndexMap<String, Var>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = tape.params_from(params);
    let out = program(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(dim_err(format!(
            "gradient check needs a scalar program, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    Ok((tape, out))
}

/// Compares reverse-mode gradients of a scalar `program` against central
/// differences, leaf by leaf.
pub fn check_gradients<F>(params: &ParamSet, program: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &IndexMap<String, Var>) -> Result<Var>,
{
    let (tape, out) = run(params, &program)?;
    let base_pattern = tape.relu_pattern();
    let grads = tape.backward(out, &Tensor::scalar(1.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut leaves = Vec::with_capacity(params.len());
    let mut probe = params.clone();
    for (name, value) in params {
        let n = value.len();
        let coords: Vec<usize> = match (&opts.coordinates, opts.samples_per_leaf) {
            (Some(explicit), _) => match explicit.get(name) {
                Some(c) => {
                    if let Some(&bad) = c.iter().find(|&&i| i >= n) {
                        return Err(dim_err(format!(
                            "coordinate {bad} out of range for {name} ({n} entries)"
                        )));
                    }
                    c.clone()
                }
                None => continue,
            },
            (None, Some(k)) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let analytic = grads.param(name).expect("registered leaf");
        let mut report = LeafReport {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            kinks: Vec::new(),
        };
        for i in coords {
            let orig = value.data()[i];
            let mut eval = |x: f64| -> Result<(f64, bool)> {
                probe.get_mut(name).expect("leaf").data_mut()[i] = x;
                let (t, o) = run(&probe, &program)?;
                Ok((t.value(o).data()[0], t.relu_pattern() == base_pattern))
            };
            let (fp, same_p) = eval(orig + opts.step)?;
            let (fm, same_m) = eval(orig - opts.step)?;
            probe.get_mut(name).expect("leaf").data_mut()[i] = orig;
            if !(same_p && same_m) {
                report.kinks.push(i);
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
        leaves.push(report);
    }
    Ok(GradCheckReport {
        leaves,
        tolerance: opts.tolerance,
    })
}
