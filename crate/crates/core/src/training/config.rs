use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{AffineForm, Precision};
use crate::dyn_prox::{ProxOptions, ThetaLayout, Variant};
use crate::error::{Error, Result};
use crate::forward_models::{Task, EIGHT_BIT_SCALE};
use crate::unroll::{Framework, NetworkConfig, UnrollConfig};

use super::adam::AdamConfig;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "DPUNET_SEED";

/// Upper end of the noise levels the conditioning vector is normalized by.
pub const ALPHA_MAX: f64 = 50.0;

/// Sampling distribution of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: Task,
    /// Sampling ratios drawn uniformly.
    pub eta_choices: Vec<f64>,
    /// Noise level drawn uniformly from `[lo, hi]`.
    #[serde(default)]
    pub alpha_range: [f64; 2],
    /// Side of the square training patches (the block size for BCS).
    pub patch_size: usize,
}

impl TaskConfig {
    /// Sampling distribution used for the task's full-scale training.
    pub fn paper(task: Task) -> Self {
        let (eta_choices, patch_size) = match task {
            Task::Bcs => (vec![0.01, 0.04, 0.1, 0.25, 0.4, 0.5], 33),
            Task::Mri => (vec![0.2, 0.3, 0.4, 0.5], 256),
            Task::Cpr => (vec![0.3, 0.4, 0.5], 64),
        };
        Self {
            task,
            eta_choices,
            alpha_range: [0.0, ALPHA_MAX],
            patch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta_choices.is_empty() {
            return Err(Error::InvalidConfig(format!("{}: empty sampling-ratio set", self.task)));
        }
        if let Some(e) = self.eta_choices.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(Error::InvalidConfig(format!(
                "{}: sampling ratio {e} outside (0, 1]",
                self.task
            )));
        }
        let [lo, hi] = self.alpha_range;
        if !(lo >= 0.0 && lo <= hi && hi <= ALPHA_MAX) {
            return Err(Error::InvalidConfig(format!(
                "{}: noise range [{lo}, {hi}] must lie in [0, {ALPHA_MAX}]",
                self.task
            )));
        }
        if self.patch_size < 2 {
            return Err(Error::InvalidConfig(format!("{}: patch size must be >= 2", self.task)));
        }
        Ok(())
    }
}

/// Architecture knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub variant: Variant,
    pub channels: usize,
    pub kernel: usize,
    pub iterations: usize,
    pub tied: bool,
    pub framework: Framework,
    pub affine_form: AffineForm,
    /// `f32` speeds up convolutions; gradients still accumulate in `f64`.
    pub precision: Precision,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dpunet,
            channels: 64,
            kernel: 3,
            iterations: 10,
            tied: false,
            framework: Framework::Pgd,
            affine_form: AffineForm::ScaledShift,
            precision: Precision::F64,
        }
    }
}

/// Where training images come from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Directory of PNG/PGM images; synthetic images when absent.
    pub dir: Option<PathBuf>,
    /// Number of patches cropped per task.
    pub patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tasks: Vec<TaskConfig>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Linear learning-rate ramp over the first steps; `0` disables.
    #[serde(default)]
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `0` disables.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Scale of the noise level relative to the `[0, 1]` intensity range.
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    /// Blocks used to fit the BCS linear initializer.
    #[serde(default = "default_fit_blocks")]
    pub fit_blocks: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub data: DataConfig,
}

fn default_clip() -> f64 {
    10.0
}

fn default_noise_scale() -> f64 {
    EIGHT_BIT_SCALE
}

fn default_fit_blocks() -> usize {
    2000
}

impl TrainConfig {
    /// Full-scale hyperparameters of one task.
    pub fn paper(task: Task) -> Self {
        let (epochs, batch_size, learning_rate) = match task {
            Task::Bcs => (200, 64, 1e-4),
            Task::Mri => (200, 4, 1e-4),
            Task::Cpr => (20, 20, 1e-3),
        };
        Self {
            tasks: vec![TaskConfig::paper(task)],
            epochs,
            batch_size,
            learning_rate,
            seed: 0,
            max_steps: None,
            warmup_steps: 0,
            clip_norm: default_clip(),
            noise_scale: default_noise_scale(),
            fit_blocks: default_fit_blocks(),
            adam: AdamConfig::default(),
            arch: ArchConfig::default(),
            data: DataConfig {
                dir: None,
                patches: match task {
                    Task::Bcs => 88_912,
                    Task::Mri => 100,
                    Task::Cpr => 160_000,
                },
            },
        }
    }

    /// Small preset: 64 patches, 200 optimizer steps and noiseless
    /// measurements on the full-size network.
    pub fn desk(task: Task) -> Self {
        let mut c = Self::paper(task);
        let t = &mut c.tasks[0];
        t.patch_size = match task {
            Task::Bcs => 33,
            Task::Mri | Task::Cpr => 32,
        };
        if task == Task::Bcs {
            t.eta_choices = vec![0.1, 0.25, 0.4];
        }
        t.alpha_range = [0.0, 0.0];
        c.batch_size = 4;
        c.epochs = 13;
        c.max_steps = Some(200);
        c.learning_rate = 3e-3;
        c.warmup_steps = 50;
        c.data.patches = 64;
        c
    }

    /// One config covering several tasks, using the first task's optimizer settings.
    pub fn multitask(tasks: &[Task], desk: bool) -> Result<Self> {
        let first = *tasks
            .first()
            .ok_or_else(|| Error::InvalidConfig("no tasks given".into()))?;
        let preset = if desk { Self::desk } else { Self::paper };
        let mut c = preset(first);
        c.tasks = tasks.iter().map(|&t| preset(t).tasks.remove(0)).collect();
        Ok(c)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies `DPUNET_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidConfig("task set is empty".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate()?;
            if self.tasks[..i].iter().any(|u| u.task == t.task) {
                return Err(Error::InvalidConfig(format!("task {} listed twice", t.task)));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} is invalid",
                self.learning_rate
            )));
        }
        if !(self.clip_norm >= 0.0) || !(self.noise_scale >= 0.0) {
            return Err(Error::InvalidConfig("clip norm and noise scale must be >= 0".into()));
        }
        self.network_config().validate()
    }

    /// Learning rate of step `g` (0-based).
    pub fn learning_rate_at(&self, g: usize) -> f64 {
        if g < self.warmup_steps {
            self.learning_rate * (g + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }

    pub fn task(&self, task: Task) -> Result<&TaskConfig> {
        self.tasks
            .iter()
            .find(|t| t.task == task)
            .ok_or_else(|| Error::InvalidConfig(format!("task {task} is not configured")))
    }

    /// Normalization of the conditioning vector implied by the task set:
    /// `kappa` with several tasks, `alpha` when any task trains with noise.
    pub fn theta_layout(&self) -> ThetaLayout {
        let eta_max = self
            .tasks
            .iter()
            .flat_map(|t| t.eta_choices.iter().copied())
            .fold(0.0, f64::max);
        let noisy = self.tasks.iter().any(|t| t.alpha_range[1] > 0.0);
        let mut layout = if noisy {
            ThetaLayout::eta_alpha(eta_max, ALPHA_MAX)
        } else {
            ThetaLayout::eta_only(eta_max)
        };
        if self.tasks.len() > 1 {
            layout = layout.with_task(Task::ALL.iter().map(|t| t.code()).fold(0.0, f64::max));
        }
        layout
    }

    pub fn network_config(&self) -> NetworkConfig {
        let theta = self.theta_layout();
        let a = &self.arch;
        let mut hyper = a.variant.config(theta.dim());
        hyper.channels = a.channels;
        hyper.kernel = a.kernel;
        hyper.iterations = a.iterations;
        hyper.tied = a.tied;
        let first = self.tasks.first().map_or(Task::Bcs, |t| t.task);
        NetworkConfig {
            theta,
            hyper,
            unroll: UnrollConfig {
                framework: a.framework,
                ..UnrollConfig::for_task(first)
            },
            prox: ProxOptions {
                affine_form: a.affine_form,
                precision: a.precision,
                ..ProxOptions::default()
            },
        }
    }
}
