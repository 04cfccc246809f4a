//! End-to-end training: setting sampling, measurement synthesis, the L2
//! objective, Adam, round-robin multi-task batches and resumable checkpoints.
//!
//! Every random draw is derived from `(seed, step, slot)` counters, so a run
//! is reproducible from its config alone and a checkpoint only needs the
//! step counter to continue exactly. Per-sample gradients may be computed in
//! parallel; they are always summed in batch order.

mod adam;
mod bank;
mod checkpoint;
mod config;
mod data;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{ParamSet, Tape, Tensor};
use crate::dyn_prox::ImagingParams;
use crate::error::{Error, Result};
use crate::forward_models::{Image, Measurement, MeasurementModel, NoiseSpec, Task};
use crate::unroll::{record_loss, Network};

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use bank::{mix, OperatorBank};
pub use checkpoint::{
    read_container, write_container, Container, Snapshot, TrainProgress, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{ArchConfig, DataConfig, TaskConfig, TrainConfig, ALPHA_MAX, SEED_ENV};
pub use data::{synthetic_image, Dataset};

// Stream tags keeping the derived seeds of different purposes apart.
const TAG_NET: u64 = 1;
const TAG_FIT: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_SETTING: u64 = 4;
const TAG_DATA: u64 = 5;

/// One sampled imaging condition.
#[derive(Debug, Clone)]
pub struct Setting {
    pub model: Arc<MeasurementModel>,
    pub params: ImagingParams,
    /// Normalized conditioning vector.
    pub theta: Vec<f64>,
    pub noise: NoiseSpec,
    pub noise_seed: u64,
}

/// Draws `eta` uniformly from the task's set and `alpha` uniformly from its
/// range.
pub fn draw_params(tc: &TaskConfig, seed: u64) -> Result<(ImagingParams, u64)> {
    if tc.eta_choices.is_empty() {
        return Err(Error::InvalidConfig(format!("{}: empty sampling-ratio set", tc.task)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eta = tc.eta_choices[rng.random_range(0..tc.eta_choices.len())];
    let [lo, hi] = tc.alpha_range;
    let alpha = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    Ok((ImagingParams::new(tc.task, eta, alpha), rng.next_u64()))
}

/// Samples an imaging condition of `task` for signals of `shape`.
pub fn sample_setting(
    task: Task,
    config: &TrainConfig,
    bank: &mut OperatorBank,
    shape: (usize, usize),
    seed: u64,
) -> Result<Setting> {
    let tc = config.task(task)?;
    let (params, noise_seed) = draw_params(tc, seed)?;
    let noise = match task {
        Task::Cpr => NoiseSpec::shot(params.alpha),
        _ => NoiseSpec::gaussian(params.alpha),
    }
    .with_scale(config.noise_scale);
    Ok(Setting {
        model: bank.get(task, params.eta, shape)?,
        theta: config.theta_layout().encode(&params),
        params,
        noise,
        noise_seed,
    })
}

/// A ground-truth patch with its synthesized measurement.
#[derive(Debug, Clone)]
pub struct Sample {
    pub truth: Image,
    pub model: Arc<MeasurementModel>,
    pub y: Measurement,
    pub params: ImagingParams,
}

impl Sample {
    pub fn synthesize(truth: Image, setting: &Setting) -> Result<Self> {
        let y = setting
            .model
            .measure_noisy(&truth, setting.noise.level, setting.noise.scale, setting.noise_seed)?;
        Ok(Self {
            truth,
            model: setting.model.clone(),
            y,
            params: setting.params,
        })
    }
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(net: &Network, s: &Sample) -> Result<(f64, ParamSet)> {
    let mut tape = Tape::with_precision(net.config.prox.precision);
    let g = record_loss(&mut tape, &s.model, &s.y, &s.params, &s.truth, net)?;
    let loss = tape.value(g.loss).data()[0];
    let grads = tape.backward(g.loss, &Tensor::scalar(1.0))?.into_params();
    Ok((loss, grads))
}

/// Mean loss and mean gradients over a task-homogeneous batch.
pub fn batch_gradients(net: &Network, batch: &[Sample]) -> Result<(f64, ParamSet)> {
    let first = batch.first().ok_or_else(|| Error::InvalidBatch("empty batch".into()))?;
    let task = first.model.task();
    if let Some(s) = batch.iter().find(|s| s.model.task() != task) {
        return Err(Error::InvalidBatch(format!(
            "batch mixes {task} and {} samples",
            s.model.task()
        )));
    }
    let per: Vec<(f64, ParamSet)> = batch
        .par_iter()
        .map(|s| sample_gradients(net, s))
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f64;
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty");
    for (l, g) in iter {
        loss += l;
        for (k, v) in g {
            match grads.get_mut(&k) {
                Some(acc) => acc.add_assign(&v),
                None => {
                    grads.insert(k, v);
                }
            }
        }
    }
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss * inv, grads))
}

/// One optimizer step; returns the batch loss before the update.
///
/// A non-finite loss or gradient leaves the parameters untouched and yields
/// [`Error::TrainingDivergence`] with `step` set to the optimizer's step count.
pub fn train_step(net: &mut Network, adam: &mut Adam, batch: &[Sample], lr: f64, clip_norm: f64) -> Result<f64> {
    let (loss, mut grads) = batch_gradients(net, batch)?;
    if !loss.is_finite() || !grads.values().all(Tensor::is_finite) {
        return Err(Error::TrainingDivergence {
            epoch: 0,
            step: adam.t as usize,
        });
    }
    clip_global_norm(&mut grads, clip_norm);
    adam.step(lr, net.param_iter_mut(), &grads);
    Ok(loss)
}

/// Outcome of a finished run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub network: Network,
    pub bank: OperatorBank,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
    /// Mean batch loss per optimizer step.
    pub step_losses: Vec<f64>,
}

/// Resumable training loop. Step `g` trains on task `g mod n_tasks`.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    config: TrainConfig,
    datasets: Vec<&'a Dataset>,
    network: Network,
    bank: OperatorBank,
    adam: Adam,
    global_step: usize,
    step_losses: Vec<f64>,
}

fn check_datasets<'a>(config: &TrainConfig, datasets: &[(Task, &'a Dataset)]) -> Result<Vec<&'a Dataset>> {
    config.validate()?;
    config
        .tasks
        .iter()
        .map(|tc| {
            let d = datasets
                .iter()
                .find(|(t, _)| *t == tc.task)
                .map(|(_, d)| *d)
                .ok_or_else(|| Error::InvalidConfig(format!("no dataset for task {}", tc.task)))?;
            if d.is_empty() {
                return Err(Error::InvalidInput(format!("dataset for {} is empty", tc.task)));
            }
            let want = (tc.patch_size, tc.patch_size);
            if let Some(p) = d.patches.iter().find(|p| p.dim() != want) {
                return Err(Error::InvalidDimension(format!(
                    "{} patch is {:?}, config expects {:?}",
                    tc.task,
                    p.dim(),
                    want
                )));
            }
            Ok(d)
        })
        .collect()
}

impl<'a> Trainer<'a> {
    /// Fits BCS initializers on blocks cropped from the training sources.
    pub fn new(config: TrainConfig, datasets: &[(Task, &'a Dataset)]) -> Result<Self> {
        let ds = check_datasets(&config, datasets)?;
        let mut bank = OperatorBank::new(config.seed);
        for (tc, d) in config.tasks.iter().zip(&ds) {
            if tc.task == Task::Bcs {
                let b = tc.patch_size;
                let blocks = d.fit_blocks(b, config.fit_blocks, mix(&[config.seed, TAG_FIT]));
                for &eta in &tc.eta_choices {
                    bank.prepare_bcs(eta, b, &blocks)?;
                }
            }
        }
        Self::with_bank(config, datasets, bank)
    }

    /// Uses prepared operators; BCS operators for every configured ratio
    /// must already be present.
    pub fn with_bank(config: TrainConfig, datasets: &[(Task, &'a Dataset)], mut bank: OperatorBank) -> Result<Self> {
        let ds = check_datasets(&config, datasets)?;
        for tc in &config.tasks {
            for &eta in &tc.eta_choices {
                bank.get(tc.task, eta, (tc.patch_size, tc.patch_size))?;
            }
        }
        let network = Network::new(config.network_config(), mix(&[config.seed, TAG_NET]))?;
        Ok(Self {
            adam: Adam::new(config.adam),
            config,
            datasets: ds,
            network,
            bank,
            global_step: 0,
            step_losses: Vec::new(),
        })
    }

    /// Continues a run saved with [`Trainer::snapshot`].
    pub fn resume(snapshot: Snapshot, datasets: &[(Task, &'a Dataset)]) -> Result<Self> {
        let p = snapshot
            .progress
            .ok_or_else(|| Error::IncompatibleCheckpoint("checkpoint holds no training state".into()))?;
        let ds = check_datasets(&p.config, datasets)?;
        if p.config.network_config() != snapshot.network.config {
            return Err(Error::IncompatibleCheckpoint(
                "network does not match the stored training config".into(),
            ));
        }
        Ok(Self {
            config: p.config,
            datasets: ds,
            network: snapshot.network,
            bank: snapshot.bank,
            adam: p.adam,
            global_step: p.global_step,
            step_losses: p.step_losses,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn bank(&self) -> &OperatorBank {
        &self.bank
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    pub fn step_losses(&self) -> &[f64] {
        &self.step_losses
    }

    pub fn steps_per_epoch(&self) -> usize {
        let b = self.config.batch_size;
        let longest = self.datasets.iter().map(|d| d.len().div_ceil(b)).max().unwrap_or(1);
        self.datasets.len() * longest
    }

    pub fn total_steps(&self) -> usize {
        let full = self.config.epochs * self.steps_per_epoch();
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_done(&self) -> bool {
        self.global_step >= self.total_steps()
    }

    /// Task trained at step `g`.
    pub fn task_at(&self, g: usize) -> Task {
        self.config.tasks[g % self.config.tasks.len()].task
    }

    /// Samples of step `g`: patches in per-pass shuffled order with freshly
    /// drawn imaging conditions and noise.
    pub fn batch_at(&mut self, g: usize) -> Result<Vec<Sample>> {
        let nt = self.config.tasks.len();
        let ti = g % nt;
        let tc = self.config.tasks[ti].clone();
        let d = self.datasets[ti];
        let b = self.config.batch_size;
        let seed = self.config.seed;
        let shape = (tc.patch_size, tc.patch_size);
        let mut order: Option<(usize, Vec<usize>)> = None;
        let mut out = Vec::with_capacity(b);
        for slot in 0..b {
            let k = (g / nt) * b + slot;
            let (pass, pos) = (k / d.len(), k % d.len());
            if order.as_ref().is_none_or(|(p, _)| *p != pass) {
                let mut perm: Vec<usize> = (0..d.len()).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[
                    seed,
                    TAG_SHUFFLE,
                    ti as u64,
                    pass as u64,
                ])));
                order = Some((pass, perm));
            }
            let idx = order.as_ref().expect("set above").1[pos];
            let setting = sample_setting(
                tc.task,
                &self.config,
                &mut self.bank,
                shape,
                mix(&[seed, TAG_SETTING, g as u64, slot as u64]),
            )?;
            out.push(Sample::synthesize(d.patches[idx].clone(), &setting)?);
        }
        Ok(out)
    }

    /// Runs one optimizer step and returns its batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let g = self.global_step;
        let batch = self.batch_at(g)?;
        let lr = self.config.learning_rate_at(g);
        let loss =
            train_step(&mut self.network, &mut self.adam, &batch, lr, self.config.clip_norm).map_err(|e| match e {
                Error::TrainingDivergence { .. } => Error::TrainingDivergence {
                    epoch: g / self.steps_per_epoch(),
                    step: g,
                },
                e => e,
            })?;
        self.step_losses.push(loss);
        self.global_step += 1;
        Ok(loss)
    }

    /// Steps until the configured budget is used up.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    /// Mean loss per epoch, the last one possibly partial.
    pub fn history(&self) -> Vec<f64> {
        self.step_losses
            .chunks(self.steps_per_epoch())
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            network: self.network.clone(),
            bank: self.bank.clone(),
            progress: Some(TrainProgress {
                config: self.config.clone(),
                adam: self.adam.clone(),
                global_step: self.global_step,
                step_losses: self.step_losses.clone(),
            }),
        }
    }

    pub fn finish(self) -> TrainResult {
        TrainResult {
            history: self.history(),
            network: self.network,
            bank: self.bank,
            step_losses: self.step_losses,
        }
    }
}

/// Patch sets for every configured task: random crops of the images in
/// `config.data.dir`, or of synthetic images when no directory is set.
pub fn build_datasets(config: &TrainConfig) -> Result<Vec<(Task, Dataset)>> {
    let images = match &config.data.dir {
        Some(dir) => {
            let imgs: Vec<Image> = crate::image_io::read_image_dir(dir)?
                .into_iter()
                .map(|(_, im)| im)
                .collect();
            if imgs.is_empty() {
                return Err(Error::InvalidInput(format!("no images in {}", dir.display())));
            }
            Some(imgs)
        }
        None => None,
    };
    let count = config.data.patches.max(1);
    config
        .tasks
        .iter()
        .map(|tc| {
            let seed = mix(&[config.seed, TAG_DATA, tc.task.code() as u64]);
            let d = match &images {
                Some(imgs) => Dataset::from_images(imgs.clone(), tc.patch_size, count, seed)?,
                None => Dataset::synthetic(count, tc.patch_size, seed),
            };
            Ok((tc.task, d))
        })
        .collect()
}

/// Trains on a single task.
pub fn train(dataset: &Dataset, config: TrainConfig) -> Result<TrainResult> {
    if config.tasks.len() != 1 {
        return Err(Error::InvalidConfig(format!(
            "single-task training got {} tasks",
            config.tasks.len()
        )));
    }
    let task = config.tasks[0].task;
    let mut t = Trainer::new(config, &[(task, dataset)])?;
    t.run()?;
    Ok(t.finish())
}

/// Trains one shared network on several tasks, alternating task-homogeneous
/// batches.
pub fn train_multitask(datasets: &[(Task, &Dataset)], config: TrainConfig) -> Result<TrainResult> {
    let mut t = Trainer::new(config, datasets)?;
    t.run()?;
    Ok(t.finish())
}
