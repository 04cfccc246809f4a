use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::Args;

use dpunet::dyn_prox::Variant;
use dpunet::eval::{emit_plot_data, PlotSource};
use dpunet::forward_models::Task;
use dpunet::training::{build_datasets, Dataset, Snapshot, TrainConfig, Trainer};
use dpunet::unroll::Framework;

use crate::settings::{env_seed, merge, read_table};

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 64 patches and 200 steps on one CPU core
    Desk,
    /// Full-scale hyperparameters
    Paper,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Tasks to train on, alternating between them (comma-separated)
    #[arg(long, value_delimiter = ',', default_value = "bcs")]
    task: Vec<Task>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Sampling ratios drawn during training (comma-separated, all tasks)
    #[arg(long, value_delimiter = ',')]
    eta: Option<Vec<f64>>,
    /// Upper end of the training noise range (all tasks)
    #[arg(long)]
    alpha_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optimizer step budget
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    framework: Option<Framework>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Run convolutions in single precision
    #[arg(long)]
    f32: bool,
    /// Directory of training images; synthetic images otherwise
    #[arg(long)]
    data: Option<PathBuf>,
    /// Patches cropped per task
    #[arg(long)]
    patches: Option<usize>,
    /// TOML training config; its values replace the flags above
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a `model.ckpt` written by an earlier run
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Write an intermediate checkpoint every N steps
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Stop once this many steps are done in total, keeping the optimizer
    /// state in the checkpoint for `--resume`
    #[arg(long)]
    stop_after: Option<usize>,
    /// Print the loss every N steps
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    /// Output directory
    #[arg(long, short)]
    out: PathBuf,
}

impl TrainArgs {
    fn config(&self) -> anyhow::Result<TrainConfig> {
        let mut c = TrainConfig::multitask(&self.task, self.preset == Preset::Desk)?;
        for t in &mut c.tasks {
            if let Some(e) = &self.eta {
                t.eta_choices = e.clone();
            }
            if let Some(a) = self.alpha_max {
                t.alpha_range = [0.0, a];
            }
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(s) = self.steps {
            c.max_steps = Some(s);
            c.epochs = c.epochs.max(s);
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(b) = self.batch_size {
            c.batch_size = b;
        }
        if let Some(lr) = self.lr {
            c.learning_rate = lr;
        }
        if let Some(v) = self.variant {
            c.arch.variant = v;
        }
        if let Some(f) = self.framework {
            c.arch.framework = f;
        }
        if let Some(ch) = self.channels {
            c.arch.channels = ch;
        }
        if let Some(t) = self.iterations {
            c.arch.iterations = t;
        }
        if self.f32 {
            c.arch.precision = dpunet::autodiff::Precision::F32;
        }
        if let Some(d) = &self.data {
            c.data.dir = Some(d.clone());
        }
        if let Some(p) = self.patches {
            c.data.patches = p;
        }
        if let Some(path) = &self.config {
            let mut base = toml::Table::try_from(&c).context("serializing flag config")?;
            merge(&mut base, read_table(path)?);
            c = toml::Value::Table(base)
                .try_into()
                .with_context(|| format!("invalid training config {}", path.display()))?;
        }
        if let Some(s) = env_seed()? {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Writes through a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
fn save_snapshot(s: &Snapshot, path: &Path) -> anyhow::Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    s.save(&tmp)?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

pub fn run(args: TrainArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let ckpt = args.out.join("model.ckpt");
    let (config, snapshot) = match &args.resume {
        Some(p) => {
            if same_file(p, &ckpt) {
                bail!("refusing to overwrite the checkpoint being resumed; choose another --out");
            }
            let s = Snapshot::load(p)?;
            let progress = s
                .progress
                .as_ref()
                .with_context(|| format!("{} holds no training state", p.display()))?;
            (progress.config.clone(), Some(s))
        }
        None => (args.config()?, None),
    };
    std::fs::write(args.out.join("train.toml"), config.to_toml_string())?;

    let owned = build_datasets(&config)?;
    let datasets: Vec<(Task, &Dataset)> = owned.iter().map(|(t, d)| (*t, d)).collect();
    let mut trainer = match snapshot {
        Some(s) => Trainer::resume(s, &datasets)?,
        None => Trainer::new(config, &datasets)?,
    };
    let total = trainer.total_steps();
    eprintln!(
        "training {} parameters for {total} steps ({} per epoch)",
        trainer.network().num_params(),
        trainer.steps_per_epoch()
    );
    let t0 = Instant::now();
    let stop = args.stop_after.unwrap_or(usize::MAX);
    while !trainer.is_done() && trainer.global_step() < stop {
        let loss = trainer.step()?;
        let g = trainer.global_step();
        if args.log_every > 0 && (g % args.log_every == 0 || g == total) {
            eprintln!("step {g}/{total} loss {loss:.4e} ({:.1}s)", t0.elapsed().as_secs_f64());
        }
        if args.checkpoint_every.is_some_and(|n| n > 0 && g % n == 0) && g < total {
            save_snapshot(&trainer.snapshot(), &ckpt)?;
        }
    }
    save_snapshot(&trainer.snapshot(), &ckpt)?;
    let history = trainer.history();
    let f = File::create(args.out.join("history.csv"))?;
    emit_plot_data(PlotSource::History(&history), BufWriter::new(f))?;
    println!("wrote {}", ckpt.display());
    Ok(())
}
