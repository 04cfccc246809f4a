use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use clap::Args;
use serde::Deserialize;

use dpunet::dyn_prox::ImagingParams;
use dpunet::eval::{format_db, psnr, MeasuredImage};
use dpunet::forward_models::{Task, EIGHT_BIT_SCALE};
use dpunet::image_io::{read_image, write_image};
use dpunet::training::Snapshot;
use dpunet::unroll::write_trace_csv;

use crate::settings::{env_seed, resolve, Flags};

#[derive(Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    /// Sampling ratio of the simulated measurement
    #[arg(long)]
    eta: Option<f64>,
    /// Noise level of the simulated measurement (0..50)
    #[arg(long)]
    alpha: Option<f64>,
    /// Noise level given to the network, if different from `--alpha`
    #[arg(long)]
    reported_alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ground-truth image (PNG or PGM)
    #[arg(long)]
    input: Option<PathBuf>,
    /// Write per-iteration fidelity and PSNR (MRI and CPR)
    #[arg(long)]
    trace: bool,
    /// TOML file whose keys replace the flags above
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Settings {
    checkpoint: PathBuf,
    task: Task,
    eta: f64,
    #[serde(default)]
    alpha: f64,
    reported_alpha: Option<f64>,
    #[serde(default)]
    seed: u64,
    #[serde(default = "eight_bit")]
    noise_scale: f64,
    input: PathBuf,
    #[serde(default)]
    trace: bool,
    out: PathBuf,
}

fn eight_bit() -> f64 {
    EIGHT_BIT_SCALE
}

impl ReconstructArgs {
    fn settings(&self) -> anyhow::Result<Settings> {
        let mut f = Flags::default();
        f.path("checkpoint", self.checkpoint.as_deref())
            .set("task", self.task.map(|t| t.name()))
            .set("eta", self.eta)
            .set("alpha", self.alpha)
            .set("reported_alpha", self.reported_alpha)
            .set("seed", self.seed.map(|s| s as i64))
            .path("input", self.input.as_deref())
            .set("trace", self.trace.then_some(true))
            .path("out", self.out.as_deref());
        let mut s: Settings = resolve(f.into_table(), self.config.as_deref())?;
        if let Some(seed) = env_seed()? {
            s.seed = seed;
        }
        Ok(s)
    }
}

pub fn run(args: ReconstructArgs) -> anyhow::Result<()> {
    let s = args.settings()?;
    let snap = Snapshot::load(&s.checkpoint)?;
    let truth = read_image(&s.input)?;
    let params = ImagingParams::new(s.task, s.eta, s.alpha);
    let reported = ImagingParams {
        alpha: s.reported_alpha.unwrap_or(s.alpha),
        ..params
    };
    let mut bank = snap.bank.clone();
    let m = MeasuredImage::new(&mut bank, &truth, params, s.noise_scale, s.seed)?;
    let t0 = Instant::now();
    let (image, trace) = if s.trace {
        let (img, tr) = m.reconstruct_traced(&snap.network, &reported, &truth)?;
        (img, Some(tr))
    } else {
        (m.reconstruct(&snap.network, &reported)?, None)
    };
    let runtime = t0.elapsed().as_secs_f64();
    let init = m.initial()?;

    std::fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))?;
    write_image(s.out.join("recon.png"), &image)?;
    write_image(s.out.join("init.png"), &init)?;
    if let Some(tr) = trace {
        let f = File::create(s.out.join("trace.csv"))?;
        write_trace_csv(&tr, BufWriter::new(f))?;
    }
    println!("psnr_db {}", format_db(psnr(&image, &truth)?));
    println!("init_psnr_db {}", format_db(psnr(&init, &truth)?));
    eprintln!("reconstructed in {runtime:.2}s");
    Ok(())
}
