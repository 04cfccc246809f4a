use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Deserialize;

use dpunet::eval::{
    emit_plot_data, run_grid, write_records_csv, write_table_csv, write_timings_csv, ExperimentGrid, PlotSource,
};
use dpunet::forward_models::Task;

use crate::settings::{env_seed, resolve, Flags};

#[derive(Args)]
pub struct GridArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    /// Sampling ratios; every ratio is paired with every `--alpha`
    #[arg(long, value_delimiter = ',')]
    eta: Option<Vec<f64>>,
    /// Noise levels (default 0)
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Image files or directories
    #[arg(long, value_delimiter = ',')]
    images: Option<Vec<PathBuf>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write every reconstruction as PNG
    #[arg(long)]
    save_images: bool,
    /// TOML file whose keys replace the flags above
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct Settings {
    #[serde(flatten)]
    grid: ExperimentGrid,
    out: PathBuf,
}

impl GridArgs {
    fn settings(&self) -> anyhow::Result<Settings> {
        let mut f = Flags::default();
        f.path("checkpoint", self.checkpoint.as_deref())
            .set("task", self.task.map(|t| t.name()))
            .set("seed", self.seed.map(|s| s as i64))
            .path("out", self.out.as_deref());
        if let Some(etas) = &self.eta {
            let alphas = self.alpha.clone().unwrap_or_else(|| vec![0.0]);
            let cells: Vec<toml::Value> = etas
                .iter()
                .flat_map(|&e| {
                    alphas
                        .iter()
                        .map(move |&a| toml::Value::Array(vec![e.into(), a.into()]))
                })
                .collect();
            f.set("cells", Some(cells));
        }
        if let Some(imgs) = &self.images {
            let v: Vec<toml::Value> = imgs.iter().map(|p| p.display().to_string().into()).collect();
            f.set("images", Some(v));
        }
        if self.save_images {
            if let Some(out) = &self.out {
                f.path("save_images", Some(&out.join("images")));
            }
        }
        let mut s: Settings = resolve(f.into_table(), self.config.as_deref())?;
        if let Some(seed) = env_seed()? {
            s.grid.seed = seed;
        }
        Ok(s)
    }
}

fn write_csv(dir: &Path, name: &str, write: impl FnOnce(BufWriter<File>) -> std::io::Result<()>) -> anyhow::Result<()> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write(BufWriter::new(f)).with_context(|| format!("writing {}", path.display()))
}

/// Returns whether every cell succeeded.
pub fn run(args: GridArgs) -> anyhow::Result<bool> {
    let s = args.settings()?;
    let report = run_grid(&s.grid)?;
    std::fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))?;
    write_csv(&s.out, "records.csv", |w| write_records_csv(&report, w))?;
    write_csv(&s.out, "table.csv", |w| write_table_csv(&report, w))?;
    write_csv(&s.out, "timings.csv", |w| write_timings_csv(&report, w))?;
    write_csv(&s.out, "plot.csv", |w| emit_plot_data(PlotSource::Grid(&report), w))?;
    write_table_csv(&report, std::io::stdout().lock())?;
    if report.has_failures() {
        let failed: usize = report.cells.iter().map(|c| c.failed).sum();
        eprintln!("{failed} reconstructions failed; see records.csv");
    }
    Ok(!report.has_failures())
}
