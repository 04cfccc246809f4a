use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dyn_prox::ImagingParams;
use crate::error::{Error, Result};
use crate::forward_models::{Image, Task, EIGHT_BIT_SCALE};
use crate::image_io::{list_images, read_image};
use crate::training::{mix, Snapshot};

use super::{format_db, psnr, MeasuredImage};

/// Version of the record and table CSV layouts, written as their first column.
pub const GRID_CSV_SCHEMA: u32 = 1;

/// A set of `(eta, alpha)` cells evaluated with one trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub task: Task,
    /// `[eta, alpha]` pairs.
    pub cells: Vec<[f64; 2]>,
    pub checkpoint: PathBuf,
    /// Image files or directories of images.
    pub images: Vec<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    /// Directory for PNG reconstructions, if any.
    #[serde(default)]
    pub save_images: Option<PathBuf>,
}

fn default_noise_scale() -> f64 {
    EIGHT_BIT_SCALE
}

impl ExperimentGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Image files in evaluation order: listed files as given, directory
    /// contents sorted by name.
    pub fn image_paths(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for p in &self.images {
            if p.is_dir() {
                out.extend(list_images(p)?);
            } else {
                out.push(p.clone());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordStatus {
    Ok,
    Failed(String),
}

/// Result of one image at one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub image: String,
    pub eta: f64,
    pub alpha: f64,
    pub psnr: f64,
    pub init_psnr: f64,
    /// Wall-clock seconds; kept out of the deterministic CSVs.
    pub runtime: f64,
    pub iterations: usize,
    pub status: RecordStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub eta: f64,
    pub alpha: f64,
    pub images: usize,
    pub failed: usize,
    /// Mean over successful images; NaN when none succeeded.
    pub mean_psnr: f64,
    pub mean_init_psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub task: Task,
    pub records: Vec<MetricRecord>,
    pub cells: Vec<CellSummary>,
}

impl GridReport {
    pub fn has_failures(&self) -> bool {
        self.cells.iter().any(|c| c.failed > 0)
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Evaluates every image at every cell. Reconstruction failures are recorded
/// per image; unreadable inputs abort with the offending path.
pub fn run_grid(grid: &ExperimentGrid) -> Result<GridReport> {
    if grid.cells.is_empty() {
        return Ok(GridReport {
            task: grid.task,
            records: Vec::new(),
            cells: Vec::new(),
        });
    }
    let snap = Snapshot::load(&grid.checkpoint)?;
    let (net, mut bank) = (snap.network, snap.bank);
    let paths = grid.image_paths()?;
    let images: Vec<(String, Image)> = paths
        .iter()
        .map(|p| Ok((stem(p), read_image(p)?)))
        .collect::<Result<_>>()?;
    if let Some(dir) = &grid.save_images {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut records = Vec::new();
    let mut cells = Vec::new();
    for &[eta, alpha] in &grid.cells {
        let params = ImagingParams::new(grid.task, eta, alpha);
        let (mut sum, mut sum0, mut ok, mut failed) = (0.0, 0.0, 0usize, 0usize);
        for (i, (name, x)) in images.iter().enumerate() {
            let t0 = Instant::now();
            let seed = mix(&[grid.seed, i as u64, eta.to_bits(), alpha.to_bits()]);
            let outcome = MeasuredImage::new(&mut bank, x, params, grid.noise_scale, seed).and_then(|m| {
                let out = m.reconstruct(&net, &params)?;
                let p = psnr(&out, x)?;
                let p0 = psnr(&m.initial()?, x)?;
                Ok((out, p, p0))
            });
            let runtime = t0.elapsed().as_secs_f64();
            let (p, p0, status) = match outcome {
                Ok((out, p, p0)) => {
                    if let Some(dir) = &grid.save_images {
                        crate::image_io::write_image(dir.join(format!("{name}_eta{eta}_alpha{alpha}.png")), &out)?;
                    }
                    sum += p;
                    sum0 += p0;
                    ok += 1;
                    (p, p0, RecordStatus::Ok)
                }
                Err(e @ (Error::Io { .. } | Error::Image { .. })) => return Err(e),
                Err(e) => {
                    failed += 1;
                    (f64::NAN, f64::NAN, RecordStatus::Failed(e.to_string()))
                }
            };
            records.push(MetricRecord {
                image: name.clone(),
                eta,
                alpha,
                psnr: p,
                init_psnr: p0,
                runtime,
                iterations: net.iterations(),
                status,
            });
        }
        cells.push(CellSummary {
            eta,
            alpha,
            images: images.len(),
            failed,
            mean_psnr: sum / ok as f64,
            mean_init_psnr: sum0 / ok as f64,
        });
    }
    Ok(GridReport {
        task: grid.task,
        records,
        cells,
    })
}

fn db_or_empty(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format_db(v)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per image and cell.
pub fn write_records_csv<W: Write>(report: &GridReport, mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "schema,task,image,eta,alpha,psnr_db,init_psnr_db,iterations,status"
    )?;
    for r in &report.records {
        let status = match &r.status {
            RecordStatus::Ok => "ok".to_string(),
            RecordStatus::Failed(m) => csv_field(&format!("failed: {m}")),
        };
        writeln!(
            out,
            "{GRID_CSV_SCHEMA},{},{},{},{},{},{},{},{}",
            report.task,
            csv_field(&r.image),
            r.eta,
            r.alpha,
            db_or_empty(r.psnr),
            db_or_empty(r.init_psnr),
            r.iterations,
            status
        )?;
    }
    Ok(())
}

/// One row per cell with averages over the image set.
pub fn write_table_csv<W: Write>(report: &GridReport, mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "schema,task,eta,alpha,images,failed,mean_psnr_db,mean_init_psnr_db"
    )?;
    for c in &report.cells {
        writeln!(
            out,
            "{GRID_CSV_SCHEMA},{},{},{},{},{},{},{}",
            report.task,
            c.eta,
            c.alpha,
            c.images,
            c.failed,
            db_or_empty(c.mean_psnr),
            db_or_empty(c.mean_init_psnr)
        )?;
    }
    Ok(())
}

/// Wall-clock times, kept separate so the other CSVs stay reproducible.
pub fn write_timings_csv<W: Write>(report: &GridReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "task,image,eta,alpha,runtime_s")?;
    for r in &report.records {
        writeln!(
            out,
            "{},{},{},{},{:.6}",
            report.task,
            csv_field(&r.image),
            r.eta,
            r.alpha,
            r.runtime
        )?;
    }
    Ok(())
}

pub enum PlotSource<'a> {
    /// Per-epoch training losses.
    History(&'a [f64]),
    /// Mean PSNR against alpha, one series per sampling ratio.
    Grid(&'a GridReport),
}

/// Writes `x,y,series` rows.
pub fn emit_plot_data<W: Write>(source: PlotSource, mut out: W) -> std::io::Result<()> {
    writeln!(out, "x,y,series")?;
    match source {
        PlotSource::History(h) => {
            for (i, l) in h.iter().enumerate() {
                writeln!(out, "{},{:e},train_loss", i + 1, l)?;
            }
        }
        PlotSource::Grid(report) => {
            let mut etas: Vec<f64> = Vec::new();
            for c in &report.cells {
                if !etas.contains(&c.eta) {
                    etas.push(c.eta);
                }
            }
            for eta in etas {
                for c in report.cells.iter().filter(|c| c.eta == eta) {
                    writeln!(out, "{},{},eta={eta}", c.alpha, db_or_empty(c.mean_psnr))?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> GridReport {
        let cells = [
            (0.1, 10.0),
            (0.1, 30.0),
            (0.1, 50.0),
            (0.25, 10.0),
            (0.25, 30.0),
            (0.25, 50.0),
        ]
        .iter()
        .map(|&(eta, alpha)| CellSummary {
            eta,
            alpha,
            images: 2,
            failed: 0,
            mean_psnr: 20.0 + eta * 10.0 - alpha / 10.0 + 0.123_456,
            mean_init_psnr: 15.0,
        })
        .collect();
        GridReport {
            task: Task::Bcs,
            records: Vec::new(),
            cells,
        }
    }

    #[test]
    fn empty_history_is_header_only() {
        let mut buf = Vec::new();
        emit_plot_data(PlotSource::History(&[]), &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x,y,series\n");
    }

    #[test]
    fn grid_series_match_table() {
        let r = report();
        let mut plot = Vec::new();
        emit_plot_data(PlotSource::Grid(&r), &mut plot).unwrap();
        let plot = String::from_utf8(plot).unwrap();
        let rows: Vec<&str> = plot.lines().skip(1).collect();
        assert_eq!(rows.iter().filter(|l| l.ends_with("eta=0.1")).count(), 3);
        assert_eq!(rows.iter().filter(|l| l.ends_with("eta=0.25")).count(), 3);
        let mut table = Vec::new();
        write_table_csv(&r, &mut table).unwrap();
        let table = String::from_utf8(table).unwrap();
        for (row, line) in rows.iter().zip(table.lines().skip(1)) {
            let y = row.split(',').nth(1).unwrap();
            assert_eq!(y, line.split(',').nth(6).unwrap());
        }
    }

    #[test]
    fn empty_grid() {
        let g = ExperimentGrid {
            task: Task::Mri,
            cells: Vec::new(),
            checkpoint: "missing.ckpt".into(),
            images: Vec::new(),
            seed: 0,
            noise_scale: EIGHT_BIT_SCALE,
            save_images: None,
        };
        let r = run_grid(&g).unwrap();
        assert!(r.records.is_empty() && !r.has_failures());
    }

    #[test]
    fn quoting() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
