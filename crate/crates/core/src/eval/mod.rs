//! Metrics, full-image evaluation, experiment grids and plot-data emission.

mod grid;

use std::sync::Arc;

use crate::dyn_prox::ImagingParams;
use crate::error::{dim_err, Result};
use crate::forward_models::{tile_blocks, untile_blocks, BlockGrid, Image, Measurement, MeasurementModel, Task};
use crate::training::{mix, OperatorBank};
use crate::unroll::{reconstruct, Network, ReconOptions, TraceEntry};

pub use grid::{
    emit_plot_data, run_grid, write_records_csv, write_table_csv, write_timings_csv, CellSummary, ExperimentGrid,
    GridReport, MetricRecord, PlotSource, RecordStatus, GRID_CSV_SCHEMA,
};

/// Peak signal-to-noise ratio in dB for a peak of 1.0; `+inf` when identical.
pub fn psnr(x_hat: &Image, x: &Image) -> Result<f64> {
    if x_hat.dim() != x.dim() {
        return Err(dim_err(format!(
            "images differ in shape: {:?} vs {:?}",
            x_hat.dim(),
            x.dim()
        )));
    }
    let n = x.len().max(1) as f64;
    let mse = x_hat.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// dB value with two decimals, `inf` for the identical-image sentinel.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.2}")
    }
}

/// Noisy measurements of one full image. BCS images are split into
/// reflect-padded blocks that are measured independently.
#[derive(Debug, Clone)]
pub struct MeasuredImage {
    pub params: ImagingParams,
    parts: Vec<(Arc<MeasurementModel>, Measurement)>,
    grid: Option<BlockGrid>,
}

impl MeasuredImage {
    pub fn new(
        bank: &mut OperatorBank,
        truth: &Image,
        params: ImagingParams,
        noise_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let measure =
            |m: &MeasurementModel, x: &Image, k: u64| m.measure_noisy(x, params.alpha, noise_scale, mix(&[seed, k]));
        if params.task == Task::Bcs {
            let block = bank
                .bcs_models()
                .find(|(eta, _)| *eta == params.eta)
                .map(|(_, m)| m.block_size())
                .ok_or_else(|| {
                    crate::Error::InvalidConfig(format!("no prepared BCS operator for eta={}", params.eta))
                })?;
            let model = bank.get(Task::Bcs, params.eta, (block, block))?;
            let (grid, blocks) = tile_blocks(truth, block)?;
            let parts = blocks
                .iter()
                .enumerate()
                .map(|(k, b)| Ok((model.clone(), measure(&model, b, k as u64)?)))
                .collect::<Result<_>>()?;
            Ok(Self {
                params,
                parts,
                grid: Some(grid),
            })
        } else {
            let model = bank.get(params.task, params.eta, truth.dim())?;
            let y = measure(&model, truth, 0)?;
            Ok(Self {
                params,
                parts: vec![(model, y)],
                grid: None,
            })
        }
    }

    fn assemble(&self, parts: Vec<Image>) -> Result<Image> {
        match &self.grid {
            Some(g) => untile_blocks(g, &parts),
            None => Ok(parts.into_iter().next().expect("one part")),
        }
    }

    /// Network output with `reported` as the conditioning parameters.
    pub fn reconstruct(&self, net: &Network, reported: &ImagingParams) -> Result<Image> {
        let parts = self
            .parts
            .iter()
            .map(|(m, y)| Ok(reconstruct(m, y, reported, net, &ReconOptions::default())?.image))
            .collect::<Result<_>>()?;
        self.assemble(parts)
    }

    /// Network output with per-iteration fidelity and PSNR against `truth`.
    /// Tiled BCS images have no single iterate sequence and are rejected.
    pub fn reconstruct_traced(
        &self,
        net: &Network,
        reported: &ImagingParams,
        truth: &Image,
    ) -> Result<(Image, Vec<TraceEntry>)> {
        if self.grid.is_some() {
            return Err(crate::Error::InvalidInput(
                "per-iteration traces need a single measurement; BCS images are measured block-wise".into(),
            ));
        }
        let (m, y) = &self.parts[0];
        let opts = ReconOptions {
            trace: true,
            ground_truth: Some(truth),
            init: None,
        };
        let r = reconstruct(m, y, reported, net, &opts)?;
        Ok((r.image, r.trace.unwrap_or_default()))
    }

    /// Per-modality initialization, real part clamped to `[0, 1]`.
    pub fn initial(&self) -> Result<Image> {
        let parts = self
            .parts
            .iter()
            .map(|(m, y)| Ok(m.initialize(y)?.mapv(|z| z.re.clamp(0.0, 1.0))))
            .collect::<Result<_>>()?;
        self.assemble(parts)
    }
}

/// Mean PSNR of the network and of the initialization over `images`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetScore {
    pub psnr: f64,
    pub init_psnr: f64,
}

/// Scores `images` at one imaging condition, optionally reporting a wrong
/// condition to the network.
pub fn score_images(
    net: &Network,
    bank: &mut OperatorBank,
    images: &[Image],
    params: ImagingParams,
    reported: Option<ImagingParams>,
    noise_scale: f64,
    seed: u64,
) -> Result<SetScore> {
    let (mut p, mut p0) = (0.0, 0.0);
    for (i, x) in images.iter().enumerate() {
        let m = MeasuredImage::new(bank, x, params, noise_scale, mix(&[seed, i as u64]))?;
        p += psnr(&m.reconstruct(net, &reported.unwrap_or(params))?, x)?;
        p0 += psnr(&m.initial()?, x)?;
    }
    let n = images.len().max(1) as f64;
    Ok(SetScore {
        psnr: p / n,
        init_psnr: p0 / n,
    })
}
