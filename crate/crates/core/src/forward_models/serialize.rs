//! Binary container for measurement models.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u8` model kind,
//! `u32` height, `u32` width, `u64` seed, `u64` payload length, then the
//! payload as `f64` values.
//!
//! Payloads:
//! - BCS: `eta, m, has_init, phi[m*n], init_map[n*m]?`
//! - MRI: `eta, mask[h*w]` (0/1, DC-centered layout)
//! - CDP: `eta, m, phase[2*h*w]` (re, im interleaved), `selector[m]`

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use num_complex::Complex64;

use super::{BcsModel, CdpModel, MeasurementModel, MriModel};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"DPUMODL\0";
pub const MODEL_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint(msg.into())
}

pub fn write_model<W: Write>(model: &MeasurementModel, mut out: W) -> std::io::Result<()> {
    let (h, w) = model.signal_shape();
    let (kind, seed, payload): (u8, u64, Vec<f64>) = match model {
        MeasurementModel::Bcs(m) => {
            let mut p = vec![m.sampling_ratio(), m.m() as f64];
            p.push(if m.init_map().is_some() { 1.0 } else { 0.0 });
            p.extend(m.phi().iter());
            if let Some(q) = m.init_map() {
                p.extend(q.iter());
            }
            (0, m.seed(), p)
        }
        MeasurementModel::Mri(m) => {
            let mut p = vec![m.sampling_ratio()];
            p.extend(m.mask().iter().map(|&b| if b { 1.0 } else { 0.0 }));
            (1, m.seed(), p)
        }
        MeasurementModel::Cdp(m) => {
            let mut p = vec![m.sampling_ratio(), m.num_measurements() as f64];
            p.extend(m.phase_mask().iter().flat_map(|z| [z.re, z.im]));
            p.extend(m.row_selector().iter().map(|&i| i as f64));
            (2, m.seed(), p)
        }
    };
    out.write_all(MODEL_MAGIC)?;
    out.write_u32::<LittleEndian>(MODEL_VERSION)?;
    out.write_u8(kind)?;
    out.write_u32::<LittleEndian>(h as u32)?;
    out.write_u32::<LittleEndian>(w as u32)?;
    out.write_u64::<LittleEndian>(seed)?;
    out.write_u64::<LittleEndian>(payload.len() as u64)?;
    for v in payload {
        out.write_f64::<LittleEndian>(v)?;
    }
    out.flush()
}

pub fn read_model<R: Read>(mut input: R) -> Result<MeasurementModel> {
    let io = |e: std::io::Error| bad(format!("truncated model file: {e}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != MODEL_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = input.read_u32::<LittleEndian>().map_err(io)?;
    if version != MODEL_VERSION {
        return Err(bad(format!("model version {version}, expected {MODEL_VERSION}")));
    }
    let kind = input.read_u8().map_err(io)?;
    let h = input.read_u32::<LittleEndian>().map_err(io)? as usize;
    let w = input.read_u32::<LittleEndian>().map_err(io)? as usize;
    let seed = input.read_u64::<LittleEndian>().map_err(io)?;
    let len = input.read_u64::<LittleEndian>().map_err(io)? as usize;
    if len > (1 << 32) {
        return Err(bad("implausible payload length"));
    }
    let mut p = vec![0.0; len];
    input.read_f64_into::<LittleEndian>(&mut p).map_err(io)?;
    let need = |n: usize| {
        if p.len() < n {
            Err(bad("payload too short"))
        } else {
            Ok(())
        }
    };
    match kind {
        0 => {
            need(3)?;
            let (eta, m, has_init) = (p[0], p[1] as usize, p[2] != 0.0);
            let n = h * w;
            need(3 + m * n + if has_init { n * m } else { 0 })?;
            let phi = Array2::from_shape_vec((m, n), p[3..3 + m * n].to_vec()).map_err(|e| bad(e.to_string()))?;
            let mut model = BcsModel::from_matrix(phi, h)?;
            if has_init {
                let q = Array2::from_shape_vec((n, m), p[3 + m * n..3 + 2 * m * n].to_vec())
                    .map_err(|e| bad(e.to_string()))?;
                model.set_init_map(q)?;
            }
            Ok(MeasurementModel::Bcs(model.with_meta(eta, seed)))
        }
        1 => {
            need(1 + h * w)?;
            let mask = Array2::from_shape_vec((h, w), p[1..1 + h * w].iter().map(|&v| v != 0.0).collect())
                .map_err(|e| bad(e.to_string()))?;
            Ok(MeasurementModel::Mri(MriModel::from_mask(mask)?.with_meta(p[0], seed)))
        }
        2 => {
            need(2)?;
            let m = p[1] as usize;
            need(2 + 2 * h * w + m)?;
            let phase = Array2::from_shape_vec(
                (h, w),
                p[2..2 + 2 * h * w]
                    .chunks_exact(2)
                    .map(|c| Complex64::new(c[0], c[1]))
                    .collect(),
            )
            .map_err(|e| bad(e.to_string()))?;
            let sel = p[2 + 2 * h * w..2 + 2 * h * w + m]
                .iter()
                .map(|&v| v as usize)
                .collect();
            Ok(MeasurementModel::Cdp(
                CdpModel::from_parts(phase, sel)?.with_meta(p[0], seed),
            ))
        }
        k => Err(bad(format!("unknown model kind {k}"))),
    }
}

pub fn save_model(model: &MeasurementModel, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(model, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<MeasurementModel> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(BufReader::new(f))
}
