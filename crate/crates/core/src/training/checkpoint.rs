//! Versioned checkpoint container.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u64` metadata
//! length, UTF-8 TOML metadata, `u32` array count, then per array: `u32`
//! name length, name, `u32` rank, `u64` dims, `f64` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tensor};
use crate::dyn_prox::HyperNetParams;
use crate::error::{Error, Result};
use crate::forward_models::{BcsModel, MeasurementModel};
use crate::unroll::{Network, NetworkConfig};

use super::adam::Adam;
use super::bank::OperatorBank;
use super::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPUCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME: u32 = 4096;
const MAX_RANK: u32 = 8;
const MAX_ELEMS: u64 = 1 << 32;

/// Raw container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: String,
    pub arrays: IndexMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint(msg.into())
}

pub fn write_container<W: Write>(c: &Container, mut out: W) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    out.write_u64::<LittleEndian>(c.meta.len() as u64)?;
    out.write_all(c.meta.as_bytes())?;
    out.write_u32::<LittleEndian>(c.arrays.len() as u32)?;
    for (name, t) in &c.arrays {
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.write_all(name.as_bytes())?;
        out.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            out.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    out.flush()
}

pub fn read_container<R: Read>(mut input: R) -> Result<Container> {
    let io = |e: std::io::Error| bad(format!("truncated checkpoint: {e}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = input.read_u32::<LittleEndian>().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = input.read_u64::<LittleEndian>().map_err(io)?;
    if len > 1 << 24 {
        return Err(bad("metadata block too large"));
    }
    let mut meta = vec![0u8; len as usize];
    input.read_exact(&mut meta).map_err(io)?;
    let meta = String::from_utf8(meta).map_err(|_| bad("metadata is not UTF-8"))?;
    let count = input.read_u32::<LittleEndian>().map_err(io)?;
    let mut arrays = IndexMap::new();
    for _ in 0..count {
        let n = input.read_u32::<LittleEndian>().map_err(io)?;
        if n > MAX_NAME {
            return Err(bad("array name too long"));
        }
        let mut name = vec![0u8; n as usize];
        input.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("array name is not UTF-8"))?;
        let rank = input.read_u32::<LittleEndian>().map_err(io)?;
        if rank > MAX_RANK {
            return Err(bad(format!("array {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elems: u64 = 1;
        for _ in 0..rank {
            let d = input.read_u64::<LittleEndian>().map_err(io)?;
            elems = elems.saturating_mul(d);
            shape.push(d as usize);
        }
        if elems > MAX_ELEMS {
            return Err(bad(format!("array {name} is too large")));
        }
        let mut data = vec![0.0; elems as usize];
        input.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
        if arrays.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(bad(format!("duplicate array {name}")));
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(io)? != 0 {
        return Err(bad("trailing bytes after the last array"));
    }
    Ok(Container { meta, arrays })
}

/// Optimizer position of a run, enough to continue it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainProgress {
    pub config: TrainConfig,
    pub adam: Adam,
    /// Optimizer steps completed.
    pub global_step: usize,
    /// Mean batch loss of every completed step.
    pub step_losses: Vec<f64>,
}

/// A trained network with its measurement operators and, mid-training, the
/// optimizer state.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub network: Network,
    pub bank: OperatorBank,
    pub progress: Option<TrainProgress>,
}

#[derive(Serialize, Deserialize)]
struct BcsEntry {
    eta: f64,
    block: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ProgressMeta {
    config: TrainConfig,
    global_step: usize,
    adam_t: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    network: NetworkConfig,
    bank_seed: u64,
    #[serde(default)]
    bcs: Vec<BcsEntry>,
    progress: Option<ProgressMeta>,
}

fn take(arrays: &mut IndexMap<String, Tensor>, name: &str) -> Result<Tensor> {
    arrays
        .shift_remove(name)
        .ok_or_else(|| bad(format!("missing array {name}")))
}

fn take_prefixed(arrays: &IndexMap<String, Tensor>, prefix: &str) -> ParamSet {
    arrays
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
        .collect()
}

impl Snapshot {
    pub fn to_container(&self) -> Container {
        let mut arrays = IndexMap::new();
        for (k, v) in self.network.param_iter() {
            arrays.insert(format!("net.{k}"), v.clone());
        }
        let mut bcs = Vec::new();
        for (i, (eta, m)) in self.bank.bcs_models().enumerate() {
            bcs.push(BcsEntry {
                eta,
                block: m.block_size(),
                seed: m.seed(),
            });
            arrays.insert(format!("bcs.{i}.phi"), Tensor::from_array2(m.phi()));
            if let Some(q) = m.init_map() {
                arrays.insert(format!("bcs.{i}.init"), Tensor::from_array2(q));
            }
        }
        let progress = self.progress.as_ref().map(|p| {
            for (k, v) in &p.adam.m {
                arrays.insert(format!("adam.m.{k}"), v.clone());
            }
            for (k, v) in &p.adam.v {
                arrays.insert(format!("adam.v.{k}"), v.clone());
            }
            arrays.insert("history.step".into(), Tensor::vector(p.step_losses.clone()));
            ProgressMeta {
                config: p.config.clone(),
                global_step: p.global_step,
                adam_t: p.adam.t,
            }
        });
        let meta = Meta {
            network: self.network.config,
            bank_seed: self.bank.seed(),
            bcs,
            progress,
        };
        Container {
            meta: toml::to_string(&meta).expect("metadata is always serializable"),
            arrays,
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let meta: Meta = toml::from_str(&c.meta).map_err(|e| bad(format!("metadata: {e}")))?;
        meta.network.validate().map_err(|e| bad(e.to_string()))?;
        let mut arrays = c.arrays;
        let net_params = take_prefixed(&arrays, "net.");
        let hyper_names: Vec<String> = meta.network.hyper.shapes().into_iter().map(|(n, _)| n).collect();
        let mut hyper = ParamSet::new();
        for n in &hyper_names {
            hyper.insert(
                n.clone(),
                net_params
                    .get(n)
                    .cloned()
                    .ok_or_else(|| bad(format!("missing array net.{n}")))?,
            );
        }
        let hyper = HyperNetParams::from_parts(meta.network.hyper, hyper).map_err(|e| bad(e.to_string()))?;
        let mut network = Network::new(meta.network, 0).map_err(|e| bad(e.to_string()))?;
        network.hyper = hyper;
        for (k, v) in network.unroll_params.iter_mut() {
            let t = net_params.get(k).ok_or_else(|| bad(format!("missing array net.{k}")))?;
            if t.shape() != v.shape() {
                return Err(bad(format!("array net.{k} has shape {:?}", t.shape())));
            }
            *v = t.clone();
        }
        let mut bank = OperatorBank::new(meta.bank_seed);
        for (i, e) in meta.bcs.iter().enumerate() {
            let phi = take(&mut arrays, &format!("bcs.{i}.phi"))?.to_array2()?;
            let mut m = BcsModel::from_matrix(phi, e.block)
                .map_err(|err| bad(err.to_string()))?
                .with_meta(e.eta, e.seed);
            if let Some(q) = arrays.shift_remove(&format!("bcs.{i}.init")) {
                m.set_init_map(q.to_array2()?).map_err(|err| bad(err.to_string()))?;
            }
            bank.insert(e.eta, MeasurementModel::Bcs(m));
        }
        let progress = match meta.progress {
            None => None,
            Some(p) => {
                let mut adam = Adam::new(p.config.adam);
                adam.t = p.adam_t;
                adam.m = take_prefixed(&arrays, "adam.m.");
                adam.v = take_prefixed(&arrays, "adam.v.");
                let step_losses = take(&mut arrays, "history.step")?.data().to_vec();
                if step_losses.len() != p.global_step {
                    return Err(bad("loss history does not match the step counter"));
                }
                Some(TrainProgress {
                    config: p.config,
                    adam,
                    global_step: p.global_step,
                    step_losses,
                })
            }
        };
        Ok(Self {
            network,
            bank,
            progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        write_container(&self.to_container(), BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_container(read_container(BufReader::new(file))?)
    }
}
