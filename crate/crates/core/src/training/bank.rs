use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::forward_models::{fit_bcs_init, BcsModel, CdpModel, Image, MeasurementModel, MriModel, Ridge, Task};

/// SplitMix64 finalizer folded over `parts`; used to derive independent seeds.
pub fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

type Key = (Task, u64, usize, usize);

/// Measurement operators fixed per task, sampling ratio and signal shape for
/// a whole run. BCS operators carry a fitted linear initializer and must be
/// prepared explicitly.
#[derive(Debug, Clone, Default)]
pub struct OperatorBank {
    seed: u64,
    models: BTreeMap<Key, Arc<MeasurementModel>>,
}

impl OperatorBank {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            models: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn key(task: Task, eta: f64, shape: (usize, usize)) -> Key {
        (task, eta.to_bits(), shape.0, shape.1)
    }

    /// Seed of the operator for `(task, eta, shape)`.
    pub fn operator_seed(&self, task: Task, eta: f64, shape: (usize, usize)) -> u64 {
        mix(&[
            self.seed,
            task.code() as u64,
            eta.to_bits(),
            shape.0 as u64,
            shape.1 as u64,
        ])
    }

    /// Draws the BCS matrix for `eta` and fits its initializer on `blocks`.
    pub fn prepare_bcs(&mut self, eta: f64, block: usize, blocks: &[Image]) -> Result<Arc<MeasurementModel>> {
        let key = Self::key(Task::Bcs, eta, (block, block));
        if let Some(m) = self.models.get(&key) {
            return Ok(m.clone());
        }
        if blocks.is_empty() {
            return Err(Error::InvalidInput("no blocks to fit the BCS initializer".into()));
        }
        let n = block * block;
        let mut model = BcsModel::new(block, eta, self.operator_seed(Task::Bcs, eta, (block, block)))?;
        let mut x = Array2::zeros((n, blocks.len()));
        for (j, b) in blocks.iter().enumerate() {
            if b.dim() != (block, block) {
                return Err(Error::InvalidDimension(format!(
                    "fit block is {:?}, expected {block}x{block}",
                    b.dim()
                )));
            }
            x.column_mut(j).assign(&ndarray::Array1::from_iter(b.iter().copied()));
        }
        let q = fit_bcs_init(&x, &model, Ridge::default())?;
        model.set_init_map(q)?;
        let m = Arc::new(MeasurementModel::Bcs(model));
        self.models.insert(key, m.clone());
        Ok(m)
    }

    /// Registers an existing operator, replacing any with the same key.
    pub fn insert(&mut self, eta: f64, model: MeasurementModel) -> Arc<MeasurementModel> {
        let key = Self::key(model.task(), eta, model.signal_shape());
        let m = Arc::new(model);
        self.models.insert(key, m.clone());
        m
    }

    /// Operator for `(task, eta, shape)`; MRI and CDP operators are built on
    /// first use, BCS operators must have been prepared.
    pub fn get(&mut self, task: Task, eta: f64, shape: (usize, usize)) -> Result<Arc<MeasurementModel>> {
        let key = Self::key(task, eta, shape);
        if let Some(m) = self.models.get(&key) {
            return Ok(m.clone());
        }
        let seed = self.operator_seed(task, eta, shape);
        let model = match task {
            Task::Bcs => {
                return Err(Error::InvalidConfig(format!(
                    "no prepared BCS operator for eta={eta} and block {}x{}",
                    shape.0, shape.1
                )))
            }
            Task::Mri => MeasurementModel::Mri(MriModel::new(shape.0, shape.1, eta, seed)?),
            Task::Cpr => MeasurementModel::Cdp(CdpModel::new(shape.0, shape.1, eta, seed)?),
        };
        let m = Arc::new(model);
        self.models.insert(key, m.clone());
        Ok(m)
    }

    /// Prepared BCS operators with their sampling ratios, in key order.
    pub fn bcs_models(&self) -> impl Iterator<Item = (f64, &BcsModel)> {
        self.models.iter().filter_map(|((_, eta, _, _), m)| match m.as_ref() {
            MeasurementModel::Bcs(b) => Some((f64::from_bits(*eta), b)),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::synthetic_image;

    #[test]
    fn seeds_differ_per_key() {
        let b = OperatorBank::new(1);
        let a = b.operator_seed(Task::Mri, 0.2, (8, 8));
        assert_ne!(a, b.operator_seed(Task::Mri, 0.3, (8, 8)));
        assert_ne!(a, b.operator_seed(Task::Cpr, 0.2, (8, 8)));
        assert_ne!(a, OperatorBank::new(2).operator_seed(Task::Mri, 0.2, (8, 8)));
        assert_ne!(mix(&[1, 2]), mix(&[2, 1]));
    }

    #[test]
    fn operators_are_cached() {
        let mut b = OperatorBank::new(3);
        let m1 = b.get(Task::Mri, 0.3, (8, 8)).unwrap();
        let m2 = b.get(Task::Mri, 0.3, (8, 8)).unwrap();
        assert!(Arc::ptr_eq(&m1, &m2));
        assert!(matches!(b.get(Task::Bcs, 0.3, (6, 6)), Err(Error::InvalidConfig(_))));
        let blocks: Vec<Image> = (0..60).map(|s| synthetic_image(6, 6, s)).collect();
        let m = b.prepare_bcs(0.5, 6, &blocks).unwrap();
        assert!(Arc::ptr_eq(&m, &b.get(Task::Bcs, 0.5, (6, 6)).unwrap()));
        assert_eq!(b.bcs_models().count(), 1);
    }
}
