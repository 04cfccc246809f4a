use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_models::Task;

/// Physical imaging conditions of one measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagingParams {
    pub task: Task,
    /// Sampling ratio.
    pub eta: f64,
    /// Noise level on the 0..50 scale.
    pub alpha: f64,
}

impl ImagingParams {
    pub fn new(task: Task, eta: f64, alpha: f64) -> Self {
        Self { task, eta, alpha }
    }
}

/// Which components enter the conditioning vector, and the maxima used to
/// normalize them. Order is `(kappa, eta, alpha)` with absent entries skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaLayout {
    pub kappa_max: Option<f64>,
    pub eta_max: Option<f64>,
    pub alpha_max: Option<f64>,
}

impl ThetaLayout {
    pub fn eta_only(eta_max: f64) -> Self {
        Self {
            kappa_max: None,
            eta_max: Some(eta_max),
            alpha_max: None,
        }
    }

    pub fn eta_alpha(eta_max: f64, alpha_max: f64) -> Self {
        Self {
            kappa_max: None,
            eta_max: Some(eta_max),
            alpha_max: Some(alpha_max),
        }
    }

    pub fn with_task(self, kappa_max: f64) -> Self {
        Self {
            kappa_max: Some(kappa_max),
            ..self
        }
    }

    pub fn dim(&self) -> usize {
        [self.kappa_max, self.eta_max, self.alpha_max]
            .iter()
            .filter(|m| m.is_some())
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::InvalidConfig(
                "conditioning vector needs at least one component".into(),
            ));
        }
        for m in [self.kappa_max, self.eta_max, self.alpha_max].into_iter().flatten() {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "normalization maximum must be positive, got {m}"
                )));
            }
        }
        Ok(())
    }

    /// Normalized conditioning vector.
    pub fn encode(&self, p: &ImagingParams) -> Vec<f64> {
        let mut theta = Vec::with_capacity(3);
        if let Some(m) = self.kappa_max {
            theta.push(p.task.code() / m);
        }
        if let Some(m) = self.eta_max {
            theta.push(p.eta / m);
        }
        if let Some(m) = self.alpha_max {
            theta.push(p.alpha / m);
        }
        theta
    }
}
