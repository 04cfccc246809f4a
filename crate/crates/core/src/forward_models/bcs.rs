use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};

/// Dense `m x n` matrix with i.i.d. `N(0, 1/m)` entries.
///
/// Columns have unit expected squared norm.
pub fn make_gaussian_matrix(m: usize, n: usize, seed: u64) -> Result<Array2<f64>> {
    if m == 0 || m > n {
        return Err(dim_err(format!("gaussian matrix needs 1 <= m <= n, got m={m}, n={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (m as f64).sqrt()).expect("positive std");
    Ok(Array2::from_shape_simple_fn((m, n), || normal.sample(&mut rng)))
}

/// Number of measurements for a block of `n` pixels at ratio `eta`.
pub fn measurement_count(n: usize, eta: f64) -> usize {
    ((eta * n as f64).round() as usize).clamp(1, n)
}

/// Block compressive sensing operator `y = Phi x` on vectorized square blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BcsModel {
    phi: Array2<f64>,
    block_size: usize,
    sampling_ratio: f64,
    seed: u64,
    init_map: Option<Array2<f64>>,
}

impl BcsModel {
    /// Random Gaussian sensing matrix for `block_size x block_size` blocks.
    ///
    /// The matrix from [`make_gaussian_matrix`] is rescaled by `sqrt(m/n)`,
    /// giving rows of unit expected norm so that `||Phi||^2 <= (1 + sqrt(eta))^2`
    /// for every ratio and a single step size stays stable across ratios.
    pub fn new(block_size: usize, eta: f64, seed: u64) -> Result<Self> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "sampling ratio must be in (0, 1], got {eta}"
            )));
        }
        if block_size == 0 {
            return Err(dim_err("block size must be positive"));
        }
        let n = block_size * block_size;
        let m = measurement_count(n, eta);
        let mut phi = make_gaussian_matrix(m, n, seed)?;
        phi *= (m as f64 / n as f64).sqrt();
        Ok(Self {
            phi,
            block_size,
            sampling_ratio: eta,
            seed,
            init_map: None,
        })
    }

    /// Wraps an explicit sensing matrix; `phi` must have `block_size^2` columns.
    pub fn from_matrix(phi: Array2<f64>, block_size: usize) -> Result<Self> {
        let (m, n) = phi.dim();
        if n != block_size * block_size || m == 0 || m > n {
            return Err(dim_err(format!(
                "sensing matrix {m}x{n} does not fit block size {block_size}"
            )));
        }
        Ok(Self {
            sampling_ratio: m as f64 / n as f64,
            phi,
            block_size,
            seed: 0,
            init_map: None,
        })
    }

    pub(crate) fn with_meta(mut self, eta: f64, seed: u64) -> Self {
        self.sampling_ratio = eta;
        self.seed = seed;
        self
    }

    pub fn phi(&self) -> &Array2<f64> {
        &self.phi
    }
    pub fn block_size(&self) -> usize {
        self.block_size
    }
    pub fn sampling_ratio(&self) -> f64 {
        self.sampling_ratio
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn m(&self) -> usize {
        self.phi.nrows()
    }
    pub fn n(&self) -> usize {
        self.phi.ncols()
    }
    pub fn init_map(&self) -> Option<&Array2<f64>> {
        self.init_map.as_ref()
    }

    pub fn set_init_map(&mut self, q: Array2<f64>) -> Result<()> {
        if q.dim() != (self.n(), self.m()) {
            return Err(dim_err(format!(
                "init map must be {}x{}, got {:?}",
                self.n(),
                self.m(),
                q.dim()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("init map has non-finite entries".into()));
        }
        self.init_map = Some(q);
        Ok(())
    }

    pub fn forward(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.n() {
            return Err(dim_err(format!(
                "block vector has length {}, expected {}",
                x.len(),
                self.n()
            )));
        }
        Ok(self.phi.dot(x))
    }

    pub fn adjoint(&self, y: &Array1<f64>) -> Result<Array1<f64>> {
        if y.len() != self.m() {
            return Err(dim_err(format!(
                "measurement has length {}, expected {}",
                y.len(),
                self.m()
            )));
        }
        Ok(self.phi.t().dot(y))
    }

    /// Linear initializer `x0 = Q y`.
    pub fn init(&self, y: &Array1<f64>) -> Result<Array1<f64>> {
        let q = self.init_map.as_ref().ok_or(Error::NotFitted)?;
        if y.len() != self.m() {
            return Err(dim_err(format!(
                "measurement has length {}, expected {}",
                y.len(),
                self.m()
            )));
        }
        Ok(q.dot(y))
    }
}

/// Ridge regularization used by [`fit_bcs_init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    /// `delta = factor * trace(Y Y^T) / M`.
    Relative(f64),
    Absolute(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-6)
    }
}

/// Least-squares linear initializer `Q = X Y^T (Y Y^T + delta I)^-1` with `Y = Phi X`.
///
/// `blocks` holds one vectorized training block per column (`N x P`).
pub fn fit_bcs_init(blocks: &Array2<f64>, model: &BcsModel, ridge: Ridge) -> Result<Array2<f64>> {
    let (n, p) = blocks.dim();
    if n != model.n() {
        return Err(dim_err(format!(
            "training blocks have {n} rows, expected {}",
            model.n()
        )));
    }
    if p == 0 {
        return Err(dim_err("no training blocks"));
    }
    let m = model.m();
    let y = model.phi().dot(blocks);
    let yyt = y.dot(&y.t());
    let xyt = blocks.dot(&y.t());
    let delta = match ridge {
        Ridge::Relative(f) => f * yyt.diag().sum() / m as f64,
        Ridge::Absolute(d) => d,
    };
    if delta < 0.0 || !delta.is_finite() {
        return Err(Error::InvalidParameter(format!("ridge must be >= 0, got {delta}")));
    }
    let mut g = DMatrix::from_fn(m, m, |i, j| yyt[[i, j]]);
    for i in 0..m {
        g[(i, i)] += delta;
    }
    let max_diag = (0..m).map(|i| g[(i, i)]).fold(0.0_f64, f64::max);
    let chol = g
        .cholesky()
        .ok_or_else(|| Error::SingularSystem("Y Y^T + delta I is not positive definite".into()))?;
    let l = chol.l_dirty();
    let min_pivot = (0..m).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-13 * max_diag {
        return Err(Error::SingularSystem(format!(
            "measurement Gram matrix is rank deficient (pivot ratio {:.3e})",
            min_pivot / max_diag
        )));
    }
    // Q^T = G^-1 (X Y^T)^T, since G is symmetric.
    let rhs = DMatrix::from_fn(m, n, |i, j| xyt[[j, i]]);
    let qt = chol.solve(&rhs);
    let q = Array2::from_shape_fn((n, m), |(i, j)| qt[(j, i)]);
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem("non-finite initializer".into()));
    }
    Ok(q)
}
