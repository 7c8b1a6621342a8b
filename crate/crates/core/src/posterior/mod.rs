//! Gaussian posteriors over weight blocks and the whiteners derived from them.
//!
//! Curvature enters only through [`CurvatureOracle`] matrix-vector products.
//! Three covariance structures are supported: diagonal Laplace (Hutchinson
//! probes), Kronecker-factored (K-FAC) for dense matrices, and
//! low-rank-plus-diagonal. Explicit dense covariances exist for small blocks
//! and tests.

mod hutchinson;
mod kfac;
mod lowrank;
mod oracle;
mod whitener;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_vec, SeededRng};

pub use hutchinson::{fit_diag_laplace, hutchinson_diag, hutchinson_diag_with_se, posterior_from_curvature, HutchinsonEstimate};
pub use kfac::{fit_kfac, KfacBatch};
pub use lowrank::{fit_lowrank_diag, fit_lowrank_diag_with, SketchConfig};
pub use oracle::{CurvatureOracle, CurvatureSource, DenseOracle, DiagonalOracle, FnOracle};
pub use whitener::{build_whitener, Whitener, WhitenerKind};

/// Negative curvature is clamped to zero, then `h + λ` is floored here.
pub const CURVATURE_FLOOR: f64 = 1e-8;
/// Lower bound on every posterior variance.
pub const VARIANCE_FLOOR: f64 = 1e-9;
/// Eigenvalue clip used by eigen-route whiteners.
pub const SPECTRUM_CLIP: f64 = 1e-8;
/// Largest block for which a dense covariance may be materialized.
pub const DENSE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub probes: usize,
    pub seed: u64,
}

/// Kronecker factors of a `rows × cols` matrix block (row-major vectorization).
///
/// The covariance of entries `(r, c)` and `(r', c')` is
/// `G̃⁻¹[r, r'] · Ã⁻¹[c, c']`, i.e. `Σ = G̃⁻¹ ⊗ Ã⁻¹` on the row-major vector,
/// which is `Ã⁻¹ ⊗ G̃⁻¹` under column-major vectorization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KroneckerFactors {
    pub rows: usize,
    pub cols: usize,
    /// Lower Cholesky factor of the damped input factor `Ã` (`cols × cols`).
    pub a_chol: DMatrix<f64>,
    /// Lower Cholesky factor of the damped gradient factor `G̃` (`rows × rows`).
    pub g_chol: DMatrix<f64>,
    /// `L_A⁻ᵀ`, a square root of `Ã⁻¹`.
    pub a_inv_sqrt: DMatrix<f64>,
    /// `L_G⁻ᵀ`, a square root of `G̃⁻¹`.
    pub g_inv_sqrt: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Kronecker(KroneckerFactors),
    /// `U Uᵀ + diag(v)`.
    LowRankDiag { u: DMatrix<f64>, v: Vec<f64> },
    Dense(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPosterior {
    pub mu: Vec<f64>,
    pub cov: Covariance,
    pub damping: f64,
    pub meta: FitMeta,
}

impl BlockPosterior {
    pub fn diagonal(mu: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let p = BlockPosterior {
            mu,
            cov: Covariance::Diagonal(variances),
            damping: 0.0,
            meta: FitMeta { probes: 0, seed: 0 },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dense(mu: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let p = BlockPosterior {
            mu,
            cov: Covariance::Dense(cov),
            damping: 0.0,
            meta: FitMeta { probes: 0, seed: 0 },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let dims = |got: usize| {
            if got != d {
                Err(Error::DimensionMismatch { expected: d, got })
            } else {
                Ok(())
            }
        };
        match &self.cov {
            Covariance::Diagonal(v) => {
                dims(v.len())?;
                if v.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                    return Err(Error::invalid("diagonal variances must be positive and finite"));
                }
            }
            Covariance::Kronecker(k) => {
                dims(k.rows * k.cols)?;
                for (name, l) in [("A", &k.a_chol), ("G", &k.g_chol)] {
                    if l.diagonal().iter().any(|&x| !(x > 0.0)) {
                        return Err(Error::Cholesky(format!("factor {name} is not positive definite")));
                    }
                }
            }
            Covariance::LowRankDiag { u, v } => {
                dims(v.len())?;
                if u.nrows() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: u.nrows() });
                }
                if v.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::invalid("low-rank diagonal part must be positive"));
                }
            }
            Covariance::Dense(c) => {
                dims(c.nrows())?;
                dims(c.ncols())?;
            }
        }
        Ok(())
    }

    /// `tr(Σ)`.
    pub fn trace(&self) -> f64 {
        match &self.cov {
            Covariance::Diagonal(v) => v.iter().sum(),
            Covariance::Kronecker(k) => k.a_inv_sqrt.norm_squared() * k.g_inv_sqrt.norm_squared(),
            Covariance::LowRankDiag { u, v } => v.iter().sum::<f64>() + u.norm_squared(),
            Covariance::Dense(c) => c.trace(),
        }
    }

    /// `tr(Σ⁻¹)`, used for the saliency tie-breaker `tr(Σ⁻¹)/d`.
    pub fn precision_trace(&self) -> Result<f64> {
        match &self.cov {
            Covariance::Diagonal(v) => Ok(v.iter().map(|s| 1.0 / s).sum()),
            Covariance::Kronecker(k) => {
                let a = &k.a_chol * k.a_chol.transpose();
                let g = &k.g_chol * k.g_chol.transpose();
                Ok(a.trace() * g.trace())
            }
            Covariance::LowRankDiag { u, v } => {
                let r = u.ncols();
                let dinv = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(v.len(), v.iter().map(|s| 1.0 / s)));
                let du = &dinv * u;
                let core = DMatrix::identity(r, r) + u.transpose() * &du;
                let core_inv = core
                    .cholesky()
                    .ok_or_else(|| Error::Cholesky("Woodbury core".into()))?
                    .inverse();
                let correction = (core_inv * (du.transpose() * &du)).trace();
                Ok(v.iter().map(|s| 1.0 / s).sum::<f64>() - correction)
            }
            Covariance::Dense(c) => Ok(c
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Cholesky("dense covariance".into()))?
                .inverse()
                .trace()),
        }
    }

    pub fn saliency(&self) -> Result<f64> {
        Ok(self.precision_trace()? / self.dim() as f64)
    }

    /// Materializes `Σ`; refused above [`DENSE_LIMIT`].
    pub fn dense_covariance(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if d > DENSE_LIMIT {
            return Err(Error::invalid(format!("block of dimension {d} exceeds dense limit {DENSE_LIMIT}")));
        }
        Ok(match &self.cov {
            Covariance::Diagonal(v) => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v)),
            Covariance::Kronecker(k) => {
                let a_inv = &k.a_inv_sqrt * k.a_inv_sqrt.transpose();
                let g_inv = &k.g_inv_sqrt * k.g_inv_sqrt.transpose();
                g_inv.kronecker(&a_inv)
            }
            Covariance::LowRankDiag { u, v } => {
                u * u.transpose() + DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v))
            }
            Covariance::Dense(c) => c.clone(),
        })
    }

    /// Draws `w = μ + S n` with `S Sᵀ = Σ`.
    pub fn sample(&self, rng: &mut SeededRng) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut w = self.mu.clone();
        match &self.cov {
            Covariance::Diagonal(v) => {
                for (wi, vi) in w.iter_mut().zip(v) {
                    *wi += vi.sqrt() * crate::rng::standard_normal(rng);
                }
            }
            Covariance::Kronecker(k) => {
                let n = DMatrix::from_row_slice(k.rows, k.cols, &normal_vec(rng, d));
                let x = &k.g_inv_sqrt * n * k.a_inv_sqrt.transpose();
                for r in 0..k.rows {
                    for c in 0..k.cols {
                        w[r * k.cols + c] += x[(r, c)];
                    }
                }
            }
            Covariance::LowRankDiag { u, v } => {
                let z = nalgebra::DVector::from_vec(normal_vec(rng, u.ncols()));
                let low = u * z;
                for i in 0..d {
                    w[i] += low[i] + v[i].sqrt() * crate::rng::standard_normal(rng);
                }
            }
            Covariance::Dense(c) => {
                let l = c
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Cholesky("dense covariance sampling".into()))?
                    .unpack();
                let x = l * nalgebra::DVector::from_vec(normal_vec(rng, d));
                for i in 0..d {
                    w[i] += x[i];
                }
            }
        }
        Ok(w)
    }

    /// Restricts a diagonal posterior to a contiguous coordinate range.
    pub fn slice_diagonal(&self, start: usize, len: usize) -> Result<BlockPosterior> {
        match &self.cov {
            Covariance::Diagonal(v) => Ok(BlockPosterior {
                mu: self.mu[start..start + len].to_vec(),
                cov: Covariance::Diagonal(v[start..start + len].to_vec()),
                damping: self.damping,
                meta: self.meta,
            }),
            _ => Err(Error::invalid("only diagonal posteriors can be sliced into sub-blocks")),
        }
    }
}

/// Knobs shared by the posterior fitters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosteriorConfig {
    pub probes: usize,
    pub damping: f64,
    pub ema_decay: f64,
    pub rank: usize,
    pub seed: u64,
    /// Multiplies damping by 5 and enables the PCA whitening fallback.
    pub small_calib: bool,
    /// Use `max(1e-3, 0.01·median(diag H))` instead of the fixed damping.
    pub median_damping: bool,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        PosteriorConfig {
            probes: 16,
            damping: 1e-3,
            ema_decay: 0.05,
            rank: 32,
            seed: 0,
            small_calib: false,
            median_damping: false,
        }
    }
}

impl PosteriorConfig {
    /// Small calibration sets (fewer than 50 examples, or the explicit flag)
    /// get five times the damping.
    pub fn is_small_calib(&self, calib_size: Option<usize>) -> bool {
        self.small_calib || calib_size.is_some_and(|n| n < 50)
    }

    pub fn effective_damping(&self, calib_size: Option<usize>) -> f64 {
        if self.is_small_calib(calib_size) {
            self.damping * 5.0
        } else {
            self.damping
        }
    }
}

/// Damping heuristic `max(1e-3, 0.01 · median(diag))`.
pub fn median_damping(diag: &[f64]) -> f64 {
    if diag.is_empty() {
        return 1e-3;
    }
    let mut s = diag.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    (0.01 * median).max(1e-3)
}
