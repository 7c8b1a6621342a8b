use crate::error::{Error, Result};
use crate::model_store::WeightBlock;
use crate::rng::{rademacher, seeded};

use super::{BlockPosterior, Covariance, CurvatureOracle, FitMeta, CURVATURE_FLOOR, VARIANCE_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct HutchinsonEstimate {
    pub diag: Vec<f64>,
    /// Per-coordinate standard error from the spread across probes
    /// (zero when only one probe was drawn).
    pub se: Vec<f64>,
    pub probes: usize,
}

/// Unbiased estimate of `diag(H)` from `probes` Rademacher vectors:
/// `(1/M) Σ v ⊙ (H v)`.
pub fn hutchinson_diag(oracle: &dyn CurvatureOracle, d: usize, probes: usize, seed: u64) -> Result<Vec<f64>> {
    Ok(hutchinson_diag_with_se(oracle, d, probes, seed)?.diag)
}

pub fn hutchinson_diag_with_se(
    oracle: &dyn CurvatureOracle,
    d: usize,
    probes: usize,
    seed: u64,
) -> Result<HutchinsonEstimate> {
    if probes == 0 {
        return Err(Error::invalid("hutchinson needs at least one probe"));
    }
    if oracle.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: oracle.dim(),
        });
    }
    let mut rng = seeded(seed);
    // Welford accumulators per coordinate.
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for k in 0..probes {
        let v = rademacher(&mut rng, d);
        let hv = oracle.apply(&v);
        if hv.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: hv.len(),
            });
        }
        let n = (k + 1) as f64;
        for i in 0..d {
            let x = v[i] * hv[i];
            let delta = x - mean[i];
            mean[i] += delta / n;
            m2[i] += delta * (x - mean[i]);
        }
    }
    let se = if probes > 1 {
        let m = probes as f64;
        m2.iter().map(|s| (s / (m - 1.0) / m).sqrt()).collect()
    } else {
        vec![0.0; d]
    };
    Ok(HutchinsonEstimate { diag: mean, se, probes })
}

/// Diagonal Laplace posterior from a curvature diagonal.
///
/// Negative curvature is clamped to zero, damping is added, the sum is
/// floored at [`CURVATURE_FLOOR`], and the inverted variance is floored at
/// [`VARIANCE_FLOOR`].
pub fn posterior_from_curvature(mu: Vec<f64>, curvature: &[f64], damping: f64, meta: FitMeta) -> Result<BlockPosterior> {
    if !(damping > 0.0) {
        return Err(Error::invalid(format!("damping must be > 0, got {damping}")));
    }
    if curvature.len() != mu.len() {
        return Err(Error::DimensionMismatch {
            expected: mu.len(),
            got: curvature.len(),
        });
    }
    let variances = curvature
        .iter()
        .map(|&h| (1.0 / (h.max(0.0) + damping).max(CURVATURE_FLOOR)).max(VARIANCE_FLOOR))
        .collect();
    Ok(BlockPosterior {
        mu,
        cov: Covariance::Diagonal(variances),
        damping,
        meta,
    })
}

pub fn fit_diag_laplace(
    block: &WeightBlock,
    oracle: &dyn CurvatureOracle,
    probes: usize,
    damping: f64,
    seed: u64,
) -> Result<BlockPosterior> {
    if !(damping > 0.0) {
        return Err(Error::invalid(format!("damping must be > 0, got {damping}")));
    }
    let h = hutchinson_diag(oracle, block.len(), probes, seed)?;
    posterior_from_curvature(block.values_f64(), &h, damping, FitMeta { probes, seed })
}
