use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model_store::{BlockKind, WeightBlock};

use super::{BlockPosterior, Covariance, FitMeta, KroneckerFactors};

/// One calibration mini-batch for a dense layer: rows of `inputs` are layer
/// inputs `x` (dimension `cols`), rows of `grads` are output gradients `g`
/// (dimension `rows`).
#[derive(Debug, Clone)]
pub struct KfacBatch {
    pub inputs: DMatrix<f64>,
    pub grads: DMatrix<f64>,
}

fn second_moment(rows: &DMatrix<f64>) -> DMatrix<f64> {
    rows.transpose() * rows / rows.nrows() as f64
}

/// Kronecker-factored posterior `Σ ≈ G̃⁻¹ ⊗ Ã⁻¹` (row-major vectorization) for a dense matrix block.
///
/// `A` and `G` are exponential moving averages of the batch second moments
/// with new-batch weight `ema_decay`; the average starts from the first
/// batch. Damping is split across the factors, `Ã = A + √λ I`,
/// `G̃ = G + √λ I`, and only Cholesky factors are stored.
pub fn fit_kfac(block: &WeightBlock, batches: &[KfacBatch], ema_decay: f64, damping: f64) -> Result<BlockPosterior> {
    let (rows, cols) = match block.kind {
        BlockKind::DenseMatrix { rows, cols } => (rows, cols),
        _ => return Err(Error::invalid(format!("K-FAC needs a dense-matrix block, {} is {}", block.id, block.kind.tag()))),
    };
    if batches.is_empty() {
        return Err(Error::invalid("K-FAC needs at least one batch"));
    }
    if !(ema_decay > 0.0 && ema_decay <= 1.0) {
        return Err(Error::invalid(format!("EMA decay must be in (0, 1], got {ema_decay}")));
    }
    if !(damping >= 0.0) {
        return Err(Error::invalid(format!("damping must be >= 0, got {damping}")));
    }
    let mut a: Option<DMatrix<f64>> = None;
    let mut g: Option<DMatrix<f64>> = None;
    for batch in batches {
        if batch.inputs.ncols() != cols {
            return Err(Error::DimensionMismatch { expected: cols, got: batch.inputs.ncols() });
        }
        if batch.grads.ncols() != rows {
            return Err(Error::DimensionMismatch { expected: rows, got: batch.grads.ncols() });
        }
        if batch.inputs.nrows() == 0 || batch.grads.nrows() == 0 {
            return Err(Error::invalid("empty K-FAC batch"));
        }
        let (ba, bg) = (second_moment(&batch.inputs), second_moment(&batch.grads));
        a = Some(match a {
            None => ba,
            Some(prev) => prev * (1.0 - ema_decay) + ba * ema_decay,
        });
        g = Some(match g {
            None => bg,
            Some(prev) => prev * (1.0 - ema_decay) + bg * ema_decay,
        });
    }
    let shift = damping.sqrt();
    let a = a.unwrap() + DMatrix::identity(cols, cols) * shift;
    let g = g.unwrap() + DMatrix::identity(rows, rows) * shift;
    kronecker_posterior(block.values_f64(), rows, cols, a, g, damping)
}

/// Builds the posterior from already damped factors.
pub(crate) fn kronecker_posterior(
    mu: Vec<f64>,
    rows: usize,
    cols: usize,
    a_damped: DMatrix<f64>,
    g_damped: DMatrix<f64>,
    damping: f64,
) -> Result<BlockPosterior> {
    let chol = |m: DMatrix<f64>, name: &str| {
        m.cholesky()
            .map(|c| c.unpack())
            .ok_or_else(|| Error::Cholesky(format!("damped {name} factor is not positive definite; increase damping")))
    };
    let a_chol = chol(a_damped, "input (A)")?;
    let g_chol = chol(g_damped, "gradient (G)")?;
    let inv_sqrt = |l: &DMatrix<f64>| {
        let n = l.nrows();
        l.transpose()
            .solve_upper_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::Cholesky("singular Cholesky factor".into()))
    };
    let a_inv_sqrt = inv_sqrt(&a_chol)?;
    let g_inv_sqrt = inv_sqrt(&g_chol)?;
    Ok(BlockPosterior {
        mu,
        cov: Covariance::Kronecker(KroneckerFactors {
            rows,
            cols,
            a_chol,
            g_chol,
            a_inv_sqrt,
            g_inv_sqrt,
        }),
        damping,
        meta: FitMeta { probes: 0, seed: 0 },
    })
}
