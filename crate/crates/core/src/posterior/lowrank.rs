use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model_store::WeightBlock;
use crate::rng::{derived, rademacher, standard_normal};

use super::hutchinson::fit_diag_laplace;
use super::{BlockPosterior, Covariance, CurvatureOracle, FitMeta, VARIANCE_FLOOR};

/// Randomized subspace iteration settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SketchConfig {
    pub oversample: usize,
    pub power_iters: usize,
}

impl Default for SketchConfig {
    fn default() -> Self {
        SketchConfig {
            oversample: 8,
            power_iters: 2,
        }
    }
}

/// Solves `(H + λI) x = b` by conjugate gradients using only oracle products.
pub(crate) fn cg_solve(oracle: &dyn CurvatureOracle, damping: f64, b: &DVector<f64>) -> DVector<f64> {
    let d = b.len();
    let apply = |v: &DVector<f64>| DVector::from_vec(oracle.apply(v.as_slice())) + v * damping;
    let mut x = DVector::zeros(d);
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let stop = (b.norm() * 1e-14).powi(2);
    for _ in 0..(4 * d + 20) {
        if rr <= stop {
            break;
        }
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if !(pap > 0.0) {
            break;
        }
        let a = rr / pap;
        x.axpy(a, &p, 1.0);
        r.axpy(-a, &ap, 1.0);
        let rr_new = r.dot(&r);
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
    }
    x
}

fn solve_columns(oracle: &dyn CurvatureOracle, damping: f64, m: &DMatrix<f64>) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = m
        .column_iter()
        .map(|c| cg_solve(oracle, damping, &c.into_owned()))
        .collect();
    DMatrix::from_columns(&cols)
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// Low-rank-plus-diagonal posterior `Σ ≈ U Uᵀ + diag(v)`.
///
/// `U` holds the top-`rank` eigenpairs of the damped inverse `(H + λI)⁻¹`,
/// found by randomized subspace iteration with conjugate-gradient solves
/// against the oracle, scaled by the square roots of their eigenvalues. `v`
/// is the diagonal of the residual `(H + λI)⁻¹ − U Uᵀ`, estimated with
/// `probes` Rademacher probes (exactly, by unit vectors, when
/// `probes ≥ d`) and floored at [`VARIANCE_FLOOR`].
///
/// `rank = 0` returns the diagonal Laplace posterior unchanged.
pub fn fit_lowrank_diag(
    block: &WeightBlock,
    oracle: &dyn CurvatureOracle,
    rank: usize,
    probes: usize,
    damping: f64,
    seed: u64,
) -> Result<BlockPosterior> {
    fit_lowrank_diag_with(block, oracle, rank, probes, damping, seed, SketchConfig::default())
}

pub fn fit_lowrank_diag_with(
    block: &WeightBlock,
    oracle: &dyn CurvatureOracle,
    rank: usize,
    probes: usize,
    damping: f64,
    seed: u64,
    sketch: SketchConfig,
) -> Result<BlockPosterior> {
    let d = block.len();
    if rank > d {
        return Err(Error::invalid(format!("rank {rank} exceeds block dimension {d}")));
    }
    if rank == 0 {
        return fit_diag_laplace(block, oracle, probes, damping, seed);
    }
    if !(damping > 0.0) {
        return Err(Error::invalid(format!("damping must be > 0, got {damping}")));
    }
    if probes == 0 {
        return Err(Error::invalid("low-rank fit needs at least one probe"));
    }
    if oracle.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: oracle.dim() });
    }

    let k = (rank + sketch.oversample).min(d);
    let mut rng = derived(seed, 1);
    let omega = DMatrix::from_fn(d, k, |_, _| standard_normal(&mut rng));
    let mut q = orthonormalize(solve_columns(oracle, damping, &omega));
    for _ in 0..sketch.power_iters {
        q = orthonormalize(solve_columns(oracle, damping, &q));
    }
    let sq = solve_columns(oracle, damping, &q);
    let small = q.transpose() * &sq;
    let small = (&small + small.transpose()) * 0.5;
    let eig = SymmetricEigen::new(small);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut u = DMatrix::zeros(d, rank);
    for (j, &idx) in order.iter().take(rank).enumerate() {
        let lam = eig.eigenvalues[idx].max(0.0);
        let vec = &q * eig.eigenvectors.column(idx);
        u.set_column(j, &(vec * lam.sqrt()));
    }

    let residual = |x: &DVector<f64>| cg_solve(oracle, damping, x) - &u * (u.transpose() * x);
    let mut diag = vec![0.0; d];
    if probes >= d {
        for (i, di) in diag.iter_mut().enumerate() {
            let mut e = DVector::zeros(d);
            e[i] = 1.0;
            *di = residual(&e)[i];
        }
    } else {
        let mut prng = derived(seed, 2);
        for _ in 0..probes {
            let v = DVector::from_vec(rademacher(&mut prng, d));
            let rv = residual(&v);
            for i in 0..d {
                diag[i] += v[i] * rv[i] / probes as f64;
            }
        }
    }
    let v = diag.into_iter().map(|x| x.max(VARIANCE_FLOOR)).collect();
    Ok(BlockPosterior {
        mu: block.values_f64(),
        cov: Covariance::LowRankDiag { u, v },
        damping,
        meta: FitMeta { probes, seed },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::{build_whitener, DenseOracle};
    use crate::rng::seeded;

    fn spd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded(seed);
        let a = DMatrix::from_fn(d, d, |_, _| standard_normal(&mut rng));
        &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.1
    }

    fn block(d: usize) -> WeightBlock {
        WeightBlock::vector("b", (0..d).map(|i| i as f32 * 0.01).collect()).unwrap()
    }

    #[test]
    fn rank_zero_is_diagonal_laplace() {
        let oracle = DenseOracle::new(spd(8, 1));
        let a = fit_lowrank_diag(&block(8), &oracle, 0, 16, 1e-3, 5).unwrap();
        let b = fit_diag_laplace(&block(8), &oracle, 16, 1e-3, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_rank_recovers_damped_inverse() {
        let h = spd(10, 2);
        let lam = 1e-3;
        let p = fit_lowrank_diag(&block(10), &DenseOracle::new(h.clone()), 10, 4, lam, 3).unwrap();
        let exact = (h + DMatrix::identity(10, 10) * lam).try_inverse().unwrap();
        let got = p.dense_covariance().unwrap();
        assert!((got - &exact).amax() < 1e-8 * exact.amax().max(1.0));
    }

    #[test]
    fn cg_matches_direct_solve() {
        let h = spd(12, 4);
        let b = DVector::from_fn(12, |i, _| i as f64 - 3.0);
        let x = cg_solve(&DenseOracle::new(h.clone()), 0.5, &b);
        let direct = (h + DMatrix::identity(12, 12) * 0.5).lu().solve(&b).unwrap();
        assert!((x - direct).norm() < 1e-10);
    }

    #[test]
    fn rank_one_structure_whitens_better_than_diagonal() {
        let d = 16;
        let mut rng = seeded(11);
        let h_diag: Vec<f64> = (0..d).map(|_| 0.5 + 1.5 * rand::Rng::random::<f64>(&mut rng)).collect();
        let b: Vec<f64> = (0..d).map(|_| 1.5 * standard_normal(&mut rng)).collect();
        let h = DMatrix::from_fn(d, d, |i, j| b[i] * b[j] + if i == j { h_diag[i] } else { 0.0 });
        let lam = 1e-3;
        let sigma = (h.clone() + DMatrix::identity(d, d) * lam).try_inverse().unwrap();
        let oracle = DenseOracle::new(h);
        let whitened_gap = |p: &BlockPosterior| {
            let w = build_whitener(p, None).unwrap();
            let s_inv = w.s_dense().unwrap().try_inverse().unwrap();
            (&s_inv * &sigma * s_inv.transpose() - DMatrix::identity(d, d)).norm()
        };
        let diag = fit_diag_laplace(&block(d), &oracle, d, lam, 0).unwrap();
        let lowrank = fit_lowrank_diag(&block(d), &oracle, 2, d, lam, 0).unwrap();
        assert!(whitened_gap(&lowrank) < whitened_gap(&diag));
    }

    #[test]
    fn rejects_rank_above_dimension() {
        let oracle = DenseOracle::new(spd(4, 0));
        assert!(fit_lowrank_diag(&block(4), &oracle, 5, 4, 1e-3, 0).is_err());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let oracle = DenseOracle::new(spd(20, 7));
        let a = fit_lowrank_diag(&block(20), &oracle, 3, 8, 1e-3, 9).unwrap();
        let b = fit_lowrank_diag(&block(20), &oracle, 3, 8, 1e-3, 9).unwrap();
        assert_eq!(a, b);
    }
}
