use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{BlockPosterior, Covariance, DENSE_LIMIT, SPECTRUM_CLIP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WhitenerKind {
    Cholesky,
    Eigen,
    PcaFallback,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Repr {
    /// `S = diag(scale)`.
    Diagonal { scale: Vec<f64> },
    /// `S = S_G ⊗ S_A` on the row-major vector. Only the Cholesky factors
    /// and their inverse transposes are kept.
    Kronecker {
        rows: usize,
        cols: usize,
        a_chol: DMatrix<f64>,
        g_chol: DMatrix<f64>,
        a_inv_sqrt: DMatrix<f64>,
        g_inv_sqrt: DMatrix<f64>,
    },
    Dense { s: DMatrix<f64>, s_inv: DMatrix<f64> },
}

/// Affine map `z = S⁻¹ (w − μ)` with `S Sᵀ = Σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Whitener {
    pub kind: WhitenerKind,
    pub mu: Vec<f64>,
    pub spectrum_clip: f64,
    repr: Repr,
}

fn eigen_sqrt(cov: &DMatrix<f64>, clip: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.max(clip));
    let q = eig.eigenvectors;
    let mut s = q.clone();
    let mut s_inv_t = q;
    for (j, &l) in vals.iter().enumerate() {
        let r = l.sqrt();
        s.column_mut(j).scale_mut(r);
        s_inv_t.column_mut(j).scale_mut(1.0 / r);
    }
    (s, s_inv_t.transpose())
}

impl Whitener {
    pub fn diagonal(mu: Vec<f64>, variances: &[f64]) -> Result<Self> {
        if variances.len() != mu.len() {
            return Err(Error::DimensionMismatch { expected: mu.len(), got: variances.len() });
        }
        if variances.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("whitener variances must be positive and finite"));
        }
        Ok(Whitener {
            kind: WhitenerKind::Diagonal,
            mu,
            spectrum_clip: SPECTRUM_CLIP,
            repr: Repr::Diagonal {
                scale: variances.iter().map(|v| v.sqrt()).collect(),
            },
        })
    }

    pub fn identity(d: usize) -> Self {
        Whitener {
            kind: WhitenerKind::Diagonal,
            mu: vec![0.0; d],
            spectrum_clip: SPECTRUM_CLIP,
            repr: Repr::Diagonal { scale: vec![1.0; d] },
        }
    }

    /// Per-group data whitener: every coordinate of group `j` is centered at
    /// the group mean and divided by the group standard deviation (1 for a
    /// constant group). This is the whitener behind affine export.
    pub fn per_group(values: &[f64], group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::invalid("group size must be >= 1"));
        }
        let mut mu = Vec::with_capacity(values.len());
        let mut scale = Vec::with_capacity(values.len());
        for g in values.chunks(group_size) {
            let n = g.len() as f64;
            let mean = g.iter().sum::<f64>() / n;
            let var = g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
            mu.extend(std::iter::repeat_n(mean, g.len()));
            scale.extend(std::iter::repeat_n(sd, g.len()));
        }
        Ok(Whitener {
            kind: WhitenerKind::Diagonal,
            mu,
            spectrum_clip: SPECTRUM_CLIP,
            repr: Repr::Diagonal { scale },
        })
    }

    /// Eigen-route whitener of an explicit covariance, eigenvalues clipped
    /// below at `clip`.
    pub fn from_covariance(mu: Vec<f64>, cov: &DMatrix<f64>, clip: f64) -> Result<Self> {
        let d = mu.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: cov.nrows() });
        }
        if cov.iter().any(|x| !x.is_finite()) {
            return Err(Error::NoWhitener("covariance has non-finite entries".into()));
        }
        let (s, s_inv) = eigen_sqrt(cov, clip);
        Ok(Whitener {
            kind: WhitenerKind::Eigen,
            mu,
            spectrum_clip: clip,
            repr: Repr::Dense { s, s_inv },
        })
    }

    /// PCA fallback: covariance estimated from sample rows.
    pub fn pca(mu: Vec<f64>, samples: &DMatrix<f64>, clip: f64) -> Result<Self> {
        let (n, d) = samples.shape();
        if d != mu.len() {
            return Err(Error::DimensionMismatch { expected: mu.len(), got: d });
        }
        if n < 2 {
            return Err(Error::NoWhitener("PCA fallback needs at least two samples".into()));
        }
        let mean = samples.row_mean();
        let mut centered = samples.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let mut w = Whitener::from_covariance(mu, &cov, clip)?;
        w.kind = WhitenerKind::PcaFallback;
        Ok(w)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: v.len() });
        }
        Ok(())
    }

    /// `z = S⁻¹ (w − μ)`.
    pub fn forward(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check(w)?;
        let x: Vec<f64> = w.iter().zip(&self.mu).map(|(a, m)| a - m).collect();
        Ok(match &self.repr {
            Repr::Diagonal { scale } => x.iter().zip(scale).map(|(a, s)| a / s).collect(),
            Repr::Kronecker { rows, cols, a_chol, g_chol, .. } => {
                let m = DMatrix::from_row_slice(*rows, *cols, &x);
                let z = g_chol.transpose() * m * a_chol;
                row_major(&z)
            }
            Repr::Dense { s_inv, .. } => (s_inv * nalgebra::DVector::from_vec(x)).as_slice().to_vec(),
        })
    }

    /// `w = μ + S z`.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check(z)?;
        let x = match &self.repr {
            Repr::Diagonal { scale } => z.iter().zip(scale).map(|(a, s)| a * s).collect(),
            Repr::Kronecker { rows, cols, a_inv_sqrt, g_inv_sqrt, .. } => {
                let m = DMatrix::from_row_slice(*rows, *cols, z);
                row_major(&(g_inv_sqrt * m * a_inv_sqrt.transpose()))
            }
            Repr::Dense { s, .. } => (s * nalgebra::DVector::from_column_slice(z)).as_slice().to_vec(),
        };
        Ok(x.iter().zip(&self.mu).map(|(a, m)| a + m).collect())
    }

    /// Materializes `S`; refused above the dense limit.
    pub fn s_dense(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if d > DENSE_LIMIT {
            return Err(Error::invalid(format!("dimension {d} exceeds dense limit {DENSE_LIMIT}")));
        }
        Ok(match &self.repr {
            Repr::Diagonal { scale } => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(scale)),
            Repr::Kronecker { a_inv_sqrt, g_inv_sqrt, .. } => g_inv_sqrt.kronecker(a_inv_sqrt),
            Repr::Dense { s, .. } => s.clone(),
        })
    }

    /// Per-group `(center, scale)` when the whitener is diagonal and constant
    /// within every group of `group_size` coordinates.
    pub fn group_params(&self, group_size: usize) -> Option<Vec<(f64, f64)>> {
        let Repr::Diagonal { scale } = &self.repr else {
            return None;
        };
        if group_size == 0 {
            return None;
        }
        let mut out = Vec::new();
        for (mu, sc) in self.mu.chunks(group_size).zip(scale.chunks(group_size)) {
            if mu.iter().any(|&m| m != mu[0]) || sc.iter().any(|&s| s != sc[0]) {
                return None;
            }
            out.push((mu[0], sc[0]));
        }
        Some(out)
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

fn primary_route(post: &BlockPosterior) -> Result<Whitener> {
    post.validate()?;
    match &post.cov {
        Covariance::Diagonal(v) => Whitener::diagonal(post.mu.clone(), v),
        Covariance::Kronecker(k) => Ok(Whitener {
            kind: WhitenerKind::Cholesky,
            mu: post.mu.clone(),
            spectrum_clip: SPECTRUM_CLIP,
            repr: Repr::Kronecker {
                rows: k.rows,
                cols: k.cols,
                a_chol: k.a_chol.clone(),
                g_chol: k.g_chol.clone(),
                a_inv_sqrt: k.a_inv_sqrt.clone(),
                g_inv_sqrt: k.g_inv_sqrt.clone(),
            },
        }),
        Covariance::LowRankDiag { .. } | Covariance::Dense(_) => {
            Whitener::from_covariance(post.mu.clone(), &post.dense_covariance()?, SPECTRUM_CLIP)
        }
    }
}

/// Whitener for a posterior: diagonal scaling, Kronecker Cholesky factors, or
/// the eigen route for explicit and low-rank covariances. When that fails and
/// samples (rows) are supplied, falls back to PCA on the samples.
pub fn build_whitener(post: &BlockPosterior, fallback_samples: Option<&DMatrix<f64>>) -> Result<Whitener> {
    match primary_route(post) {
        Ok(w) => Ok(w),
        Err(primary) => match fallback_samples {
            Some(samples) => {
                log::warn!("whitener falling back to PCA: {primary}");
                Whitener::pca(post.mu.clone(), samples, SPECTRUM_CLIP)
            }
            None => Err(Error::NoWhitener(primary.to_string())),
        },
    }
}
