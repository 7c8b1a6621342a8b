use nalgebra::{DMatrix, DVector};

/// Whether an oracle exposes the Hessian (may be indefinite) or a Fisher /
/// Gauss-Newton matrix (PSD by construction).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureSource {
    Hessian,
    Fisher,
}

/// Matrix-free access to a block's curvature: `v ↦ H v`.
pub trait CurvatureOracle: Sync {
    fn dim(&self) -> usize;

    fn apply(&self, v: &[f64]) -> Vec<f64>;

    fn source(&self) -> CurvatureSource {
        CurvatureSource::Fisher
    }
}

/// Explicit matrix, for tests and small synthetic suites.
#[derive(Debug, Clone)]
pub struct DenseOracle {
    pub matrix: DMatrix<f64>,
    pub source: CurvatureSource,
}

impl DenseOracle {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        DenseOracle {
            matrix,
            source: CurvatureSource::Fisher,
        }
    }
}

impl CurvatureOracle for DenseOracle {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(v)).data.into()
    }

    fn source(&self) -> CurvatureSource {
        self.source
    }
}

/// Elementwise multiplication by a fixed vector.
#[derive(Debug, Clone)]
pub struct DiagonalOracle(pub Vec<f64>);

impl CurvatureOracle for DiagonalOracle {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().zip(&self.0).map(|(a, b)| a * b).collect()
    }

    fn source(&self) -> CurvatureSource {
        CurvatureSource::Hessian
    }
}

/// Wraps a closure as an oracle.
pub struct FnOracle<F> {
    pub dim: usize,
    pub f: F,
    pub source: CurvatureSource,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> FnOracle<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnOracle {
            dim,
            f,
            source: CurvatureSource::Fisher,
        }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> CurvatureOracle for FnOracle<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (self.f)(v)
    }

    fn source(&self) -> CurvatureSource {
        self.source
    }
}
