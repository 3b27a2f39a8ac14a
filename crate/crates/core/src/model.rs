//! Discrete-time linear Gaussian system `x' = A x + B w`, `y = C x + n`.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{self, chol_psd, rank, singular_values, spectral_radius, LinalgError, Matrix};

/// Shift tolerance used when checking that `Q` is PSD.
pub const Q_PSD_TOL: f64 = 1e-10;
/// Relative singular-value threshold for the rank tests.
pub const RANK_REL_TOL: f64 = 1e-8;
/// `A` counts as invertible when `σ_min(A) > 1e-10·σ₁(A)`.
pub const INVERTIBLE_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{name} must be square, got {rows}x{cols}")]
    NotSquare {
        name: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("{name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("{name} is not symmetric")]
    NotSymmetric { name: &'static str },
    #[error("{name} is not positive semidefinite (failed at pivot {pivot})")]
    NotPsd { name: &'static str, pivot: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl ModelError {
    /// Name of the offending matrix, if the error concerns one.
    pub fn matrix_name(&self) -> Option<&'static str> {
        match self {
            ModelError::NotSquare { name, .. }
            | ModelError::Shape { name, .. }
            | ModelError::NotSymmetric { name }
            | ModelError::NotPsd { name, .. } => Some(name),
            ModelError::Linalg(_) => None,
        }
    }
}

/// System matrices `(A, B, C, Q)` with consistent dimensions and PSD `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: Matrix,
    b: Matrix,
    c: Matrix,
    q: Matrix,
}

impl LinearSystem {
    pub fn new(a: Matrix, b: Matrix, c: Matrix, q: Matrix) -> Result<Self, ModelError> {
        if !a.is_square() {
            return Err(ModelError::NotSquare {
                name: "A",
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        let nx = a.rows();
        if b.rows() != nx {
            return Err(ModelError::Shape {
                name: "B",
                expected: (nx, b.cols()),
                found: b.shape(),
            });
        }
        if c.cols() != nx {
            return Err(ModelError::Shape {
                name: "C",
                expected: (c.rows(), nx),
                found: c.shape(),
            });
        }
        let nw = b.cols();
        if q.shape() != (nw, nw) {
            return Err(ModelError::Shape {
                name: "Q",
                expected: (nw, nw),
                found: q.shape(),
            });
        }
        if q.asymmetry() > linalg::DEFAULT_SYM_TOL * q.frobenius_norm().max(1.0) {
            return Err(ModelError::NotSymmetric { name: "Q" });
        }
        if let linalg::CholPsd::NotPd { pivot } = chol_psd(&q, Q_PSD_TOL)? {
            return Err(ModelError::NotPsd { name: "Q", pivot });
        }
        let q = q.symmetrize();
        Ok(Self { a, b, c, q })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn n_x(&self) -> usize {
        self.a.rows()
    }

    pub fn n_w(&self) -> usize {
        self.b.cols()
    }

    pub fn n_y(&self) -> usize {
        self.c.rows()
    }

    /// State-space process noise covariance `B Q Bᵀ`.
    pub fn process_noise(&self) -> Matrix {
        (&(&self.b * &self.q) * &self.b.transpose()).symmetrize()
    }

    /// Same system with a different measurement matrix.
    pub fn with_c(&self, c: Matrix) -> Result<Self, ModelError> {
        Self::new(self.a.clone(), self.b.clone(), c, self.q.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub spectral_radius_a: f64,
    pub a_stable: bool,
    pub a_invertible: bool,
    pub observable: bool,
    pub controllable: bool,
    pub warnings: Vec<String>,
}

/// Stability, invertibility, and observability/controllability rank tests.
///
/// Rank deficiencies are reported as warnings: detectability and
/// stabilizability can still hold, and the Riccati iteration diagnoses them.
pub fn validate_system(sys: &LinearSystem) -> Result<ValidationReport, ModelError> {
    let a = sys.a();
    let n = sys.n_x();
    let rho = spectral_radius(a)?;
    let sv = singular_values(a);
    let a_invertible = sv[0] > 0.0 && *sv.last().unwrap() > INVERTIBLE_REL_TOL * sv[0];

    // [C; CA; ...; CA^{n-1}]
    let mut obs_blocks = Vec::with_capacity(n);
    let mut block = sys.c().clone();
    for _ in 0..n {
        let next = &block * a;
        obs_blocks.push(block);
        block = next;
    }
    let observable = rank(&Matrix::vstack(&obs_blocks), RANK_REL_TOL) == n;

    // [G, AG, ..., A^{n-1}G], G = B Q^{1/2}
    let g = sys.b() * &linalg::sqrt_psd(sys.q())?;
    let mut ctrl_blocks = Vec::with_capacity(n);
    let mut block = g;
    for _ in 0..n {
        let next = a * &block;
        ctrl_blocks.push(block);
        block = next;
    }
    let controllable = rank(&Matrix::hstack(&ctrl_blocks), RANK_REL_TOL) == n;

    let a_stable = rho < 1.0;
    let mut warnings = Vec::new();
    if !observable {
        warnings.push(
            "observability rank test failed; detectability of (A, C) must be confirmed by Riccati convergence"
                .to_string(),
        );
    }
    if !controllable {
        warnings.push(
            "controllability rank test failed; stabilizability of (A, B Q^1/2) must be confirmed by Riccati convergence"
                .to_string(),
        );
    }
    if !a_stable {
        warnings.push(format!(
            "A is not stable (spectral radius {rho:.6}); the open-loop covariance bound does not exist"
        ));
    }
    if !a_invertible {
        warnings.push("A is singular; noise design requires an invertible A".to_string());
    }
    Ok(ValidationReport {
        spectral_radius_a: rho,
        a_stable,
        a_invertible,
        observable,
        controllable,
        warnings,
    })
}
