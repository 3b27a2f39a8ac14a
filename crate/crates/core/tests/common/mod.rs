//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use covbound::{LinearSystem, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// `X Xᵀ + shift·I`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> Matrix {
    let x = random_matrix(rng, n, n);
    (&(&x * &x.transpose()) + &Matrix::identity(n).scale(shift)).symmetrize()
}

/// Random square matrix rescaled to largest singular value `sigma`.
pub fn random_contraction(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Matrix {
    loop {
        let a = random_matrix(rng, n, n);
        let s1 = covbound::linalg::singular_values(&a)[0];
        if s1 > 1e-3 {
            return a.scale(sigma / s1);
        }
    }
}

/// Stable system with `B = I` and PD `Q`, so `BQBᵀ` is PD. `C` is redrawn until
/// `σ_min(C) ≥ 0.25`: a weak measurement direction makes `P(εI)` approach the
/// `R → 0` limit too slowly for the regularized cross-check at ε = 1e-6.
pub fn random_system(rng: &mut ChaCha8Rng, n_x: usize, n_y: usize) -> LinearSystem {
    let sigma = rng.random_range(0.3..0.95);
    let a = random_contraction(rng, n_x, sigma);
    let c = loop {
        let c = random_matrix(rng, n_y, n_x);
        let sv = covbound::linalg::singular_values(&c);
        if *sv.last().unwrap() >= 0.25 {
            break c;
        }
    };
    let q = random_spd(rng, n_x, 0.1);
    LinearSystem::new(a, Matrix::identity(n_x), c, q).unwrap()
}

pub fn to_na(m: &Matrix) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn min_eig(m: &Matrix) -> f64 {
    covbound::linalg::min_eigenvalue(m).unwrap()
}
