//! Steady-state covariance equations.
//!
//! * DARE `P = A(P − PCᵀ(CPCᵀ + R)⁻¹CP)Aᵀ + BQBᵀ` by fixed-point iteration,
//! * its `R = 0` limit through a pseudo-inverse,
//! * the Stein equation `P = APAᵀ + W` by Smith squaring,
//! * residuals of the unified (sampling-period) Riccati equation with weight `R`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, chol_psd, pinv_sym, spectral_radius, CholPsd, Cholesky, LinalgError, Matrix};
use crate::model::LinearSystem;

/// Rank cut-off for `(C P Cᵀ)⁺` in the zero-noise limit.
pub const ZERO_R_RANK_TOL: f64 = 1e-10;
/// Regularizations used to cross-check the zero-noise limit.
pub const ZERO_R_EPSILONS: [f64; 2] = [1e-6, 1e-8];
/// Relative agreement required between the pseudo-inverse and regularized paths.
pub const ZERO_R_AGREEMENT: f64 = 1e-4;

const STEIN_MAX_SQUARINGS: usize = 128;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiccatiError {
    #[error("Riccati iteration diverged after {iterations} iterations (‖P‖_F = {norm:.3e}); an unstable mode is undetectable")]
    Divergence { iterations: usize, norm: f64 },
    #[error("Riccati iteration did not converge in {iterations} iterations (last relative step {step:.3e}); detectability is marginal")]
    MaxIterations { iterations: usize, step: f64 },
    #[error("Riccati iteration produced non-finite values at iteration {iterations}")]
    NonFinite { iterations: usize },
    #[error("innovation covariance C P Cᵀ + R is singular")]
    SingularInnovation,
    #[error(
        "zero-noise limit disagrees with the ε = {epsilon:e} regularized solution (relative difference {rel_diff:.3e})"
    )]
    ZeroRDisagreement { epsilon: f64, rel_diff: f64 },
    #[error("A is not stable (spectral radius {spectral_radius:.6})")]
    UnstableA { spectral_radius: f64 },
    #[error("Stein iteration did not converge in {squarings} squarings")]
    SteinNoConvergence { squarings: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("R + Δ Gᵀ P G is singular")]
    SingularGainTerm,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub rel_tol: f64,
    pub max_iters: usize,
    pub divergence_cap: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            max_iters: 200_000,
            divergence_cap: 1e12,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), RiccatiError> {
        if !(self.rel_tol > 0.0) {
            return Err(RiccatiError::InvalidParams("rel_tol must be positive".into()));
        }
        if self.max_iters < 1 {
            return Err(RiccatiError::InvalidParams("max_iters must be at least 1".into()));
        }
        if !(self.divergence_cap > 0.0) {
            return Err(RiccatiError::InvalidParams("divergence_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Steady-state prior covariance with solver diagnostics.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p: Matrix,
    pub iterations: usize,
    /// Frobenius norm of the DARE residual at `p`.
    pub residual: f64,
}

fn check_spd(m: &Matrix, name: &'static str) -> Result<(), RiccatiError> {
    if !m.is_square() || m.asymmetry() > linalg::DEFAULT_SYM_TOL * m.frobenius_norm().max(1.0) {
        return Err(RiccatiError::InvalidParams(format!(
            "{name} must be square and symmetric"
        )));
    }
    if Cholesky::factor(m).is_none() {
        return Err(RiccatiError::NotPositiveDefinite(name));
    }
    Ok(())
}

/// Iterates `P ← A(P − corr(P))Aᵀ + W` from `P₀ = W`.
fn riccati_fixed_point(
    sys: &LinearSystem,
    opts: &SolverOptions,
    mut correction: impl FnMut(&Matrix) -> Result<Matrix, RiccatiError>,
) -> Result<(Matrix, usize), RiccatiError> {
    opts.validate()?;
    let a = sys.a();
    let at = a.transpose();
    let w = sys.process_noise();
    let mut p = w.clone();
    let mut step = f64::INFINITY;
    for k in 1..=opts.max_iters {
        let post = &p - &correction(&p)?;
        let next = (&(&(a * &post) * &at) + &w).symmetrize();
        if !next.is_finite() {
            return Err(RiccatiError::NonFinite { iterations: k });
        }
        let norm = next.frobenius_norm();
        if norm > opts.divergence_cap {
            return Err(RiccatiError::Divergence { iterations: k, norm });
        }
        let scale = p.frobenius_norm().max(1.0);
        step = (&next - &p).frobenius_norm() / scale;
        p = next;
        if step <= opts.rel_tol {
            return Ok((p, k));
        }
    }
    Err(RiccatiError::MaxIterations {
        iterations: opts.max_iters,
        step,
    })
}

/// `P Cᵀ (C P Cᵀ + R)⁻¹ C P`.
fn measurement_correction(c: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix, RiccatiError> {
    let cp = c * p;
    let s = (&(&cp * &c.transpose()) + r).symmetrize();
    let chol = Cholesky::factor(&s).ok_or(RiccatiError::SingularInnovation)?;
    Ok(&cp.transpose() * &chol.solve(&cp))
}

/// Frobenius norm of `APAᵀ − P − APCᵀ(R + CPCᵀ)⁻¹CPAᵀ + BQBᵀ`.
pub fn dare_residual(sys: &LinearSystem, r: &Matrix, p: &Matrix) -> Result<f64, RiccatiError> {
    let a = sys.a();
    let post = p - &measurement_correction(sys.c(), r, p)?;
    let lhs = &(&(a * &post) * &a.transpose()) + &sys.process_noise();
    Ok((&lhs - p).frobenius_norm())
}

/// Steady-state prior covariance for measurement noise `R`.
pub fn solve_dare(sys: &LinearSystem, r: &Matrix, opts: &SolverOptions) -> Result<RiccatiSolution, RiccatiError> {
    if r.shape() != (sys.n_y(), sys.n_y()) {
        return Err(RiccatiError::InvalidParams(format!(
            "R must be {0}x{0}, got {1}x{2}",
            sys.n_y(),
            r.rows(),
            r.cols()
        )));
    }
    check_spd(r, "R")?;
    let r = r.symmetrize();
    let c = sys.c();
    let (p, iterations) = riccati_fixed_point(sys, opts, |p| measurement_correction(c, &r, p))?;
    let residual = dare_residual(sys, &r, &p)?;
    Ok(RiccatiSolution {
        p,
        iterations,
        residual,
    })
}

/// The `R = 0` limit of the DARE, i.e. the smallest achievable steady-state
/// prior covariance.
///
/// Solved with `(C P Cᵀ)⁺` in place of the inverse and cross-checked against
/// `R = εI` for each ε in [`ZERO_R_EPSILONS`].
pub fn solve_dare_zero_r(sys: &LinearSystem, opts: &SolverOptions) -> Result<RiccatiSolution, RiccatiError> {
    let c = sys.c();
    let ct = c.transpose();
    let (p, iterations) = riccati_fixed_point(sys, opts, |p| {
        let cp = c * p;
        let s = &cp * &ct;
        let s_pinv = pinv_sym(&s, ZERO_R_RANK_TOL)?;
        Ok(&(&cp.transpose() * &s_pinv) * &cp)
    })?;
    let scale = p.frobenius_norm().max(1.0);
    for eps in ZERO_R_EPSILONS {
        let reg = solve_dare(sys, &Matrix::identity(sys.n_y()).scale(eps), opts)?;
        let rel_diff = (&reg.p - &p).frobenius_norm() / scale;
        if rel_diff > ZERO_R_AGREEMENT {
            return Err(RiccatiError::ZeroRDisagreement { epsilon: eps, rel_diff });
        }
    }
    // Residual of the limiting equation itself.
    let cp = c * &p;
    let corr = &(&cp.transpose() * &pinv_sym(&(&cp * &ct), ZERO_R_RANK_TOL)?) * &cp;
    let a = sys.a();
    let lhs = &(&(a * &(&p - &corr)) * &a.transpose()) + &sys.process_noise();
    let residual = (&lhs - &p).frobenius_norm();
    Ok(RiccatiSolution {
        p,
        iterations,
        residual,
    })
}

/// Solves `P = A P Aᵀ + W` for stable `A` by Smith squaring.
pub fn solve_stein(a: &Matrix, w: &Matrix, opts: &SolverOptions) -> Result<Matrix, RiccatiError> {
    opts.validate()?;
    if !a.is_square() || w.shape() != a.shape() {
        return Err(RiccatiError::InvalidParams(
            "A and W must be square and equally sized".into(),
        ));
    }
    let rho = spectral_radius(a)?;
    if !(rho < 1.0) {
        return Err(RiccatiError::UnstableA { spectral_radius: rho });
    }
    let mut p = w.symmetrize();
    let mut ak = a.clone();
    for _ in 0..STEIN_MAX_SQUARINGS {
        let incr = &(&ak * &p) * &ak.transpose();
        p = (&p + &incr).symmetrize();
        ak = &ak * &ak;
        if !p.is_finite() {
            return Err(RiccatiError::NonFinite { iterations: 0 });
        }
        if incr.frobenius_norm() <= opts.rel_tol * p.frobenius_norm().max(1.0) {
            return Ok(p);
        }
    }
    Err(RiccatiError::SteinNoConvergence {
        squarings: STEIN_MAX_SQUARINGS,
    })
}

/// Frobenius norm of `APAᵀ + W − P`.
pub fn stein_residual(a: &Matrix, w: &Matrix, p: &Matrix) -> f64 {
    (&(&(&(a * p) * &a.transpose()) + w) - p).frobenius_norm()
}

/// Parameters of the unified Riccati equation with explicit weight `R`.
///
/// `g` is the equation's own input matrix, unrelated to the process-noise
/// input of a [`LinearSystem`].
#[derive(Debug, Clone)]
pub struct UareParams {
    pub a: Matrix,
    pub g: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    pub delta: f64,
}

impl UareParams {
    pub fn new(a: Matrix, g: Matrix, q: Matrix, r: Matrix, delta: f64) -> Result<Self, RiccatiError> {
        if !a.is_square() {
            return Err(RiccatiError::InvalidParams("A must be square".into()));
        }
        let n = a.rows();
        if g.rows() != n {
            return Err(RiccatiError::InvalidParams(format!("G must have {n} rows")));
        }
        if q.shape() != (n, n) {
            return Err(RiccatiError::InvalidParams(format!("Q must be {n}x{n}")));
        }
        if r.shape() != (g.cols(), g.cols()) {
            return Err(RiccatiError::InvalidParams(format!("R must be {0}x{0}", g.cols())));
        }
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(RiccatiError::InvalidParams(
                "delta must be finite and non-negative".into(),
            ));
        }
        if q.asymmetry() > linalg::DEFAULT_SYM_TOL * q.frobenius_norm().max(1.0) {
            return Err(RiccatiError::InvalidParams("Q must be symmetric".into()));
        }
        check_spd(&r, "R")?;
        let q = q.symmetrize();
        let r = r.symmetrize();
        Ok(Self { a, g, q, r, delta })
    }

    /// The substitution that turns the unified equation into the filter DARE:
    /// `Δ = 1`, `A_u = Aᵀ − I`, `G = Cᵀ`, `Q_u = B Q Bᵀ`.
    pub fn from_dare(sys: &LinearSystem, r: &Matrix) -> Result<Self, RiccatiError> {
        Self::new(
            sys.a().transpose().add_identity(-1.0),
            sys.c().transpose(),
            sys.process_noise(),
            r.clone(),
            1.0,
        )
    }

    /// `ΔA + I`.
    pub fn shifted_a(&self) -> Matrix {
        self.a.scale(self.delta).add_identity(1.0)
    }
}

/// Left-hand side of
/// `PA + AᵀP + ΔAᵀPA − (ΔAᵀ + I)PG(R + ΔGᵀPG)⁻¹GᵀP(ΔA + I) + Q = 0`.
pub fn uare_r_residual_matrix(p: &UareParams, x: &Matrix) -> Result<Matrix, RiccatiError> {
    let n = p.a.rows();
    if x.shape() != (n, n) {
        return Err(RiccatiError::InvalidParams(format!("P must be {n}x{n}")));
    }
    let a = &p.a;
    let at = a.transpose();
    let d = p.delta;
    let xa = x * a;
    let lin = &(&xa + &(&at * x)) + &(&at * &xa).scale(d);
    let gt = p.g.transpose();
    let gain_term = (&(&(&gt * x) * &p.g).scale(d) + &p.r).symmetrize();
    let chol = Cholesky::factor(&gain_term).ok_or(RiccatiError::SingularGainTerm)?;
    let m = p.shifted_a();
    let right = &(&gt * x) * &m; // GᵀP(ΔA+I)
    let quad = &right.transpose() * &chol.solve(&right);
    Ok(&(&lin - &quad) + &p.q)
}

/// Frobenius norm of [`uare_r_residual_matrix`]. At `Δ = 0` this is the CARE
/// residual; under [`UareParams::from_dare`] it is the DARE residual.
pub fn uare_r_residual(p: &UareParams, x: &Matrix) -> Result<f64, RiccatiError> {
    if let CholPsd::NotPd { .. } = chol_psd(x, 0.0)? {
        return Err(RiccatiError::NotPositiveDefinite("P"));
    }
    Ok(uare_r_residual_matrix(p, x)?.frobenius_norm())
}

/// Residual of the matrix-inversion-lemma form
/// `(ΔA + I)ᵀ(P⁻¹ + ΔGR⁻¹Gᵀ)⁻¹(ΔA + I) + ΔQ − P`, which equals `Δ` times
/// [`uare_r_residual_matrix`].
pub fn uare_r_inversion_lemma_residual(p: &UareParams, x: &Matrix) -> Result<Matrix, RiccatiError> {
    let x_chol = Cholesky::factor(x).ok_or(RiccatiError::NotPositiveDefinite("P"))?;
    let r_chol = Cholesky::factor(&p.r).ok_or(RiccatiError::NotPositiveDefinite("R"))?;
    let grg = &p.g * &r_chol.solve(&p.g.transpose());
    let inner = (&x_chol.inverse() + &grg.scale(p.delta)).symmetrize();
    let inner_chol = Cholesky::factor(&inner).ok_or(RiccatiError::SingularGainTerm)?;
    let m = p.shifted_a();
    let lhs = &(&m.transpose() * &inner_chol.solve(&m)) + &p.q.scale(p.delta);
    Ok(&lhs - x)
}

/// Steady-state Kalman gain `K = PCᵀ(CPCᵀ + R)⁻¹`.
pub fn kalman_gain(sys: &LinearSystem, p: &Matrix, r: &Matrix) -> Result<Matrix, RiccatiError> {
    let c = sys.c();
    let cp = c * p;
    let s = (&(&cp * &c.transpose()) + r).symmetrize();
    let chol = Cholesky::factor(&s).ok_or(RiccatiError::SingularInnovation)?;
    // K = (S⁻¹ C P)ᵀ since P and S are symmetric.
    Ok(chol.solve(&cp).transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_sys(a: f64, b: f64, c: f64, q: f64) -> LinearSystem {
        LinearSystem::new(
            Matrix::scalar(a),
            Matrix::scalar(b),
            Matrix::scalar(c),
            Matrix::scalar(q),
        )
        .unwrap()
    }

    #[test]
    fn scalar_dare_matches_quadratic_root() {
        // p² − 0.25p − 1 = 0 for a = 0.5, r = 1.
        let sol = solve_dare(
            &scalar_sys(0.5, 1.0, 1.0, 1.0),
            &Matrix::scalar(1.0),
            &SolverOptions::default(),
        )
        .unwrap();
        let expect = (0.25 + 4.0625f64.sqrt()) / 2.0;
        assert!((sol.p.get(0, 0) - expect).abs() < 1e-11);
        assert!((sol.p.get(0, 0) - 1.13278).abs() < 1e-5);
        assert!(sol.residual <= 1e-9 * sol.p.frobenius_norm().max(1.0));
    }

    #[test]
    fn scalar_dare_for_designed_noise() {
        // Fixed point of p = 0.25·p·r/(p + r) + 1 at r = 2.72317.
        let r = 2.72317;
        let sol = solve_dare(
            &scalar_sys(0.5, 1.0, 1.0, 1.0),
            &Matrix::scalar(r),
            &SolverOptions::default(),
        )
        .unwrap();
        // p² + (0.75 r − 1) p − r = 0
        let bq = 0.75 * r - 1.0;
        let expect = (-bq + (bq * bq + 4.0 * r).sqrt()) / 2.0;
        assert!((sol.p.get(0, 0) - expect).abs() < 1e-11);
        assert!((sol.p.get(0, 0) - 1.2094).abs() < 1e-4);
    }

    #[test]
    fn no_dynamics_converges_in_one_step() {
        let sys = LinearSystem::new(
            Matrix::zeros(2, 2),
            Matrix::from_rows(&[[1.0, 0.0], [0.5, 1.0]]).unwrap(),
            Matrix::identity(2),
            Matrix::from_diag(&[2.0, 1.0]),
        )
        .unwrap();
        let sol = solve_dare(&sys, &Matrix::identity(2), &SolverOptions::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.p, sys.process_noise());
    }

    #[test]
    fn dare_rejects_bad_r() {
        let sys = scalar_sys(0.5, 1.0, 1.0, 1.0);
        assert!(matches!(
            solve_dare(&sys, &Matrix::scalar(-1.0), &SolverOptions::default()),
            Err(RiccatiError::NotPositiveDefinite("R"))
        ));
        assert!(matches!(
            solve_dare(&sys, &Matrix::identity(2), &SolverOptions::default()),
            Err(RiccatiError::InvalidParams(_))
        ));
    }

    #[test]
    fn undetectable_unstable_mode_diverges() {
        let sys = LinearSystem::new(
            Matrix::from_diag(&[1.5, 0.5]),
            Matrix::identity(2),
            Matrix::from_rows(&[[0.0, 1.0]]).unwrap(),
            Matrix::identity(2),
        )
        .unwrap();
        let err = solve_dare(&sys, &Matrix::scalar(1.0), &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, RiccatiError::Divergence { .. }), "{err:?}");
    }

    #[test]
    fn marginal_mode_hits_iteration_cap() {
        // Unobserved mode on the unit circle: P grows linearly, never converges.
        let sys = LinearSystem::new(
            Matrix::from_diag(&[1.0, 0.5]),
            Matrix::identity(2),
            Matrix::from_rows(&[[0.0, 1.0]]).unwrap(),
            Matrix::identity(2),
        )
        .unwrap();
        let opts = SolverOptions {
            max_iters: 500,
            ..SolverOptions::default()
        };
        let err = solve_dare(&sys, &Matrix::scalar(1.0), &opts).unwrap_err();
        assert!(
            matches!(err, RiccatiError::MaxIterations { iterations: 500, .. }),
            "{err:?}"
        );
    }

    #[test]
    fn zero_r_examples() {
        let opts = SolverOptions::default();
        let p = solve_dare_zero_r(&scalar_sys(0.5, 1.0, 1.0, 1.0), &opts).unwrap();
        assert!((p.p.get(0, 0) - 1.0).abs() < 1e-12);

        let sys = LinearSystem::new(
            Matrix::from_rows(&[[0.9, 0.2], [-0.1, 0.7]]).unwrap(),
            Matrix::identity(2),
            Matrix::from_rows(&[[2.0, 1.0], [0.0, 3.0]]).unwrap(),
            Matrix::identity(2),
        )
        .unwrap();
        let p = solve_dare_zero_r(&sys, &opts).unwrap();
        assert!((&p.p - &Matrix::identity(2)).max_abs() < 1e-12);
    }

    #[test]
    fn zero_r_rank_deficient_matches_regularized_oracle() {
        let sys = LinearSystem::new(
            Matrix::from_diag(&[0.5, 0.2]),
            Matrix::identity(2),
            Matrix::from_rows(&[[1.0, 0.0]]).unwrap(),
            Matrix::identity(2),
        )
        .unwrap();
        let opts = SolverOptions::default();
        let lb = solve_dare_zero_r(&sys, &opts).unwrap();
        let oracle = solve_dare(&sys, &Matrix::scalar(1e-9), &opts).unwrap();
        let rel = (&lb.p - &oracle.p).frobenius_norm() / lb.p.frobenius_norm();
        assert!(rel < 1e-4);
        // Observed state is known exactly after the update; unobserved one follows 1/(1 − 0.04).
        assert!((lb.p.get(0, 0) - 1.0).abs() < 1e-10);
        assert!((lb.p.get(1, 1) - 1.0 / (1.0 - 0.04)).abs() < 1e-10);
        assert!(lb.residual < 1e-10);
    }

    #[test]
    fn zero_r_weak_measurement_is_reported_not_guessed() {
        // With c = 0.004, ε = 1e-6 is still far from the limit: p(ε) − 1 ≈ 0.25ε/(c² + ε).
        let err = solve_dare_zero_r(&scalar_sys(0.5, 1.0, 0.004, 1.0), &SolverOptions::default()).unwrap_err();
        assert!(
            matches!(err, RiccatiError::ZeroRDisagreement { epsilon, rel_diff } if epsilon == 1e-6 && rel_diff > 1e-2),
            "{err:?}"
        );
    }

    #[test]
    fn stein_examples() {
        let opts = SolverOptions::default();
        let w = Matrix::from_rows(&[[2.0, 0.5], [0.5, 1.0]]).unwrap();
        assert_eq!(solve_stein(&Matrix::zeros(2, 2), &w, &opts).unwrap(), w);
        let p = solve_stein(&Matrix::scalar(0.5), &Matrix::scalar(1.0), &opts).unwrap();
        assert!((p.get(0, 0) - 4.0 / 3.0).abs() < 1e-14);
        let p = solve_stein(&Matrix::from_diag(&[0.9, 0.5]), &Matrix::identity(2), &opts).unwrap();
        assert!((p.get(0, 0) - 1.0 / 0.19).abs() < 1e-12);
        assert!((p.get(1, 1) - 1.0 / 0.75).abs() < 1e-12);
        assert!(p.get(0, 1).abs() < 1e-15);
    }

    #[test]
    fn stein_rejects_unstable() {
        let err = solve_stein(&Matrix::scalar(1.0), &Matrix::scalar(1.0), &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, RiccatiError::UnstableA { .. }));
    }

    #[test]
    fn golden_ratio_uare_residual() {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let p = UareParams::new(
            Matrix::scalar(0.0),
            Matrix::scalar(1.0),
            Matrix::scalar(1.0),
            Matrix::scalar(1.0),
            1.0,
        )
        .unwrap();
        let x = Matrix::scalar(phi);
        assert!(uare_r_residual(&p, &x).unwrap() <= 1e-10);
        let off = uare_r_residual(&p, &x.add_identity(1.0)).unwrap();
        assert!(off > 1e-3);
    }

    #[test]
    fn care_residual_at_delta_zero() {
        // −2p − p² + 1 = 0
        let p = UareParams::new(
            Matrix::scalar(-1.0),
            Matrix::scalar(1.0),
            Matrix::scalar(1.0),
            Matrix::scalar(1.0),
            0.0,
        )
        .unwrap();
        let x = Matrix::scalar(2f64.sqrt() - 1.0);
        assert!(uare_r_residual(&p, &x).unwrap() <= 1e-10);
        assert!(uare_r_residual(&p, &x.add_identity(1.0)).unwrap() > 1.0);
    }

    #[test]
    fn both_uare_forms_agree() {
        let p = UareParams::new(
            Matrix::from_rows(&[[-0.3, 0.2], [0.1, -0.6]]).unwrap(),
            Matrix::from_rows(&[[1.0], [0.5]]).unwrap(),
            Matrix::from_rows(&[[1.0, 0.2], [0.2, 2.0]]).unwrap(),
            Matrix::scalar(0.7),
            0.4,
        )
        .unwrap();
        let x = Matrix::from_rows(&[[1.5, 0.3], [0.3, 0.9]]).unwrap();
        let direct = uare_r_residual_matrix(&p, &x).unwrap().scale(p.delta);
        let lemma = uare_r_inversion_lemma_residual(&p, &x).unwrap();
        assert!((&direct - &lemma).max_abs() < 1e-12);
    }

    #[test]
    fn uare_rejects_singular_gain_term() {
        // R PD is enforced at construction; P indefinite is rejected at evaluation.
        let p = UareParams::new(
            Matrix::scalar(0.0),
            Matrix::scalar(1.0),
            Matrix::scalar(1.0),
            Matrix::scalar(1.0),
            1.0,
        )
        .unwrap();
        assert!(matches!(
            uare_r_residual(&p, &Matrix::scalar(-2.0)),
            Err(RiccatiError::NotPositiveDefinite("P"))
        ));
        assert!(UareParams::new(
            Matrix::scalar(0.0),
            Matrix::scalar(1.0),
            Matrix::scalar(1.0),
            Matrix::scalar(0.0),
            1.0
        )
        .is_err());
    }

    #[test]
    fn dare_substitution_residual() {
        let sys = LinearSystem::new(
            Matrix::from_rows(&[[0.8, 0.3], [-0.2, 0.5]]).unwrap(),
            Matrix::identity(2),
            Matrix::from_rows(&[[1.0, 0.5]]).unwrap(),
            Matrix::from_diag(&[1.0, 0.5]),
        )
        .unwrap();
        let r = Matrix::scalar(0.8);
        let sol = solve_dare(&sys, &r, &SolverOptions::default()).unwrap();
        let params = UareParams::from_dare(&sys, &r).unwrap();
        assert!(uare_r_residual(&params, &sol.p).unwrap() <= 1e-8);
    }

    #[test]
    fn kalman_gain_examples() {
        let sys = scalar_sys(0.5, 1.0, 1.0, 1.0);
        let k = kalman_gain(&sys, &Matrix::scalar(1.0), &Matrix::scalar(1.0)).unwrap();
        assert!((k.get(0, 0) - 0.5).abs() < 1e-15);
        let k = kalman_gain(&sys, &Matrix::scalar(1.0), &Matrix::scalar(1e12)).unwrap();
        assert!(k.frobenius_norm() <= 1e-10);
        let k = kalman_gain(&sys, &Matrix::scalar(0.0), &Matrix::scalar(1.0)).unwrap();
        assert_eq!(k.get(0, 0), 0.0);
        assert!(matches!(
            kalman_gain(&sys, &Matrix::scalar(0.0), &Matrix::scalar(0.0)),
            Err(RiccatiError::SingularInnovation)
        ));
    }
}
