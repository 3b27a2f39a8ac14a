//! Eigenvalue lower bounds on the steady-state covariance and the quantities
//! that turn them into a noise-design constraint.
//!
//! For the unified Riccati equation, the smallest eigenvalue of the solution
//! satisfies a scalar quadratic inequality. Its positive root `φ` seeds a
//! matrix lower bound `P_l0`, and one more pass through the
//! inversion-lemma form gives the refined bound `P_l1`. Replacing the
//! actual `λ₁(R⁻¹)` by a cap `λ_u` yields `φ′` and `P′_l0`. These are
//! independent of `R`, so the requirement `P ⪰ P_l^f` reduces to
//! `Cᵀ R⁻¹ C ⪯ T1`, a linear matrix inequality in `R`.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{
    self, inv_spd_checked, singular_values, sym_eig, LinalgError, Matrix, DEFAULT_MAX_COND, DEFAULT_SYM_TOL,
};
use crate::model::{LinearSystem, INVERTIBLE_REL_TOL};
use crate::riccati::{solve_dare_zero_r, solve_stein, RiccatiError, SolverOptions, UareParams};

/// Required margin `λ_min(P_l^f − BQBᵀ) > 1e-10`.
pub const BOUND_MARGIN: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoundsError {
    #[error("quadratic leading coefficient must be positive, got {b}")]
    NonPositiveLeading { b: f64 },
    #[error("quadratic has negative discriminant {disc}")]
    NegativeDiscriminant { disc: f64 },
    #[error("eigenvalue bound φ = {phi} is not positive")]
    NonPositivePhi { phi: f64 },
    #[error("A is singular (σ_min = {min_sv:.3e}, σ₁ = {max_sv:.3e})")]
    SingularA { min_sv: f64, max_sv: f64 },
    #[error("prescribed bound minus B Q Bᵀ is not positive definite (min eigenvalue {min_eig:.6e})")]
    BoundNotAboveNoise { min_eig: f64 },
    #[error("alpha must lie in (0, 1), got {alpha}")]
    AlphaOutOfRange { alpha: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
}

/// Nonnegative root of `(b/2)x² + a x − c/2 = 0`, i.e. `(−a + √(a² + bc))/b`.
pub fn quad_root_f(a: f64, b: f64, c: f64) -> Result<f64, BoundsError> {
    if !(b > 0.0) {
        return Err(BoundsError::NonPositiveLeading { b });
    }
    let disc = a * a + b * c;
    if !(disc >= 0.0) {
        return Err(BoundsError::NegativeDiscriminant { disc });
    }
    let s = disc.sqrt();
    // Rationalized branch avoids cancellation when a > 0.
    Ok(if a > 0.0 { c / (a + s) } else { (s - a) / b })
}

fn smallest_eig(m: &Matrix) -> Result<f64, BoundsError> {
    Ok(sym_eig(m, DEFAULT_SYM_TOL)?.min())
}

fn largest_sv(m: &Matrix) -> f64 {
    singular_values(m)[0]
}

#[derive(Debug, Clone)]
pub struct AnalyticBound {
    pub phi: f64,
    pub p_l0: Matrix,
    pub p_l1: Matrix,
}

/// Lower bounds `φ ≤ λ_min(P)`, `P ⪰ P_l0`, `P ⪰ P_l1` on the positive
/// solution of the unified Riccati equation.
pub fn analytic_bound(p: &UareParams) -> Result<AnalyticBound, BoundsError> {
    let n = p.a.rows();
    let d = p.delta;
    let a = &p.a;
    let at = a.transpose();
    let quad = (&(a + &at) + &(&at * a).scale(d)).symmetrize();
    let m = smallest_eig(&quad)?;
    let q_min = smallest_eig(&p.q)?.max(0.0);
    let r_eig = sym_eig(&p.r, DEFAULT_SYM_TOL)?;
    let r_inv_max = 1.0 / r_eig.min();
    let s = r_inv_max * largest_sv(&p.g).powi(2);

    let phi = quad_root_f(-(m + d * q_min * s), 2.0 * s, 2.0 * q_min)?;
    if !(phi > 0.0) {
        return Err(BoundsError::NonPositivePhi { phi });
    }

    let r_inv = inv_spd_checked(&p.r, DEFAULT_MAX_COND)?;
    let grg = (&(&p.g * &r_inv) * &p.g.transpose()).scale(d);
    let shifted = p.shifted_a();
    let dq = p.q.scale(d);
    let sandwich = |inner: &Matrix| -> Result<Matrix, BoundsError> {
        let inv = inv_spd_checked(&inner.symmetrize(), DEFAULT_MAX_COND)?;
        Ok((&(&(&shifted.transpose() * &inv) * &shifted) + &dq).symmetrize())
    };
    let p_l0 = sandwich(&(&Matrix::identity(n).scale(1.0 / phi) + &grg))?;
    let p_l0_inv = inv_spd_checked(&p_l0, DEFAULT_MAX_COND)?;
    let p_l1 = sandwich(&(&p_l0_inv + &grg))?;
    Ok(AnalyticBound { phi, p_l0, p_l1 })
}

/// Data defining the LMI feasible set `[[T1, Cᵀ], [C, R]] ⪰ 0`, `R ⪰ I/λ_u`.
#[derive(Debug, Clone, Serialize)]
pub struct NoiseCertificate {
    pub phi_prime: f64,
    pub p_l0_prime: Matrix,
    pub t1: Matrix,
    /// Cap on `λ₁(R⁻¹)`; every noise variance must be at least `1/lambda_u_f`.
    pub lambda_u_f: f64,
    pub p_l_f: Matrix,
}

impl NoiseCertificate {
    /// Per-channel noise floor `1/λ_u`.
    pub fn floor(&self) -> f64 {
        1.0 / self.lambda_u_f
    }
}

fn check_symmetric(m: &Matrix, n: usize, what: &str) -> Result<(), BoundsError> {
    if m.shape() != (n, n) {
        return Err(BoundsError::InvalidInput(format!(
            "{what} must be {n}x{n}, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if m.asymmetry() > DEFAULT_SYM_TOL * m.frobenius_norm().max(1.0) {
        return Err(BoundsError::InvalidInput(format!("{what} must be symmetric")));
    }
    Ok(())
}

/// Builds `φ′`, `P′_l0`, and `T1` for a prescribed lower bound `P_l^f` and
/// precision cap `λ_u`.
pub fn noise_certificate(sys: &LinearSystem, p_l_f: &Matrix, lambda_u_f: f64) -> Result<NoiseCertificate, BoundsError> {
    let n = sys.n_x();
    if !(lambda_u_f > 0.0) || !lambda_u_f.is_finite() {
        return Err(BoundsError::InvalidInput(format!(
            "lambda_u_f must be positive and finite, got {lambda_u_f}"
        )));
    }
    check_symmetric(p_l_f, n, "P_l_f")?;
    let p_l_f = p_l_f.symmetrize();
    let a = sys.a();
    let sv = singular_values(a);
    let (max_sv, min_sv) = (sv[0], *sv.last().unwrap());
    if !(max_sv > 0.0 && min_sv > INVERTIBLE_REL_TOL * max_sv) {
        return Err(BoundsError::SingularA { min_sv, max_sv });
    }
    let w = sys.process_noise();
    let gap = &p_l_f - &w;
    let gap_min = smallest_eig(&gap)?;
    if !(gap_min > BOUND_MARGIN) {
        return Err(BoundsError::BoundNotAboveNoise { min_eig: gap_min });
    }

    let at = a.transpose();
    let m = smallest_eig(&(a * &at).add_identity(-1.0))?;
    let q_min = smallest_eig(&w)?.max(0.0);
    let c = sys.c();
    let s = lambda_u_f * largest_sv(c).powi(2);
    let phi_prime = quad_root_f(-(m + q_min * s), 2.0 * s, 2.0 * q_min)?;
    if !(phi_prime > 0.0) {
        return Err(BoundsError::NonPositivePhi { phi: phi_prime });
    }

    let ctc = (&c.transpose() * c).scale(lambda_u_f);
    let inner = inv_spd_checked(
        &(&Matrix::identity(n).scale(1.0 / phi_prime) + &ctc).symmetrize(),
        DEFAULT_MAX_COND,
    )?;
    let p_l0_prime = (&(&(a * &inner) * &at) + &w).symmetrize();
    let gap_inv = inv_spd_checked(&gap, DEFAULT_MAX_COND)?;
    let p_l0_prime_inv = inv_spd_checked(&p_l0_prime, DEFAULT_MAX_COND)?;
    let t1 = (&(&(&at * &gap_inv) * a) - &p_l0_prime_inv).symmetrize();
    Ok(NoiseCertificate {
        phi_prime,
        p_l0_prime,
        t1,
        lambda_u_f,
        p_l_f,
    })
}

/// Range of achievable steady-state prior covariances: `R = 0` gives `p_lb`,
/// `R → ∞` gives `p_ub`.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceEnvelope {
    pub p_lb: Matrix,
    pub p_ub: Matrix,
}

pub fn envelope(sys: &LinearSystem, opts: &SolverOptions) -> Result<CovarianceEnvelope, BoundsError> {
    let p_ub = solve_stein(sys.a(), &sys.process_noise(), opts)?;
    let p_lb = solve_dare_zero_r(sys, opts)?.p;
    Ok(CovarianceEnvelope { p_lb, p_ub })
}

/// `α·P_ub + (1 − α)·P_lb`.
pub fn prescribe_bound(env: &CovarianceEnvelope, alpha: f64) -> Result<Matrix, BoundsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BoundsError::AlphaOutOfRange { alpha });
    }
    Ok((&env.p_ub.scale(alpha) + &env.p_lb.scale(1.0 - alpha)).symmetrize())
}

/// `λ_min` of a symmetric matrix, exposed for reporting.
pub fn min_eig(m: &Matrix) -> Result<f64, BoundsError> {
    Ok(linalg::min_eigenvalue(m)?)
}
