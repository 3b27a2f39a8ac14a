//! Diagonal measurement-noise design over the LMI feasible set.
//!
//! With `R = diag(λ)` the constraint `[[T1, Cᵀ], [C, diag(λ)]] ⪰ 0` is linear
//! in `λ` through the trailing diagonal, so the log-barrier gradient and
//! Hessian come straight from the trailing block of `M(λ)⁻¹`. The designed
//! noise is then checked against the exact DARE and optionally shrunk while
//! the DARE still clears the prescribed bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{BoundsError, NoiseCertificate};
use crate::linalg::{self, is_pd_with_margin, Cholesky, LinalgError, Matrix};
use crate::model::LinearSystem;
use crate::riccati::{solve_dare, RiccatiError, SolverOptions};

/// `λ` used to probe feasibility in the limit of infinite noise.
pub const FEASIBILITY_PROBE: f64 = 1e12;
/// Margin the `λ → ∞` probe must clear.
pub const PROBE_MARGIN: f64 = 1e-10;
/// Margin the Schur complement must clear at the starting point.
pub const START_MARGIN: f64 = 1e-8;
/// Default tolerance on `λ_min(P − P_l^f)`.
pub const DEFAULT_VERIFY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DesignError {
    #[error("design is infeasible: {reason}")]
    Infeasible { reason: String, min_eig_t1: f64 },
    #[error("barrier line search could not keep M(λ) positive definite (t = {t:.3e}, decrement² = {decrement:.3e})")]
    FeasibilityLost { t: f64, decrement: f64 },
    #[error("barrier method exceeded {steps} Newton steps")]
    IterationCap { steps: usize },
    #[error("invalid design problem: {0}")]
    InvalidProblem(String),
    #[error("solution failed its feasibility check: {0}")]
    ConstructionCheck(String),
    #[error("shrink refinement needs a verified starting design (λ_min(P − P_l^f) = {min_eig_gap:.3e})")]
    RefineStartUnsatisfied { min_eig_gap: f64 },
    #[error("designed noise is below the physical noise on channels {channels:?}")]
    NegativeSynthetic { channels: Vec<usize> },
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Noise design problem: minimize `Σ wᵢλᵢ` with `λᵢ ≥ 1/λ_u` subject to the
/// covariance lower bound `p_l_f`.
#[derive(Debug, Clone)]
pub struct DesignProblem {
    pub sys: LinearSystem,
    pub p_l_f: Matrix,
    pub lambda_u_f: f64,
    pub weights: Vec<f64>,
}

impl DesignProblem {
    pub fn new(
        sys: LinearSystem,
        p_l_f: Matrix,
        lambda_u_f: f64,
        weights: Option<Vec<f64>>,
    ) -> Result<Self, DesignError> {
        let n_y = sys.n_y();
        let weights = weights.unwrap_or_else(|| vec![1.0; n_y]);
        if weights.len() != n_y {
            return Err(DesignError::InvalidProblem(format!(
                "expected {n_y} weights, got {}",
                weights.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(DesignError::InvalidProblem(format!("weight {i} must be positive")));
        }
        if !(lambda_u_f > 0.0) || !lambda_u_f.is_finite() {
            return Err(DesignError::InvalidProblem("lambda_u_f must be positive".into()));
        }
        let n = sys.n_x();
        if p_l_f.shape() != (n, n) {
            return Err(DesignError::InvalidProblem(format!("P_l_f must be {n}x{n}")));
        }
        if p_l_f.asymmetry() > linalg::DEFAULT_SYM_TOL * p_l_f.frobenius_norm().max(1.0) {
            return Err(DesignError::InvalidProblem("P_l_f must be symmetric".into()));
        }
        if Cholesky::factor(&p_l_f).is_none() {
            return Err(DesignError::InvalidProblem("P_l_f must be positive definite".into()));
        }
        Ok(Self {
            sys,
            p_l_f: p_l_f.symmetrize(),
            lambda_u_f,
            weights,
        })
    }

    /// Per-channel noise floor `ℓ = 1/λ_u`.
    pub fn floor(&self) -> f64 {
        1.0 / self.lambda_u_f
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignSolution {
    /// Diagonal of the designed `R`.
    pub lambda: Vec<f64>,
    pub cost: f64,
    /// Diagonal of the precision matrix `S = R⁻¹`.
    pub s_diag: Vec<f64>,
    pub barrier_iterations: usize,
    /// Duality-gap bound `ν/t` at termination.
    pub kkt_gap: f64,
    /// `λ_min` of `[[T1, Cᵀ], [C, diag(λ)]]`.
    pub lmi_min_eig: f64,
    pub floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierOptions {
    pub t0: f64,
    pub mu: f64,
    /// Stop once `ν/t ≤ gap_rel_tol·max(1, cost)`.
    pub gap_rel_tol: f64,
    /// Centering stops when half the squared Newton decrement drops below this.
    pub newton_tol: f64,
    pub max_newton_steps: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        Self {
            t0: 1.0,
            mu: 10.0,
            gap_rel_tol: 1e-8,
            newton_tol: 1e-10,
            max_newton_steps: 5000,
        }
    }
}

/// Result of [`check_feasibility`].
#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    /// Strictly feasible starting point.
    Start(Vec<f64>),
    Infeasible {
        reason: String,
        min_eig_t1: f64,
    },
}

/// `T1 − Cᵀ diag(1/λ) C`.
fn schur_complement(t1: &Matrix, c: &Matrix, lambda: &[f64]) -> Matrix {
    let inv: Vec<f64> = lambda.iter().map(|l| 1.0 / l).collect();
    (t1 - &(&c.transpose().mul_diag(&inv) * c)).symmetrize()
}

fn check_shapes(t1: &Matrix, c: &Matrix) -> Result<(), DesignError> {
    if !t1.is_square() || t1.rows() != c.cols() {
        return Err(DesignError::InvalidProblem(format!(
            "T1 ({}x{}) and C ({}x{}) are inconsistent",
            t1.rows(),
            t1.cols(),
            c.rows(),
            c.cols()
        )));
    }
    Ok(())
}

/// Looks for a strictly feasible uniform start `λᵢ = μ` for the LMI with
/// floor `ell`.
pub fn check_feasibility(cert: &NoiseCertificate, c: &Matrix, ell: f64) -> Result<Feasibility, DesignError> {
    check_lmi_feasibility(&cert.t1, c, ell)
}

/// [`check_feasibility`] on a bare `T1`.
///
/// `μ` doubles from `ell` until the Schur complement clears
/// [`START_MARGIN`]; the start is one further doubling so that both the floor
/// and the LMI hold with slack.
pub fn check_lmi_feasibility(t1: &Matrix, c: &Matrix, ell: f64) -> Result<Feasibility, DesignError> {
    check_shapes(t1, c)?;
    if !(ell > 0.0) || !ell.is_finite() {
        return Err(DesignError::InvalidProblem("noise floor must be positive".into()));
    }
    let n_y = c.rows();
    let min_eig_t1 = linalg::min_eigenvalue(t1)?;
    let probe = schur_complement(t1, c, &vec![FEASIBILITY_PROBE; n_y]);
    if !is_pd_with_margin(&probe, PROBE_MARGIN) {
        return Ok(Feasibility::Infeasible {
            reason: format!(
                "T1 is not positive definite (min eigenvalue {min_eig_t1:.6e}); the prescribed bound is unreachable"
            ),
            min_eig_t1,
        });
    }
    let limit = FEASIBILITY_PROBE.max(ell);
    let mut mu = ell;
    while !is_pd_with_margin(&schur_complement(t1, c, &vec![mu; n_y]), START_MARGIN) {
        mu *= 2.0;
        if mu > limit {
            return Ok(Feasibility::Infeasible {
                reason: format!(
                    "Schur complement T1 − Cᵀ R⁻¹ C never clears margin {START_MARGIN:e} (min eigenvalue of T1 {min_eig_t1:.6e})"
                ),
                min_eig_t1,
            });
        }
    }
    Ok(Feasibility::Start(vec![2.0 * mu; n_y]))
}

struct Barrier<'a> {
    t1: &'a Matrix,
    c: &'a Matrix,
    ell: f64,
    weights: &'a [f64],
}

impl Barrier<'_> {
    fn lmi(&self, lambda: &[f64]) -> Matrix {
        Matrix::block2x2(self.t1, &self.c.transpose(), self.c, &Matrix::from_diag(lambda))
    }

    /// `t·wᵀλ − logdet M(λ) − Σ log(λᵢ − ℓ)`, or `None` outside the domain.
    fn value(&self, t: f64, lambda: &[f64]) -> Option<(f64, Cholesky)> {
        if lambda.iter().any(|&l| !(l - self.ell > 0.0)) {
            return None;
        }
        let chol = Cholesky::factor(&self.lmi(lambda))?;
        let cost: f64 = self.weights.iter().zip(lambda).map(|(w, l)| w * l).sum();
        let floor_term: f64 = lambda.iter().map(|l| (l - self.ell).ln()).sum();
        Some((t * cost - chol.log_det() - floor_term, chol))
    }

    fn gradient_hessian(&self, t: f64, lambda: &[f64], chol: &Cholesky) -> (Vec<f64>, Matrix) {
        let n_x = self.t1.rows();
        let n_y = lambda.len();
        let sel = Matrix::from_fn(n_x + n_y, n_y, |i, j| if i == n_x + j { 1.0 } else { 0.0 });
        let cols = chol.solve(&sel);
        // Trailing n_y x n_y block of M⁻¹.
        let z = Matrix::from_fn(n_y, n_y, |i, j| cols.get(n_x + i, j));
        let grad = (0..n_y)
            .map(|i| t * self.weights[i] - z.get(i, i) - 1.0 / (lambda[i] - self.ell))
            .collect();
        let hess = Matrix::from_fn(n_y, n_y, |i, j| {
            let zij = 0.5 * (z.get(i, j) + z.get(j, i));
            let d = if i == j {
                1.0 / (lambda[i] - self.ell).powi(2)
            } else {
                0.0
            };
            zij * zij + d
        });
        (grad, hess)
    }
}

/// Minimizes `Σ wᵢλᵢ` subject to `λᵢ ≥ ell` and `[[T1, Cᵀ], [C, diag(λ)]] ⪰ 0`.
pub fn minimize_weighted_l1(
    t1: &Matrix,
    c: &Matrix,
    ell: f64,
    weights: &[f64],
    opts: &BarrierOptions,
) -> Result<DesignSolution, DesignError> {
    check_shapes(t1, c)?;
    let n_x = t1.rows();
    let n_y = c.rows();
    if weights.len() != n_y || weights.iter().any(|w| !(*w > 0.0)) {
        return Err(DesignError::InvalidProblem(format!("expected {n_y} positive weights")));
    }
    let mut lambda = match check_lmi_feasibility(t1, c, ell)? {
        Feasibility::Start(l) => l,
        Feasibility::Infeasible { reason, min_eig_t1 } => return Err(DesignError::Infeasible { reason, min_eig_t1 }),
    };
    let barrier = Barrier { t1, c, ell, weights };
    let nu = (n_x + n_y + n_y) as f64;
    let mut t = opts.t0;
    let mut steps = 0usize;
    loop {
        // Centering by damped Newton.
        let mut inner = 0usize;
        loop {
            let (f, chol) = barrier
                .value(t, &lambda)
                .ok_or(DesignError::FeasibilityLost { t, decrement: f64::NAN })?;
            let (grad, hess) = barrier.gradient_hessian(t, &lambda, &chol);
            let hchol = Cholesky::factor(&hess).ok_or(DesignError::FeasibilityLost { t, decrement: f64::NAN })?;
            let g = Matrix::new(n_y, 1, grad.clone()).map_err(DesignError::Linalg)?;
            let step: Vec<f64> = hchol.solve(&g).as_slice().iter().map(|x| -x).collect();
            let slope: f64 = grad.iter().zip(&step).map(|(a, b)| a * b).sum();
            let decrement = -slope;
            if decrement / 2.0 <= opts.newton_tol || (inner >= 100 && decrement < 1e-6) {
                break;
            }
            inner += 1;
            steps += 1;
            if steps > opts.max_newton_steps {
                return Err(DesignError::IterationCap {
                    steps: opts.max_newton_steps,
                });
            }
            let mut s = 1.0;
            let accepted = loop {
                let cand: Vec<f64> = lambda.iter().zip(&step).map(|(l, d)| l + s * d).collect();
                if let Some((fc, _)) = barrier.value(t, &cand) {
                    if fc <= f + 0.25 * s * slope {
                        break Some(cand);
                    }
                }
                s *= 0.5;
                if s < 1e-20 {
                    break None;
                }
            };
            match accepted {
                // The step no longer moves λ in floating point.
                Some(cand) if cand == lambda => break,
                Some(cand) => lambda = cand,
                // Round-off floor near the center: the decrease is below what f can resolve.
                None if decrement < 1e-6 => break,
                None => return Err(DesignError::FeasibilityLost { t, decrement }),
            }
        }
        let cost: f64 = weights.iter().zip(&lambda).map(|(w, l)| w * l).sum();
        if nu / t <= opts.gap_rel_tol * cost.abs().max(1.0) {
            break;
        }
        t *= opts.mu;
    }
    build_solution(&barrier, lambda, steps, nu / t)
}

fn build_solution(
    barrier: &Barrier<'_>,
    lambda: Vec<f64>,
    steps: usize,
    kkt_gap: f64,
) -> Result<DesignSolution, DesignError> {
    let ell = barrier.ell;
    let min_lambda = lambda.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_lambda < ell - 1e-9 {
        return Err(DesignError::ConstructionCheck(format!(
            "min λ = {min_lambda} is below the floor {ell}"
        )));
    }
    let lmi_min_eig = linalg::min_eigenvalue(&barrier.lmi(&lambda))?;
    if lmi_min_eig < -1e-8 {
        return Err(DesignError::ConstructionCheck(format!(
            "LMI minimum eigenvalue {lmi_min_eig:.3e} is negative"
        )));
    }
    let cost = barrier.weights.iter().zip(&lambda).map(|(w, l)| w * l).sum();
    let s_diag = lambda.iter().map(|l| 1.0 / l).collect();
    Ok(DesignSolution {
        lambda,
        cost,
        s_diag,
        barrier_iterations: steps,
        kkt_gap,
        lmi_min_eig,
        floor: ell,
    })
}

/// Weighted-l1 optimal diagonal noise for a design problem and its certificate.
pub fn solve_min_weighted_l1(
    prob: &DesignProblem,
    cert: &NoiseCertificate,
    opts: &BarrierOptions,
) -> Result<DesignSolution, DesignError> {
    if cert.t1.rows() != prob.sys.n_x() {
        return Err(DesignError::InvalidProblem(
            "certificate does not match the system".into(),
        ));
    }
    minimize_weighted_l1(&cert.t1, prob.sys.c(), prob.floor(), &prob.weights, opts)
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    /// Steady-state prior covariance under `R = diag(λ)`.
    pub p_star: Matrix,
    /// `λ_min(P* − P_l^f)`.
    pub min_eig_gap: f64,
    pub gap_eigenvalues: Vec<f64>,
    pub satisfied: bool,
    pub dare_iterations: usize,
    pub dare_residual: f64,
}

/// Solves the DARE under `diag(lambda)` and checks `P* ⪰ P_l^f` up to `tol`.
pub fn verify_bound(
    sys: &LinearSystem,
    lambda: &[f64],
    p_l_f: &Matrix,
    tol: f64,
    solver: &SolverOptions,
) -> Result<VerificationReport, DesignError> {
    if lambda.len() != sys.n_y() || lambda.iter().any(|l| !(*l > 0.0)) {
        return Err(DesignError::InvalidProblem(format!(
            "lambda must hold {} strictly positive values",
            sys.n_y()
        )));
    }
    if p_l_f.shape() != (sys.n_x(), sys.n_x()) {
        return Err(DesignError::InvalidProblem("P_l_f has the wrong shape".into()));
    }
    let sol = solve_dare(sys, &Matrix::from_diag(lambda), solver)?;
    let gap_eigenvalues = linalg::sym_eigenvalues(&(&sol.p - &p_l_f.symmetrize()))?;
    let min_eig_gap = *gap_eigenvalues.last().unwrap();
    Ok(VerificationReport {
        p_star: sol.p,
        min_eig_gap,
        gap_eigenvalues,
        satisfied: min_eig_gap >= -tol,
        dare_iterations: sol.iterations,
        dare_residual: sol.residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Relative bisection resolution on γ; also the floor below which the search stops.
    pub resolution: f64,
    pub tol: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            resolution: 1e-3,
            tol: DEFAULT_VERIFY_TOL,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RefineResult {
    pub gamma: f64,
    pub lambda: Vec<f64>,
    pub min_eig_gap: f64,
    /// The search reached the resolution floor without finding a violation.
    pub hit_floor: bool,
    pub evaluations: usize,
    pub warnings: Vec<String>,
}

impl RefineResult {
    /// True when any refined variance lies below `floor`; the refined design is
    /// then justified by the DARE check alone.
    pub fn violates_floor(&self, floor: f64) -> bool {
        self.lambda.iter().any(|&l| l < floor)
    }
}

/// Bisects for the smallest `γ ∈ (0, 1]` such that `γ·λ*` still satisfies the
/// bound according to the DARE.
pub fn refine_shrink(
    sys: &LinearSystem,
    lambda_star: &[f64],
    p_l_f: &Matrix,
    opts: &RefineOptions,
    solver: &SolverOptions,
) -> Result<RefineResult, DesignError> {
    if !(opts.resolution > 0.0 && opts.resolution < 1.0) {
        return Err(DesignError::InvalidProblem("resolution must lie in (0, 1)".into()));
    }
    let scaled = |g: f64| -> Vec<f64> { lambda_star.iter().map(|l| g * l).collect() };
    let mut evaluations = 1;
    let top = verify_bound(sys, lambda_star, p_l_f, opts.tol, solver)?;
    if !top.satisfied {
        return Err(DesignError::RefineStartUnsatisfied {
            min_eig_gap: top.min_eig_gap,
        });
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut hi_gap = top.min_eig_gap;
    while hi - lo > opts.resolution * hi {
        if lo == 0.0 && hi <= opts.resolution {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let rep = verify_bound(sys, &scaled(mid), p_l_f, opts.tol, solver)?;
        evaluations += 1;
        if rep.satisfied {
            hi = mid;
            hi_gap = rep.min_eig_gap;
        } else {
            lo = mid;
        }
    }
    let hit_floor = lo == 0.0;
    let mut warnings = Vec::new();
    if hit_floor {
        warnings.push(format!(
            "bound held at every tested scale down to γ = {hi:.3e}; the prescribed bound does not constrain the noise"
        ));
    }
    Ok(RefineResult {
        gamma: hi,
        lambda: scaled(hi),
        min_eig_gap: hi_gap,
        hit_floor,
        evaluations,
        warnings,
    })
}

/// Synthetic noise to inject per channel: `R_total − R_a`.
pub fn split_synthetic(total: &[f64], actual: &[f64]) -> Result<Vec<f64>, DesignError> {
    if total.len() != actual.len() {
        return Err(DesignError::InvalidProblem(format!(
            "R_total has {} channels but R_a has {}",
            total.len(),
            actual.len()
        )));
    }
    if let Some(i) = actual.iter().position(|a| !(*a >= 0.0)) {
        return Err(DesignError::InvalidProblem(format!("R_a channel {i} is negative")));
    }
    let synthetic: Vec<f64> = total.iter().zip(actual).map(|(t, a)| t - a).collect();
    let channels: Vec<usize> = synthetic
        .iter()
        .enumerate()
        .filter(|(_, s)| **s < 0.0)
        .map(|(i, _)| i)
        .collect();
    if !channels.is_empty() {
        return Err(DesignError::NegativeSynthetic { channels });
    }
    Ok(synthetic)
}
