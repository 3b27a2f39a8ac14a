//! JSON configuration, experiment pipeline, and report emission for the
//! `covbound` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{self, BoundsError, CovarianceEnvelope, NoiseCertificate};
use crate::design::{
    self, BarrierOptions, DesignError, DesignProblem, DesignSolution, Feasibility, RefineOptions, RefineResult,
    VerificationReport,
};
use crate::kalman::{self, KalmanError, SimulationConfig};
use crate::linalg::{self, singular_values, Matrix};
use crate::model::{validate_system, LinearSystem, ValidationReport};
use crate::riccati::{solve_dare, RiccatiError, SolverOptions};

/// Overrides the output directory when `--out` is absent.
pub const OUT_DIR_ENV: &str = "COVBOUND_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Validate,
    Envelope,
    Design,
    Verify,
    Refine,
    Simulate,
    Report,
}

#[derive(Debug, Parser)]
#[command(
    name = "covbound",
    version,
    about = "Measurement-noise design with a guaranteed Kalman covariance lower bound"
)]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides COVBOUND_OUT_DIR and the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{message}")]
    Infeasible { message: String, min_eig_t1: Option<f64> },
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Io(_) => EXIT_CONFIG,
            CliError::Infeasible { .. } => EXIT_INFEASIBLE,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn diagnostic(&self) -> serde_json::Value {
        let status = match self {
            CliError::Config { .. } | CliError::Io(_) => "invalid_config",
            CliError::Infeasible { .. } => "infeasible",
            CliError::Numerical(_) => "numerical_failure",
        };
        let mut v = serde_json::json!({
            "status": status,
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Config { path, .. } => v["path"] = path.clone().into(),
            CliError::Infeasible {
                min_eig_t1: Some(m), ..
            } => v["min_eig_t1"] = (*m).into(),
            _ => {}
        }
        v
    }
}

impl From<BoundsError> for CliError {
    fn from(e: BoundsError) -> Self {
        match e {
            BoundsError::NonPositiveLeading { .. }
            | BoundsError::NegativeDiscriminant { .. }
            | BoundsError::NonPositivePhi { .. }
            | BoundsError::SingularA { .. }
            | BoundsError::BoundNotAboveNoise { .. } => CliError::Infeasible {
                message: format!("certificate precondition failed: {e}"),
                min_eig_t1: None,
            },
            BoundsError::AlphaOutOfRange { .. } => CliError::config("design.alpha", e.to_string()),
            BoundsError::InvalidInput(_) => CliError::config("design", e.to_string()),
            BoundsError::Linalg(_) | BoundsError::Riccati(_) => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<DesignError> for CliError {
    fn from(e: DesignError) -> Self {
        match e {
            DesignError::Infeasible { reason, min_eig_t1 } => CliError::Infeasible {
                message: reason,
                min_eig_t1: Some(min_eig_t1),
            },
            DesignError::Bounds(b) => b.into(),
            DesignError::InvalidProblem(m) => CliError::config("design", m),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<RiccatiError> for CliError {
    fn from(e: RiccatiError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<KalmanError> for CliError {
    fn from(e: KalmanError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<linalg::LinalgError> for CliError {
    fn from(e: linalg::LinalgError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

// Serialized configuration document. Field names follow the JSON schema.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDoc {
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "B")]
    pub b: Matrix,
    #[serde(rename = "C")]
    pub c: Matrix,
    #[serde(rename = "Q")]
    pub q: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateDoc {
    pub n: usize,
    pub rho: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub lambda_u_f: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(rename = "P_l_f", default, skip_serializing_if = "Option::is_none")]
    pub p_l_f: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActualNoiseDoc {
    #[serde(rename = "R_a_diag", default, skip_serializing_if = "Option::is_none")]
    pub r_a_diag: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateDoc {
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_cov: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputDoc {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateDoc>,
    pub design: DesignDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual_noise: Option<ActualNoiseDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refine: Option<RefineDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputDoc>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BoundSpec {
    Alpha(f64),
    Explicit(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sys: LinearSystem,
    /// Generator spec the system came from, if any.
    pub generated: Option<GenerateDoc>,
    pub bound: BoundSpec,
    pub lambda_u_f: f64,
    pub weights: Option<Vec<f64>>,
    pub r_a_diag: Option<Vec<f64>>,
    pub solver: SolverOptions,
    pub refine: RefineOptions,
    pub simulate: Option<SimulationConfig>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Configuration document with the system written out explicitly.
    pub fn to_document(&self) -> ConfigDoc {
        let (alpha, p_l_f) = match &self.bound {
            BoundSpec::Alpha(a) => (Some(*a), None),
            BoundSpec::Explicit(m) => (None, Some(m.clone())),
        };
        ConfigDoc {
            system: Some(SystemDoc {
                a: self.sys.a().clone(),
                b: self.sys.b().clone(),
                c: self.sys.c().clone(),
                q: self.sys.q().clone(),
            }),
            generate: None,
            design: DesignDoc {
                alpha,
                lambda_u_f: self.lambda_u_f,
                weights: self.weights.clone(),
                p_l_f,
            },
            actual_noise: self.r_a_diag.clone().map(|d| ActualNoiseDoc { r_a_diag: Some(d) }),
            solver: Some(SolverDoc {
                rel_tol: Some(self.solver.rel_tol),
                max_iters: Some(self.solver.max_iters),
            }),
            refine: Some(RefineDoc {
                resolution: Some(self.refine.resolution),
            }),
            simulate: self.simulate.as_ref().map(|s| SimulateDoc {
                steps: s.steps,
                trials: s.trials,
                seed: s.master_seed,
                x0_mean: Some(s.x0_mean.clone()),
                x0_cov: Some(s.x0_cov.clone()),
            }),
            output: self.output_dir.clone().map(|dir| OutputDoc { dir }),
        }
    }
}

/// Seeded fixture: standard-normal entries scaled to `σ₁(A) = rho`, with
/// `B = Q = I` and `C = 2I`.
pub fn generate_system(n: usize, rho: f64, seed: u64) -> Result<LinearSystem, CliError> {
    if n == 0 {
        return Err(CliError::config("generate.n", "must be at least 1"));
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(CliError::config(
            "generate.rho",
            format!("must lie in (0, 1), got {rho}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let g = Matrix::new(n, n, data)?;
    let s1 = singular_values(&g)[0];
    if !(s1 > 0.0) {
        return Err(CliError::Numerical("generated matrix is zero".into()));
    }
    let a = g.scale(rho / s1);
    LinearSystem::new(
        a,
        Matrix::identity(n),
        Matrix::identity(n).scale(2.0),
        Matrix::identity(n),
    )
    .map_err(|e| CliError::Numerical(e.to_string()))
}

fn deserialize_doc(value: serde_json::Value, prefix: &str) -> Result<ConfigDoc, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = match (prefix.is_empty(), inner == ".") {
            (true, _) => inner,
            (false, true) => prefix.to_string(),
            (false, false) => format!("{prefix}.{inner}"),
        };
        CliError::config(path, e.into_inner().to_string())
    })
}

/// Parses and validates a configuration. A previously written `report.json`
/// is accepted too; its embedded `config` is used.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::config("<document>", format!("malformed JSON: {e}")))?;
    let (value, prefix) = match value {
        serde_json::Value::Object(mut map) if map.contains_key("command") && map.contains_key("config") => {
            (map.remove("config").unwrap(), "config")
        }
        other => (other, ""),
    };
    let doc = deserialize_doc(value, prefix)?;
    build_config(doc).map_err(|e| match e {
        CliError::Config { path, message } if !prefix.is_empty() => CliError::Config {
            path: format!("{prefix}.{path}"),
            message,
        },
        other => other,
    })
}

fn check_square(path: &str, m: &Matrix, n: usize) -> Result<(), CliError> {
    if m.shape() != (n, n) {
        return Err(CliError::config(
            path,
            format!("expected {n}x{n}, got {}x{}", m.rows(), m.cols()),
        ));
    }
    Ok(())
}

fn build_config(doc: ConfigDoc) -> Result<RunConfig, CliError> {
    let (sys, generated) = match (doc.system, doc.generate) {
        (Some(s), None) => {
            let sys = LinearSystem::new(s.a, s.b, s.c, s.q).map_err(|e| {
                let name = e.matrix_name().unwrap_or("");
                CliError::config(format!("system.{name}").trim_end_matches('.'), e.to_string())
            })?;
            (sys, None)
        }
        (None, Some(g)) => (generate_system(g.n, g.rho, g.seed)?, Some(g)),
        _ => {
            return Err(CliError::config(
                "system|generate",
                "exactly one of `system` and `generate` must be present",
            ))
        }
    };
    let (n_x, n_y) = (sys.n_x(), sys.n_y());

    let d = doc.design;
    let bound = match (d.alpha, d.p_l_f) {
        (Some(a), None) => {
            if !(a > 0.0 && a < 1.0) {
                return Err(CliError::config("design.alpha", format!("must lie in (0, 1), got {a}")));
            }
            BoundSpec::Alpha(a)
        }
        (None, Some(p)) => {
            check_square("design.P_l_f", &p, n_x)?;
            if p.asymmetry() > linalg::DEFAULT_SYM_TOL * p.frobenius_norm().max(1.0) {
                return Err(CliError::config("design.P_l_f", "must be symmetric"));
            }
            BoundSpec::Explicit(p)
        }
        _ => {
            return Err(CliError::config(
                "design",
                "exactly one of `alpha` and `P_l_f` must be present",
            ))
        }
    };
    if !(d.lambda_u_f > 0.0) || !d.lambda_u_f.is_finite() {
        return Err(CliError::config("design.lambda_u_f", "must be positive"));
    }
    if let Some(w) = &d.weights {
        if w.len() != n_y {
            return Err(CliError::config(
                "design.weights",
                format!("expected {n_y} entries, got {}", w.len()),
            ));
        }
        if let Some(i) = w.iter().position(|x| !(*x > 0.0)) {
            return Err(CliError::config(format!("design.weights[{i}]"), "must be positive"));
        }
    }

    let r_a_diag = doc.actual_noise.and_then(|a| a.r_a_diag);
    if let Some(r) = &r_a_diag {
        if r.len() != n_y {
            return Err(CliError::config(
                "actual_noise.R_a_diag",
                format!("expected {n_y} entries, got {}", r.len()),
            ));
        }
        if let Some(i) = r.iter().position(|x| !(*x >= 0.0)) {
            return Err(CliError::config(
                format!("actual_noise.R_a_diag[{i}]"),
                "must be non-negative",
            ));
        }
    }

    let mut solver = SolverOptions::default();
    if let Some(s) = doc.solver {
        if let Some(t) = s.rel_tol {
            solver.rel_tol = t;
        }
        if let Some(m) = s.max_iters {
            solver.max_iters = m;
        }
    }
    solver
        .validate()
        .map_err(|e| CliError::config("solver", e.to_string()))?;

    let mut refine = RefineOptions::default();
    if let Some(r) = doc.refine.and_then(|r| r.resolution) {
        if !(r > 0.0 && r < 1.0) {
            return Err(CliError::config("refine.resolution", "must lie in (0, 1)"));
        }
        refine.resolution = r;
    }

    let simulate = match doc.simulate {
        None => None,
        Some(s) => {
            if s.steps == 0 {
                return Err(CliError::config("simulate.steps", "must be at least 1"));
            }
            if s.trials == 0 {
                return Err(CliError::config("simulate.trials", "must be at least 1"));
            }
            let x0_mean = s.x0_mean.unwrap_or_else(|| vec![0.0; n_x]);
            if x0_mean.len() != n_x {
                return Err(CliError::config("simulate.x0_mean", format!("expected {n_x} entries")));
            }
            let x0_cov = s.x0_cov.unwrap_or_else(|| Matrix::identity(n_x));
            check_square("simulate.x0_cov", &x0_cov, n_x)?;
            if !matches!(linalg::chol_psd(&x0_cov, 1e-10), Ok(linalg::CholPsd::Factor(_))) {
                return Err(CliError::config(
                    "simulate.x0_cov",
                    "must be symmetric positive semidefinite",
                ));
            }
            Some(SimulationConfig {
                x0_mean,
                x0_cov,
                steps: s.steps,
                trials: s.trials,
                master_seed: s.seed,
            })
        }
    };

    Ok(RunConfig {
        sys,
        generated,
        bound,
        lambda_u_f: d.lambda_u_f,
        weights: d.weights,
        r_a_diag,
        solver,
        refine,
        simulate,
        output_dir: doc.output.map(|o| o.dir),
    })
}

// Report sections.

#[derive(Debug, Clone, Serialize)]
pub struct EnvelopeSection {
    pub p_lb: Matrix,
    pub p_ub: Matrix,
    pub eig_p_lb: Vec<f64>,
    pub eig_p_ub: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertificateSection {
    pub phi_prime: f64,
    pub eig_p_l0_prime: Vec<f64>,
    pub eig_t1: Vec<f64>,
    pub min_eig_t1: f64,
    pub floor: f64,
    pub feasibility_start: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefineSection {
    #[serde(flatten)]
    pub result: RefineResult,
    pub violates_floor: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SyntheticSection {
    #[serde(rename = "R_a_diag")]
    pub r_a_diag: Vec<f64>,
    #[serde(rename = "R_s_diag", skip_serializing_if = "Option::is_none")]
    pub r_s_diag: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub negative_channels: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSection {
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
    pub lambda: Vec<f64>,
    pub empirical_cov: Matrix,
    pub dare_p: Matrix,
    pub steady_prior: Matrix,
    pub prior_trace: Vec<f64>,
    /// `‖Σ_emp − P‖_F / ‖P‖_F`.
    pub empirical_rel_error: f64,
    /// `‖P_N⁻ − P‖_F / ‖P‖_F`.
    pub recursion_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: Command,
    pub config: ConfigDoc,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub envelope: Option<EnvelopeSection>,
    #[serde(rename = "P_l_f", skip_serializing_if = "Option::is_none")]
    pub p_l_f: Option<Matrix>,
    #[serde(rename = "eig_P_l_f", skip_serializing_if = "Option::is_none")]
    pub eig_p_l_f: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignSolution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerificationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refine: Option<RefineSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSection>,
    pub warnings: Vec<String>,
}

/// What a command produced.
#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub report: Report,
    pub validation: Option<ValidationReport>,
    pub files: Vec<PathBuf>,
}

fn eig(m: &Matrix) -> Result<Vec<f64>, CliError> {
    Ok(linalg::sym_eigenvalues(m)?)
}

struct Pipeline<'a> {
    cfg: &'a RunConfig,
    report: Report,
}

impl<'a> Pipeline<'a> {
    fn new(cmd: Command, cfg: &'a RunConfig) -> Self {
        Self {
            cfg,
            report: Report {
                command: cmd,
                config: cfg.to_document(),
                envelope: None,
                p_l_f: None,
                eig_p_l_f: None,
                certificate: None,
                design: None,
                verify: None,
                refine: None,
                synthetic: None,
                simulate: None,
                warnings: Vec::new(),
            },
        }
    }

    fn envelope(&mut self) -> Result<CovarianceEnvelope, CliError> {
        let env = bounds::envelope(&self.cfg.sys, &self.cfg.solver)?;
        self.report.envelope = Some(EnvelopeSection {
            eig_p_lb: eig(&env.p_lb)?,
            eig_p_ub: eig(&env.p_ub)?,
            p_lb: env.p_lb.clone(),
            p_ub: env.p_ub.clone(),
        });
        Ok(env)
    }

    fn bound(&mut self) -> Result<Matrix, CliError> {
        let p = match &self.cfg.bound {
            BoundSpec::Explicit(p) => p.symmetrize(),
            BoundSpec::Alpha(a) => {
                let env = self.envelope()?;
                bounds::prescribe_bound(&env, *a)?
            }
        };
        self.report.eig_p_l_f = Some(eig(&p)?);
        self.report.p_l_f = Some(p.clone());
        Ok(p)
    }

    fn design(&mut self) -> Result<(Matrix, DesignSolution), CliError> {
        let p_l_f = self.bound()?;
        let cert: NoiseCertificate = bounds::noise_certificate(&self.cfg.sys, &p_l_f, self.cfg.lambda_u_f)?;
        let min_eig_t1 = linalg::min_eigenvalue(&cert.t1)?;
        let start = match design::check_feasibility(&cert, self.cfg.sys.c(), cert.floor())? {
            Feasibility::Start(s) => s,
            Feasibility::Infeasible { reason, min_eig_t1 } => {
                return Err(CliError::Infeasible {
                    message: reason,
                    min_eig_t1: Some(min_eig_t1),
                })
            }
        };
        self.report.certificate = Some(CertificateSection {
            phi_prime: cert.phi_prime,
            eig_p_l0_prime: eig(&cert.p_l0_prime)?,
            eig_t1: eig(&cert.t1)?,
            min_eig_t1,
            floor: cert.floor(),
            feasibility_start: start,
        });
        let prob = DesignProblem::new(
            self.cfg.sys.clone(),
            p_l_f.clone(),
            self.cfg.lambda_u_f,
            self.cfg.weights.clone(),
        )?;
        let sol = design::solve_min_weighted_l1(&prob, &cert, &BarrierOptions::default())?;
        self.report.design = Some(sol.clone());
        Ok((p_l_f, sol))
    }

    fn verify(&mut self, p_l_f: &Matrix, lambda: &[f64]) -> Result<VerificationReport, CliError> {
        let rep = design::verify_bound(&self.cfg.sys, lambda, p_l_f, self.cfg.refine.tol, &self.cfg.solver)?;
        self.report.verify = Some(rep.clone());
        Ok(rep)
    }

    fn require_verified(&self, rep: &VerificationReport) -> Result<(), CliError> {
        if rep.satisfied {
            Ok(())
        } else {
            Err(CliError::Numerical(format!(
                "designed noise failed DARE verification: λ_min(P − P_l^f) = {:.6e}",
                rep.min_eig_gap
            )))
        }
    }

    fn refine(&mut self, p_l_f: &Matrix, lambda: &[f64], floor: f64) -> Result<(), CliError> {
        let result = design::refine_shrink(&self.cfg.sys, lambda, p_l_f, &self.cfg.refine, &self.cfg.solver)?;
        let violates_floor = result.violates_floor(floor);
        self.report.warnings.extend(result.warnings.iter().cloned());
        if violates_floor {
            self.report.warnings.push(format!(
                "refined λ falls below the floor {floor}; it is justified by the DARE check only"
            ));
        }
        self.report.refine = Some(RefineSection { result, violates_floor });
        Ok(())
    }

    fn synthetic(&mut self, lambda: &[f64]) -> Result<(), CliError> {
        let Some(r_a) = &self.cfg.r_a_diag else { return Ok(()) };
        let section = match design::split_synthetic(lambda, r_a) {
            Ok(r_s) => SyntheticSection {
                r_a_diag: r_a.clone(),
                r_s_diag: Some(r_s),
                negative_channels: Vec::new(),
            },
            Err(DesignError::NegativeSynthetic { channels }) => {
                self.report.warnings.push(format!(
                    "physical noise already exceeds the design on channels {channels:?}; no synthetic noise is defined there"
                ));
                SyntheticSection {
                    r_a_diag: r_a.clone(),
                    r_s_diag: None,
                    negative_channels: channels,
                }
            }
            Err(e) => return Err(e.into()),
        };
        self.report.synthetic = Some(section);
        Ok(())
    }

    fn simulate(&mut self, sim: &SimulationConfig, lambda: &[f64]) -> Result<(), CliError> {
        let r = Matrix::from_diag(lambda);
        let rep = kalman::simulate(&self.cfg.sys, &r, sim)?;
        let dare = solve_dare(&self.cfg.sys, &r, &self.cfg.solver)?.p;
        let norm = dare.frobenius_norm();
        self.report.simulate = Some(SimulateSection {
            steps: sim.steps,
            trials: sim.trials,
            seed: sim.master_seed,
            lambda: lambda.to_vec(),
            empirical_rel_error: (&rep.empirical_cov - &dare).frobenius_norm() / norm,
            recursion_rel_error: (&rep.steady_prior - &dare).frobenius_norm() / norm,
            prior_trace: rep.prior_trajectory.iter().map(Matrix::trace).collect(),
            empirical_cov: rep.empirical_cov,
            steady_prior: rep.steady_prior,
            dare_p: dare,
        });
        Ok(())
    }
}

fn write_file(dir: &Path, name: &str, contents: &str, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    files.push(path);
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report types serialize");
    s.push('\n');
    s
}

/// `sensor_index,lambda` rows, 1-based.
pub fn lambda_csv(lambda: &[f64]) -> String {
    let mut s = String::from("sensor_index,lambda\n");
    for (i, l) in lambda.iter().enumerate() {
        let _ = writeln!(s, "{},{}", i + 1, l);
    }
    s
}

fn envelope_json(report: &Report) -> serde_json::Value {
    serde_json::json!({
        "envelope": report.envelope,
        "P_l_f": report.p_l_f,
        "eig_P_l_f": report.eig_p_l_f,
    })
}

fn run_inner(cmd: Command, p: &mut Pipeline<'_>, out: &Path, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let cfg = p.cfg;
    match cmd {
        Command::Validate => unreachable!("handled by run_command"),
        Command::Envelope => {
            if p.report.envelope.is_none() {
                p.envelope()?;
            }
            if let BoundSpec::Alpha(a) = cfg.bound {
                let env = p.report.envelope.as_ref().unwrap();
                let pl = bounds::prescribe_bound(
                    &CovarianceEnvelope {
                        p_lb: env.p_lb.clone(),
                        p_ub: env.p_ub.clone(),
                    },
                    a,
                )?;
                p.report.eig_p_l_f = Some(eig(&pl)?);
                p.report.p_l_f = Some(pl);
            }
            write_file(out, "envelope.json", &to_json(&envelope_json(&p.report)), files)?;
        }
        Command::Design => {
            let (_, sol) = p.design()?;
            write_file(out, "lambda.csv", &lambda_csv(&sol.lambda), files)?;
            p.synthetic(&sol.lambda)?;
        }
        Command::Verify => {
            let (p_l_f, sol) = p.design()?;
            let rep = p.verify(&p_l_f, &sol.lambda)?;
            write_file(out, "verify.json", &to_json(&rep), files)?;
            p.require_verified(&rep)?;
        }
        Command::Refine => {
            let (p_l_f, sol) = p.design()?;
            let rep = p.verify(&p_l_f, &sol.lambda)?;
            p.require_verified(&rep)?;
            p.refine(&p_l_f, &sol.lambda, sol.floor)?;
            let section = p.report.refine.as_ref().unwrap();
            write_file(out, "refine.json", &to_json(section), files)?;
        }
        Command::Simulate => {
            let Some(sim) = cfg.simulate.clone() else {
                return Err(CliError::config(
                    "simulate",
                    "section is required for the simulate command",
                ));
            };
            let (_, sol) = p.design()?;
            p.simulate(&sim, &sol.lambda)?;
            write_file(
                out,
                "simulate.json",
                &to_json(p.report.simulate.as_ref().unwrap()),
                files,
            )?;
        }
        Command::Report => {
            if p.report.envelope.is_none() {
                p.envelope()?;
            }
            let (p_l_f, sol) = p.design()?;
            write_file(out, "envelope.json", &to_json(&envelope_json(&p.report)), files)?;
            write_file(out, "lambda.csv", &lambda_csv(&sol.lambda), files)?;
            let rep = p.verify(&p_l_f, &sol.lambda)?;
            write_file(out, "verify.json", &to_json(&rep), files)?;
            p.require_verified(&rep)?;
            p.refine(&p_l_f, &sol.lambda, sol.floor)?;
            p.synthetic(&sol.lambda)?;
            if let Some(sim) = cfg.simulate.clone() {
                p.simulate(&sim, &sol.lambda)?;
            }
        }
    }
    Ok(())
}

/// Runs one command, writing its artifacts into `out`.
///
/// `report.json` is written for every command except `validate` and
/// `envelope`, including when a later stage fails.
pub fn run_command(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<CommandOutput, CliError> {
    let mut pipeline = Pipeline::new(cmd, cfg);
    let mut files = Vec::new();
    if cmd == Command::Validate {
        let validation = validate_system(&cfg.sys).map_err(|e| CliError::Numerical(e.to_string()))?;
        pipeline.report.warnings = validation.warnings.clone();
        return Ok(CommandOutput {
            report: pipeline.report,
            validation: Some(validation),
            files,
        });
    }
    let result = run_inner(cmd, &mut pipeline, out, &mut files);
    if cmd != Command::Envelope && pipeline.report.design.is_some() {
        write_file(out, "report.json", &to_json(&pipeline.report), &mut files)?;
    }
    result.map(|()| CommandOutput {
        report: pipeline.report,
        validation: None,
        files,
    })
}

/// `--out`, then the environment variable, then the config, then the working directory.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn summary(cmd: Command, out: &CommandOutput) -> serde_json::Value {
    if let Some(v) = &out.validation {
        return serde_json::to_value(v).expect("validation report serializes");
    }
    let r = &out.report;
    serde_json::json!({
        "status": "ok",
        "command": cmd,
        "cost": r.design.as_ref().map(|d| d.cost),
        "lambda": r.design.as_ref().map(|d| d.lambda.clone()),
        "min_eig_gap": r.verify.as_ref().map(|v| v.min_eig_gap),
        "gamma": r.refine.as_ref().map(|f| f.result.gamma),
        "warnings": r.warnings,
        "files": out.files,
    })
}

fn fail(err: &CliError, out: Option<&Path>) -> i32 {
    let diag = err.diagnostic();
    eprintln!("{}", serde_json::to_string(&diag).expect("diagnostic serializes"));
    if let Some(dir) = out {
        let _ = fs::create_dir_all(dir).and_then(|_| fs::write(dir.join("diagnostics.json"), to_json(&diag)));
    }
    err.exit_code()
}

/// Entry point behind the binary; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let text = match fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            return fail(
                &CliError::Io(format!("cannot read {}: {e}", cli.config.display())),
                None,
            )
        }
    };
    let cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => return fail(&e, None),
    };
    let out = resolve_out_dir(cli.out.as_deref(), &cfg);
    match run_command(cli.command, &cfg, &out) {
        Ok(o) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary(cli.command, &o)).expect("summary serializes")
            );
            EXIT_OK
        }
        Err(e) => fail(&e, Some(&out)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str =
        r#"{"system":{"A":[[0.5]],"B":[[1]],"C":[[1]],"Q":[[1]]},"design":{"alpha":0.0625,"lambda_u_f":1.0}}"#;

    fn config_path_of(text: &str) -> String {
        match parse_config(text).unwrap_err() {
            CliError::Config { path, .. } => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_scalar_config() {
        let cfg = parse_config(SCALAR).unwrap();
        assert_eq!(cfg.sys.n_x(), 1);
        assert_eq!(cfg.bound, BoundSpec::Alpha(0.0625));
        assert_eq!(cfg.solver, SolverOptions::default());
        assert_eq!(cfg.refine.resolution, 1e-3);
        assert!(cfg.simulate.is_none());
    }

    #[test]
    fn generator_config_uses_fixture_shape() {
        let cfg =
            parse_config(r#"{"generate":{"n":10,"rho":0.95,"seed":7},"design":{"alpha":0.0625,"lambda_u_f":0.03}}"#)
                .unwrap();
        assert_eq!(cfg.sys.c(), &Matrix::identity(10).scale(2.0));
        assert_eq!(cfg.sys.b(), &Matrix::identity(10));
        assert_eq!(cfg.sys.q(), &Matrix::identity(10));
        assert!((singular_values(cfg.sys.a())[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn generator_is_reproducible() {
        assert_eq!(generate_system(4, 0.5, 3).unwrap(), generate_system(4, 0.5, 3).unwrap());
        assert_ne!(generate_system(4, 0.5, 3).unwrap(), generate_system(4, 0.5, 4).unwrap());
    }

    #[test]
    fn errors_are_path_qualified() {
        let bad_q = SCALAR.replace(r#""Q":[[1]]"#, r#""Q":[[-1]]"#);
        assert_eq!(config_path_of(&bad_q), "system.Q");
        let bad_b = SCALAR.replace(r#""B":[[1]]"#, r#""B":[[1],[2]]"#);
        assert_eq!(config_path_of(&bad_b), "system.B");
        let typo = SCALAR.replace("lambda_u_f", "lambda_uf");
        assert!(config_path_of(&typo).starts_with("design"));
        let wrong_type = SCALAR.replace("0.0625", r#""big""#);
        assert_eq!(config_path_of(&wrong_type), "design.alpha");
        let ragged = SCALAR.replace(r#""A":[[0.5]]"#, r#""A":[[0.5, 1],[2]]"#);
        assert_eq!(config_path_of(&ragged), "system.A");
        assert_eq!(config_path_of("{"), "<document>");
        let both = r#"{"system":{"A":[[0.5]],"B":[[1]],"C":[[1]],"Q":[[1]]},"generate":{"n":2,"rho":0.5,"seed":1},"design":{"alpha":0.5,"lambda_u_f":1}}"#;
        assert_eq!(config_path_of(both), "system|generate");
        let rho = r#"{"generate":{"n":2,"rho":1.5,"seed":1},"design":{"alpha":0.5,"lambda_u_f":1}}"#;
        assert_eq!(config_path_of(rho), "generate.rho");
        let alpha = SCALAR.replace("0.0625", "1.5");
        assert_eq!(config_path_of(&alpha), "design.alpha");
        let weights = SCALAR.replace(r#""lambda_u_f":1.0"#, r#""lambda_u_f":1.0,"weights":[1,2]"#);
        assert_eq!(config_path_of(&weights), "design.weights");
    }

    #[test]
    fn document_round_trip_preserves_config() {
        let cfg = parse_config(r#"{"generate":{"n":3,"rho":0.7,"seed":2},"design":{"alpha":0.25,"lambda_u_f":0.5},"simulate":{"steps":5,"trials":10,"seed":1}}"#)
            .unwrap();
        let text = serde_json::to_string(&cfg.to_document()).unwrap();
        let again = parse_config(&text).unwrap();
        assert_eq!(again.sys, cfg.sys);
        assert_eq!(again.bound, cfg.bound);
        assert_eq!(again.simulate, cfg.simulate);
        assert_eq!(again.solver, cfg.solver);
    }

    #[test]
    fn csv_layout() {
        assert_eq!(lambda_csv(&[2.5, 1.0]), "sensor_index,lambda\n1,2.5\n2,1\n");
    }

    #[test]
    fn exit_code_classes() {
        assert_eq!(CliError::config("x", "y").exit_code(), 2);
        assert_eq!(
            CliError::Infeasible {
                message: String::new(),
                min_eig_t1: None
            }
            .exit_code(),
            3
        );
        assert_eq!(CliError::Numerical(String::new()).exit_code(), 4);
        let e: CliError = DesignError::IterationCap { steps: 1 }.into();
        assert_eq!(e.exit_code(), 4);
        let e: CliError = BoundsError::SingularA {
            min_sv: 0.0,
            max_sv: 1.0,
        }
        .into();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn scalar_design_command() {
        let dir = tempfile::tempdir().unwrap();
        let text = SCALAR.replace(r#""alpha":0.0625"#, r#""P_l_f":[[1.2]]"#);
        let cfg = parse_config(&text).unwrap();
        let out = run_command(Command::Design, &cfg, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("lambda.csv")).unwrap();
        assert!(csv.starts_with("sensor_index,lambda\n1,2.72317"), "{csv}");
        let cost = out.report.design.unwrap().cost;
        assert!((cost - 2.72317).abs() < 1e-4);
        assert!(dir.path().join("report.json").exists());
    }

    #[test]
    fn infeasible_scalar_bound() {
        let dir = tempfile::tempdir().unwrap();
        let text = SCALAR.replace(r#""alpha":0.0625"#, r#""P_l_f":[[2.0]]"#);
        let cfg = parse_config(&text).unwrap();
        let err = run_command(Command::Design, &cfg, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("T1 is not positive definite"));
        assert!(matches!(err, CliError::Infeasible { min_eig_t1: Some(m), .. } if m < 0.0));
    }

    #[test]
    fn simulate_requires_section() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(SCALAR).unwrap();
        let err = run_command(Command::Simulate, &cfg, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
