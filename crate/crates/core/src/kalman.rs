//! Kalman filter recursion and a Monte Carlo check of its steady state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::model::LinearSystem;
use crate::riccati::{kalman_gain, RiccatiError};

/// Trials summed sequentially per parallel task; fixed so the reduction order never
/// depends on the thread count.
const TRIAL_BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KalmanError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub mean_prior: Vec<f64>,
    pub mean_post: Vec<f64>,
    pub cov_prior: Matrix,
    pub cov_post: Matrix,
    pub gain: Matrix,
    pub step: usize,
}

impl FilterState {
    /// Filter at k = 0 with `x₀ ~ N(μ₀, P₀)` and no measurement yet.
    pub fn initial(sys: &LinearSystem, x0_mean: Vec<f64>, x0_cov: Matrix) -> Result<Self, KalmanError> {
        let n = sys.n_x();
        if x0_mean.len() != n || x0_cov.shape() != (n, n) {
            return Err(KalmanError::Dimension(format!("initial state must have dimension {n}")));
        }
        Ok(Self {
            mean_prior: x0_mean.clone(),
            mean_post: x0_mean,
            cov_prior: x0_cov.clone(),
            cov_post: x0_cov,
            gain: Matrix::zeros(n, sys.n_y()),
            step: 0,
        })
    }
}

fn propagate_cov(sys: &LinearSystem, w: &Matrix, post: &Matrix) -> Matrix {
    (&(&(sys.a() * post) * &sys.a().transpose()) + w).symmetrize()
}

fn update_cov(sys: &LinearSystem, gain: &Matrix, prior: &Matrix) -> Matrix {
    let n = sys.n_x();
    (&(&Matrix::identity(n) - &(gain * sys.c())) * prior).symmetrize()
}

fn update_mean(sys: &LinearSystem, gain: &Matrix, prior_mean: &[f64], y: &[f64]) -> Vec<f64> {
    let pred = sys.c().matvec(prior_mean);
    let innov: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| a - b).collect();
    let corr = gain.matvec(&innov);
    prior_mean.iter().zip(&corr).map(|(m, c)| m + c).collect()
}

/// One predict/update cycle with measurement `y` at the new time step.
pub fn kf_step(state: &FilterState, sys: &LinearSystem, r: &Matrix, y: &[f64]) -> Result<FilterState, KalmanError> {
    let (n, m) = (sys.n_x(), sys.n_y());
    if state.mean_post.len() != n || state.cov_post.shape() != (n, n) {
        return Err(KalmanError::Dimension(format!("filter state must have dimension {n}")));
    }
    if y.len() != m || r.shape() != (m, m) {
        return Err(KalmanError::Dimension(format!(
            "measurement and R must have dimension {m}"
        )));
    }
    let cov_prior = propagate_cov(sys, &sys.process_noise(), &state.cov_post);
    let gain = kalman_gain(sys, &cov_prior, r)?;
    let mean_prior = sys.a().matvec(&state.mean_post);
    let mean_post = update_mean(sys, &gain, &mean_prior, y);
    let cov_post = update_cov(sys, &gain, &cov_prior);
    Ok(FilterState {
        mean_prior,
        mean_post,
        cov_prior,
        cov_post,
        gain,
        step: state.step + 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub x0_mean: Vec<f64>,
    pub x0_cov: Matrix,
    pub steps: usize,
    pub trials: usize,
    pub master_seed: u64,
}

impl SimulationConfig {
    /// Zero-mean start with identity covariance.
    pub fn standard(n_x: usize, steps: usize, trials: usize, master_seed: u64) -> Self {
        Self {
            x0_mean: vec![0.0; n_x],
            x0_cov: Matrix::identity(n_x),
            steps,
            trials,
            master_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    /// Second moment of the prior error `x_k − μ_k⁻` at the final step.
    pub empirical_cov: Matrix,
    /// `P_k⁻` for k = 1..=steps.
    pub prior_trajectory: Vec<Matrix>,
    pub steady_prior: Matrix,
    pub trials: usize,
    pub steps: usize,
}

/// Per-trial generator: the master seed selects the key, the trial index the stream.
pub fn trial_rng(master_seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial as u64);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, root: &Matrix) -> Vec<f64> {
    let z: Vec<f64> = (0..root.cols()).map(|_| StandardNormal.sample(rng)).collect();
    root.matvec(&z)
}

/// Covariance recursion from `P₀`, returning priors and gains for k = 1..=steps.
pub fn covariance_trajectory(
    sys: &LinearSystem,
    r: &Matrix,
    x0_cov: &Matrix,
    steps: usize,
) -> Result<(Vec<Matrix>, Vec<Matrix>), KalmanError> {
    let w = sys.process_noise();
    let mut post = x0_cov.symmetrize();
    let mut priors = Vec::with_capacity(steps);
    let mut gains = Vec::with_capacity(steps);
    for _ in 0..steps {
        let prior = propagate_cov(sys, &w, &post);
        let gain = kalman_gain(sys, &prior, r)?;
        post = update_cov(sys, &gain, &prior);
        priors.push(prior);
        gains.push(gain);
    }
    Ok((priors, gains))
}

/// Runs independent truth/filter trajectories and reports the empirical prior
/// error covariance at the last step next to the deterministic `P_k⁻`.
pub fn simulate(sys: &LinearSystem, r: &Matrix, cfg: &SimulationConfig) -> Result<SimulationReport, KalmanError> {
    let (n, m) = (sys.n_x(), sys.n_y());
    if cfg.steps == 0 || cfg.trials == 0 {
        return Err(KalmanError::InvalidConfig("steps and trials must be at least 1".into()));
    }
    if cfg.x0_mean.len() != n || cfg.x0_cov.shape() != (n, n) {
        return Err(KalmanError::Dimension(format!("initial state must have dimension {n}")));
    }
    if r.shape() != (m, m) {
        return Err(KalmanError::Dimension(format!("R must be {m}x{m}")));
    }
    if linalg::Cholesky::factor(&r.symmetrize()).is_none() {
        return Err(KalmanError::InvalidConfig("R must be positive definite".into()));
    }
    let (priors, gains) = covariance_trajectory(sys, r, &cfg.x0_cov, cfg.steps)?;
    let x0_root = linalg::sqrt_psd(&cfg.x0_cov)?;
    let w_root = sys.b() * &linalg::sqrt_psd(sys.q())?;
    let r_root = linalg::sqrt_psd(r)?;

    let run_trial = |trial: usize| -> Vec<f64> {
        let mut rng = trial_rng(cfg.master_seed, trial);
        let mut x: Vec<f64> = gaussian(&mut rng, &x0_root)
            .iter()
            .zip(&cfg.x0_mean)
            .map(|(d, mu)| mu + d)
            .collect();
        let mut mean_post = cfg.x0_mean.clone();
        let mut err = vec![0.0; n];
        for gain in &gains {
            let wk = gaussian(&mut rng, &w_root);
            x = sys.a().matvec(&x).iter().zip(&wk).map(|(a, b)| a + b).collect();
            let nk = gaussian(&mut rng, &r_root);
            let y: Vec<f64> = sys.c().matvec(&x).iter().zip(&nk).map(|(a, b)| a + b).collect();
            let mean_prior = sys.a().matvec(&mean_post);
            err = x.iter().zip(&mean_prior).map(|(a, b)| a - b).collect();
            mean_post = update_mean(sys, gain, &mean_prior, &y);
        }
        err
    };

    let blocks: Vec<Vec<f64>> = (0..cfg.trials.div_ceil(TRIAL_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; n * n];
            for trial in b * TRIAL_BLOCK..((b + 1) * TRIAL_BLOCK).min(cfg.trials) {
                let e = run_trial(trial);
                for i in 0..n {
                    for j in 0..n {
                        acc[i * n + j] += e[i] * e[j];
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; n * n];
    for block in &blocks {
        for (t, v) in total.iter_mut().zip(block) {
            *t += v;
        }
    }
    let empirical_cov = Matrix::new(n, n, total)?.scale(1.0 / cfg.trials as f64);
    let steady_prior = priors.last().cloned().expect("steps >= 1");
    Ok(SimulationReport {
        empirical_cov,
        prior_trajectory: priors,
        steady_prior,
        trials: cfg.trials,
        steps: cfg.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::{solve_dare, SolverOptions};

    fn scalar_sys(a: f64, c: f64) -> LinearSystem {
        LinearSystem::new(
            Matrix::scalar(a),
            Matrix::scalar(1.0),
            Matrix::scalar(c),
            Matrix::scalar(1.0),
        )
        .unwrap()
    }

    fn two_state() -> LinearSystem {
        LinearSystem::new(
            Matrix::from_rows(&[[0.8, 0.2], [-0.1, 0.6]]).unwrap(),
            Matrix::identity(2),
            Matrix::from_rows(&[[1.0, 0.5]]).unwrap(),
            Matrix::from_diag(&[1.0, 0.5]),
        )
        .unwrap()
    }

    #[test]
    fn zero_innovation_halves_unit_prior() {
        // A = 0 and W = 1 make p⁻ = 1 regardless of p⁺.
        let sys = scalar_sys(0.0, 1.0);
        let s0 = FilterState::initial(&sys, vec![0.3], Matrix::scalar(5.0)).unwrap();
        let s1 = kf_step(&s0, &sys, &Matrix::scalar(1.0), &[0.0]).unwrap();
        assert_eq!(s1.cov_prior.get(0, 0), 1.0);
        assert_eq!(s1.mean_post, s1.mean_prior);
        assert!((s1.cov_post.get(0, 0) - 0.5).abs() < 1e-15);
        assert_eq!(s1.step, 1);
    }

    #[test]
    fn huge_noise_is_open_loop() {
        let sys = scalar_sys(0.9, 1.0);
        let s0 = FilterState::initial(&sys, vec![2.0], Matrix::scalar(1.0)).unwrap();
        let s1 = kf_step(&s0, &sys, &Matrix::scalar(1e14), &[100.0]).unwrap();
        assert!((s1.cov_post.get(0, 0) - s1.cov_prior.get(0, 0)).abs() < 1e-12);
        assert!((s1.mean_post[0] - 1.8).abs() < 1e-10);
    }

    #[test]
    fn zero_c_is_pure_propagation() {
        let sys = scalar_sys(0.5, 0.0);
        let s0 = FilterState::initial(&sys, vec![1.0], Matrix::scalar(2.0)).unwrap();
        let s1 = kf_step(&s0, &sys, &Matrix::scalar(1.0), &[3.0]).unwrap();
        assert_eq!(s1.gain.get(0, 0), 0.0);
        assert_eq!(s1.mean_post, vec![0.5]);
        assert_eq!(s1.cov_post, s1.cov_prior);
        assert!((s1.cov_prior.get(0, 0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn covariance_update_ignores_measurement() {
        let sys = two_state();
        let r = Matrix::scalar(0.7);
        let s0 = FilterState::initial(&sys, vec![0.0, 1.0], Matrix::identity(2)).unwrap();
        let a = kf_step(&s0, &sys, &r, &[-4.0]).unwrap();
        let b = kf_step(&s0, &sys, &r, &[17.5]).unwrap();
        assert_eq!(a.cov_prior, b.cov_prior);
        assert_eq!(a.cov_post, b.cov_post);
        assert_eq!(a.gain, b.gain);
        assert_ne!(a.mean_post, b.mean_post);
    }

    #[test]
    fn posterior_never_exceeds_prior() {
        let sys = two_state();
        let mut s = FilterState::initial(&sys, vec![0.0; 2], Matrix::identity(2).scale(10.0)).unwrap();
        for _ in 0..50 {
            s = kf_step(&s, &sys, &Matrix::scalar(0.3), &[0.1]).unwrap();
            let gap = linalg::min_eigenvalue(&(&s.cov_prior - &s.cov_post)).unwrap();
            assert!(gap >= -1e-10);
            assert!(linalg::min_eigenvalue(&s.cov_post).unwrap() >= -1e-10);
        }
    }

    #[test]
    fn recursion_converges_to_dare() {
        let sys = two_state();
        let r = Matrix::scalar(0.4);
        let dare = solve_dare(&sys, &r, &SolverOptions::default()).unwrap().p;
        for p0 in [Matrix::zeros(2, 2), Matrix::identity(2).scale(50.0)] {
            let (priors, _) = covariance_trajectory(&sys, &r, &p0, 10_000).unwrap();
            let last = priors.last().unwrap();
            assert!((last - &dare).frobenius_norm() <= 1e-8 * dare.frobenius_norm());
        }
    }

    #[test]
    fn memoryless_system_prior_is_process_noise() {
        let sys = LinearSystem::new(
            Matrix::zeros(2, 2),
            Matrix::identity(2),
            Matrix::identity(2),
            Matrix::identity(2),
        )
        .unwrap();
        let cfg = SimulationConfig::standard(2, 5, 4000, 11);
        let rep = simulate(&sys, &Matrix::identity(2), &cfg).unwrap();
        assert_eq!(rep.steady_prior, Matrix::identity(2));
        let rel = (&rep.empirical_cov - &Matrix::identity(2)).frobenius_norm() / 2f64.sqrt();
        assert!(rel < 0.08, "relative error {rel}");
    }

    #[test]
    fn same_seed_same_report() {
        let sys = two_state();
        let cfg = SimulationConfig::standard(2, 30, 700, 99);
        let a = simulate(&sys, &Matrix::scalar(0.5), &cfg).unwrap();
        let b = simulate(&sys, &Matrix::scalar(0.5), &cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate(
            &sys,
            &Matrix::scalar(0.5),
            &SimulationConfig {
                master_seed: 100,
                ..cfg
            },
        )
        .unwrap();
        assert_ne!(a.empirical_cov, c.empirical_cov);
    }

    #[test]
    fn trial_streams_differ() {
        use rand::Rng;
        let a: u64 = trial_rng(1, 0).random();
        let b: u64 = trial_rng(1, 1).random();
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_bad_config() {
        let sys = two_state();
        let cfg = SimulationConfig::standard(2, 0, 10, 1);
        assert!(matches!(
            simulate(&sys, &Matrix::scalar(1.0), &cfg),
            Err(KalmanError::InvalidConfig(_))
        ));
        let cfg = SimulationConfig::standard(3, 5, 10, 1);
        assert!(matches!(
            simulate(&sys, &Matrix::scalar(1.0), &cfg),
            Err(KalmanError::Dimension(_))
        ));
        let cfg = SimulationConfig::standard(2, 5, 10, 1);
        assert!(simulate(&sys, &Matrix::scalar(0.0), &cfg).is_err());
    }
}
