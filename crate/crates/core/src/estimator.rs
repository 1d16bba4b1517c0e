//! Gauss-Newton relative-pose estimation from ranges and attitude priors, the
//! tangent-space MSE, and the Monte-Carlo harness that ties estimation error to
//! formation cost.
//!
//! The estimator minimizes
//! `½ Σ_α ‖ln(C_αᵀ C̆_α)^∨‖²_{P̆_α} + ½ ‖y − g(x)‖²_R`
//! over right perturbations `x ⊕ δx`.

use crate::fisher::Cost;
use crate::formation_opt::{j_total, OptError};
use crate::manifold::{rotation_exp, rotation_left_jacobian_inv, GroupMode, ManifoldError, Pose, Rotation, StateTuple};
use crate::ranging::{ranges, stack_jacobian, synthesize, MeasurementVector, RangingError};
use crate::scenario::Scenario;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

pub const MAX_ITERS: usize = 100;
pub const STEP_TOL: f64 = 1e-8;
pub const MAX_HALVINGS: u32 = 10;
/// Std of the translation jitter applied to Monte-Carlo initial guesses (m).
pub const INIT_TRANSLATION_STD: f64 = 0.5;
/// Largest fraction of failed trials a checkpoint tolerates.
pub const MAX_FAILURE_RATE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("normal equations are singular at iteration {iteration}")]
    Singular { iteration: usize },
    #[error("no convergence after {MAX_ITERS} iterations (last step norm {step_norm:e})")]
    MaxIter { last: Box<StateTuple>, step_norm: f64 },
    #[error(transparent)]
    Ranging(#[from] RangingError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Cost(#[from] OptError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Per-agent attitude priors `(C̆_α, P̆_α)` for agents `2..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttitudePrior {
    means: Vec<Rotation>,
    covariances: Vec<DMatrix<f64>>,
    information: Vec<DMatrix<f64>>,
}

impl AttitudePrior {
    /// Covariances must be symmetric positive definite with `rot_dof` rows.
    /// A covariance containing `+∞` is taken as no prior on that agent.
    pub fn new(mode: GroupMode, means: Vec<Rotation>, covariances: Vec<DMatrix<f64>>) -> Result<Self, EstimatorError> {
        if means.len() != covariances.len() {
            return Err(EstimatorError::InvalidArgument(format!(
                "{} prior means but {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        let r = mode.rot_dof();
        let mut information = Vec::with_capacity(covariances.len());
        for (k, (mean, cov)) in means.iter().zip(&covariances).enumerate() {
            let agent = k + 2;
            if mean.dim() != mode.dim() || cov.shape() != (r, r) {
                return Err(EstimatorError::InvalidArgument(format!(
                    "prior for agent {agent} has the wrong shape for {mode}"
                )));
            }
            if cov.iter().any(|v| v.is_infinite()) {
                information.push(DMatrix::zeros(r, r));
                continue;
            }
            let asym = (cov - cov.transpose()).amax();
            let chol = (asym <= 1e-12 * cov.amax().max(1.0))
                .then(|| cov.clone().cholesky())
                .flatten()
                .ok_or_else(|| {
                    EstimatorError::InvalidArgument(format!(
                        "prior covariance of agent {agent} is not symmetric positive definite"
                    ))
                })?;
            information.push(chol.inverse());
        }
        Ok(AttitudePrior {
            means,
            covariances,
            information,
        })
    }

    /// Same isotropic std `sigma` (rad) on every agent.
    pub fn isotropic(mode: GroupMode, means: Vec<Rotation>, sigma: f64) -> Result<Self, EstimatorError> {
        let r = mode.rot_dof();
        let covariances = vec![DMatrix::identity(r, r) * (sigma * sigma); means.len()];
        AttitudePrior::new(mode, means, covariances)
    }

    /// Prior centred on the attitudes of `x`.
    pub fn at_state(x: &StateTuple, sigma: f64) -> Result<Self, EstimatorError> {
        let means = x.poses().iter().map(|p| p.rotation().clone()).collect();
        AttitudePrior::isotropic(x.mode(), means, sigma)
    }

    /// No attitude information: the estimator uses ranges only.
    pub fn uninformative(x: &StateTuple) -> Self {
        let r = x.mode().rot_dof();
        let n = x.poses().len();
        AttitudePrior {
            means: x.poses().iter().map(|p| p.rotation().clone()).collect(),
            covariances: vec![DMatrix::from_element(r, r, f64::INFINITY); n],
            information: vec![DMatrix::zeros(r, r); n],
        }
    }

    /// Draws `C̆_α = C_α exp(w^∧)`, `w ~ N(0, σ²I)`, around the true attitudes.
    pub fn sample<R: Rng + ?Sized>(x: &StateTuple, sigma: f64, rng: &mut R) -> Result<Self, EstimatorError> {
        let mode = x.mode();
        let means = x
            .poses()
            .iter()
            .map(|p| {
                let w = DVector::from_iterator(
                    mode.rot_dof(),
                    (0..mode.rot_dof()).map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, rng)),
                );
                Ok(p.rotation().compose(&rotation_exp(mode, &w)?))
            })
            .collect::<Result<Vec<_>, ManifoldError>>()?;
        AttitudePrior::isotropic(mode, means, sigma)
    }

    pub fn means(&self) -> &[Rotation] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }
}

/// Output of [`gauss_newton`].
#[derive(Clone, Debug)]
pub struct Estimate {
    pub state: StateTuple,
    /// Iterations run, counting the final one whose step fell below tolerance.
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub objective: Vec<f64>,
}

fn check_inputs(y: &MeasurementVector, scenario: &Scenario, prior: &AttitudePrior, x: &StateTuple) -> Result<(), EstimatorError> {
    if x.mode() != scenario.mode() || x.agent_count() != scenario.agent_count() {
        return Err(EstimatorError::InvalidArgument(
            "initial state does not match the scenario".into(),
        ));
    }
    if y.values.len() != scenario.graph().len() || y.variances.len() != y.values.len() {
        return Err(EstimatorError::InvalidArgument(format!(
            "expected {} ranges, got {}",
            scenario.graph().len(),
            y.values.len()
        )));
    }
    if prior.means.len() != x.poses().len() || prior.means.iter().any(|m| m.dim() != x.mode().dim()) {
        return Err(EstimatorError::InvalidArgument(
            "attitude prior does not match the state".into(),
        ));
    }
    Ok(())
}

fn prior_residuals(x: &StateTuple, prior: &AttitudePrior) -> Result<Vec<DVector<f64>>, ManifoldError> {
    x.poses()
        .iter()
        .zip(&prior.means)
        .map(|(p, mean)| p.rotation().transpose().compose(mean).log(x.mode()))
        .collect()
}

fn objective(y: &MeasurementVector, scenario: &Scenario, prior: &AttitudePrior, x: &StateTuple) -> Result<f64, EstimatorError> {
    let mut f = 0.0;
    for (e, info) in prior_residuals(x, prior)?.iter().zip(&prior.information) {
        f += 0.5 * (e.transpose() * info * e)[0];
    }
    let r = &y.values - ranges(x, scenario)?;
    f += 0.5 * r.iter().zip(y.variances.iter()).map(|(v, s2)| v * v / s2).sum::<f64>();
    Ok(f)
}

/// Gauss-Newton on the prior plus range objective starting at `x0`.
///
/// Each step solves the normal equations and is halved up to [`MAX_HALVINGS`]
/// times until the objective does not increase. If no halving helps, the current
/// iterate is returned.
pub fn gauss_newton(
    y: &MeasurementVector,
    scenario: &Scenario,
    prior: &AttitudePrior,
    x0: &StateTuple,
) -> Result<Estimate, EstimatorError> {
    check_inputs(y, scenario, prior, x0)?;
    let mode = x0.mode();
    let (m, r) = (mode.dof(), mode.rot_dof());
    let dim = x0.tangent_dim();
    let weights = y.variances.map(|s2| 1.0 / s2);

    let mut x = x0.clone();
    let mut f = objective(y, scenario, prior, &x)?;
    let mut history = vec![f];
    let mut step_norm = f64::INFINITY;

    for iteration in 1..=MAX_ITERS {
        let h = stack_jacobian(&x, scenario)?;
        let resid = &y.values - ranges(&x, scenario)?;
        let weighted_h = DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] * weights[i]);
        let mut normal = h.transpose() * &weighted_h;
        let mut rhs = weighted_h.transpose() * &resid;

        for (k, (e, info)) in prior_residuals(&x, prior)?.iter().zip(&prior.information).enumerate() {
            // residual e(x ⊕ δ) ≈ e − J_l⁻¹(e) δφ
            let jl = rotation_left_jacobian_inv(mode, e);
            let jt_info = jl.transpose() * info;
            let off = k * m;
            let mut block = normal.view_mut((off, off), (r, r));
            block += &jt_info * &jl;
            let mut rb = rhs.rows_mut(off, r);
            rb += &jt_info * e;
        }
        normal = (&normal + normal.transpose()) * 0.5;

        let Some(chol) = normal.clone().cholesky() else {
            return Err(EstimatorError::Singular { iteration });
        };
        let scale = normal.diagonal().amax();
        let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b * b));
        if !(scale > 0.0) || min_pivot <= crate::fisher::RANK_TOL * scale {
            return Err(EstimatorError::Singular { iteration });
        }
        let delta = chol.solve(&rhs);
        debug_assert_eq!(delta.len(), dim);
        step_norm = delta.norm();
        if step_norm < STEP_TOL {
            return Ok(Estimate {
                state: x,
                iterations: iteration,
                objective: history,
            });
        }

        let mut accepted = None;
        let mut t = 1.0;
        for _ in 0..=MAX_HALVINGS {
            if let Ok(candidate) = x.oplus(&(&delta * t)) {
                if let Ok(fc) = objective(y, scenario, prior, &candidate) {
                    if fc <= f {
                        accepted = Some((candidate, fc));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((next, fc)) = accepted else {
            return Ok(Estimate {
                state: x,
                iterations: iteration,
                objective: history,
            });
        };
        x = next;
        f = fc;
        history.push(f);
    }
    Err(EstimatorError::MaxIter {
        last: Box::new(x),
        step_norm,
    })
}

/// `(1/K) Σ ‖x̄ ⊟ x̂‖²` over `(truth, estimate)` pairs.
pub fn mse(trials: &[(StateTuple, StateTuple)]) -> Result<f64, EstimatorError> {
    if trials.is_empty() {
        return Err(EstimatorError::InvalidArgument("no trials".into()));
    }
    let mut total = 0.0;
    for (truth, est) in trials {
        if truth.mode() != est.mode() || truth.agent_count() != est.agent_count() {
            return Err(EstimatorError::InvalidArgument(
                "truth and estimate differ in mode or agent count".into(),
            ));
        }
        total += truth.boxminus(est)?.norm_squared();
    }
    Ok(total / trials.len() as f64)
}

/// Monte-Carlo statistics of one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointReport {
    /// Id of the state snapshot, usually the descent iteration.
    pub checkpoint: usize,
    pub j_est: Cost,
    pub j_col: f64,
    pub j_total: Cost,
    /// Over successful trials; NaN when every trial failed.
    pub mse: f64,
    /// Mean over trials and agents of `‖t̂_α − t̄_α‖` (m).
    pub mean_position_error: f64,
    /// Mean over trials and agents of the attitude error angle (rad).
    pub mean_heading_error: f64,
    pub trials: usize,
    /// Trials that produced no estimate.
    pub failed: usize,
    /// Trials that hit the iteration cap; their last iterate is kept in the statistics.
    pub not_converged: usize,
    /// Mean of the stacked tangent error.
    pub mean_error: DVector<f64>,
    /// Unbiased sample covariance of the stacked tangent error.
    pub sample_covariance: DMatrix<f64>,
}

impl CheckpointReport {
    /// More than 5% of the trials failed.
    pub fn is_failed(&self) -> bool {
        self.failed as f64 > MAX_FAILURE_RATE * self.trials as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonteCarloReport {
    pub prior_sigma: f64,
    pub seed: u64,
    pub checkpoints: Vec<CheckpointReport>,
}

impl MonteCarloReport {
    pub fn first_failure(&self) -> Option<&CheckpointReport> {
        self.checkpoints.iter().find(|c| c.is_failed())
    }
}

struct TrialOutcome {
    converged: bool,
    error: DVector<f64>,
    position_error: f64,
    heading_error: f64,
}

/// Trial RNG for `(seed, checkpoint index, trial index)`.
pub fn trial_rng(seed: u64, checkpoint: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((checkpoint as u64) << 32) | trial as u64);
    rng
}

/// Prior-mean attitudes with the true translations jittered by `N(0, 0.5² I)`.
pub fn initial_guess<R: Rng + ?Sized>(truth: &StateTuple, prior: &AttitudePrior, rng: &mut R) -> Result<StateTuple, EstimatorError> {
    let poses = truth
        .poses()
        .iter()
        .zip(prior.means())
        .map(|(p, mean)| {
            let t = p.translation().map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + INIT_TRANSLATION_STD * z
            });
            Pose::new(mean.clone(), t)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StateTuple::new(truth.mode(), poses)?)
}

fn run_trial(truth: &StateTuple, scenario: &Scenario, prior_sigma: f64, mut rng: ChaCha8Rng) -> Result<TrialOutcome, EstimatorError> {
    let y = synthesize(truth, scenario, &mut rng)?;
    let prior = AttitudePrior::sample(truth, prior_sigma, &mut rng)?;
    let x0 = initial_guess(truth, &prior, &mut rng)?;
    let (est, converged) = match gauss_newton(&y, scenario, &prior, &x0) {
        Ok(e) => (e.state, true),
        Err(EstimatorError::MaxIter { last, .. }) => (*last, false),
        Err(e) => return Err(e),
    };
    let error = truth.boxminus(&est)?;
    let n = truth.poses().len() as f64;
    let mut position_error = 0.0;
    let mut heading_error = 0.0;
    for (a, b) in truth.poses().iter().zip(est.poses()) {
        position_error += (b.translation() - a.translation()).norm();
        heading_error += a.rotation().transpose().compose(b.rotation()).log(truth.mode())?.norm();
    }
    Ok(TrialOutcome {
        converged,
        error,
        position_error: position_error / n,
        heading_error: heading_error / n,
    })
}

/// Runs `trials` independent estimation trials at each `(id, state)` checkpoint.
///
/// Trials run in parallel. Each uses its own RNG stream from
/// `(seed, checkpoint index, trial index)`, so the report depends only on the
/// inputs. Trials without an estimate are counted as failed and left out of
/// the statistics.
pub fn monte_carlo(
    checkpoints: &[(usize, StateTuple)],
    scenario: &Scenario,
    prior_sigma: f64,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloReport, EstimatorError> {
    if trials == 0 {
        return Err(EstimatorError::InvalidArgument("trial count must be at least 1".into()));
    }
    if !(prior_sigma > 0.0) {
        return Err(EstimatorError::InvalidArgument(format!(
            "prior sigma must be positive, got {prior_sigma}"
        )));
    }
    let mut reports = Vec::with_capacity(checkpoints.len());
    for (index, (id, truth)) in checkpoints.iter().enumerate() {
        if truth.mode() != scenario.mode() || truth.agent_count() != scenario.agent_count() {
            return Err(EstimatorError::InvalidArgument(format!(
                "checkpoint {id} does not match the scenario"
            )));
        }
        let cost = j_total(truth, scenario)?;
        let outcomes: Vec<Option<TrialOutcome>> = (0..trials)
            .into_par_iter()
            .map(|k| run_trial(truth, scenario, prior_sigma, trial_rng(seed, index, k)).ok())
            .collect();
        let ok: Vec<&TrialOutcome> = outcomes.iter().flatten().collect();
        let dim = truth.tangent_dim();
        let count = ok.len();
        let (mut mean, mut sq, mut pos, mut head) = (DVector::zeros(dim), 0.0, 0.0, 0.0);
        for o in &ok {
            mean += &o.error;
            sq += o.error.norm_squared();
            pos += o.position_error;
            head += o.heading_error;
        }
        let denom = count as f64;
        mean /= denom.max(1.0);
        let mut cov = DMatrix::zeros(dim, dim);
        if count > 1 {
            for o in &ok {
                let d = &o.error - &mean;
                cov += &d * d.transpose();
            }
            cov /= denom - 1.0;
        }
        reports.push(CheckpointReport {
            checkpoint: *id,
            j_est: cost.j_est,
            j_col: cost.j_col,
            j_total: cost.total,
            mse: if count > 0 { sq / denom } else { f64::NAN },
            mean_position_error: if count > 0 { pos / denom } else { f64::NAN },
            mean_heading_error: if count > 0 { head / denom } else { f64::NAN },
            trials,
            failed: trials - count,
            not_converged: ok.iter().filter(|o| !o.converged).count(),
            mean_error: mean,
            sample_covariance: cov,
        });
    }
    Ok(MonteCarloReport {
        prior_sigma,
        seed,
        checkpoints: reports,
    })
}
