//! Analytic-versus-finite-difference check of the stacked range Jacobian.

use formation_core::manifold::{rotation_exp, GroupMode, Pose, StateTuple};
use formation_core::ranging::{finite_difference_jacobian, ranges, stack_jacobian, RangingError};
use formation_core::scenario::Scenario;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tag pairs closer than this are redrawn when sampling random states (m).
const MIN_SAMPLED_RANGE: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct TrialResult {
    pub trial: usize,
    pub max_abs_error: f64,
    /// `max |H − H_fd| / max |H_fd|`.
    pub rel_error: f64,
    pub state: StateTuple,
}

#[derive(Clone, Debug)]
pub struct JacobianReport {
    pub trials: Vec<TrialResult>,
}

impl JacobianReport {
    pub fn worst(&self) -> &TrialResult {
        self.trials
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .expect("at least one trial")
    }
}

/// Random relative poses: headings uniform on (−π, π), translations uniform in
/// `[−3, 3]` m (`[−1, 1]` m for z), full rotations with angle below 3 rad.
pub fn random_state<R: Rng + ?Sized>(mode: GroupMode, agents: usize, rng: &mut R) -> StateTuple {
    let n = mode.dim();
    let poses = (2..=agents)
        .map(|_| {
            let t: Vec<f64> = (0..n)
                .map(|k| if k < 2 { rng.random_range(-3.0..3.0) } else { rng.random_range(-1.0..1.0) })
                .collect();
            match mode {
                GroupMode::Se2 | GroupMode::Se3Heading => {
                    Pose::from_heading(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI), &t)
                }
                GroupMode::Se3 => {
                    let axis = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)).normalize();
                    let phi = axis * rng.random_range(0.0..3.0);
                    let rotation = rotation_exp(mode, &phi).expect("rotation block length");
                    Pose::new(rotation, DVector::from_vec(t)).expect("matching dimensions")
                }
            }
        })
        .collect();
    StateTuple::new(mode, poses).expect("sampled poses are valid")
}

fn compare(x: &StateTuple, scenario: &Scenario, step: f64, corrupt_sign: bool) -> Result<(f64, f64), RangingError> {
    let mut analytic = stack_jacobian(x, scenario)?;
    if corrupt_sign {
        let col = -analytic.column(0);
        analytic.set_column(0, &col);
    }
    let numeric = finite_difference_jacobian(x, scenario, step)?;
    let diff: DMatrix<f64> = &analytic - &numeric;
    let max_abs = diff.amax();
    Ok((max_abs, max_abs / numeric.amax().max(f64::MIN_POSITIVE)))
}

/// Checks the scenario's initial state (trial 0), then `trials` random states.
pub fn check_jacobian(
    scenario: &Scenario,
    trials: usize,
    seed: u64,
    step: f64,
    corrupt_sign: bool,
) -> Result<JacobianReport, RangingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(trials + 1);
    let first = scenario.initial_state().clone();
    let (max_abs_error, rel_error) = compare(&first, scenario, step, corrupt_sign)?;
    results.push(TrialResult {
        trial: 0,
        max_abs_error,
        rel_error,
        state: first,
    });
    for trial in 1..=trials {
        let x = loop {
            let x = random_state(scenario.mode(), scenario.agent_count(), &mut rng);
            if ranges(&x, scenario)?.iter().all(|&r| r > MIN_SAMPLED_RANGE) {
                break x;
            }
        };
        let (max_abs_error, rel_error) = compare(&x, scenario, step, corrupt_sign)?;
        results.push(TrialResult {
            trial,
            max_abs_error,
            rel_error,
            state: x,
        });
    }
    Ok(JacobianReport { trials: results })
}
