//! Collision barrier, total cost `J = J_est + J_col`, finite-difference tangent
//! gradient, and on-manifold gradient descent `x̄ ← x̄ ⊕ (−γ ∇J)`.

use crate::fisher::{fim, Cost};
use crate::manifold::StateTuple;
use crate::ranging::RangingError;
use crate::scenario::Scenario;
use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

/// Candidate distances this close to the safety radius are treated as the pole.
pub const POLE_GUARD: f64 = 1e-9;
/// Step halvings allowed per iteration before the descent reports a stall.
pub const MAX_HALVINGS: u32 = 30;
/// Slack on the sufficient-decrease test.
pub const ACCEPT_SLACK: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OptError {
    #[error(transparent)]
    Ranging(#[from] RangingError),
    #[error("agents {alpha} and {beta} are {distance} m apart, on the barrier pole")]
    BarrierPole { alpha: usize, beta: usize, distance: f64 },
    #[error("agents {alpha} and {beta} are {distance} m apart, inside the safety radius")]
    Infeasible { alpha: usize, beta: usize, distance: f64 },
    #[error("both finite-difference probes on tangent coordinate {coordinate} are infinite")]
    Gradient { coordinate: usize },
    #[error("initial formation has infinite cost")]
    InfiniteStart,
    #[error("line search stalled at iteration {iteration} after {MAX_HALVINGS} halvings")]
    Stall {
        iteration: usize,
        trace: Box<DescentTrace>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarrierParams {
    pub activation_radius: f64,
    pub safety_radius: f64,
}

impl BarrierParams {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        let o = scenario.optimizer();
        BarrierParams {
            activation_radius: o.activation_radius,
            safety_radius: o.safety_radius,
        }
    }

    /// `(min{0, (r² − R²)/(r² − d²)})²` for a distance `r > d`.
    pub fn value(&self, distance: f64) -> f64 {
        let r2 = distance * distance;
        let ratio = (r2 - self.activation_radius.powi(2)) / (r2 - self.safety_radius.powi(2));
        ratio.min(0.0).powi(2)
    }
}

/// Distance between the reference points of two agents.
pub fn agent_distance(x: &StateTuple, alpha: usize, beta: usize) -> f64 {
    (x.pose(alpha).translation() - x.pose(beta).translation()).norm()
}

/// Barrier term for one (ordered) agent pair.
pub fn j_col_pair(x: &StateTuple, scenario: &Scenario, alpha: usize, beta: usize) -> Result<f64, OptError> {
    assert_ne!(alpha, beta, "barrier needs two distinct agents");
    let params = BarrierParams::from_scenario(scenario);
    let distance = agent_distance(x, alpha, beta);
    if (distance - params.safety_radius).abs() <= POLE_GUARD {
        return Err(OptError::BarrierPole { alpha, beta, distance });
    }
    if distance < params.safety_radius {
        return Err(OptError::Infeasible { alpha, beta, distance });
    }
    Ok(params.value(distance))
}

/// Sum over ordered pairs α ≠ β, so every unordered pair counts twice.
pub fn j_col(x: &StateTuple, scenario: &Scenario) -> Result<f64, OptError> {
    let n = x.agent_count();
    let mut total = 0.0;
    for alpha in 1..=n {
        for beta in alpha + 1..=n {
            total += 2.0 * j_col_pair(x, scenario, alpha, beta)?;
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostBreakdown {
    pub j_est: Cost,
    pub j_col: f64,
    pub total: Cost,
}

pub fn j_total(x: &StateTuple, scenario: &Scenario) -> Result<CostBreakdown, OptError> {
    let j_col = j_col(x, scenario)?;
    let j_est = fim(x, scenario)?.j_est();
    Ok(CostBreakdown {
        j_est,
        j_col,
        total: j_est + j_col,
    })
}

fn probe(x: &StateTuple, scenario: &Scenario, dx: &DVector<f64>) -> Option<f64> {
    let moved = x.oplus(dx).ok()?;
    j_total(&moved, scenario).ok()?.total.finite()
}

/// Central differences of `J(x ⊕ h e_k)` with `h = fd_step`. Coordinates whose
/// probe on one side is unavailable fall back to a one-sided difference.
pub fn gradient(x: &StateTuple, scenario: &Scenario) -> Result<DVector<f64>, OptError> {
    let center = j_total(x, scenario)?.total.finite().ok_or(OptError::InfiniteStart)?;
    gradient_at(x, scenario, center)
}

fn gradient_at(x: &StateTuple, scenario: &Scenario, center: f64) -> Result<DVector<f64>, OptError> {
    let dim = x.tangent_dim();
    let h = scenario.optimizer().fd_step;
    let probes: Vec<(Option<f64>, Option<f64>)> = (0..dim)
        .into_par_iter()
        .map(|k| {
            let mut dx = DVector::zeros(dim);
            dx[k] = h;
            let plus = probe(x, scenario, &dx);
            dx[k] = -h;
            (plus, probe(x, scenario, &dx))
        })
        .collect();
    let mut g = DVector::zeros(dim);
    for (k, pair) in probes.into_iter().enumerate() {
        g[k] = match pair {
            (Some(p), Some(m)) => (p - m) / (2.0 * h),
            (Some(p), None) => (p - center) / h,
            (None, Some(m)) => (center - m) / h,
            (None, None) => return Err(OptError::Gradient { coordinate: k }),
        };
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub j_est: f64,
    pub j_col: f64,
    pub j_total: f64,
    pub gradient_norm: f64,
    /// Accepted `γ_eff / γ` for the step leaving this iterate; 0 when no step was taken.
    pub step_scale: f64,
    pub state: Option<StateTuple>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    Stalled,
}

/// How checkpoints are spread over a descent trace.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CheckpointSpacing {
    /// Evenly spaced iterations.
    Uniform,
    /// Iterations `0` and `n^(k/(c−2))`, dense early where the formation moves most.
    #[default]
    Geometric,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescentTrace {
    pub records: Vec<TraceRecord>,
    pub termination: Termination,
}

impl DescentTrace {
    /// Up to `count` record indices evenly spaced from the first to the last
    /// record that carries a state.
    pub fn checkpoint_indices(&self, count: usize) -> Vec<usize> {
        self.checkpoints(count, CheckpointSpacing::Uniform)
    }

    /// Up to `count` indices of records that carry a state, spaced by `spacing`.
    /// The first and last such records are always included.
    pub fn checkpoints(&self, count: usize, spacing: CheckpointSpacing) -> Vec<usize> {
        let with_state: Vec<usize> = (0..self.records.len())
            .filter(|&k| self.records[k].state.is_some())
            .collect();
        if with_state.is_empty() || count == 0 {
            return Vec::new();
        }
        if count == 1 || with_state.len() == 1 {
            return vec![*with_state.last().unwrap()];
        }
        let last = with_state.len() - 1;
        let mut picks: Vec<usize> = match spacing {
            CheckpointSpacing::Uniform => (0..count)
                .map(|k| with_state[((k * last) as f64 / (count - 1) as f64).round() as usize])
                .collect(),
            CheckpointSpacing::Geometric => {
                // iteration targets 0 and last^(k/(count−2)) for k = 0..count−2
                let first_iter = self.records[with_state[0]].iter;
                let span = (self.records[with_state[last]].iter - first_iter).max(1) as f64;
                std::iter::once(with_state[0])
                    .chain((0..count - 1).map(|k| {
                        let target = first_iter as f64 + span.powf(k as f64 / (count - 2).max(1) as f64);
                        *with_state
                            .iter()
                            .find(|&&i| self.records[i].iter as f64 >= target.round())
                            .unwrap_or(&with_state[last])
                    }))
                    .collect()
            }
        };
        picks.dedup();
        picks
    }

    pub fn final_state(&self) -> Option<&StateTuple> {
        self.records.iter().rev().find_map(|r| r.state.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct DescentResult {
    pub state: StateTuple,
    pub trace: DescentTrace,
}

/// Descent options beyond the scenario's optimizer block.
#[derive(Clone, Copy, Debug)]
pub struct DescentOptions {
    /// Keep a state snapshot every this many iterations (the final iterate is always kept).
    pub snapshot_every: usize,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions { snapshot_every: 1 }
    }
}

/// Runs gradient descent from the scenario's initial state.
pub fn descend(scenario: &Scenario) -> Result<DescentResult, OptError> {
    descend_with(scenario, DescentOptions::default())
}

pub fn descend_with(scenario: &Scenario, options: DescentOptions) -> Result<DescentResult, OptError> {
    let params = scenario.optimizer();
    let mut x = scenario.initial_state().clone();
    let mut cost = j_total(&x, scenario)?;
    let Some(mut current) = cost.total.finite() else {
        return Err(OptError::InfiniteStart);
    };
    let mut records = Vec::new();
    let every = options.snapshot_every.max(1);

    for iter in 0..=params.max_iters {
        let g = gradient_at(&x, scenario, current)?;
        let gradient_norm = g.norm();
        let mut record = TraceRecord {
            iter,
            j_est: cost.j_est.value(),
            j_col: cost.j_col,
            j_total: current,
            gradient_norm,
            step_scale: 0.0,
            state: (iter % every == 0).then(|| x.clone()),
        };
        if gradient_norm < params.grad_tol || iter == params.max_iters {
            record.state = Some(x.clone());
            records.push(record);
            let termination = if gradient_norm < params.grad_tol {
                Termination::Converged
            } else {
                Termination::MaxIterations
            };
            return Ok(DescentResult {
                state: x,
                trace: DescentTrace { records, termination },
            });
        }

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = x.oplus(&(&g * (-params.gamma * scale))).expect("gradient length");
            if let Ok(c) = j_total(&candidate, scenario) {
                if let Some(total) = c.total.finite() {
                    if total <= current + ACCEPT_SLACK {
                        accepted = Some((candidate, c, total));
                        break;
                    }
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((candidate, c, total)) => {
                record.step_scale = scale;
                records.push(record);
                x = candidate;
                cost = c;
                current = total;
            }
            None => {
                record.state = Some(x.clone());
                records.push(record);
                return Err(OptError::Stall {
                    iteration: iter,
                    trace: Box::new(DescentTrace {
                        records,
                        termination: Termination::Stalled,
                    }),
                });
            }
        }
    }
    unreachable!("loop returns at max_iters")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{GroupMode, Pose};
    use crate::presets;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_agents_at(distance: f64) -> (Scenario, StateTuple) {
        let s = presets::preset("collinear").unwrap();
        let x = StateTuple::new(GroupMode::Se2, vec![Pose::from_heading(0.3, &[distance, 0.0])]).unwrap();
        (s.with_initial_state(x.clone()).unwrap(), x)
    }

    #[test]
    fn barrier_examples() {
        let (s, x) = two_agents_at(2.0);
        assert_eq!(j_col_pair(&x, &s, 1, 2).unwrap(), 0.0);
        let (s, x) = two_agents_at(1.5);
        let expected = ((2.25f64 - 4.0) / (2.25 - 1.0)).powi(2);
        assert!((expected - 1.96).abs() < 1e-12);
        assert!((j_col_pair(&x, &s, 1, 2).unwrap() - expected).abs() < 1e-12);
        let (s, x) = two_agents_at(3.5);
        assert_eq!(j_col_pair(&x, &s, 2, 1).unwrap(), 0.0);

        let (s, x) = two_agents_at(1.0);
        assert!(matches!(j_col_pair(&x, &s, 1, 2), Err(OptError::BarrierPole { .. })));
        let (s, x) = two_agents_at(0.8);
        assert!(matches!(j_col_pair(&x, &s, 1, 2), Err(OptError::Infeasible { .. })));
    }

    #[test]
    fn barrier_grows_toward_pole() {
        let p = BarrierParams {
            activation_radius: 2.0,
            safety_radius: 1.0,
        };
        let mut last = 0.0;
        for k in 1..100 {
            let r = 2.0 - k as f64 * 0.00999;
            let v = p.value(r);
            assert!(v > last);
            last = v;
        }
        assert!(p.value(1.0 + 1e-6) > 1e10);
    }

    #[test]
    fn total_cost_examples() {
        let (s, x) = two_agents_at(2.5);
        let c = j_total(&x, &s).unwrap();
        assert_eq!(c.total, c.j_est);

        let (s, x) = two_agents_at(1.5);
        let c = j_total(&x, &s).unwrap();
        assert!((c.total.value() - c.j_est.value() - 3.92).abs() < 1e-12);

        let s = presets::preset("collinear").unwrap();
        assert_eq!(j_total(s.initial_state(), &s).unwrap().total, Cost::Infinite);
    }

    #[test]
    fn barrier_gradient_matches_symbolic_derivative() {
        // d/dr of ((r² − R²)/(r² − d²))² = 2 q · 2r (R² − d²)/(r² − d²)², for r < R
        let (big_r, d) = (2.0f64, 1.0f64);
        let r = 1.4f64;
        let q = (r * r - big_r * big_r) / (r * r - d * d);
        let dq = 2.0 * r * (big_r * big_r - d * d) / (r * r - d * d).powi(2);
        let symbolic = 2.0 * q * dq;

        let (s, x) = two_agents_at(r);
        let g = gradient(&x, &s).unwrap();
        let fim_only = {
            // J_est part of the gradient via the same finite differences
            let h = s.optimizer().fd_step;
            DVector::from_fn(3, |k, _| {
                let mut dx = DVector::zeros(3);
                dx[k] = h;
                let p = fim(&x.oplus(&dx).unwrap(), &s).unwrap().j_est().value();
                dx[k] = -h;
                let m = fim(&x.oplus(&dx).unwrap(), &s).unwrap().j_est().value();
                (p - m) / (2.0 * h)
            })
        };
        let barrier_grad = g - fim_only;
        // agent 2 has heading 0.3: its body x axis is rotated, so project the
        // translation gradient back to the line of sight (world x) direction.
        let c = x.pose(2).rotation().matrix();
        let world = c * barrier_grad.rows(1, 2);
        // the ordered-pair sum counts the pair twice
        let expected = 2.0 * symbolic;
        assert!((world[0] - expected).abs() < 1e-4 * expected.abs(), "{} vs {expected}", world[0]);
        assert!(world[1].abs() < 1e-4 * expected.abs());
        assert!(barrier_grad[0].abs() < 1e-6);
    }

    #[test]
    fn directional_derivative_matches_secant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let s = presets::preset("line3").unwrap();
        let x = s.initial_state();
        let g = gradient(x, &s).unwrap();
        for _ in 0..5 {
            let v = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0)).normalize();
            let h = 1e-5;
            let p = j_total(&x.oplus(&(&v * h)).unwrap(), &s).unwrap().total.value();
            let m = j_total(&x.oplus(&(&v * -h)).unwrap(), &s).unwrap().total.value();
            let secant = (p - m) / (2.0 * h);
            let dot = g.dot(&v);
            assert!((secant - dot).abs() < 1e-4 * secant.abs().max(g.norm() * 1e-2), "{secant} {dot}");
        }
    }

    #[test]
    fn one_sided_gradient_near_singularity() {
        let s = presets::preset("collinear").unwrap();
        assert!(matches!(gradient(s.initial_state(), &s), Err(OptError::InfiniteStart)));
    }

    #[test]
    fn checkpoint_spacing() {
        let rec = |iter| TraceRecord {
            iter,
            j_est: 0.0,
            j_col: 0.0,
            j_total: 0.0,
            gradient_norm: 0.0,
            step_scale: 0.0,
            state: Some(presets::preset("line3").unwrap().initial_state().clone()),
        };
        let trace = DescentTrace {
            records: (0..=90).map(rec).collect(),
            termination: Termination::Converged,
        };
        assert_eq!(trace.checkpoint_indices(10), vec![0, 10, 20, 30, 40, 50, 60, 70, 80, 90]);
        let short = DescentTrace {
            records: (0..3).map(rec).collect(),
            termination: Termination::Converged,
        };
        assert_eq!(short.checkpoint_indices(10), vec![0, 1, 2]);
        assert_eq!(short.checkpoints(10, CheckpointSpacing::Geometric), vec![0, 1, 2]);

        let long = DescentTrace {
            records: (0..=256).map(rec).collect(),
            termination: Termination::Converged,
        };
        assert_eq!(
            long.checkpoints(10, CheckpointSpacing::Geometric),
            vec![0, 1, 2, 4, 8, 16, 32, 64, 128, 256]
        );
    }

    #[test]
    fn two_agents_settle_between_radii() {
        let (s, _) = two_agents_at(1.6);
        let out = descend(&s).unwrap();
        let d = agent_distance(&out.state, 1, 2);
        let o = s.optimizer();
        assert!(d > o.safety_radius && d < o.activation_radius, "{d}");
        assert_eq!(out.trace.termination, Termination::Converged);
    }
}
