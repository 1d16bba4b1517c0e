//! Inter-tag range model `y_ij = ‖D T_1α p_i − D T_1β p_j‖ + v_ij` and its
//! analytic Jacobians with respect to right perturbations of the state.

use crate::manifold::{odot, StateTuple};
use crate::scenario::{Edge, Scenario, ScenarioError, TagId};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Ranges at or below this have no defined line of sight.
pub const MIN_RANGE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RangingError {
    #[error("singular geometry on edge ({tag_i}, {tag_j}): range {range:e} m leaves the line of sight undefined")]
    SingularGeometry { tag_i: TagId, tag_j: TagId, range: f64 },
    #[error("state mode does not match the scenario")]
    ModeMismatch,
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// A body-frame tag position with the homogeneous 1 appended.
#[derive(Clone, Debug, PartialEq)]
pub struct HomogeneousTag(DVector<f64>);

impl HomogeneousTag {
    pub fn new(body_position: &DVector<f64>) -> Self {
        let n = body_position.len();
        let mut p = DVector::from_element(n + 1, 1.0);
        p.rows_mut(0, n).copy_from(body_position);
        HomogeneousTag(p)
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    /// Euclidean part, `D p`.
    pub fn point(&self) -> DVector<f64> {
        let n = self.0.len() - 1;
        self.0.rows(0, n).into_owned()
    }
}

/// Stacked ranges in canonical edge order with their diagonal covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementVector {
    pub values: DVector<f64>,
    /// Diagonal of `R` (m²).
    pub variances: DVector<f64>,
}

impl MeasurementVector {
    pub fn covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.variances)
    }
}

/// World-frame (Agent 1 frame) position of a tag.
pub fn tag_position(x: &StateTuple, scenario: &Scenario, tag: TagId) -> Result<DVector<f64>, RangingError> {
    let t = scenario.tag(tag)?;
    Ok(x.pose(t.agent_id).transform_point(&t.body_position))
}

fn check_mode(x: &StateTuple, scenario: &Scenario) -> Result<(), RangingError> {
    if x.mode() != scenario.mode() || x.agent_count() != scenario.agent_count() {
        return Err(RangingError::ModeMismatch);
    }
    Ok(())
}

/// Noise-free range for one edge.
pub fn range(x: &StateTuple, scenario: &Scenario, edge: &Edge) -> Result<f64, RangingError> {
    check_mode(x, scenario)?;
    let a = tag_position(x, scenario, edge.tag_i)?;
    let b = tag_position(x, scenario, edge.tag_j)?;
    Ok((a - b).norm())
}

/// Noise-free `g(x)` over all edges.
pub fn ranges(x: &StateTuple, scenario: &Scenario) -> Result<DVector<f64>, RangingError> {
    let values = scenario
        .graph()
        .edges()
        .iter()
        .map(|e| range(x, scenario, e))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DVector::from_vec(values))
}

/// The two nonzero `1×m` blocks of an edge's Jacobian row.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeJacobian {
    pub agent_i: usize,
    pub agent_j: usize,
    /// `ρ_ij D T̄_1α p_i^⊙`.
    pub block_i: DVector<f64>,
    /// `−ρ_ij D T̄_1β p_j^⊙`.
    pub block_j: DVector<f64>,
    /// Unit line-of-sight vector from tag j to tag i, Agent 1 frame.
    pub rho: DVector<f64>,
}

/// Analytic Jacobian blocks of `y_ij` with respect to `δξ_α` and `δξ_β`.
pub fn jacobian_blocks(x: &StateTuple, scenario: &Scenario, edge: &Edge) -> Result<EdgeJacobian, RangingError> {
    check_mode(x, scenario)?;
    let mode = x.mode();
    let n = mode.dim();
    let ti = scenario.tag(edge.tag_i)?;
    let tj = scenario.tag(edge.tag_j)?;
    let (pa, pb) = (x.pose(ti.agent_id), x.pose(tj.agent_id));
    let diff = pa.transform_point(&ti.body_position) - pb.transform_point(&tj.body_position);
    let dist = diff.norm();
    if dist <= MIN_RANGE {
        return Err(RangingError::SingularGeometry {
            tag_i: edge.tag_i,
            tag_j: edge.tag_j,
            range: dist,
        });
    }
    let rho = diff / dist;
    let block = |pose: &crate::manifold::Pose, body: &DVector<f64>| -> DVector<f64> {
        let p = HomogeneousTag::new(body);
        let od = odot(mode, p.as_vector()).expect("tag dimension validated by scenario");
        // D T̄ p^⊙ = C · (top n rows of p^⊙), since the last row of p^⊙ is zero
        let dtp = pose.rotation().matrix() * od.rows(0, n);
        dtp.transpose() * &rho
    };
    Ok(EdgeJacobian {
        agent_i: ti.agent_id,
        agent_j: tj.agent_id,
        block_i: block(pa, &ti.body_position),
        block_j: -block(pb, &tj.body_position),
        rho,
    })
}

/// `H(x̄)`, `|E| × m(N−1)`. Blocks belonging to Agent 1 are dropped.
pub fn stack_jacobian(x: &StateTuple, scenario: &Scenario) -> Result<DMatrix<f64>, RangingError> {
    let m = x.mode().dof();
    let edges = scenario.graph().edges();
    let mut h = DMatrix::zeros(edges.len(), x.tangent_dim());
    for (row, edge) in edges.iter().enumerate() {
        let jac = jacobian_blocks(x, scenario, edge)?;
        if let Some(col) = x.block_offset(jac.agent_i) {
            h.view_mut((row, col), (1, m)).copy_from(&jac.block_i.transpose());
        }
        if let Some(col) = x.block_offset(jac.agent_j) {
            h.view_mut((row, col), (1, m)).copy_from(&jac.block_j.transpose());
        }
    }
    Ok(h)
}

/// Per-edge variances `σ²_ij` in canonical edge order.
pub fn variances(scenario: &Scenario) -> DVector<f64> {
    DVector::from_iterator(
        scenario.graph().len(),
        scenario.graph().edges().iter().map(|e| e.sigma * e.sigma),
    )
}

/// `y = g(x) + v`, `v ~ N(0, R)`. Ranges are clamped at zero.
pub fn synthesize<R: Rng + ?Sized>(
    x: &StateTuple,
    scenario: &Scenario,
    rng: &mut R,
) -> Result<MeasurementVector, RangingError> {
    let clean = ranges(x, scenario)?;
    let values = DVector::from_iterator(
        clean.len(),
        clean.iter().zip(scenario.graph().edges()).map(|(&y, e)| {
            let z: f64 = StandardNormal.sample(rng);
            (y + e.sigma * z).max(0.0)
        }),
    );
    Ok(MeasurementVector {
        values,
        variances: variances(scenario),
    })
}

/// Central finite-difference Jacobian of `g(x ⊕ δx)` at `δx = 0`.
pub fn finite_difference_jacobian(x: &StateTuple, scenario: &Scenario, step: f64) -> Result<DMatrix<f64>, RangingError> {
    let dim = x.tangent_dim();
    let rows = scenario.graph().len();
    let mut h = DMatrix::zeros(rows, dim);
    for k in 0..dim {
        let mut dx = DVector::zeros(dim);
        dx[k] = step;
        let plus = ranges(&x.oplus(&dx).expect("tangent length"), scenario)?;
        let minus = ranges(&x.oplus(&(-dx)).expect("tangent length"), scenario)?;
        h.set_column(k, &((plus - minus) / (2.0 * step)));
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{exp, GroupMode, Pose};
    use crate::presets;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_agent(pose: Pose) -> (Scenario, StateTuple) {
        let s = presets::preset("collinear").unwrap();
        let x = StateTuple::new(GroupMode::Se2, vec![pose]).unwrap();
        (s.with_initial_state(x.clone()).unwrap(), x)
    }

    fn random_state(rng: &mut ChaCha8Rng, mode: GroupMode, agents: usize) -> StateTuple {
        use rand::Rng;
        let poses = (1..agents)
            .map(|_| {
                let xi = DVector::from_fn(mode.dof(), |k, _| {
                    if k < mode.rot_dof() {
                        rng.random_range(-2.5..2.5)
                    } else {
                        rng.random_range(-3.0..3.0)
                    }
                });
                exp(mode, &xi).unwrap()
            })
            .collect();
        StateTuple::new(mode, poses).unwrap()
    }

    #[test]
    fn range_examples() {
        // tags 1 (0.2, 0.2) on agent 1 and 4 (0.2, -0.2) on agent 2
        let e = Edge::new(1, 4, 0.1);
        let (s, x) = two_agent(Pose::identity(2));
        assert!((range(&x, &s, &e).unwrap() - 0.4).abs() < 1e-15);

        let (s, x) = two_agent(Pose::from_heading(0.0, &[3.0, 0.0]));
        assert!((range(&x, &s, &e).unwrap() - 9.16f64.sqrt()).abs() < 1e-15);

        let (s, x) = two_agent(Pose::from_heading(std::f64::consts::FRAC_PI_2, &[3.0, 0.0]));
        assert!((tag_position(&x, &s, 4).unwrap() - DVector::from_vec(vec![3.2, 0.2])).amax() < 1e-15);
        assert!((range(&x, &s, &e).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn range_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = presets::preset("triangle3").unwrap();
        let x = random_state(&mut rng, GroupMode::Se2, 3);
        for e in s.graph().edges() {
            let flipped = Edge { tag_i: e.tag_j, tag_j: e.tag_i, sigma: e.sigma };
            assert_eq!(range(&x, &s, e).unwrap(), range(&x, &s, &flipped).unwrap());
        }
    }

    #[test]
    fn reference_point_tag_has_no_rotation_sensitivity() {
        let s = presets::preset("collinear").unwrap();
        let mut doc = s.to_document();
        doc.agents[1].tags[0].body_position = vec![0.0, 0.0];
        let s = Scenario::from_document(doc).unwrap();
        let x = StateTuple::new(GroupMode::Se2, vec![Pose::from_heading(0.4, &[2.0, 1.0])]).unwrap();
        let jac = jacobian_blocks(&x, &s, &Edge::new(1, 3, 0.1)).unwrap();
        assert_eq!(jac.agent_j, 2);
        assert_eq!(jac.block_j[0], 0.0);
    }

    #[test]
    fn translation_blocks_are_rotated_line_of_sight() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = presets::preset("triangle3").unwrap();
        for _ in 0..20 {
            let x = random_state(&mut rng, GroupMode::Se2, 3);
            for e in s.graph().edges() {
                let jac = jacobian_blocks(&x, &s, e).unwrap();
                // C_1β maps body translation perturbations into Agent 1's frame,
                // so C · (translation block) recovers ∓ρ exactly
                let c_i = x.pose(jac.agent_i).rotation().matrix();
                let c_j = x.pose(jac.agent_j).rotation().matrix();
                let ti = c_i * jac.block_i.rows(1, 2);
                let tj = c_j * jac.block_j.rows(1, 2);
                assert!((ti - &jac.rho).amax() < 1e-14);
                assert!((tj + &jac.rho).amax() < 1e-14);
                assert!((jac.rho.norm() - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn blocks_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for name in ["triangle3", "heading3d"] {
            let s = presets::preset(name).unwrap();
            for _ in 0..20 {
                let x = random_state(&mut rng, s.mode(), s.agent_count());
                let h = stack_jacobian(&x, &s).unwrap();
                let fd = finite_difference_jacobian(&x, &s, 1e-6).unwrap();
                let rel = (&h - &fd).amax() / h.amax();
                assert!(rel < 1e-5, "{name}: {rel:e}");
            }
        }
    }

    #[test]
    fn stack_shape_and_sparsity() {
        let s = presets::preset("collinear").unwrap();
        let x = StateTuple::new(GroupMode::Se2, vec![Pose::from_heading(0.3, &[2.0, 1.0])]).unwrap();
        assert_eq!(stack_jacobian(&x, &s).unwrap().shape(), (4, 3));

        let s = presets::preset("triangle3").unwrap();
        let x = s.initial_state();
        let h = stack_jacobian(x, &s).unwrap();
        assert_eq!(h.shape(), (12, 6));
        for (row, e) in s.graph().edges().iter().enumerate() {
            let agents = [s.lookup(e.tag_i).unwrap(), s.lookup(e.tag_j).unwrap()];
            for agent in 2..=3 {
                let block = h.view((row, (agent - 2) * 3), (1, 3));
                if agents.contains(&agent) {
                    assert!(block.norm() > 0.0);
                } else {
                    assert_eq!(block.norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn coincident_tags_are_singular() {
        let s = presets::preset("coincident").unwrap();
        let err = stack_jacobian(s.initial_state(), &s).unwrap_err();
        assert!(matches!(err, RangingError::SingularGeometry { tag_i: 1, tag_j: 4, .. }), "{err}");
    }

    #[test]
    fn ranges_invariant_to_reanchoring() {
        // Re-express the state relative to agent 2 instead of agent 1 and relabel;
        // every range must be unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = presets::preset("triangle3").unwrap();
        let x = random_state(&mut rng, GroupMode::Se2, 3);
        let anchor = x.pose(2).inverse();
        let moved: Vec<Pose> = [x.pose(1), x.pose(3)].iter().map(|p| anchor.compose(p)).collect();
        // new agent order: old 2 -> 1, old 1 -> 2, old 3 -> 3
        let y = StateTuple::new(GroupMode::Se2, moved).unwrap();
        let mut doc = s.to_document();
        doc.agents.swap(0, 1);
        doc.agents[0].id = 1;
        doc.agents[1].id = 2;
        let s2 = Scenario::from_document(doc).unwrap();
        let a = ranges(&x, &s).unwrap();
        let b = ranges(&y, &s2).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn first_order_error_shrinks_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = presets::preset("triangle3").unwrap();
        let x = random_state(&mut rng, GroupMode::Se2, 3);
        let h = stack_jacobian(&x, &s).unwrap();
        let g0 = ranges(&x, &s).unwrap();
        let v = DVector::from_fn(6, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0)).normalize();
        let ratio = |step: f64| {
            let g = ranges(&x.oplus(&(&v * step)).unwrap(), &s).unwrap();
            (g - &g0 - &h * &v * step).amax() / (step * step)
        };
        let (r1, r2) = (ratio(1e-2), ratio(1e-3));
        assert!(r1 > 0.0 && (r1 / r2 - 1.0).abs() < 0.2, "{r1} {r2}");
    }

    #[test]
    fn synthesize_statistics_and_determinism() {
        let s = presets::preset("collinear").unwrap();
        let x = StateTuple::new(GroupMode::Se2, vec![Pose::from_heading(0.0, &[3.0, 0.0])]).unwrap();
        let truth = ranges(&x, &s).unwrap();

        let tiny = s.with_scaled_sigma(1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = synthesize(&x, &tiny, &mut rng).unwrap();
        assert!((y.values - &truth).amax() < 1e-10);

        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<f64> = (0..draws).map(|_| synthesize(&x, &s, &mut rng).unwrap().values[0]).collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let sigma = s.graph().edges()[0].sigma;
        assert!((mean - truth[0]).abs() < 4.0 * sigma / (draws as f64).sqrt());
        assert!((var.sqrt() / sigma - 1.0).abs() < 0.02);

        let a = synthesize(&x, &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = synthesize(&x, &s, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
