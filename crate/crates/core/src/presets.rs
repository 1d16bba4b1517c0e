//! Built-in scenarios.
//!
//! Initial formations are our own choices. Near-line starts put the agents on
//! Agent 1's body y axis, the axis joining each agent's two tags, so that all
//! tags are close to collinear; agent α gets a heading of `0.05 rad · (α − 1)`
//! to break the mirror symmetry of the line.

use crate::manifold::{GroupMode, Pose, StateTuple};
use crate::scenario::{
    fully_connected_graph, AgentId, Edge, MeasurementGraph, OptimizerParams, Scenario, ScenarioError, TagId,
    TagLayout,
};
use nalgebra::DVector;

pub const NAMES: [&str; 10] = [
    "line3",
    "triangle3",
    "square4",
    "five",
    "ten",
    "sparse",
    "heading3d",
    "experiment",
    "collinear",
    "coincident",
];

/// Uniform range noise used by every preset (m).
pub const PRESET_SIGMA: f64 = 0.1;
/// Reference-point spacing of near-line starts (m).
pub const LINE_SPACING: f64 = 2.0;
pub const DEFAULT_SEED: u64 = 2022;

/// Two tags per agent: tag `2α−1` and tag `2α` on agent α.
pub fn two_tag_layout(agents: usize, first: &[f64], second: &[f64]) -> Vec<TagLayout> {
    (1..=agents)
        .flat_map(|a| {
            [(2 * a - 1, first), (2 * a, second)].map(|(id, pos)| TagLayout {
                tag_id: id as TagId,
                agent_id: a as AgentId,
                body_position: DVector::from_column_slice(pos),
            })
        })
        .collect()
}

/// Agents on the body y axis with `spacing`, headings `0.05 · (α − 1)`.
pub fn near_line_state(mode: GroupMode, agents: usize, spacing: f64) -> StateTuple {
    let poses = (2..=agents)
        .map(|a| {
            let mut t = vec![0.0, spacing * (a - 1) as f64];
            if mode.dim() == 3 {
                t.push(0.0);
            }
            Pose::from_heading(0.05 * (a - 1) as f64, &t)
        })
        .collect();
    StateTuple::new(mode, poses).expect("planar poses")
}

fn planar_state(mode: GroupMode, poses: &[(f64, [f64; 3])]) -> StateTuple {
    let poses = poses
        .iter()
        .map(|(heading, t)| Pose::from_heading(*heading, &t[..mode.dim()]))
        .collect();
    StateTuple::new(mode, poses).expect("planar poses")
}

/// Agents on a circle, each facing the center with a deterministic heading and
/// radius jitter, expressed relative to the first agent.
fn ring_state(mode: GroupMode, agents: usize, radius: f64, jitter: f64) -> StateTuple {
    use std::f64::consts::PI;
    let world: Vec<Pose> = (0..agents)
        .map(|k| {
            let kf = k as f64;
            let angle = 2.0 * PI * kf / agents as f64;
            let r = radius * (1.0 + jitter * (1.7 * kf + 0.3).sin());
            let heading = angle + PI + 2.0 * jitter * (2.3 * kf + 1.1).cos();
            let mut t = vec![r * angle.cos(), r * angle.sin()];
            if mode.dim() == 3 {
                t.push(0.0);
            }
            Pose::from_heading(heading, &t)
        })
        .collect();
    let to_first = world[0].inverse();
    let poses = world[1..].iter().map(|p| to_first.compose(p)).collect();
    StateTuple::new(mode, poses).expect("planar poses")
}

fn build(
    mode: GroupMode,
    tags: Vec<TagLayout>,
    graph: Option<Vec<Edge>>,
    state: StateTuple,
) -> Result<Scenario, ScenarioError> {
    let graph = match graph {
        Some(edges) => MeasurementGraph::new(edges, &tags)?,
        None => fully_connected_graph(&tags, PRESET_SIGMA)?,
    };
    Scenario::new(mode, tags, graph, OptimizerParams::default(), state, DEFAULT_SEED)
}

fn planar_tags(agents: usize) -> Vec<TagLayout> {
    two_tag_layout(agents, &[0.2, 0.2], &[0.2, -0.2])
}

/// Looks up a preset by name.
pub fn preset(name: &str) -> Result<Scenario, ScenarioError> {
    let se2 = GroupMode::Se2;
    match name {
        "line3" => build(se2, planar_tags(3), None, near_line_state(se2, 3, LINE_SPACING)),
        "triangle3" => build(
            se2,
            planar_tags(3),
            None,
            ring_state(se2, 3, 0.9, 0.15),
        ),
        "square4" => build(se2, planar_tags(4), None, ring_state(se2, 4, 1.2, 0.15)),
        "five" => build(se2, planar_tags(5), None, ring_state(se2, 5, 1.3, 0.1)),
        "ten" => build(se2, planar_tags(10), None, ring_state(se2, 10, 2.4, 0.1)),
        "sparse" => {
            // ring graph 1-2-3-4-1: only neighbouring agents range to each other
            let agents = 4;
            let mut edges = Vec::new();
            for a in 1..=agents {
                let b = a % agents + 1;
                for ta in [2 * a - 1, 2 * a] {
                    for tb in [2 * b - 1, 2 * b] {
                        edges.push(Edge::new(ta as TagId, tb as TagId, PRESET_SIGMA));
                    }
                }
            }
            build(
                se2,
                planar_tags(agents),
                Some(edges),
                ring_state(se2, agents, 1.2, 0.15),
            )
        }
        "heading3d" => {
            let mode = GroupMode::Se3Heading;
            build(
                mode,
                two_tag_layout(4, &[0.2, 0.2, 0.0], &[0.2, -0.2, 0.0]),
                None,
                planar_state(
                    mode,
                    &[(0.1, [1.5, 0.1, 0.3]), (0.2, [1.6, 1.5, -0.2]), (-0.1, [0.1, 1.4, 0.4])],
                ),
            )
        }
        "experiment" => build(
            se2,
            two_tag_layout(3, &[0.0, 0.085], &[0.0, -0.085]),
            None,
            near_line_state(se2, 3, LINE_SPACING),
        ),
        // all four tags on the line x = 0.2
        "collinear" => build(se2, planar_tags(2), None, planar_state(se2, &[(0.0, [0.0, 3.0, 0.0])])),
        // tag 4 sits exactly on tag 1
        "coincident" => build(se2, planar_tags(2), None, planar_state(se2, &[(0.0, [0.0, 0.4, 0.0])])),
        other => Err(ScenarioError::Validation {
            field: "preset".into(),
            message: format!("unknown preset {other:?}; known: {}", NAMES.join(", ")),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_builds() {
        for name in NAMES {
            let s = preset(name).unwrap();
            assert!(s.agent_count() >= 2, "{name}");
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn sparse_graph_is_not_fully_connected() {
        let s = preset("sparse").unwrap();
        assert_eq!(s.graph().len(), 16);
        assert!(s.graph().len() < fully_connected_graph(s.tags(), 0.1).unwrap().len());
    }
}
