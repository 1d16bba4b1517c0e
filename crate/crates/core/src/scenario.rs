//! Agents, tags, measurement graph, optimizer settings and the scenario file schema.
//!
//! A scenario file is a JSON document:
//!
//! ```json
//! {
//!   "mode": "se2",
//!   "agents": [{ "id": 1, "tags": [{ "id": 1, "body_position": [0.2, 0.2] }] }],
//!   "graph": { "type": "full", "sigma": 0.1 },
//!   "optimizer": { "gamma": 0.1, "activation_radius": 2.0, "safety_radius": 1.0,
//!                  "max_iters": 5000, "grad_tol": 1e-4, "fd_step": 1e-5 },
//!   "initial_state": [{ "agent": 2, "rotation": 0.05, "translation": [1.5, 0.0] }],
//!   "seed": 7
//! }
//! ```
//!
//! `graph` may instead be `{ "type": "explicit", "edges": [{ "tag_i": 1, "tag_j": 3, "sigma": 0.1 }] }`.
//! `rotation` is either a heading angle (planar modes) or a row-major matrix, flat or nested.
//! Lengths are meters, angles radians.

use crate::manifold::{GroupMode, ManifoldError, Pose, Rotation, StateTuple};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub type TagId = u32;
pub type AgentId = usize;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown tag id {0}")]
    UnknownTag(TagId),
    #[error("{field}: {message}")]
    Validation { field: String, message: String },
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario schema violation: {0}")]
    Parse(#[from] serde_json::Error),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

/// A ranging tag rigidly attached to an agent.
#[derive(Clone, Debug, PartialEq)]
pub struct TagLayout {
    pub tag_id: TagId,
    pub agent_id: AgentId,
    /// Position in the owning agent's body frame.
    pub body_position: DVector<f64>,
}

/// An unordered range measurement between two tags, stored with `tag_i < tag_j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub tag_i: TagId,
    pub tag_j: TagId,
    /// Range noise standard deviation (m).
    pub sigma: f64,
}

impl Edge {
    pub fn new(a: TagId, b: TagId, sigma: f64) -> Self {
        Edge {
            tag_i: a.min(b),
            tag_j: a.max(b),
            sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MeasurementGraph {
    edges: Vec<Edge>,
}

impl MeasurementGraph {
    /// Validates edges against `tags` and sorts them canonically by `(tag_i, tag_j)`.
    pub fn new(edges: Vec<Edge>, tags: &[TagLayout]) -> Result<Self, ScenarioError> {
        let owner: BTreeMap<TagId, AgentId> = tags.iter().map(|t| (t.tag_id, t.agent_id)).collect();
        let mut seen = BTreeSet::new();
        let mut canonical = Vec::with_capacity(edges.len());
        for (k, e) in edges.into_iter().enumerate() {
            let field = format!("graph.edges[{k}]");
            let e = Edge::new(e.tag_i, e.tag_j, e.sigma);
            if e.tag_i == e.tag_j {
                return Err(invalid(field, format!("self edge on tag {}", e.tag_i)));
            }
            let (Some(&a), Some(&b)) = (owner.get(&e.tag_i), owner.get(&e.tag_j)) else {
                return Err(invalid(field, format!("edge ({}, {}) references an unknown tag", e.tag_i, e.tag_j)));
            };
            if a == b {
                return Err(invalid(
                    field,
                    format!("edge ({}, {}) joins two tags on agent {a}", e.tag_i, e.tag_j),
                ));
            }
            if !(e.sigma > 0.0 && e.sigma.is_finite()) {
                return Err(invalid(format!("{field}.sigma"), format!("must be finite and > 0, got {}", e.sigma)));
            }
            if !seen.insert((e.tag_i, e.tag_j)) {
                return Err(invalid(field, format!("duplicate edge ({}, {})", e.tag_i, e.tag_j)));
            }
            canonical.push(e);
        }
        canonical.sort_by_key(|e| (e.tag_i, e.tag_j));
        Ok(MeasurementGraph { edges: canonical })
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Every inter-agent tag pair exactly once, with a uniform `sigma`.
pub fn fully_connected_graph(tags: &[TagLayout], sigma: f64) -> Result<MeasurementGraph, ScenarioError> {
    let agents: BTreeSet<_> = tags.iter().map(|t| t.agent_id).collect();
    if agents.len() < 2 {
        return Err(invalid("graph", "a fully connected graph needs at least 2 agents"));
    }
    let mut edges = Vec::new();
    for (k, a) in tags.iter().enumerate() {
        for b in &tags[k + 1..] {
            if a.agent_id != b.agent_id {
                edges.push(Edge::new(a.tag_id, b.tag_id, sigma));
            }
        }
    }
    MeasurementGraph::new(edges, tags)
}

/// Gradient-descent and barrier settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerParams {
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::activation_radius")]
    pub activation_radius: f64,
    #[serde(default = "defaults::safety_radius")]
    pub safety_radius: f64,
    #[serde(default = "defaults::max_iters")]
    pub max_iters: usize,
    #[serde(default = "defaults::grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "defaults::fd_step")]
    pub fd_step: f64,
}

mod defaults {
    pub fn gamma() -> f64 {
        0.1
    }
    pub fn activation_radius() -> f64 {
        2.0
    }
    pub fn safety_radius() -> f64 {
        1.0
    }
    pub fn max_iters() -> usize {
        5000
    }
    pub fn grad_tol() -> f64 {
        1e-4
    }
    pub fn fd_step() -> f64 {
        1e-5
    }
}

impl Default for OptimizerParams {
    fn default() -> Self {
        OptimizerParams {
            gamma: defaults::gamma(),
            activation_radius: defaults::activation_radius(),
            safety_radius: defaults::safety_radius(),
            max_iters: defaults::max_iters(),
            grad_tol: defaults::grad_tol(),
            fd_step: defaults::fd_step(),
        }
    }
}

impl OptimizerParams {
    fn validate(&self) -> Result<(), ScenarioError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("optimizer.{name}"), format!("must be finite and > 0, got {v}")))
            }
        };
        positive("gamma", self.gamma)?;
        positive("activation_radius", self.activation_radius)?;
        positive("safety_radius", self.safety_radius)?;
        positive("fd_step", self.fd_step)?;
        if !(self.grad_tol >= 0.0 && self.grad_tol.is_finite()) {
            return Err(invalid("optimizer.grad_tol", "must be finite and >= 0"));
        }
        if self.safety_radius >= self.activation_radius {
            return Err(invalid(
                "optimizer.safety_radius",
                format!(
                    "safety radius {} must be smaller than activation radius {}",
                    self.safety_radius, self.activation_radius
                ),
            ));
        }
        Ok(())
    }
}

/// A fully validated problem instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    mode: GroupMode,
    agent_count: usize,
    tags: Vec<TagLayout>,
    index: BTreeMap<TagId, usize>,
    graph: MeasurementGraph,
    optimizer: OptimizerParams,
    initial_state: StateTuple,
    seed: u64,
}

impl Scenario {
    pub fn new(
        mode: GroupMode,
        mut tags: Vec<TagLayout>,
        graph: MeasurementGraph,
        optimizer: OptimizerParams,
        initial_state: StateTuple,
        seed: u64,
    ) -> Result<Self, ScenarioError> {
        let n = mode.dim();
        tags.sort_by_key(|t| t.tag_id);
        let agent_count = initial_state.agent_count();
        if initial_state.mode() != mode {
            return Err(invalid("initial_state", format!("state mode {} does not match {mode}", initial_state.mode())));
        }
        let mut index = BTreeMap::new();
        for (k, t) in tags.iter().enumerate() {
            let field = format!("tags[{}]", t.tag_id);
            if index.insert(t.tag_id, k).is_some() {
                return Err(invalid(field, format!("duplicate tag id {}", t.tag_id)));
            }
            if t.agent_id < 1 || t.agent_id > agent_count {
                return Err(invalid(field, format!("agent id {} outside 1..={agent_count}", t.agent_id)));
            }
            if t.body_position.len() != n {
                return Err(invalid(
                    format!("{field}.body_position"),
                    format!("expected {n} coordinates, got {}", t.body_position.len()),
                ));
            }
            if t.body_position.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("{field}.body_position"), "non-finite coordinate"));
            }
        }
        for agent in 1..=agent_count {
            if !tags.iter().any(|t| t.agent_id == agent) {
                return Err(invalid(format!("agents[{agent}].tags"), "every agent needs at least one tag"));
            }
        }
        // re-validate graph against these tags
        let graph = MeasurementGraph::new(graph.edges, &tags)?;
        optimizer.validate()?;
        Ok(Scenario {
            mode,
            agent_count,
            tags,
            index,
            graph,
            optimizer,
            initial_state,
            seed,
        })
    }

    pub fn mode(&self) -> GroupMode {
        self.mode
    }

    /// N, including the reference agent.
    pub fn agent_count(&self) -> usize {
        self.agent_count
    }

    /// Tags sorted by id.
    pub fn tags(&self) -> &[TagLayout] {
        &self.tags
    }

    pub fn tag(&self, tag_id: TagId) -> Result<&TagLayout, ScenarioError> {
        self.index
            .get(&tag_id)
            .map(|&k| &self.tags[k])
            .ok_or(ScenarioError::UnknownTag(tag_id))
    }

    /// The lookup function ℓ: tag id → owning agent id.
    pub fn lookup(&self, tag_id: TagId) -> Result<AgentId, ScenarioError> {
        self.tag(tag_id).map(|t| t.agent_id)
    }

    pub fn graph(&self) -> &MeasurementGraph {
        &self.graph
    }

    pub fn optimizer(&self) -> &OptimizerParams {
        &self.optimizer
    }

    pub fn initial_state(&self) -> &StateTuple {
        &self.initial_state
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_graph(&self, graph: MeasurementGraph) -> Result<Scenario, ScenarioError> {
        let graph = MeasurementGraph::new(graph.edges, &self.tags)?;
        Ok(Scenario { graph, ..self.clone() })
    }

    pub fn with_initial_state(&self, state: StateTuple) -> Result<Scenario, ScenarioError> {
        Scenario::new(self.mode, self.tags.clone(), self.graph.clone(), self.optimizer, state, self.seed)
    }

    pub fn with_optimizer(&self, optimizer: OptimizerParams) -> Result<Scenario, ScenarioError> {
        optimizer.validate()?;
        Ok(Scenario { optimizer, ..self.clone() })
    }

    pub fn with_seed(&self, seed: u64) -> Scenario {
        Scenario { seed, ..self.clone() }
    }

    /// Multiplies every edge sigma by `factor`.
    pub fn with_scaled_sigma(&self, factor: f64) -> Result<Scenario, ScenarioError> {
        let edges = self
            .graph
            .edges
            .iter()
            .map(|e| Edge { sigma: e.sigma * factor, ..*e })
            .collect();
        self.with_graph(MeasurementGraph { edges })
    }

    pub fn to_document(&self) -> ScenarioDocument {
        let mut agents: Vec<AgentDocument> = (1..=self.agent_count)
            .map(|id| AgentDocument { id, tags: Vec::new() })
            .collect();
        for t in &self.tags {
            agents[t.agent_id - 1].tags.push(TagDocument {
                id: t.tag_id,
                body_position: t.body_position.iter().copied().collect(),
            });
        }
        ScenarioDocument {
            mode: self.mode,
            agents,
            graph: GraphDocument::Explicit {
                edges: self.graph.edges.clone(),
            },
            optimizer: self.optimizer,
            initial_state: state_to_document(&self.initial_state),
            seed: self.seed,
        }
    }

    pub fn from_document(doc: ScenarioDocument) -> Result<Scenario, ScenarioError> {
        let mode = doc.mode;
        let n_agents = doc.agents.len();
        let mut ids: Vec<_> = doc.agents.iter().map(|a| a.id).collect();
        ids.sort_unstable();
        if ids != (1..=n_agents).collect::<Vec<_>>() {
            return Err(invalid("agents", format!("agent ids must be exactly 1..={n_agents}, got {ids:?}")));
        }
        let mut tags = Vec::new();
        let mut seen = BTreeSet::new();
        for a in &doc.agents {
            for t in &a.tags {
                if !seen.insert(t.id) {
                    return Err(invalid(format!("agents[{}].tags", a.id), format!("duplicate tag id {}", t.id)));
                }
                tags.push(TagLayout {
                    tag_id: t.id,
                    agent_id: a.id,
                    body_position: DVector::from_vec(t.body_position.clone()),
                });
            }
        }
        let graph = match doc.graph {
            GraphDocument::Full { sigma } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(invalid("graph.sigma", format!("must be finite and > 0, got {sigma}")));
                }
                fully_connected_graph(&tags, sigma)?
            }
            GraphDocument::Explicit { edges } => MeasurementGraph::new(edges, &tags)?,
        };
        let state = state_from_document(mode, n_agents, &doc.initial_state)?;
        Scenario::new(mode, tags, graph, doc.optimizer, state, doc.seed)
    }

    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        Scenario::from_document(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("scenario serializes")
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_json(&text)
}

pub fn write_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    fs::write(path, scenario.to_json()).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub mode: GroupMode,
    pub agents: Vec<AgentDocument>,
    pub graph: GraphDocument,
    #[serde(default)]
    pub optimizer: OptimizerParams,
    pub initial_state: Vec<PoseDocument>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDocument {
    pub id: AgentId,
    pub tags: Vec<TagDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagDocument {
    pub id: TagId,
    pub body_position: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum GraphDocument {
    Full { sigma: f64 },
    Explicit { edges: Vec<Edge> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RotationDocument {
    Heading(f64),
    RowMajor(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

/// One relative pose `T_1α` in the scenario state schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDocument {
    pub agent: AgentId,
    pub rotation: RotationDocument,
    pub translation: Vec<f64>,
}

/// Serializes a state as the `initial_state` list, rotations as flat row-major matrices.
pub fn state_to_document(state: &StateTuple) -> Vec<PoseDocument> {
    state
        .poses()
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let r = p.rotation().matrix();
            let n = r.nrows();
            let row_major = (0..n).flat_map(|i| (0..n).map(move |j| r[(i, j)])).collect();
            PoseDocument {
                agent: k + 2,
                rotation: RotationDocument::RowMajor(row_major),
                translation: p.translation().iter().copied().collect(),
            }
        })
        .collect()
}

/// Parses a state in the `initial_state` schema for `agent_count` agents.
pub fn state_from_document(
    mode: GroupMode,
    agent_count: usize,
    docs: &[PoseDocument],
) -> Result<StateTuple, ScenarioError> {
    let n = mode.dim();
    let mut slots: Vec<Option<Pose>> = vec![None; agent_count.saturating_sub(1)];
    for (k, d) in docs.iter().enumerate() {
        let field = format!("initial_state[{k}]");
        if d.agent < 2 || d.agent > agent_count {
            return Err(invalid(
                format!("{field}.agent"),
                format!("agent {} is not in 2..={agent_count} (agent 1 is the reference)", d.agent),
            ));
        }
        if d.translation.len() != n || d.translation.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("{field}.translation"), format!("expected {n} finite coordinates")));
        }
        let matrix = match &d.rotation {
            RotationDocument::Heading(theta) => {
                if !mode.is_planar_rotation() {
                    return Err(invalid(format!("{field}.rotation"), "a heading angle needs a planar-rotation mode"));
                }
                Rotation::from_heading(n, *theta).matrix().clone()
            }
            RotationDocument::RowMajor(v) if v.len() == n * n => DMatrix::from_row_slice(n, n, v),
            RotationDocument::Rows(rows) if rows.len() == n && rows.iter().all(|r| r.len() == n) => {
                DMatrix::from_fn(n, n, |i, j| rows[i][j])
            }
            _ => return Err(invalid(format!("{field}.rotation"), format!("expected a heading or a {n}x{n} matrix"))),
        };
        let rotation = Rotation::from_matrix(matrix).map_err(|e| invalid(format!("{field}.rotation"), e.to_string()))?;
        let pose = Pose::new(rotation, DVector::from_vec(d.translation.clone()))
            .map_err(|e| invalid(field.clone(), e.to_string()))?;
        let slot = &mut slots[d.agent - 2];
        if slot.is_some() {
            return Err(invalid(format!("{field}.agent"), format!("agent {} listed twice", d.agent)));
        }
        *slot = Some(pose);
    }
    let poses = slots
        .into_iter()
        .enumerate()
        .map(|(k, p)| p.ok_or_else(|| invalid("initial_state", format!("missing pose for agent {}", k + 2))))
        .collect::<Result<Vec<_>, _>>()?;
    StateTuple::new(mode, poses).map_err(|e: ManifoldError| invalid("initial_state", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn two_tag_layout(agents: usize) -> Vec<TagLayout> {
        (1..=agents)
            .flat_map(|a| {
                [
                    TagLayout {
                        tag_id: (2 * a - 1) as TagId,
                        agent_id: a,
                        body_position: DVector::from_vec(vec![0.2, 0.2]),
                    },
                    TagLayout {
                        tag_id: (2 * a) as TagId,
                        agent_id: a,
                        body_position: DVector::from_vec(vec![0.2, -0.2]),
                    },
                ]
            })
            .collect()
    }

    #[test]
    fn lookup_examples() {
        let s = presets::preset("triangle3").unwrap();
        assert_eq!(s.lookup(1).unwrap(), 1);
        for a in 1..=3 {
            assert_eq!(s.lookup(2 * a as TagId).unwrap(), a);
        }
        assert!(matches!(s.lookup(99), Err(ScenarioError::UnknownTag(99))));
    }

    #[test]
    fn fully_connected_edge_counts() {
        // enumeration oracle: count cross-agent unordered pairs directly
        let count = |agents: usize| {
            let tags = two_tag_layout(agents);
            let mut c = 0;
            for i in 0..tags.len() {
                for j in 0..tags.len() {
                    if i < j && tags[i].agent_id != tags[j].agent_id {
                        c += 1;
                    }
                }
            }
            c
        };
        assert_eq!(count(3), 12);
        assert_eq!(fully_connected_graph(&two_tag_layout(3), 0.1).unwrap().len(), 12);
        assert_eq!(fully_connected_graph(&two_tag_layout(2), 0.1).unwrap().len(), 4);
        assert!(fully_connected_graph(&two_tag_layout(1), 0.1).is_err());
    }

    #[test]
    fn graph_is_sorted_and_canonical() {
        let tags = two_tag_layout(3);
        let g = MeasurementGraph::new(
            vec![Edge::new(6, 1, 0.1), Edge::new(3, 2, 0.2), Edge::new(1, 4, 0.1)],
            &tags,
        )
        .unwrap();
        let pairs: Vec<_> = g.edges().iter().map(|e| (e.tag_i, e.tag_j)).collect();
        assert_eq!(pairs, vec![(1, 4), (1, 6), (2, 3)]);
    }

    #[test]
    fn graph_rejects_bad_edges() {
        let tags = two_tag_layout(2);
        assert!(MeasurementGraph::new(vec![Edge::new(1, 2, 0.1)], &tags).is_err()); // same agent
        assert!(MeasurementGraph::new(vec![Edge::new(1, 1, 0.1)], &tags).is_err());
        assert!(MeasurementGraph::new(vec![Edge::new(1, 3, 0.0)], &tags).is_err());
        assert!(MeasurementGraph::new(vec![Edge::new(1, 3, 0.1), Edge::new(3, 1, 0.1)], &tags).is_err());
        assert!(MeasurementGraph::new(vec![Edge::new(1, 9, 0.1)], &tags).is_err());
    }

    fn base_json() -> serde_json::Value {
        serde_json::json!({
            "mode": "se2",
            "agents": [
                {"id": 1, "tags": [{"id": 1, "body_position": [0.2, 0.2]}, {"id": 2, "body_position": [0.2, -0.2]}]},
                {"id": 2, "tags": [{"id": 3, "body_position": [0.2, 0.2]}, {"id": 4, "body_position": [0.2, -0.2]}]}
            ],
            "graph": {"type": "full", "sigma": 0.1},
            "optimizer": {"gamma": 0.1, "activation_radius": 2.0, "safety_radius": 1.0,
                          "max_iters": 100, "grad_tol": 1e-4, "fd_step": 1e-5},
            "initial_state": [{"agent": 2, "rotation": 0.1, "translation": [1.5, 0.0]}],
            "seed": 3
        })
    }

    #[test]
    fn loads_default_layout() {
        let s = Scenario::from_json(&base_json().to_string()).unwrap();
        assert_eq!(s.tag(1).unwrap().body_position.as_slice(), &[0.2, 0.2]);
        assert_eq!(s.tag(4).unwrap().body_position.as_slice(), &[0.2, -0.2]);
        assert_eq!(s.graph().len(), 4);
        assert_eq!(s.seed(), 3);
    }

    #[test]
    fn rejects_invalid_files() {
        let mut j = base_json();
        j["graph"]["sigma"] = serde_json::json!(0.0);
        let e = Scenario::from_json(&j.to_string()).unwrap_err();
        assert!(e.to_string().contains("graph.sigma"), "{e}");

        let mut j = base_json();
        j["optimizer"]["safety_radius"] = serde_json::json!(2.0);
        let e = Scenario::from_json(&j.to_string()).unwrap_err();
        assert!(e.to_string().contains("optimizer.safety_radius"), "{e}");

        let mut j = base_json();
        j["agents"][1]["tags"][0]["id"] = serde_json::json!(1);
        let e = Scenario::from_json(&j.to_string()).unwrap_err();
        assert!(e.to_string().contains("duplicate tag"), "{e}");

        let mut j = base_json();
        j["graph"] = serde_json::json!({"type": "explicit", "edges": [{"tag_i": 1, "tag_j": 2, "sigma": 0.1}]});
        let e = Scenario::from_json(&j.to_string()).unwrap_err();
        assert!(e.to_string().contains("joins two tags on agent 1"), "{e}");

        let mut j = base_json();
        j["initial_state"][0]["rotation"] = serde_json::json!([1.0, 0.0, 0.0, 2.0]);
        assert!(Scenario::from_json(&j.to_string()).is_err());

        let mut j = base_json();
        j["initial_state"] = serde_json::json!([]);
        let e = Scenario::from_json(&j.to_string()).unwrap_err();
        assert!(e.to_string().contains("missing pose for agent 2"), "{e}");

        assert!(matches!(Scenario::from_json("{\"mode\": 3}"), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn nested_rotation_rows_accepted() {
        let mut j = base_json();
        j["initial_state"][0]["rotation"] = serde_json::json!([[0.0, -1.0], [1.0, 0.0]]);
        let s = Scenario::from_json(&j.to_string()).unwrap();
        assert!((s.initial_state().pose(2).heading() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn experiment_preset_tag_separation() {
        let s = presets::preset("experiment").unwrap();
        let a = &s.tag(1).unwrap().body_position;
        let b = &s.tag(2).unwrap().body_position;
        assert!(((a - b).norm() - 0.17).abs() < 1e-12);
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("formation-scenario-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        for name in presets::NAMES {
            let s = presets::preset(name).unwrap();
            let path = dir.join(format!("{name}.json"));
            write_scenario(&s, &path).unwrap();
            assert_eq!(load_scenario(&path).unwrap(), s, "{name}");
        }
        std::fs::remove_dir_all(dir).ok();
    }
}
