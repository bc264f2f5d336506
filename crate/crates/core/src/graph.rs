//! Heterogeneous driving-graph construction: lane splitting, per-node
//! reference poses, speed-scaled agent neighborhoods, and the typed
//! directed edge set.

use crate::geometry::{delta_pose, DeltaPose, Pose2};
use crate::scene::{AgentTrack, AgentType, MapKind, MapPolyline, Scene};
use serde_json::{json, Value};
use std::collections::{BTreeSet, HashMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeType {
    Agent,
    Lane,
    TrafficSign,
}

impl NodeType {
    pub fn name(&self) -> &'static str {
        match self {
            NodeType::Agent => "agent",
            NodeType::Lane => "lane",
            NodeType::TrafficSign => "trafficsign",
        }
    }
}

/// Directed edge types, in canonical order. The order fixes the
/// concatenation layout of typed aggregation, so it must not change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeType {
    AgentLane,
    AgentTrafficSign,
    LaneAgent,
    LaneNextLane,
    LanePreviousLane,
    LaneLeftLane,
    LaneRightLane,
    TrafficSignAgent,
    AgentAgent,
}

pub const EDGE_TYPES: [EdgeType; 9] = [
    EdgeType::AgentLane,
    EdgeType::AgentTrafficSign,
    EdgeType::LaneAgent,
    EdgeType::LaneNextLane,
    EdgeType::LanePreviousLane,
    EdgeType::LaneLeftLane,
    EdgeType::LaneRightLane,
    EdgeType::TrafficSignAgent,
    EdgeType::AgentAgent,
];

impl EdgeType {
    pub fn name(&self) -> &'static str {
        match self {
            EdgeType::AgentLane => "agent_lane",
            EdgeType::AgentTrafficSign => "agent_trafficsign",
            EdgeType::LaneAgent => "lane_agent",
            EdgeType::LaneNextLane => "lane_next",
            EdgeType::LanePreviousLane => "lane_prev",
            EdgeType::LaneLeftLane => "lane_left",
            EdgeType::LaneRightLane => "lane_right",
            EdgeType::TrafficSignAgent => "trafficsign_agent",
            EdgeType::AgentAgent => "agent_agent",
        }
    }

    pub fn index(&self) -> usize {
        EDGE_TYPES.iter().position(|e| e == self).unwrap()
    }

    /// Proximity edge type for an ordered (source, destination) node-type
    /// pair. Used by the agent-threshold rule and the fully-connected
    /// variant; lane connectivity relations carry their own types.
    pub fn for_pair(src: NodeType, dst: NodeType) -> EdgeType {
        use NodeType::*;
        match (src, dst) {
            (Agent, Agent) => EdgeType::AgentAgent,
            (Agent, Lane) => EdgeType::AgentLane,
            (Agent, TrafficSign) => EdgeType::AgentTrafficSign,
            (Lane, Agent) => EdgeType::LaneAgent,
            (TrafficSign, Agent) => EdgeType::TrafficSignAgent,
            // Pairs without a semantic relation in the type list reuse the
            // destination family so parameters stay well-defined in the
            // fully-connected variant.
            (Lane, Lane) => EdgeType::LaneNextLane,
            (TrafficSign, Lane) => EdgeType::AgentLane,
            (Lane, TrafficSign) => EdgeType::AgentTrafficSign,
            (TrafficSign, TrafficSign) => EdgeType::AgentTrafficSign,
        }
    }
}

/// Reference system used when normalizing inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
pub enum ReferenceMode {
    /// Every node in its own frame; edges carry frame-to-frame transforms.
    #[serde(rename = "pose_change")]
    #[default]
    PoseChange,
    /// A single shared frame taken from the first target agent.
    #[serde(rename = "fixed_reference")]
    FixedReference,
    /// Own frames for nodes; edge features re-encode source geometry in
    /// the destination frame.
    #[serde(rename = "relative_edge")]
    RelativeEdge,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// Lanes longer than this are split into equal-arc-length pieces.
    pub eps_lane: f64,
    pub vehicle_buffer: f64,
    pub pedestrian_buffer: f64,
    pub cyclist_buffer: f64,
    /// Connect every ordered node pair instead of the semantic rules.
    pub fully_connected: bool,
    /// Keep agent-to-agent proximity edges.
    pub include_agent_agent: bool,
    pub reference_mode: ReferenceMode,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            eps_lane: 20.0,
            vehicle_buffer: 30.0,
            pedestrian_buffer: 10.0,
            cyclist_buffer: 20.0,
            fully_connected: false,
            include_agent_agent: true,
            reference_mode: ReferenceMode::PoseChange,
        }
    }
}

impl GraphConfig {
    pub fn buffer(&self, t: AgentType) -> f64 {
        match t {
            AgentType::Vehicle => self.vehicle_buffer,
            AgentType::Pedestrian => self.pedestrian_buffer,
            AgentType::Cyclist => self.cyclist_buffer,
        }
    }
}

/// Distance threshold for an agent's neighborhood: speed at the final
/// observed step times the prediction horizon, plus a type buffer.
pub fn agent_threshold(agent: &AgentTrack, l_obs: usize, horizon_s: f64, cfg: &GraphConfig) -> f64 {
    let last = l_obs.min(agent.states.len()) - 1;
    agent.speed_at(last) * horizon_s + cfg.buffer(agent.agent_type)
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub node_type: NodeType,
    /// Index into `Scene::agents` for agents, into `HeteroGraph::map_elements`
    /// for map nodes.
    pub element: usize,
    pub ref_pose: Pose2,
    /// Distance anchor; equals the natural reference origin even when a
    /// shared reference frame overrides `ref_pose`.
    pub anchor: [f64; 2],
    pub id: String,
}

#[derive(Debug, Clone)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub edge_type: EdgeType,
    pub dpose: DeltaPose,
}

#[derive(Debug, Clone)]
pub struct HeteroGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    /// Map elements after lane splitting, owned by the graph.
    pub map_elements: Vec<MapPolyline>,
    /// For each node, in-edge indices grouped per edge type (canonical
    /// edge-type order, one slot per `EDGE_TYPES` entry).
    pub in_edges: Vec<[Vec<usize>; 9]>,
    pub n_agents: usize,
}

impl HeteroGraph {
    pub fn edge_id_set(&self) -> BTreeSet<(String, String, EdgeType)> {
        self.edges
            .iter()
            .map(|e| {
                (
                    self.nodes[e.src].id.clone(),
                    self.nodes[e.dst].id.clone(),
                    e.edge_type,
                )
            })
            .collect()
    }

    /// Debug dump for visualization scripts.
    pub fn to_debug_json(&self) -> Value {
        json!({
            "nodes": self.nodes.iter().map(|n| json!({
                "id": n.id,
                "type": n.node_type.name(),
                "ref_pose": [n.ref_pose.x, n.ref_pose.y, n.ref_pose.theta()],
            })).collect::<Vec<_>>(),
            "edges": self.edges.iter().map(|e| json!({
                "src": e.src,
                "dst": e.dst,
                "type": e.edge_type.name(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Split lanes whose arc length exceeds `eps_lane` into
/// ceil(length/eps_lane) equal-arc-length pieces, rewiring topology:
/// pieces chain entry -> exit, the original entry neighbors attach to the
/// first piece, exit neighbors to the last, left/right neighbors to every
/// piece. References from other elements are remapped accordingly.
pub fn split_long_lanes(map: &[MapPolyline], eps_lane: f64) -> Vec<MapPolyline> {
    assert!(eps_lane > 0.0, "eps_lane must be positive");
    // Piece ids per original lane id.
    let mut pieces_of: HashMap<&str, Vec<String>> = HashMap::new();
    for m in map {
        if m.kind != MapKind::Lane {
            continue;
        }
        let len = m.arc_length();
        // Snap near-integer ratios so piece counts are stable under the
        // floating-point noise of rigid scene motions.
        let ratio = len / eps_lane;
        let n = if (ratio - ratio.round()).abs() < 1e-9 {
            (ratio.round() as usize).max(1)
        } else {
            ratio.ceil().max(1.0) as usize
        };
        let ids = if n == 1 {
            vec![m.id.clone()]
        } else {
            (0..n).map(|i| format!("{}#{i}", m.id)).collect()
        };
        pieces_of.insert(m.id.as_str(), ids);
    }
    let first = |id: &str| -> String {
        pieces_of
            .get(id)
            .map(|v| v[0].clone())
            .unwrap_or_else(|| id.to_string())
    };
    let last = |id: &str| -> String {
        pieces_of
            .get(id)
            .map(|v| v[v.len() - 1].clone())
            .unwrap_or_else(|| id.to_string())
    };
    let all = |ids: &[String]| -> Vec<String> {
        ids.iter()
            .flat_map(|id| {
                pieces_of
                    .get(id.as_str())
                    .cloned()
                    .unwrap_or_else(|| vec![id.clone()])
            })
            .collect()
    };

    let mut out = Vec::new();
    for m in map {
        if m.kind != MapKind::Lane {
            let mut copy = m.clone();
            copy.controlled_lanes = all(&m.controlled_lanes);
            out.push(copy);
            continue;
        }
        let ids = &pieces_of[m.id.as_str()];
        let n = ids.len();
        if n == 1 {
            let mut copy = m.clone();
            copy.entry = m.entry.iter().map(|e| last(e)).collect();
            copy.exit = m.exit.iter().map(|e| first(e)).collect();
            copy.left = all(&m.left);
            copy.right = all(&m.right);
            out.push(copy);
            continue;
        }
        let chunks = split_polyline(&m.points, n);
        for (i, (id, points)) in ids.iter().zip(chunks).enumerate() {
            let entry = if i == 0 {
                m.entry.iter().map(|e| last(e)).collect()
            } else {
                vec![ids[i - 1].clone()]
            };
            let exit = if i + 1 == n {
                m.exit.iter().map(|e| first(e)).collect()
            } else {
                vec![ids[i + 1].clone()]
            };
            out.push(MapPolyline {
                id: id.clone(),
                kind: MapKind::Lane,
                subtype: m.subtype,
                points,
                left: all(&m.left),
                right: all(&m.right),
                entry,
                exit,
                controlled_lanes: vec![],
                light_states: vec![],
            });
        }
    }
    out
}

/// Cut a polyline into `n` pieces of equal arc length; piece boundaries
/// are interpolated so the union covers the original point set.
fn split_polyline(points: &[[f64; 2]], n: usize) -> Vec<Vec<[f64; 2]>> {
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        cum.push(cum.last().unwrap() + (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]));
    }
    let total = *cum.last().unwrap();
    let point_at = |s: f64| -> [f64; 2] {
        let mut seg = cum.iter().position(|&c| c >= s).unwrap_or(points.len() - 1);
        seg = seg.saturating_sub(1);
        let len = (cum[seg + 1] - cum[seg]).max(1e-12);
        let t = ((s - cum[seg]) / len).clamp(0.0, 1.0);
        let (a, b) = (points[seg], points[seg + 1]);
        [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
    };
    (0..n)
        .map(|i| {
            let s0 = total * i as f64 / n as f64;
            let s1 = total * (i + 1) as f64 / n as f64;
            let mut piece = vec![point_at(s0)];
            for (j, &c) in cum.iter().enumerate() {
                if c > s0 + 1e-12 && c < s1 - 1e-12 {
                    piece.push(points[j]);
                }
            }
            piece.push(point_at(s1));
            piece
        })
        .collect()
}

/// Reference pose of a map element: polylines use the arc-length midpoint
/// with the start-to-end direction; polygons use the vertex centroid with
/// the direction of the longest edge (ties broken by lowest vertex index).
pub fn map_reference_pose(m: &MapPolyline) -> Pose2 {
    if m.kind.is_polygon() {
        let ring = if m.points.len() >= 2
            && (m.points[0][0] - m.points[m.points.len() - 1][0]).abs() < 1e-12
            && (m.points[0][1] - m.points[m.points.len() - 1][1]).abs() < 1e-12
        {
            &m.points[..m.points.len() - 1]
        } else {
            &m.points[..]
        };
        let n = ring.len() as f64;
        let cx = ring.iter().map(|p| p[0]).sum::<f64>() / n;
        let cy = ring.iter().map(|p| p[1]).sum::<f64>() / n;
        let mut best = (0.0, 0.0f64);
        for i in 0..ring.len() {
            let a = ring[i];
            let b = ring[(i + 1) % ring.len()];
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            if len > best.1 + 1e-12 {
                best = ((b[1] - a[1]).atan2(b[0] - a[0]), len);
            }
        }
        Pose2::new(cx, cy, best.0)
    } else {
        let mut cum = vec![0.0];
        for w in m.points.windows(2) {
            cum.push(cum.last().unwrap() + (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]));
        }
        let total = *cum.last().unwrap();
        let mid = if total > 0.0 {
            let s = total / 2.0;
            let seg = cum.iter().position(|&c| c >= s).unwrap().saturating_sub(1);
            let len = (cum[seg + 1] - cum[seg]).max(1e-12);
            let t = (s - cum[seg]) / len;
            let (a, b) = (m.points[seg], m.points[seg + 1]);
            [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
        } else {
            m.points[0]
        };
        let first = m.points[0];
        let end = m.points[m.points.len() - 1];
        let theta = if total > 0.0 {
            (end[1] - first[1]).atan2(end[0] - first[0])
        } else {
            0.0
        };
        Pose2::new(mid[0], mid[1], theta)
    }
}

/// Reference pose of an agent: position and heading at the final
/// observed step.
pub fn agent_reference_pose(agent: &AgentTrack, l_obs: usize) -> Pose2 {
    let last = &agent.states[l_obs.min(agent.states.len()) - 1];
    Pose2::new(last.x, last.y, last.heading)
}

/// Uniform grid hash over node anchors for radius queries.
struct SpatialGrid {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl SpatialGrid {
    fn build(anchors: &[[f64; 2]], cell: f64) -> Self {
        let cell = cell.max(1e-6);
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, a) in anchors.iter().enumerate() {
            let key = ((a[0] / cell).floor() as i64, (a[1] / cell).floor() as i64);
            buckets.entry(key).or_default().push(i);
        }
        Self { cell, buckets }
    }

    /// Candidate indices within `radius` of `p` (superset; exact distance
    /// is checked by the caller). Sorted for deterministic edge order.
    fn query(&self, p: [f64; 2], radius: f64) -> Vec<usize> {
        let r = (radius / self.cell).ceil() as i64;
        let cx = (p[0] / self.cell).floor() as i64;
        let cy = (p[1] / self.cell).floor() as i64;
        let mut out = Vec::new();
        for ix in (cx - r)..=(cx + r) {
            for iy in (cy - r)..=(cy + r) {
                if let Some(b) = self.buckets.get(&(ix, iy)) {
                    out.extend_from_slice(b);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Build the heterogeneous graph for a preprocessed scene.
///
/// Nodes are ordered canonically: agents sorted by id, then map elements
/// (post-split) sorted by id. For each agent, every node within its
/// distance threshold gets a typed edge in both directions; lanes get
/// typed connectivity edges from their topology lists.
pub fn build_graph(scene: &Scene, cfg: &GraphConfig) -> HeteroGraph {
    let map_elements = split_long_lanes(&scene.map, cfg.eps_lane);

    let mut agent_order: Vec<usize> = (0..scene.agents.len()).collect();
    agent_order.sort_by(|&a, &b| scene.agents[a].id.cmp(&scene.agents[b].id));
    let mut map_order: Vec<usize> = (0..map_elements.len()).collect();
    map_order.sort_by(|&a, &b| map_elements[a].id.cmp(&map_elements[b].id));

    let mut nodes = Vec::new();
    for &ai in &agent_order {
        let a = &scene.agents[ai];
        let pose = agent_reference_pose(a, scene.l_obs);
        nodes.push(GraphNode {
            node_type: NodeType::Agent,
            element: ai,
            anchor: [pose.x, pose.y],
            ref_pose: pose,
            id: a.id.clone(),
        });
    }
    for &mi in &map_order {
        let m = &map_elements[mi];
        let pose = map_reference_pose(m);
        let node_type = if m.kind == MapKind::Lane {
            NodeType::Lane
        } else {
            NodeType::TrafficSign
        };
        nodes.push(GraphNode {
            node_type,
            element: mi,
            anchor: [pose.x, pose.y],
            ref_pose: pose,
            id: m.id.clone(),
        });
    }
    let n_agents = agent_order.len();

    // Shared reference frame for the fixed-reference variant.
    if cfg.reference_mode == ReferenceMode::FixedReference {
        let shared = nodes[..n_agents]
            .iter()
            .find(|n| scene.agents[n.element].is_target)
            .map(|n| n.ref_pose)
            .unwrap_or_else(Pose2::origin);
        for n in nodes.iter_mut() {
            n.ref_pose = shared;
        }
    }

    let mut edge_set: BTreeSet<(usize, usize, EdgeType)> = BTreeSet::new();

    if cfg.fully_connected {
        for i in 0..nodes.len() {
            for j in 0..nodes.len() {
                if i == j {
                    continue;
                }
                let et = EdgeType::for_pair(nodes[i].node_type, nodes[j].node_type);
                edge_set.insert((i, j, et));
            }
        }
    } else {
        let horizon = scene.horizon_s();
        let anchors: Vec<[f64; 2]> = nodes.iter().map(|n| n.anchor).collect();
        let thresholds: Vec<f64> = (0..n_agents)
            .map(|i| agent_threshold(&scene.agents[nodes[i].element], scene.l_obs, horizon, cfg))
            .collect();
        let max_eps = thresholds.iter().copied().fold(1.0f64, f64::max);
        let grid = SpatialGrid::build(&anchors, max_eps);
        for i in 0..n_agents {
            let eps = thresholds[i];
            for j in grid.query(anchors[i], eps) {
                if j == i {
                    continue;
                }
                let d = (anchors[i][0] - anchors[j][0]).hypot(anchors[i][1] - anchors[j][1]);
                if d < eps {
                    if nodes[j].node_type == NodeType::Agent && !cfg.include_agent_agent {
                        continue;
                    }
                    edge_set.insert((i, j, EdgeType::for_pair(NodeType::Agent, nodes[j].node_type)));
                    edge_set.insert((j, i, EdgeType::for_pair(nodes[j].node_type, NodeType::Agent)));
                }
            }
        }

        // Lane connectivity from topology lists; next/previous mirrored.
        let node_of_id: HashMap<&str, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        for (i, n) in nodes.iter().enumerate() {
            if n.node_type != NodeType::Lane {
                continue;
            }
            let m = &map_elements[n.element];
            for (list, fwd, back) in [
                (&m.exit, EdgeType::LaneNextLane, EdgeType::LanePreviousLane),
                (&m.entry, EdgeType::LanePreviousLane, EdgeType::LaneNextLane),
            ] {
                for id in list {
                    if let Some(&j) = node_of_id.get(id.as_str()) {
                        if j != i {
                            edge_set.insert((i, j, fwd));
                            edge_set.insert((j, i, back));
                        }
                    }
                }
            }
            for (list, et) in [
                (&m.left, EdgeType::LaneLeftLane),
                (&m.right, EdgeType::LaneRightLane),
            ] {
                for id in list {
                    if let Some(&j) = node_of_id.get(id.as_str()) {
                        if j != i {
                            edge_set.insert((i, j, et));
                        }
                    }
                }
            }
        }
    }

    let edges: Vec<GraphEdge> = edge_set
        .into_iter()
        .map(|(src, dst, edge_type)| GraphEdge {
            src,
            dst,
            edge_type,
            dpose: delta_pose(&nodes[src].ref_pose, &nodes[dst].ref_pose),
        })
        .collect();

    let mut in_edges: Vec<[Vec<usize>; 9]> = nodes.iter().map(|_| Default::default()).collect();
    for (k, e) in edges.iter().enumerate() {
        in_edges[e.dst][e.edge_type.index()].push(k);
    }

    HeteroGraph {
        nodes,
        edges,
        map_elements,
        in_edges,
        n_agents,
    }
}
