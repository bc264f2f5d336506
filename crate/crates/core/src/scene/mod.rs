//! Scene data model: agent tracks, map polylines with lane topology, and
//! the canonical JSON interchange format.

mod generate;
mod json;
mod preprocess;

pub use generate::{
    apply_rigid_motion, generate_synthetic, GeneratorConfig, GeneratorError, MapTemplate,
};
pub use json::{format_float, load_scene, save_scene, to_canonical_json, LoadedScene};
pub use preprocess::{preprocess, Preprocessed};

use thiserror::Error;

pub const AGENT_TYPES: [AgentType; 3] = [
    AgentType::Vehicle,
    AgentType::Pedestrian,
    AgentType::Cyclist,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum AgentType {
    #[serde(rename = "vehicle")]
    Vehicle,
    #[serde(rename = "pedestrian")]
    Pedestrian,
    #[serde(rename = "cyclist")]
    Cyclist,
}

impl AgentType {
    pub fn name(&self) -> &'static str {
        match self {
            AgentType::Vehicle => "vehicle",
            AgentType::Pedestrian => "pedestrian",
            AgentType::Cyclist => "cyclist",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "vehicle" => Some(AgentType::Vehicle),
            "pedestrian" => Some(AgentType::Pedestrian),
            "cyclist" => Some(AgentType::Cyclist),
            _ => None,
        }
    }
}

/// One timestep of an agent track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub heading: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub id: String,
    pub agent_type: AgentType,
    pub is_target: bool,
    /// (width, length, height) in meters.
    pub bbox: [f64; 3],
    /// `l_obs + t_future` entries for training scenes, `l_obs` for
    /// inference scenes.
    pub states: Vec<AgentState>,
}

impl AgentTrack {
    pub fn speed_at(&self, t: usize) -> f64 {
        let s = &self.states[t];
        s.vx.hypot(s.vy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MapKind {
    Lane,
    RoadLine,
    Crosswalk,
    StopSign,
    SpeedBump,
    Curb,
    TrafficLight,
}

pub const MAP_KINDS: [MapKind; 7] = [
    MapKind::Lane,
    MapKind::RoadLine,
    MapKind::Crosswalk,
    MapKind::StopSign,
    MapKind::SpeedBump,
    MapKind::Curb,
    MapKind::TrafficLight,
];

impl MapKind {
    pub fn name(&self) -> &'static str {
        match self {
            MapKind::Lane => "lane",
            MapKind::RoadLine => "road_line",
            MapKind::Crosswalk => "crosswalk",
            MapKind::StopSign => "stop_sign",
            MapKind::SpeedBump => "speed_bump",
            MapKind::Curb => "curb",
            MapKind::TrafficLight => "traffic_light",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        MAP_KINDS.iter().copied().find(|k| k.name() == s)
    }

    /// Polygon kinds are closed rings; everything else is an open polyline.
    pub fn is_polygon(&self) -> bool {
        matches!(self, MapKind::Crosswalk | MapKind::SpeedBump)
    }

    /// Index used when composing embedding codes.
    pub fn code(&self) -> usize {
        MAP_KINDS.iter().position(|k| k == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightState {
    Green,
    Yellow,
    Red,
}

impl LightState {
    pub fn code(&self) -> i64 {
        match self {
            LightState::Green => 0,
            LightState::Yellow => 1,
            LightState::Red => 2,
        }
    }

    pub fn from_code(c: i64) -> Option<Self> {
        match c {
            0 => Some(LightState::Green),
            1 => Some(LightState::Yellow),
            2 => Some(LightState::Red),
            _ => None,
        }
    }
}

/// A map element: polyline or polygon geometry plus semantic annotations.
/// Topology lists (`left`/`right`/`entry`/`exit`) are populated for lanes
/// only; `controlled_lanes` for signs and lights; `light_states` for
/// traffic lights.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPolyline {
    pub id: String,
    pub kind: MapKind,
    pub subtype: u8,
    pub points: Vec<[f64; 2]>,
    pub left: Vec<String>,
    pub right: Vec<String>,
    pub entry: Vec<String>,
    pub exit: Vec<String>,
    pub controlled_lanes: Vec<String>,
    pub light_states: Vec<LightState>,
}

impl MapPolyline {
    pub fn arc_length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub frequency_hz: f64,
    pub l_obs: usize,
    pub t_future: usize,
    pub agents: Vec<AgentTrack>,
    pub map: Vec<MapPolyline>,
}

impl Scene {
    /// Prediction horizon in seconds.
    pub fn horizon_s(&self) -> f64 {
        self.t_future as f64 / self.frequency_hz
    }

    /// Whether tracks carry future steps (training scene) or only the
    /// observed horizon (inference scene).
    pub fn has_future(&self) -> bool {
        self.agents
            .first()
            .map(|a| a.states.len() == self.l_obs + self.t_future)
            .unwrap_or(false)
    }

    pub fn target_indices(&self) -> Vec<usize> {
        self.agents
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_target)
            .map(|(i, _)| i)
            .collect()
    }

    /// Validate every structural invariant. `path`-style locations are
    /// embedded in the error messages.
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.frequency_hz.is_finite() && self.frequency_hz > 0.0) {
            return Err(SceneError::Invalid {
                path: "frequency_hz".into(),
                reason: "must be finite and positive".into(),
            });
        }
        let full = self.l_obs + self.t_future;
        let mut track_len: Option<usize> = None;
        let mut agent_ids = std::collections::HashSet::new();
        for (i, a) in self.agents.iter().enumerate() {
            let path = format!("agents[{i}]");
            if !agent_ids.insert(a.id.clone()) {
                return Err(SceneError::Invalid {
                    path,
                    reason: format!("duplicate agent id {:?}", a.id),
                });
            }
            if a.states.len() != full && a.states.len() != self.l_obs {
                return Err(SceneError::Invalid {
                    path: format!("{path}.states"),
                    reason: format!(
                        "expected {} (training) or {} (inference) states, got {}",
                        full,
                        self.l_obs,
                        a.states.len()
                    ),
                });
            }
            match track_len {
                None => track_len = Some(a.states.len()),
                Some(l) if l != a.states.len() => {
                    return Err(SceneError::Invalid {
                        path: format!("{path}.states"),
                        reason: format!(
                            "all agents must share the same timestep grid ({} vs {})",
                            l,
                            a.states.len()
                        ),
                    });
                }
                _ => {}
            }
            for (t, s) in a.states.iter().enumerate() {
                let finite = s.x.is_finite()
                    && s.y.is_finite()
                    && s.vx.is_finite()
                    && s.vy.is_finite()
                    && s.heading.is_finite();
                if !finite {
                    return Err(SceneError::Invalid {
                        path: format!("{path}.states[{t}]"),
                        reason: "non-finite value".into(),
                    });
                }
            }
        }
        if !self.agents.is_empty() && !self.agents.iter().any(|a| a.is_target) {
            return Err(SceneError::Invalid {
                path: "agents".into(),
                reason: "at least one agent must be a target".into(),
            });
        }
        let lane_ids: std::collections::HashSet<&str> = self
            .map
            .iter()
            .filter(|m| m.kind == MapKind::Lane)
            .map(|m| m.id.as_str())
            .collect();
        let mut map_ids = std::collections::HashSet::new();
        for (i, m) in self.map.iter().enumerate() {
            let path = format!("map[{i}]");
            if !map_ids.insert(m.id.clone()) {
                return Err(SceneError::Invalid {
                    path,
                    reason: format!("duplicate map id {:?}", m.id),
                });
            }
            if m.points.len() < 2 {
                return Err(SceneError::Invalid {
                    path: format!("{path}.points"),
                    reason: "needs at least 2 points".into(),
                });
            }
            for (j, p) in m.points.iter().enumerate() {
                if !(p[0].is_finite() && p[1].is_finite()) {
                    return Err(SceneError::Invalid {
                        path: format!("{path}.points[{j}]"),
                        reason: "non-finite coordinate".into(),
                    });
                }
            }
            if m.kind.is_polygon() {
                let a = m.points[0];
                let b = m.points[m.points.len() - 1];
                if (a[0] - b[0]).hypot(a[1] - b[1]) > 1e-9 {
                    return Err(SceneError::Invalid {
                        path: format!("{path}.points"),
                        reason: "polygon kinds must be closed rings".into(),
                    });
                }
            }
            for (field, list) in [
                ("left", &m.left),
                ("right", &m.right),
                ("entry", &m.entry),
                ("exit", &m.exit),
                ("controlled_lanes", &m.controlled_lanes),
            ] {
                for id in list {
                    if !lane_ids.contains(id.as_str()) {
                        return Err(SceneError::DanglingReference {
                            path: format!("{path}.{field}"),
                            id: id.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("{path}: reference to unknown lane id {id:?}")]
    DanglingReference { path: String, id: String },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}
