//! Deterministic synthetic driving scenes: lane layouts from a handful
//! of map templates, vehicles tracking lane centerlines, pedestrians on
//! crosswalks. Stands in for licensed datasets at desk scale.

use super::{
    AgentState, AgentTrack, AgentType, LightState, MapKind, MapPolyline, Scene,
};
use crate::geometry::wrap_angle;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MapTemplate {
    #[serde(rename = "straight")]
    Straight,
    #[serde(rename = "intersection")]
    Intersection,
    #[serde(rename = "roundabout")]
    Roundabout,
}

impl MapTemplate {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "straight" => Some(MapTemplate::Straight),
            "intersection" => Some(MapTemplate::Intersection),
            "roundabout" => Some(MapTemplate::Roundabout),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub template: MapTemplate,
    /// Parallel lane count (straight) or arc segment count (roundabout).
    pub lanes: usize,
    pub vehicles: usize,
    pub pedestrians: usize,
    pub cyclists: usize,
    /// How many vehicles (falling back to cyclists) are prediction targets.
    pub targets: usize,
    /// Lateral jitter amplitude in meters; 0 keeps agents on centerlines.
    pub noise: f64,
    pub frequency_hz: f64,
    pub l_obs: usize,
    pub t_future: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Place the whole scene at a random global rotation/translation.
    pub global_jitter: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            template: MapTemplate::Straight,
            lanes: 3,
            vehicles: 3,
            pedestrians: 1,
            cyclists: 1,
            targets: 2,
            noise: 0.05,
            frequency_hz: 10.0,
            l_obs: 11,
            t_future: 30,
            speed_min: 3.0,
            speed_max: 10.0,
            global_jitter: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("lane-following agents requested but the map template has no lanes")]
    NoLanes,
    #[error("config produces a scene with no agents")]
    NoAgents,
}

/// A polyline with cached cumulative arc lengths, walkable by arc position.
struct ArcPath {
    points: Vec<[f64; 2]>,
    cum: Vec<f64>,
}

impl ArcPath {
    fn new(points: Vec<[f64; 2]>) -> Self {
        let mut cum = Vec::with_capacity(points.len());
        let mut s = 0.0;
        cum.push(0.0);
        for w in points.windows(2) {
            s += (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            cum.push(s);
        }
        Self { points, cum }
    }

    fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    /// Point and unit tangent at arc position `s`; positions beyond the
    /// ends extrapolate along the end tangent.
    fn at(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        let n = self.points.len();
        if n == 1 {
            return (self.points[0], [1.0, 0.0]);
        }
        let seg = match self.cum.iter().position(|&c| c >= s) {
            Some(0) => 0,
            Some(i) => i - 1,
            None => n - 2,
        };
        let a = self.points[seg];
        let b = self.points[seg + 1];
        let len = (self.cum[seg + 1] - self.cum[seg]).max(1e-12);
        let dir = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        ([a[0] + dir[0] * (s - self.cum[seg]), a[1] + dir[1] * (s - self.cum[seg])], dir)
    }
}

pub fn generate_synthetic(seed: u64, cfg: &GeneratorConfig) -> Result<Scene, GeneratorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = cfg.l_obs + cfg.t_future;
    let dt = 1.0 / cfg.frequency_hz;

    if (cfg.vehicles + cfg.cyclists) > 0
        && cfg.lanes == 0
        && cfg.template != MapTemplate::Intersection
    {
        return Err(GeneratorError::NoLanes);
    }
    if cfg.vehicles + cfg.pedestrians + cfg.cyclists == 0 {
        return Err(GeneratorError::NoAgents);
    }

    let mut map = match cfg.template {
        MapTemplate::Straight => straight_map(cfg),
        MapTemplate::Intersection => intersection_map(),
        MapTemplate::Roundabout => roundabout_map(cfg),
    };

    // Seeded light phases for every traffic light.
    for m in map.iter_mut() {
        if m.kind == MapKind::TrafficLight {
            let phase: usize = rng.gen_range(0..3);
            m.light_states = (0..grid)
                .map(|t| match (t / 20 + phase) % 3 {
                    0 => LightState::Green,
                    1 => LightState::Yellow,
                    _ => LightState::Red,
                })
                .collect();
        }
    }

    let lanes: Vec<&MapPolyline> = map.iter().filter(|m| m.kind == MapKind::Lane).collect();
    let lane_index: HashMap<&str, &MapPolyline> =
        lanes.iter().map(|m| (m.id.as_str(), *m)).collect();
    let crosswalks: Vec<&MapPolyline> =
        map.iter().filter(|m| m.kind == MapKind::Crosswalk).collect();

    let mut agents = Vec::new();
    let mut next_id = 0usize;
    let fresh_id = |next: &mut usize| {
        let id = format!("a{:03}", *next);
        *next += 1;
        id
    };

    for _ in 0..cfg.vehicles {
        let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
        agents.push(lane_follower(
            fresh_id(&mut next_id),
            AgentType::Vehicle,
            [2.0, 4.6, 1.6],
            &lanes,
            &lane_index,
            speed,
            cfg,
            grid,
            dt,
            &mut rng,
        ));
    }
    for _ in 0..cfg.cyclists {
        let speed = rng.gen_range(2.0..=5.0);
        agents.push(lane_follower(
            fresh_id(&mut next_id),
            AgentType::Cyclist,
            [0.7, 1.8, 1.7],
            &lanes,
            &lane_index,
            speed,
            cfg,
            grid,
            dt,
            &mut rng,
        ));
    }
    for _ in 0..cfg.pedestrians {
        agents.push(pedestrian(
            fresh_id(&mut next_id),
            &crosswalks,
            cfg,
            grid,
            dt,
            &mut rng,
        ));
    }

    // Targets: vehicles first, then cyclists, at least one agent overall.
    let mut remaining = cfg.targets.max(1);
    for a in agents.iter_mut() {
        if remaining == 0 {
            break;
        }
        if a.agent_type == AgentType::Vehicle {
            a.is_target = true;
            remaining -= 1;
        }
    }
    if remaining > 0 {
        for a in agents.iter_mut() {
            if remaining == 0 {
                break;
            }
            if !a.is_target {
                a.is_target = true;
                remaining -= 1;
            }
        }
    }

    let mut scene = Scene {
        id: format!("synthetic-{seed:08x}"),
        frequency_hz: cfg.frequency_hz,
        l_obs: cfg.l_obs,
        t_future: cfg.t_future,
        agents,
        map,
    };

    if cfg.global_jitter {
        let alpha = rng.gen_range(0.0..TAU);
        let tx = rng.gen_range(-500.0..500.0);
        let ty = rng.gen_range(-500.0..500.0);
        apply_rigid_motion(&mut scene, alpha, tx, ty);
    }

    debug_assert!(scene.validate().is_ok());
    Ok(scene)
}

/// Rotate and translate every coordinate/heading in the scene. Public so
/// invariance tests can reuse the exact same motion on loaded scenes.
pub fn apply_rigid_motion(scene: &mut Scene, alpha: f64, tx: f64, ty: f64) {
    let (s, c) = alpha.sin_cos();
    let mov = |p: [f64; 2]| [c * p[0] - s * p[1] + tx, s * p[0] + c * p[1] + ty];
    let rot = |p: [f64; 2]| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
    for a in scene.agents.iter_mut() {
        for st in a.states.iter_mut() {
            let p = mov([st.x, st.y]);
            let v = rot([st.vx, st.vy]);
            st.x = p[0];
            st.y = p[1];
            st.vx = v[0];
            st.vy = v[1];
            st.heading = wrap_angle(st.heading + alpha);
        }
    }
    for m in scene.map.iter_mut() {
        for p in m.points.iter_mut() {
            *p = mov(*p);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn lane_follower(
    id: String,
    agent_type: AgentType,
    bbox: [f64; 3],
    lanes: &[&MapPolyline],
    lane_index: &HashMap<&str, &MapPolyline>,
    speed: f64,
    cfg: &GeneratorConfig,
    grid: usize,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> AgentTrack {
    let start = rng.gen_range(0..lanes.len());
    // Chain lanes by following exit links so the agent can traverse
    // several segments in the horizon.
    let mut points = lanes[start].points.clone();
    let mut current = lanes[start];
    let mut hops = 0;
    while hops < 16 {
        let Some(next_id) = current.exit.first() else { break };
        let Some(next) = lane_index.get(next_id.as_str()) else { break };
        if std::ptr::eq(*next, lanes[start]) {
            break; // closed loop
        }
        points.extend(next.points.iter().skip(1).copied());
        current = next;
        hops += 1;
    }
    let path = ArcPath::new(points);
    let s0 = rng.gen_range(0.05..0.4) * path.length();
    let phase = rng.gen_range(0.0..TAU);
    let omega = rng.gen_range(0.4..1.2);
    let amp = cfg.noise;

    let states = (0..grid)
        .map(|t| {
            let time = t as f64 * dt;
            let s = s0 + speed * time;
            let (p, tan) = path.at(s);
            let normal = [-tan[1], tan[0]];
            let lat = amp * (omega * time + phase).sin();
            let dlat = amp * omega * (omega * time + phase).cos();
            let x = p[0] + normal[0] * lat;
            let y = p[1] + normal[1] * lat;
            let vx = speed * tan[0] + dlat * normal[0];
            let vy = speed * tan[1] + dlat * normal[1];
            AgentState {
                x,
                y,
                vx,
                vy,
                heading: if vx.hypot(vy) > 1e-9 {
                    vy.atan2(vx)
                } else {
                    tan[1].atan2(tan[0])
                },
                valid: true,
            }
        })
        .collect();

    AgentTrack {
        id,
        agent_type,
        is_target: false,
        bbox,
        states,
    }
}

fn pedestrian(
    id: String,
    crosswalks: &[&MapPolyline],
    cfg: &GeneratorConfig,
    grid: usize,
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> AgentTrack {
    let speed = rng.gen_range(0.8..1.6);
    let states: Vec<AgentState> = if let Some(cw) = crosswalks.first() {
        let path = ArcPath::new(cw.points.clone());
        let perimeter = path.length();
        let s0 = rng.gen_range(0.0..perimeter);
        (0..grid)
            .map(|t| {
                let s = (s0 + speed * t as f64 * dt) % perimeter;
                let (p, tan) = path.at(s);
                AgentState {
                    x: p[0],
                    y: p[1],
                    vx: speed * tan[0],
                    vy: speed * tan[1],
                    heading: tan[1].atan2(tan[0]),
                    valid: true,
                }
            })
            .collect()
    } else {
        let x0 = rng.gen_range(-20.0..20.0);
        let y0 = rng.gen_range(-20.0..20.0);
        let dir = rng.gen_range(0.0..TAU);
        let (s, c) = dir.sin_cos();
        (0..grid)
            .map(|t| {
                let d = speed * t as f64 * dt;
                AgentState {
                    x: x0 + c * d,
                    y: y0 + s * d,
                    vx: speed * c,
                    vy: speed * s,
                    heading: dir,
                    valid: true,
                }
            })
            .collect()
    };
    let _ = cfg;
    AgentTrack {
        id,
        agent_type: AgentType::Pedestrian,
        is_target: false,
        bbox: [0.6, 0.6, 1.8],
        states,
    }
}

fn line(points: &[(f64, f64)]) -> Vec<[f64; 2]> {
    points.iter().map(|&(x, y)| [x, y]).collect()
}

/// Sample a straight segment every ~5 m, endpoints included.
fn segment(a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
    let n = (len / 5.0).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
        })
        .collect()
}

fn lane(id: &str, points: Vec<[f64; 2]>) -> MapPolyline {
    MapPolyline {
        id: id.to_string(),
        kind: MapKind::Lane,
        subtype: 0,
        points,
        left: vec![],
        right: vec![],
        entry: vec![],
        exit: vec![],
        controlled_lanes: vec![],
        light_states: vec![],
    }
}

fn element(id: &str, kind: MapKind, subtype: u8, points: Vec<[f64; 2]>) -> MapPolyline {
    MapPolyline {
        id: id.to_string(),
        kind,
        subtype,
        points,
        left: vec![],
        right: vec![],
        entry: vec![],
        exit: vec![],
        controlled_lanes: vec![],
        light_states: vec![],
    }
}

fn straight_map(cfg: &GeneratorConfig) -> Vec<MapPolyline> {
    let mut map = Vec::new();
    let n = cfg.lanes;
    for i in 0..n {
        let y = i as f64 * 3.5;
        let a_id = format!("lane{i:02}a");
        let b_id = format!("lane{i:02}b");
        let mut a = lane(&a_id, segment([-60.0, y], [0.0, y]));
        let mut b = lane(&b_id, segment([0.0, y], [60.0, y]));
        a.exit = vec![b_id.clone()];
        b.entry = vec![a_id.clone()];
        if i + 1 < n {
            a.left = vec![format!("lane{:02}a", i + 1)];
            b.left = vec![format!("lane{:02}b", i + 1)];
        }
        if i > 0 {
            a.right = vec![format!("lane{:02}a", i - 1)];
            b.right = vec![format!("lane{:02}b", i - 1)];
        }
        map.push(a);
        map.push(b);
    }
    let top = (n.max(1) - 1) as f64 * 3.5 + 2.0;
    map.push(element(
        "xwalk0",
        MapKind::Crosswalk,
        0,
        line(&[(-2.0, -2.0), (2.0, -2.0), (2.0, top), (-2.0, top), (-2.0, -2.0)]),
    ));
    map.push(element(
        "rline0",
        MapKind::RoadLine,
        1,
        segment([-60.0, -1.75], [60.0, -1.75]),
    ));
    map.push(element(
        "curb0",
        MapKind::Curb,
        0,
        segment([-60.0, top + 1.0], [60.0, top + 1.0]),
    ));
    let mut sign = element("stop0", MapKind::StopSign, 0, line(&[(10.0, -4.0), (10.0, -3.0)]));
    sign.controlled_lanes = (0..n).map(|i| format!("lane{i:02}b")).collect();
    map.push(sign);
    let mut light = element(
        "light0",
        MapKind::TrafficLight,
        0,
        line(&[(5.0, -5.0), (5.0, -4.0)]),
    );
    light.controlled_lanes = (0..n).map(|i| format!("lane{i:02}b")).collect();
    map.push(light);
    map
}

fn intersection_map() -> Vec<MapPolyline> {
    let mut map = Vec::new();
    // (approach start, box entry, box exit, exit end) per direction
    let legs: [([f64; 2], [f64; 2], [f64; 2], [f64; 2]); 4] = [
        ([-60.0, -1.75], [-8.0, -1.75], [8.0, -1.75], [60.0, -1.75]), // eastbound
        ([60.0, 1.75], [8.0, 1.75], [-8.0, 1.75], [-60.0, 1.75]),     // westbound
        ([1.75, -60.0], [1.75, -8.0], [1.75, 8.0], [1.75, 60.0]),     // northbound
        ([-1.75, 60.0], [-1.75, 8.0], [-1.75, -8.0], [-1.75, -60.0]), // southbound
    ];
    for (d, (start, box_in, box_out, end)) in legs.iter().enumerate() {
        let ap = format!("leg{d}ap");
        let cn = format!("leg{d}cn");
        let ex = format!("leg{d}ex");
        let mut a = lane(&ap, segment(*start, *box_in));
        let mut c = lane(&cn, segment(*box_in, *box_out));
        let mut e = lane(&ex, segment(*box_out, *end));
        a.exit = vec![cn.clone()];
        c.entry = vec![ap.clone()];
        c.exit = vec![ex.clone()];
        e.entry = vec![cn.clone()];
        map.push(a);
        map.push(c);
        map.push(e);
    }
    // Opposing straight lanes are left neighbors of each other.
    for (x, y) in [(0usize, 1usize), (2, 3)] {
        for suffix in ["ap", "cn", "ex"] {
            let xi = map.iter().position(|m| m.id == format!("leg{x}{suffix}")).unwrap();
            let yi = map.iter().position(|m| m.id == format!("leg{y}{suffix}")).unwrap();
            map[xi].left = vec![format!("leg{y}{suffix}")];
            map[yi].left = vec![format!("leg{x}{suffix}")];
        }
    }
    map.push(element(
        "xwalk0",
        MapKind::Crosswalk,
        0,
        line(&[(-10.0, -4.0), (-8.5, -4.0), (-8.5, 4.0), (-10.0, 4.0), (-10.0, -4.0)]),
    ));
    map.push(element(
        "xwalk1",
        MapKind::Crosswalk,
        0,
        line(&[(8.5, -4.0), (10.0, -4.0), (10.0, 4.0), (8.5, 4.0), (8.5, -4.0)]),
    ));
    map.push(element(
        "bump0",
        MapKind::SpeedBump,
        0,
        line(&[(-4.0, -12.0), (4.0, -12.0), (4.0, -11.0), (-4.0, -11.0), (-4.0, -12.0)]),
    ));
    let mut sign = element("stop0", MapKind::StopSign, 0, line(&[(-9.0, -5.0), (-9.0, -4.0)]));
    sign.controlled_lanes = vec!["leg0ap".into()];
    map.push(sign);
    let mut light = element(
        "light0",
        MapKind::TrafficLight,
        0,
        line(&[(9.0, 5.0), (9.0, 6.0)]),
    );
    light.controlled_lanes = vec!["leg1ap".into(), "leg3ap".into()];
    map.push(light);
    map
}

fn roundabout_map(cfg: &GeneratorConfig) -> Vec<MapPolyline> {
    let mut map = Vec::new();
    let n = cfg.lanes.max(2);
    let r = 20.0;
    for i in 0..n {
        let a0 = TAU * i as f64 / n as f64;
        let a1 = TAU * (i + 1) as f64 / n as f64;
        let steps = 8;
        let pts: Vec<[f64; 2]> = (0..=steps)
            .map(|k| {
                let a = a0 + (a1 - a0) * k as f64 / steps as f64;
                [r * a.cos(), r * a.sin()]
            })
            .collect();
        let mut l = lane(&format!("arc{i:02}"), pts);
        l.exit = vec![format!("arc{:02}", (i + 1) % n)];
        l.entry = vec![format!("arc{:02}", (i + n - 1) % n)];
        map.push(l);
    }
    map.push(element(
        "xwalk0",
        MapKind::Crosswalk,
        0,
        line(&[(23.0, -2.0), (26.0, -2.0), (26.0, 2.0), (23.0, 2.0), (23.0, -2.0)]),
    ));
    map.push(element(
        "curb0",
        MapKind::Curb,
        0,
        segment([-28.0, -28.0], [28.0, -28.0]),
    ));
    let mut sign = element("stop0", MapKind::StopSign, 0, line(&[(27.0, 5.0), (27.0, 6.0)]));
    sign.controlled_lanes = vec!["arc00".into()];
    map.push(sign);
    map
}
