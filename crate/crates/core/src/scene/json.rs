//! Canonical JSON interchange for scenes.
//!
//! Canonical form: object keys sorted, floats rendered in scientific
//! notation with 9 significant digits, integers rendered as integers.
//! `save_scene(load_scene(d))` is the identity on canonical documents.

use super::{
    AgentState, AgentTrack, AgentType, LightState, MapKind, MapPolyline, Scene, SceneError,
};
use serde_json::{Map, Number, Value};

/// A parsed scene plus non-fatal load diagnostics (e.g. defaulted
/// traffic-light states).
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub scene: Scene,
    pub diagnostics: Vec<String>,
}

pub fn load_scene(text: &str) -> Result<LoadedScene, SceneError> {
    let v: Value = serde_json::from_str(text)?;
    let mut diagnostics = Vec::new();
    let scene = parse_scene(&v, &mut diagnostics)?;
    scene.validate()?;
    Ok(LoadedScene { scene, diagnostics })
}

pub fn save_scene(scene: &Scene) -> String {
    let v = scene_to_value(scene);
    let mut out = String::new();
    write_canonical(&v, &mut out);
    out.push('\n');
    out
}

fn err(path: &str, reason: impl Into<String>) -> SceneError {
    SceneError::Invalid {
        path: path.to_string(),
        reason: reason.into(),
    }
}

fn get<'a>(v: &'a Value, path: &str, key: &str) -> Result<&'a Value, SceneError> {
    v.get(key)
        .ok_or_else(|| err(&format!("{path}.{key}"), "missing field"))
}

fn as_str(v: &Value, path: &str) -> Result<String, SceneError> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| err(path, "expected string"))
}

fn as_f64(v: &Value, path: &str) -> Result<f64, SceneError> {
    let x = v.as_f64().ok_or_else(|| err(path, "expected number"))?;
    if !x.is_finite() {
        return Err(err(path, "non-finite number"));
    }
    Ok(x)
}

fn as_usize(v: &Value, path: &str) -> Result<usize, SceneError> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| err(path, "expected non-negative integer"))
}

fn as_bool(v: &Value, path: &str) -> Result<bool, SceneError> {
    v.as_bool().ok_or_else(|| err(path, "expected boolean"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>, SceneError> {
    v.as_array().ok_or_else(|| err(path, "expected array"))
}

fn id_list(v: &Value, path: &str) -> Result<Vec<String>, SceneError> {
    as_array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, x)| as_str(x, &format!("{path}[{i}]")))
        .collect()
}

fn parse_scene(v: &Value, diagnostics: &mut Vec<String>) -> Result<Scene, SceneError> {
    if !v.is_object() {
        return Err(err("$", "expected top-level object"));
    }
    let id = as_str(get(v, "$", "id")?, "$.id")?;
    let frequency_hz = as_f64(get(v, "$", "frequency_hz")?, "$.frequency_hz")?;
    let l_obs = as_usize(get(v, "$", "l_obs")?, "$.l_obs")?;
    let t_future = as_usize(get(v, "$", "t_future")?, "$.t_future")?;
    let grid = l_obs + t_future;

    let mut agents = Vec::new();
    for (i, a) in as_array(get(v, "$", "agents")?, "$.agents")?.iter().enumerate() {
        let path = format!("agents[{i}]");
        let aid = as_str(get(a, &path, "id")?, &format!("{path}.id"))?;
        let tname = as_str(get(a, &path, "type")?, &format!("{path}.type"))?;
        let agent_type = AgentType::from_name(&tname)
            .ok_or_else(|| err(&format!("{path}.type"), format!("unknown type {tname:?}")))?;
        let is_target = as_bool(get(a, &path, "is_target")?, &format!("{path}.is_target"))?;
        let bbox_v = as_array(get(a, &path, "bbox")?, &format!("{path}.bbox"))?;
        if bbox_v.len() != 3 {
            return Err(err(&format!("{path}.bbox"), "expected [w, l, h]"));
        }
        let mut bbox = [0.0; 3];
        for (j, b) in bbox_v.iter().enumerate() {
            bbox[j] = as_f64(b, &format!("{path}.bbox[{j}]"))?;
        }
        let mut states = Vec::new();
        for (t, s) in as_array(get(a, &path, "states")?, &format!("{path}.states"))?
            .iter()
            .enumerate()
        {
            let spath = format!("{path}.states[{t}]");
            let row = as_array(s, &spath)?;
            if row.len() != 6 {
                return Err(err(&spath, "expected [x, y, vx, vy, heading, valid]"));
            }
            let f = |j: usize| as_f64(&row[j], &format!("{spath}[{j}]"));
            states.push(AgentState {
                x: f(0)?,
                y: f(1)?,
                vx: f(2)?,
                vy: f(3)?,
                heading: f(4)?,
                valid: f(5)? != 0.0,
            });
        }
        agents.push(AgentTrack {
            id: aid,
            agent_type,
            is_target,
            bbox,
            states,
        });
    }

    let mut map = Vec::new();
    for (i, m) in as_array(get(v, "$", "map")?, "$.map")?.iter().enumerate() {
        let path = format!("map[{i}]");
        let mid = as_str(get(m, &path, "id")?, &format!("{path}.id"))?;
        let kname = as_str(get(m, &path, "kind")?, &format!("{path}.kind"))?;
        let kind = MapKind::from_name(&kname)
            .ok_or_else(|| err(&format!("{path}.kind"), format!("unknown kind {kname:?}")))?;
        let subtype = as_usize(get(m, &path, "subtype")?, &format!("{path}.subtype"))?;
        if subtype > u8::MAX as usize {
            return Err(err(&format!("{path}.subtype"), "subtype out of range"));
        }
        let mut points = Vec::new();
        for (j, p) in as_array(get(m, &path, "points")?, &format!("{path}.points"))?
            .iter()
            .enumerate()
        {
            let ppath = format!("{path}.points[{j}]");
            let pair = as_array(p, &ppath)?;
            if pair.len() != 2 {
                return Err(err(&ppath, "expected [x, y]"));
            }
            points.push([
                as_f64(&pair[0], &format!("{ppath}[0]"))?,
                as_f64(&pair[1], &format!("{ppath}[1]"))?,
            ]);
        }
        let opt_ids = |key: &str| -> Result<Vec<String>, SceneError> {
            match m.get(key) {
                Some(x) => id_list(x, &format!("{path}.{key}")),
                None => Ok(Vec::new()),
            }
        };
        let mut light_states = Vec::new();
        if let Some(ls) = m.get("light_states") {
            for (j, s) in as_array(ls, &format!("{path}.light_states"))?.iter().enumerate() {
                let spath = format!("{path}.light_states[{j}]");
                let code = s.as_i64().ok_or_else(|| err(&spath, "expected integer"))?;
                light_states.push(
                    LightState::from_code(code)
                        .ok_or_else(|| err(&spath, format!("unknown light state {code}")))?,
                );
            }
        }
        if kind == MapKind::TrafficLight && light_states.len() < grid {
            diagnostics.push(format!(
                "{path}: traffic light has {} of {} light states; missing steps default to green",
                light_states.len(),
                grid
            ));
            while light_states.len() < grid {
                light_states.push(LightState::Green);
            }
        }
        map.push(MapPolyline {
            id: mid,
            kind,
            subtype: subtype as u8,
            points,
            left: opt_ids("left")?,
            right: opt_ids("right")?,
            entry: opt_ids("entry")?,
            exit: opt_ids("exit")?,
            controlled_lanes: opt_ids("controlled_lanes")?,
            light_states,
        });
    }

    Ok(Scene {
        id,
        frequency_hz,
        l_obs,
        t_future,
        agents,
        map,
    })
}

fn float(v: f64) -> Value {
    Value::Number(Number::from_f64(v).expect("finite float"))
}

fn scene_to_value(scene: &Scene) -> Value {
    let mut root = Map::new();
    root.insert("id".into(), Value::String(scene.id.clone()));
    root.insert("frequency_hz".into(), float(scene.frequency_hz));
    root.insert("l_obs".into(), Value::from(scene.l_obs as i64));
    root.insert("t_future".into(), Value::from(scene.t_future as i64));
    root.insert(
        "agents".into(),
        Value::Array(scene.agents.iter().map(agent_to_value).collect()),
    );
    root.insert(
        "map".into(),
        Value::Array(scene.map.iter().map(map_to_value).collect()),
    );
    Value::Object(root)
}

fn agent_to_value(a: &AgentTrack) -> Value {
    let mut o = Map::new();
    o.insert("id".into(), Value::String(a.id.clone()));
    o.insert("type".into(), Value::String(a.agent_type.name().into()));
    o.insert("is_target".into(), Value::Bool(a.is_target));
    o.insert(
        "bbox".into(),
        Value::Array(a.bbox.iter().map(|&b| float(b)).collect()),
    );
    o.insert(
        "states".into(),
        Value::Array(
            a.states
                .iter()
                .map(|s| {
                    Value::Array(vec![
                        float(s.x),
                        float(s.y),
                        float(s.vx),
                        float(s.vy),
                        float(s.heading),
                        Value::from(if s.valid { 1i64 } else { 0i64 }),
                    ])
                })
                .collect(),
        ),
    );
    Value::Object(o)
}

fn map_to_value(m: &MapPolyline) -> Value {
    let mut o = Map::new();
    o.insert("id".into(), Value::String(m.id.clone()));
    o.insert("kind".into(), Value::String(m.kind.name().into()));
    o.insert("subtype".into(), Value::from(m.subtype as i64));
    o.insert(
        "points".into(),
        Value::Array(
            m.points
                .iter()
                .map(|p| Value::Array(vec![float(p[0]), float(p[1])]))
                .collect(),
        ),
    );
    let ids = |list: &[String]| Value::Array(list.iter().cloned().map(Value::String).collect());
    if !m.left.is_empty() {
        o.insert("left".into(), ids(&m.left));
    }
    if !m.right.is_empty() {
        o.insert("right".into(), ids(&m.right));
    }
    if !m.entry.is_empty() {
        o.insert("entry".into(), ids(&m.entry));
    }
    if !m.exit.is_empty() {
        o.insert("exit".into(), ids(&m.exit));
    }
    if !m.controlled_lanes.is_empty() {
        o.insert("controlled_lanes".into(), ids(&m.controlled_lanes));
    }
    if !m.light_states.is_empty() {
        o.insert(
            "light_states".into(),
            Value::Array(m.light_states.iter().map(|s| Value::from(s.code())).collect()),
        );
    }
    Value::Object(o)
}

/// Render a float with 9 significant digits, normalizing negative zero.
pub fn format_float(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{:.8e}", x)
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                out.push_str(&format_float(n.as_f64().unwrap()));
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).unwrap());
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).unwrap());
                out.push(':');
                write_canonical(&map[*k], out);
            }
            out.push('}');
        }
    }
}

/// Canonical writer for arbitrary JSON values (shared by other artifact
/// writers so every output is deterministic).
pub fn to_canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_doc() -> String {
        r#"{
            "id": "s0", "frequency_hz": 10.0, "l_obs": 2, "t_future": 1,
            "agents": [
              {"id": "a0", "type": "vehicle", "is_target": true,
               "bbox": [2.0, 4.5, 1.6],
               "states": [[0,0,1,0,0,1],[0.1,0,1,0,0,1],[0.2,0,1,0,0,1]]}
            ],
            "map": [
              {"id": "m0", "kind": "lane", "subtype": 0,
               "points": [[0,0],[10,0]]}
            ]
        }"#
        .to_string()
    }

    #[test]
    fn minimal_document_round_trips() {
        let loaded = load_scene(&minimal_doc()).unwrap();
        assert_eq!(loaded.scene.agents.len(), 1);
        assert_eq!(loaded.scene.map.len(), 1);
        let canon = save_scene(&loaded.scene);
        let again = load_scene(&canon).unwrap();
        assert_eq!(save_scene(&again.scene), canon);
    }

    #[test]
    fn dangling_lane_reference_is_an_error() {
        let doc = minimal_doc().replace(
            r#""points": [[0,0],[10,0]]"#,
            r#""points": [[0,0],[10,0]], "exit": ["nope"]"#,
        );
        let e = load_scene(&doc).unwrap_err();
        match e {
            SceneError::DanglingReference { path, id } => {
                assert!(path.contains("exit"), "{path}");
                assert_eq!(id, "nope");
            }
            other => panic!("expected dangling reference, got {other}"),
        }
    }

    #[test]
    fn missing_field_reports_path() {
        let doc = minimal_doc().replace(r#""is_target": true,"#, "");
        let e = load_scene(&doc).unwrap_err().to_string();
        assert!(e.contains("agents[0].is_target"), "{e}");
    }

    #[test]
    fn inconsistent_track_lengths_rejected() {
        let doc = r#"{
            "id": "s0", "frequency_hz": 10.0, "l_obs": 2, "t_future": 1,
            "agents": [
              {"id": "a0", "type": "vehicle", "is_target": true,
               "bbox": [2.0, 4.5, 1.6],
               "states": [[0,0,1,0,0,1],[0.1,0,1,0,0,1],[0.2,0,1,0,0,1]]},
              {"id": "a1", "type": "pedestrian", "is_target": false,
               "bbox": [0.5, 0.5, 1.8],
               "states": [[0,0,0,0,0,1],[0,0,0,0,0,1]]}
            ],
            "map": []
        }"#;
        let e = load_scene(doc).unwrap_err().to_string();
        assert!(e.contains("timestep grid"), "{e}");
    }

    #[test]
    fn missing_light_states_default_green_with_diagnostic() {
        let doc = minimal_doc().replace(
            r#"{"id": "m0", "kind": "lane", "subtype": 0,
               "points": [[0,0],[10,0]]}"#,
            r#"{"id": "m0", "kind": "lane", "subtype": 0,
               "points": [[0,0],[10,0]]},
              {"id": "m1", "kind": "traffic_light", "subtype": 0,
               "points": [[5,-2],[5,-1]], "controlled_lanes": ["m0"]}"#,
        );
        let loaded = load_scene(&doc).unwrap();
        assert_eq!(loaded.diagnostics.len(), 1);
        let light = &loaded.scene.map[1];
        assert_eq!(light.light_states.len(), 3);
        assert!(light.light_states.iter().all(|s| *s == LightState::Green));
    }

    #[test]
    fn float_format_is_nine_significant_digits() {
        assert_eq!(format_float(10.5), "1.05000000e1");
        assert_eq!(format_float(0.0), "0.00000000e0");
        assert_eq!(format_float(-0.0), "0.00000000e0");
        assert_eq!(format_float(-3.0), "-3.00000000e0");
        let x: f64 = format_float(1.0 / 3.0).parse().unwrap();
        assert!((x - 1.0 / 3.0).abs() < 1e-9);
    }
}
