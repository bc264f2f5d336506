//! Node and edge feature initialization: frame-normalized agent history
//! through a residual 1D CNN, map geometry through a small PointNet, and
//! edge features through the type-specific view-shift MLP.

use crate::geometry::{local_heading, rotate_local_vector, to_local_point, Pose2};
use crate::scalar::Scalar;
use crate::scene::{AgentTrack, LightState, MapKind, MapPolyline};
use crate::tensor::nn::{insert_linear, insert_mlp, linear, mlp2, Bindings, LinearIds, MlpIds};
use crate::tensor::{ParamTable, Tape, TensorError, Tensor, Var};

/// Per-timestep agent channels in the local frame:
/// (x, y, vx, vy, sin h, cos h, valid, width, length).
pub const AGENT_CHANNELS: usize = 9;
/// Map point channels: local (x, y).
pub const POINT_CHANNELS: usize = 2;
pub const SUBTYPE_EMBED_DIM: usize = 16;
pub const LIGHT_EMBED_DIM: usize = 8;
/// Combined (kind, subtype) vocabulary: 7 kinds x 16 subtype slots.
pub const SUBTYPE_SLOTS: usize = 16;
pub const SUBTYPE_VOCAB: usize = 7 * SUBTYPE_SLOTS;
pub const LIGHT_VOCAB: usize = 4;

/// Express an agent's observed history in its reference frame. Returns
/// `l_obs` rows of [`AGENT_CHANNELS`] features.
pub fn normalize_agent_inputs(track: &AgentTrack, reference: &Pose2, l_obs: usize) -> Vec<Vec<f64>> {
    let n = l_obs.min(track.states.len());
    (0..n)
        .map(|t| {
            let s = &track.states[t];
            let p = to_local_point([s.x, s.y], reference);
            let v = rotate_local_vector([s.vx, s.vy], reference);
            let h = local_heading(s.heading, reference);
            vec![
                p[0],
                p[1],
                v[0],
                v[1],
                h.sin(),
                h.cos(),
                if s.valid { 1.0 } else { 0.0 },
                track.bbox[0],
                track.bbox[1],
            ]
        })
        .collect()
}

/// Map element points in the element's reference frame.
pub fn normalize_map_points(m: &MapPolyline, reference: &Pose2) -> Vec<Vec<f64>> {
    m.points
        .iter()
        .map(|&p| {
            let q = to_local_point(p, reference);
            vec![q[0], q[1]]
        })
        .collect()
}

/// Embedding index for a map element's (kind, subtype) pair.
pub fn subtype_code(kind: MapKind, subtype: u8) -> usize {
    kind.code() * SUBTYPE_SLOTS + (subtype as usize).min(SUBTYPE_SLOTS - 1)
}

/// Embedding index for the final observed traffic-light state
/// (0 = not a light).
pub fn light_code(m: &MapPolyline, l_obs: usize) -> usize {
    if m.kind != MapKind::TrafficLight || m.light_states.is_empty() {
        return 0;
    }
    let t = l_obs.min(m.light_states.len()) - 1;
    match m.light_states[t] {
        LightState::Green => 1,
        LightState::Yellow => 2,
        LightState::Red => 3,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvIds {
    pub w: crate::tensor::ParamId,
    pub b: crate::tensor::ParamId,
}

fn insert_conv<S: Scalar>(
    table: &mut ParamTable<S>,
    seed: u64,
    name: &str,
    k: usize,
    c_in: usize,
    c_out: usize,
) -> ConvIds {
    let ids = insert_linear(table, seed, name, k * c_in, c_out);
    ConvIds { w: ids.w, b: ids.b }
}

#[derive(Debug, Clone, Copy)]
pub struct ResBlockIds {
    pub c1: ConvIds,
    pub c2: ConvIds,
}

/// Residual 1D CNN over agent history: a stem, three stages of two
/// residual blocks with stride-2 downsampling between stages, then mean
/// pooling over the remaining steps.
#[derive(Debug, Clone)]
pub struct AgentEncoderIds {
    pub stem: ConvIds,
    pub stages: [[ResBlockIds; 2]; 3],
    pub downs: [ConvIds; 2],
    pub hidden: usize,
}

pub fn insert_agent_encoder<S: Scalar>(
    table: &mut ParamTable<S>,
    seed: u64,
    hidden: usize,
) -> AgentEncoderIds {
    assert!(hidden % 4 == 0, "hidden size must be divisible by 4");
    let (c1, c2, c3) = (hidden / 4, hidden / 2, hidden);
    let stem = insert_conv(table, seed, "enc.agent.stem", 3, AGENT_CHANNELS, c1);
    let mut block = |stage: usize, idx: usize, c: usize| ResBlockIds {
        c1: insert_conv(table, seed, &format!("enc.agent.s{stage}.b{idx}.c1"), 3, c, c),
        c2: insert_conv(table, seed, &format!("enc.agent.s{stage}.b{idx}.c2"), 3, c, c),
    };
    let stages = [
        [block(1, 1, c1), block(1, 2, c1)],
        [block(2, 1, c2), block(2, 2, c2)],
        [block(3, 1, c3), block(3, 2, c3)],
    ];
    let downs = [
        insert_conv(table, seed, "enc.agent.d1", 3, c1, c2),
        insert_conv(table, seed, "enc.agent.d2", 3, c2, c3),
    ];
    AgentEncoderIds {
        stem,
        stages,
        downs,
        hidden,
    }
}

fn conv<S: Scalar>(
    tape: &mut Tape<S>,
    binds: &Bindings,
    ids: ConvIds,
    x: Var,
    stride: usize,
) -> Result<Var, TensorError> {
    tape.conv1d(x, binds.var(ids.w), binds.var(ids.b), 3, stride, 1)
}

fn res_block<S: Scalar>(
    tape: &mut Tape<S>,
    binds: &Bindings,
    ids: ResBlockIds,
    x: Var,
) -> Result<Var, TensorError> {
    let y = conv(tape, binds, ids.c1, x, 1)?;
    let y = tape.relu(y);
    let y = conv(tape, binds, ids.c2, y, 1)?;
    let y = tape.add(x, y)?;
    Ok(tape.relu(y))
}

/// Encode a local-frame history (l_obs x AGENT_CHANNELS) into (1, h).
/// Shared parameters across all agents.
pub fn encode_agent_node<S: Scalar>(
    tape: &mut Tape<S>,
    binds: &Bindings,
    ids: &AgentEncoderIds,
    history: Var,
) -> Result<Var, TensorError> {
    let x = conv(tape, binds, ids.stem, history, 1)?;
    let mut x = tape.relu(x);
    for (stage, blocks) in ids.stages.iter().enumerate() {
        for &b in blocks {
            x = res_block(tape, binds, b, x)?;
        }
        if stage < 2 {
            let y = conv(tape, binds, ids.downs[stage], x, 2)?;
            x = tape.relu(y);
        }
    }
    tape.mean_pool_rows(x)
}

/// Simplified PointNet over map geometry plus subtype and light-state
/// embeddings, projected to the hidden size.
#[derive(Debug, Clone)]
pub struct MapEncoderIds {
    pub layers: Vec<LinearIds>,
    pub subtype_embed: crate::tensor::ParamId,
    pub light_embed: crate::tensor::ParamId,
    pub proj: LinearIds,
    pub hidden: usize,
}

pub fn insert_map_encoder<S: Scalar>(
    table: &mut ParamTable<S>,
    seed: u64,
    hidden: usize,
    n_layers: usize,
) -> MapEncoderIds {
    assert!(n_layers >= 1);
    let pc = hidden / 2;
    let mut layers = Vec::with_capacity(n_layers);
    let mut fan_in = POINT_CHANNELS;
    for i in 0..n_layers {
        layers.push(insert_linear(
            table,
            seed,
            &format!("enc.map.l{}", i + 1),
            fan_in,
            pc,
        ));
        fan_in = 2 * pc;
    }
    let subtype_name = "enc.map.subtype_embed";
    let mut rng = crate::tensor::nn::param_rng(seed, subtype_name);
    let subtype_embed = table.insert(
        subtype_name,
        Tensor::glorot_uniform(SUBTYPE_VOCAB, SUBTYPE_EMBED_DIM, &mut rng),
    );
    let light_name = "enc.map.light_embed";
    let mut rng = crate::tensor::nn::param_rng(seed, light_name);
    let light_embed = table.insert(
        light_name,
        Tensor::glorot_uniform(LIGHT_VOCAB, LIGHT_EMBED_DIM, &mut rng),
    );
    let proj = insert_linear(
        table,
        seed,
        "enc.map.proj",
        pc + SUBTYPE_EMBED_DIM + LIGHT_EMBED_DIM,
        hidden,
    );
    MapEncoderIds {
        layers,
        subtype_embed,
        light_embed,
        proj,
        hidden,
    }
}

/// Encode local-frame points (p x 2) with subtype/light codes into (1, h).
/// Permutation- and duplication-invariant over points by max pooling.
pub fn encode_map_node<S: Scalar>(
    tape: &mut Tape<S>,
    binds: &Bindings,
    ids: &MapEncoderIds,
    points: Var,
    subtype: usize,
    light: usize,
) -> Result<Var, TensorError> {
    let n_points = tape.value(points).rows();
    let mut x = points;
    let mut pooled = None;
    for (i, &l) in ids.layers.iter().enumerate() {
        let y = linear(tape, binds, x, l)?;
        let y = tape.relu(y);
        let p = tape.max_pool_rows(y)?;
        if i + 1 == ids.layers.len() {
            pooled = Some(p);
        } else {
            let tiled = tape.repeat_row(p, n_points)?;
            x = tape.concat_cols(&[y, tiled])?;
        }
    }
    let geometry = pooled.expect("at least one layer");
    let sub = tape.row_select(binds.var(ids.subtype_embed), subtype)?;
    let light = tape.row_select(binds.var(ids.light_embed), light)?;
    let cat = tape.concat_cols(&[geometry, sub, light])?;
    linear(tape, binds, cat, ids.proj)
}

/// Type-specific view-shift MLP turning a source node feature plus the
/// frame transform into an edge feature in the destination's frame.
#[derive(Debug, Clone, Copy)]
pub struct ViewShiftIds {
    pub mlp: MlpIds,
}

pub fn insert_view_shift<S: Scalar>(
    table: &mut ParamTable<S>,
    seed: u64,
    src_type_key: &str,
    hidden: usize,
) -> ViewShiftIds {
    ViewShiftIds {
        mlp: insert_mlp(
            table,
            seed,
            &format!("enc.viewshift.{src_type_key}"),
            hidden + 4,
            hidden,
            hidden,
        ),
    }
}

pub fn view_shift<S: Scalar>(
    tape: &mut Tape<S>,
    binds: &Bindings,
    ids: ViewShiftIds,
    u_feat: Var,
    dpose: Var,
) -> Result<Var, TensorError> {
    let cat = tape.concat_cols(&[u_feat, dpose])?;
    mlp2(tape, binds, cat, ids.mlp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::delta_pose;
    use crate::scene::{AgentState, AgentType};
    use crate::tensor::nn::Bindings;

    fn track_with(states: Vec<AgentState>) -> AgentTrack {
        AgentTrack {
            id: "a".into(),
            agent_type: AgentType::Vehicle,
            is_target: true,
            bbox: [2.0, 4.5, 1.5],
            states,
        }
    }

    fn state(x: f64, y: f64, vx: f64, vy: f64, heading: f64) -> AgentState {
        AgentState {
            x,
            y,
            vx,
            vy,
            heading,
            valid: true,
        }
    }

    #[test]
    fn final_step_maps_to_origin() {
        let track = track_with(vec![
            state(1.0, 2.0, 1.0, 0.5, 0.1),
            state(4.0, 6.0, 2.0, -0.5, 0.7),
        ]);
        let reference = Pose2::new(4.0, 6.0, 0.7);
        let rows = normalize_agent_inputs(&track, &reference, 2);
        let last = &rows[1];
        assert!(last[0].abs() < 1e-12 && last[1].abs() < 1e-12);
        assert!(last[4].abs() < 1e-12); // sin(0)
        assert!((last[5] - 1.0).abs() < 1e-12); // cos(0)
        assert_eq!(last[6], 1.0);
        assert_eq!((last[7], last[8]), (2.0, 4.5));
    }

    #[test]
    fn stationary_agent_has_zero_positions() {
        let track = track_with(vec![state(3.0, -2.0, 0.0, 0.0, 1.1); 4]);
        let reference = Pose2::new(3.0, -2.0, 1.1);
        for row in normalize_agent_inputs(&track, &reference, 4) {
            assert!(row[0].abs() < 1e-12 && row[1].abs() < 1e-12);
        }
    }

    /// Geometry oracle: local inputs round-trip through the inverse
    /// transform back to the raw track.
    #[test]
    fn normalized_inputs_round_trip() {
        use crate::geometry::from_local_point;
        let track = track_with(vec![
            state(1.0, 2.0, 1.0, 0.5, 0.1),
            state(4.0, 6.0, 2.0, -0.5, 0.7),
            state(8.0, 7.0, 2.5, 0.0, -0.4),
        ]);
        let reference = Pose2::new(8.0, 7.0, -0.4);
        let rows = normalize_agent_inputs(&track, &reference, 3);
        for (t, row) in rows.iter().enumerate() {
            let p = from_local_point([row[0], row[1]], &reference);
            assert!((p[0] - track.states[t].x).abs() < 1e-9);
            assert!((p[1] - track.states[t].y).abs() < 1e-9);
        }
    }

    fn encode_track(track: &AgentTrack, reference: &Pose2) -> Vec<f64> {
        let mut table = ParamTable::<f64>::new();
        let ids = insert_agent_encoder(&mut table, 7, 16);
        let mut tape = Tape::new();
        let binds = Bindings::bind_all(&mut tape, &table);
        let rows = normalize_agent_inputs(track, reference, track.states.len());
        let input = tape.constant(Tensor::matrix_from_f64(&rows));
        let out = encode_agent_node(&mut tape, &binds, &ids, input).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn agent_encoder_shape_contract() {
        for l in [1usize, 3, 11] {
            let track = track_with(vec![state(0.0, 0.0, 1.0, 0.0, 0.0); l]);
            let reference = Pose2::new(0.0, 0.0, 0.0);
            let out = encode_track(&track, &reference);
            assert_eq!(out.len(), 16);
        }
    }

    /// Identical local-frame motion at different global positions
    /// produces bit-identical features (dyadic coordinates keep the
    /// frame subtraction exact).
    #[test]
    fn encoder_is_global_position_independent() {
        let a = track_with(vec![
            state(0.0, 0.0, 2.0, 0.0, 0.0),
            state(0.25, 0.0, 2.0, 0.0, 0.0),
            state(0.5, 0.0, 2.0, 0.0, 0.0),
        ]);
        let b = track_with(vec![
            state(1024.0, 512.0, 2.0, 0.0, 0.0),
            state(1024.25, 512.0, 2.0, 0.0, 0.0),
            state(1024.5, 512.0, 2.0, 0.0, 0.0),
        ]);
        let fa = encode_track(&a, &Pose2::new(0.5, 0.0, 0.0));
        let fb = encode_track(&b, &Pose2::new(1024.5, 512.0, 0.0));
        assert_eq!(fa, fb);
    }

    fn encode_points(points: &[Vec<f64>], subtype: usize, light: usize) -> Vec<f64> {
        let mut table = ParamTable::<f64>::new();
        let ids = insert_map_encoder(&mut table, 7, 16, 3);
        let mut tape = Tape::new();
        let binds = Bindings::bind_all(&mut tape, &table);
        let input = tape.constant(Tensor::matrix_from_f64(points));
        let out = encode_map_node(&mut tape, &binds, &ids, input, subtype, light).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn pointnet_single_point_and_shape() {
        let out = encode_points(&[vec![1.0, 2.0]], 3, 0);
        assert_eq!(out.len(), 16);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pointnet_is_permutation_invariant() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![1.0, 0.5],
            vec![-1.0, 2.0],
            vec![3.0, -1.0],
        ];
        let mut shuffled = pts.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        let a = encode_points(&pts, 1, 0);
        let b = encode_points(&shuffled, 1, 0);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn pointnet_ignores_duplicated_points() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-1.0, 2.0]];
        let mut dup = pts.clone();
        dup.push(pts[1].clone());
        let a = encode_points(&pts, 1, 0);
        let b = encode_points(&dup, 1, 0);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn view_shift_is_deterministic_with_shape() {
        let mut table = ParamTable::<f64>::new();
        let ids = insert_view_shift(&mut table, 7, "agent", 16);
        let run = || {
            let mut tape = Tape::new();
            let binds = Bindings::bind_all(&mut tape, &table);
            let u = tape.constant(Tensor::row_from_f64(&(0..16).map(|i| i as f64 * 0.1).collect::<Vec<_>>()));
            let d = delta_pose(&Pose2::new(0.0, 0.0, 0.0), &Pose2::new(1.0, 2.0, 0.5));
            let dv = tape.constant(Tensor::row_from_f64(&d.as_array()));
            let out = view_shift(&mut tape, &binds, ids, u, dv).unwrap();
            tape.value(out).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
    }
}
