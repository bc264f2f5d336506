//! End-to-end numerical verification helpers shared by the CLI
//! `gradcheck` command and the acceptance suite.

use crate::decoder::mtp_loss;
use crate::graph::HeteroGraph;
use crate::model::{Model, ModelConfig};
use crate::scene::Preprocessed;
use crate::tensor::gradcheck::{grad_check, CoordSelection};
use crate::tensor::GradTable;

/// Scalar loss of the full pipeline for a fixed (preprocessed) scene,
/// evaluated at the given parameters.
fn loss_with_params(
    model: &Model<f64>,
    params: &crate::tensor::ParamTable<f64>,
    pre: &Preprocessed,
    graph: &HeteroGraph,
    targets: &[usize],
) -> f64 {
    let mut probe = Model::new(model.cfg.clone(), model.init_seed).expect("same config");
    probe.params = params.clone();
    let mut out = probe.forward(&pre.scene, graph).expect("forward");
    let loss = mtp_loss(&probe, &mut out, pre, graph, targets).expect("loss");
    out.tape.value(loss.total).scalar_value()
}

/// Compare the full model's analytic gradients against central finite
/// differences on sampled coordinates; returns the max relative error.
pub fn model_grad_check(
    cfg: ModelConfig,
    scene: &crate::scene::Scene,
    seed: u64,
    eps: f64,
    coords_per_tensor: usize,
) -> f64 {
    let model = Model::<f64>::new(cfg, seed).expect("config");
    let pre = crate::scene::preprocess(scene);
    let graph = model.build_graph_for(&pre.scene);
    let targets: Vec<usize> = (0..graph.n_agents)
        .filter(|&i| pre.scene.agents[graph.nodes[i].element].is_target)
        .collect();
    assert!(!targets.is_empty(), "scene needs target agents");

    let mut out = model.forward(&pre.scene, &graph).expect("forward");
    let loss = mtp_loss(&model, &mut out, &pre, &graph, &targets).expect("loss");
    out.tape.backward(loss.total).expect("backward");
    let mut analytic = GradTable::zeros_like(&model.params);
    out.tape.grads_into(&mut analytic);

    grad_check(
        |params| loss_with_params(&model, params, &pre, &graph, &targets),
        &model.params,
        &analytic,
        eps,
        CoordSelection::Sample {
            per_tensor: coords_per_tensor,
            seed,
        },
    )
}

/// Deterministic compact scene for gradient checking: 8 nodes (3 agents,
/// 3 lanes, 2 signs) inside every agent's threshold so no node is
/// isolated (an isolated node's zero placeholder would park a ReLU
/// exactly on its kink, where finite differences see the two-sided
/// average slope instead of the subgradient).
pub fn gradcheck_scene(t_future: usize) -> crate::scene::Scene {
    use crate::scene::{AgentState, AgentTrack, AgentType, MapKind, MapPolyline, Scene};
    let l_obs = 11usize;
    let grid = l_obs + t_future;
    let dt = 0.1;
    let track = |id: &str,
                 t: AgentType,
                 x0: f64,
                 y0: f64,
                 vx: f64,
                 vy: f64,
                 target: bool|
     -> AgentTrack {
        let heading = vy.atan2(vx);
        AgentTrack {
            id: id.into(),
            agent_type: t,
            is_target: target,
            bbox: match t {
                AgentType::Vehicle => [2.0, 4.5, 1.6],
                AgentType::Pedestrian => [0.6, 0.6, 1.8],
                AgentType::Cyclist => [0.7, 1.8, 1.7],
            },
            states: (0..grid)
                .map(|i| {
                    let time = i as f64 * dt;
                    AgentState {
                        x: x0 + vx * time,
                        y: y0 + vy * time,
                        vx,
                        vy,
                        heading,
                        valid: true,
                    }
                })
                .collect(),
        }
    };
    let lane = |id: &str, a: [f64; 2], b: [f64; 2]| MapPolyline {
        id: id.into(),
        kind: MapKind::Lane,
        subtype: 0,
        points: vec![a, [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0], b],
        left: vec![],
        right: vec![],
        entry: vec![],
        exit: vec![],
        controlled_lanes: vec![],
        light_states: vec![],
    };
    let mut l0 = lane("l0", [-6.0, 0.0], [0.0, 0.0]);
    let mut l1 = lane("l1", [0.0, 0.0], [6.0, 0.0]);
    let mut l2 = lane("l2", [-6.0, 3.5], [0.0, 3.5]);
    l0.exit = vec!["l1".into()];
    l1.entry = vec!["l0".into()];
    l0.left = vec!["l2".into()];
    l2.right = vec!["l0".into()];
    let stop = MapPolyline {
        id: "stop".into(),
        kind: MapKind::StopSign,
        subtype: 0,
        points: vec![[2.0, -2.0], [2.0, -1.0]],
        left: vec![],
        right: vec![],
        entry: vec![],
        exit: vec![],
        controlled_lanes: vec!["l1".into()],
        light_states: vec![],
    };
    let light = MapPolyline {
        id: "light".into(),
        kind: MapKind::TrafficLight,
        subtype: 0,
        points: vec![[-2.0, -2.0], [-2.0, -1.0]],
        left: vec![],
        right: vec![],
        entry: vec![],
        exit: vec![],
        controlled_lanes: vec!["l0".into()],
        light_states: (0..grid)
            .map(|i| {
                if i % 3 == 0 {
                    crate::scene::LightState::Green
                } else {
                    crate::scene::LightState::Red
                }
            })
            .collect(),
    };
    let scene = Scene {
        id: "gradcheck".into(),
        frequency_hz: 10.0,
        l_obs,
        t_future,
        agents: vec![
            track("v0", AgentType::Vehicle, 0.0, 0.5, 2.0, 0.0, true),
            track("v1", AgentType::Vehicle, 3.0, 3.0, -1.0, 0.2, true),
            track("p0", AgentType::Pedestrian, 1.0, -1.0, 0.5, 0.5, false),
        ],
        map: vec![l0, l1, l2, stop, light],
    };
    debug_assert!(scene.validate().is_ok());
    scene
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Full pipeline finite-difference check on the 8-node probe scene.
    #[test]
    fn small_model_grad_check_passes() {
        let cfg = ModelConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            modes: 2,
            t_future: 30,
            ..Default::default()
        };
        let scene = gradcheck_scene(30);
        let err = model_grad_check(cfg, &scene, 7, 1e-4, 2);
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn probe_scene_has_eight_connected_nodes() {
        let scene = gradcheck_scene(30);
        let model = Model::<f64>::new(
            ModelConfig {
                hidden: 16,
                layers: 1,
                heads: 2,
                modes: 2,
                t_future: 30,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let pre = crate::scene::preprocess(&scene);
        let graph = model.build_graph_for(&pre.scene);
        assert_eq!(graph.nodes.len(), 8);
        for (i, groups) in graph.in_edges.iter().enumerate() {
            let total: usize = groups.iter().map(|g| g.len()).sum();
            assert!(total > 0, "node {i} is isolated");
        }
    }
}
