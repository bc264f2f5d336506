//! Winner-take-all multi-modal training objective and prediction
//! serialization.
//!
//! Regression gradient flows only through each agent's best-matching
//! mode; classification pushes confidence toward that mode's index.

use crate::geometry::{from_local_point, to_local_point, Pose2};
use crate::graph::HeteroGraph;
use crate::model::{AgentDecode, ForwardOutput, Model, ScenePrediction};
use crate::scalar::Scalar;
use crate::scene::{Preprocessed, Scene};
use crate::tensor::{TensorError, Tensor, Var};
use serde_json::{json, Value};

/// Smooth L1: quadratic inside the unit interval, linear outside.
pub fn smooth_l1(x1: f64, x2: f64) -> f64 {
    let d = (x1 - x2).abs();
    if d < 1.0 {
        0.5 * d * d
    } else {
        d - 0.5
    }
}

/// Per-mode regression criterion used for winner selection: the masked
/// smooth-L1 objective by default, mean Euclidean distance when
/// `euclidean` is set. Masked steps are excluded from sums and
/// normalizers. Returns `None` when every step is masked.
pub fn mode_regression_cost(
    mode: &[[f64; 2]],
    gt: &[[f64; 2]],
    mask: &[bool],
    euclidean: bool,
) -> Option<f64> {
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return None;
    }
    let mut acc = 0.0;
    for (t, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        if euclidean {
            acc += (mode[t][0] - gt[t][0]).hypot(mode[t][1] - gt[t][1]);
        } else {
            acc += smooth_l1(mode[t][0], gt[t][0]) + smooth_l1(mode[t][1], gt[t][1]);
        }
    }
    Some(if euclidean {
        acc / valid as f64
    } else {
        acc / (2.0 * valid as f64)
    })
}

/// Index of the mode with the lowest regression cost; ties break toward
/// the lowest index. `None` when the agent is fully masked.
pub fn winner_index(
    modes: &[Vec<[f64; 2]>],
    gt: &[[f64; 2]],
    mask: &[bool],
    euclidean: bool,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, mode) in modes.iter().enumerate() {
        let cost = mode_regression_cost(mode, gt, mask, euclidean)?;
        match best {
            Some((_, b)) if cost >= b => {}
            _ => best = Some((k, cost)),
        }
    }
    best.map(|(k, _)| k)
}

/// Loss values extracted after the tape is built.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub reg: f64,
    pub cls: f64,
    /// Winner mode per agent entering the loss, parallel to
    /// `agent_nodes` passed into [`mtp_loss`] minus the skipped ones.
    pub winners: Vec<usize>,
    /// Agents excluded because their future is fully masked.
    pub skipped_agents: Vec<String>,
}

pub struct SceneLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Ground-truth future of one agent in its own reference frame.
pub fn local_ground_truth(scene: &Scene, agent_index: usize, reference: &Pose2) -> Vec<[f64; 2]> {
    let a = &scene.agents[agent_index];
    (scene.l_obs..scene.l_obs + scene.t_future)
        .map(|t| {
            let s = &a.states[t];
            to_local_point([s.x, s.y], reference)
        })
        .collect()
}

/// Build the winner-take-all objective over the given agent nodes:
/// total = lambda * mean(cross-entropy) + mean(masked winner smooth-L1).
/// Winner selection happens on values; only the winning mode's slice
/// enters the regression term, so non-winner gradients are exactly zero.
pub fn mtp_loss<S: Scalar>(
    model: &Model<S>,
    out: &mut ForwardOutput<S>,
    pre: &Preprocessed,
    graph: &HeteroGraph,
    agent_nodes: &[usize],
) -> Result<SceneLoss, TensorError> {
    let cfg = &model.cfg;
    let t_future = pre.scene.t_future;
    if t_future != cfg.t_future {
        return Err(TensorError::Invalid(format!(
            "scene future length {} does not match model {}",
            t_future, cfg.t_future
        )));
    }
    let mut reg_terms: Vec<Var> = Vec::new();
    let mut cls_terms: Vec<Var> = Vec::new();
    let mut winners = Vec::new();
    let mut skipped = Vec::new();

    for &node_idx in agent_nodes {
        let node = &graph.nodes[node_idx];
        let agent_index = node.element;
        let agent = &pre.scene.agents[agent_index];
        let mask = &pre.future_mask[agent_index];
        let decode: AgentDecode = model.decode_agent(out, node_idx, agent.agent_type)?;

        let gt = local_ground_truth(&pre.scene, agent_index, &node.ref_pose);
        let modes =
            crate::model::extract_modes(out.tape.value(decode.reg), cfg.modes, cfg.t_future);
        let Some(winner) = winner_index(&modes, &gt, mask, cfg.winner_euclidean) else {
            skipped.push(agent.id.clone());
            continue;
        };
        winners.push(winner);

        // winner slice: columns [winner * T * 2, (winner + 1) * T * 2)
        let span = cfg.t_future * 2;
        let pred = out.tape.slice_cols(decode.reg, winner * span, span)?;
        let mut target = Tensor::<S>::zeros(&[1, span]);
        for (t, p) in gt.iter().enumerate() {
            target.data_mut()[2 * t] = S::from_f64(p[0]);
            target.data_mut()[2 * t + 1] = S::from_f64(p[1]);
        }
        let reg = out.tape.smooth_l1_masked(pred, target, mask.clone())?;
        reg_terms.push(reg);
        let ce = out.tape.cross_entropy_logits(decode.logits, winner)?;
        cls_terms.push(ce);
    }

    if reg_terms.is_empty() {
        return Err(TensorError::Invalid(
            "no agents with unmasked future steps".into(),
        ));
    }

    let n = reg_terms.len();
    let mean_of = |tape: &mut crate::tensor::Tape<S>, terms: &[Var]| -> Result<Var, TensorError> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(tape.scale(acc, S::from_f64(1.0 / n as f64)))
    };
    let reg_mean = mean_of(&mut out.tape, &reg_terms)?;
    let cls_mean = mean_of(&mut out.tape, &cls_terms)?;
    let cls_scaled = out.tape.scale(cls_mean, S::from_f64(cfg.lambda));
    let total = out.tape.add(cls_scaled, reg_mean)?;

    let breakdown = LossBreakdown {
        total: out.tape.value(total).scalar_value().to_f64(),
        reg: out.tape.value(reg_mean).scalar_value().to_f64(),
        cls: out.tape.value(cls_mean).scalar_value().to_f64(),
        winners,
        skipped_agents: skipped,
    };
    Ok(SceneLoss { total, breakdown })
}

pub const PREDICTION_FORMAT_VERSION: u32 = 1;

/// Prediction dump: per agent, K modes and confidences in both the local
/// frame and the global frame reconstructed through the reference pose.
pub fn prediction_to_json(
    scene_id: &str,
    graph: &HeteroGraph,
    pred: &ScenePrediction,
    config_echo: Value,
) -> Value {
    let mut local = serde_json::Map::new();
    let mut global = serde_json::Map::new();
    for (n, agent_id) in pred.agent_ids.iter().enumerate() {
        let reference = graph.nodes[pred.node_indices[n]].ref_pose;
        let modes_local: Vec<Value> = pred.trajectories[n]
            .iter()
            .map(|mode| {
                Value::Array(
                    mode.iter()
                        .map(|p| json!([p[0], p[1]]))
                        .collect(),
                )
            })
            .collect();
        let modes_global: Vec<Value> = pred.trajectories[n]
            .iter()
            .map(|mode| {
                Value::Array(
                    mode.iter()
                        .map(|p| {
                            let g = from_local_point(*p, &reference);
                            json!([g[0], g[1]])
                        })
                        .collect(),
                )
            })
            .collect();
        let conf = json!(pred.confidences[n]);
        local.insert(
            agent_id.clone(),
            json!({"modes": modes_local, "conf": conf, "type": pred.agent_types[n].name()}),
        );
        global.insert(
            agent_id.clone(),
            json!({"modes": modes_global, "conf": conf, "type": pred.agent_types[n].name()}),
        );
    }
    json!({
        "format_version": PREDICTION_FORMAT_VERSION,
        "scene_id": scene_id,
        "config": config_echo,
        "local": Value::Object(local),
        "global": Value::Object(global),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scene::{generate_synthetic, preprocess, GeneratorConfig};
    use crate::tensor::GradTable;

    #[test]
    fn smooth_l1_formula_values() {
        assert!((smooth_l1(0.0, 0.5) - 0.125).abs() < 1e-12);
        assert!((smooth_l1(0.0, 2.0) - 1.5).abs() < 1e-12);
        assert_eq!(smooth_l1(1.25, 1.25), 0.0);
    }

    #[test]
    fn exact_mode_wins() {
        let gt = vec![[0.0, 0.0], [1.0, 1.0]];
        let modes = vec![
            vec![[5.0, 5.0], [6.0, 6.0]],
            gt.clone(),
            vec![[0.1, 0.1], [1.1, 1.1]],
        ];
        assert_eq!(winner_index(&modes, &gt, &[true, true], false), Some(1));
        assert_eq!(winner_index(&modes, &gt, &[true, true], true), Some(1));
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let gt = vec![[0.0, 0.0]];
        let modes = vec![gt.clone(), gt.clone(), gt.clone()];
        assert_eq!(winner_index(&modes, &gt, &[true], false), Some(0));
    }

    #[test]
    fn fully_masked_agent_returns_none() {
        let gt = vec![[0.0, 0.0], [1.0, 1.0]];
        let modes = vec![gt.clone()];
        assert_eq!(winner_index(&modes, &gt, &[false, false], false), None);
    }

    /// Exhaustive-mode oracle: argmin over brute-force per-mode costs.
    #[test]
    fn winner_matches_brute_force_on_random_cases() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let k = rng.gen_range(1..6);
            let t = rng.gen_range(1..8);
            let gt: Vec<[f64; 2]> =
                (0..t).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
            let modes: Vec<Vec<[f64; 2]>> = (0..k)
                .map(|_| {
                    (0..t)
                        .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)])
                        .collect()
                })
                .collect();
            let mut mask: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.8)).collect();
            mask[0] = true;
            let got = winner_index(&modes, &gt, &mask, false).unwrap();
            // independent re-implementation
            let mut best = (0usize, f64::INFINITY);
            for (ki, mode) in modes.iter().enumerate() {
                let mut acc = 0.0;
                let mut cnt = 0usize;
                for ti in 0..t {
                    if mask[ti] {
                        cnt += 1;
                        let dx = (mode[ti][0] - gt[ti][0]).abs();
                        let dy = (mode[ti][1] - gt[ti][1]).abs();
                        acc += if dx < 1.0 { 0.5 * dx * dx } else { dx - 0.5 };
                        acc += if dy < 1.0 { 0.5 * dy * dy } else { dy - 0.5 };
                    }
                }
                let cost = acc / (2.0 * cnt as f64);
                if cost < best.1 {
                    best = (ki, cost);
                }
            }
            assert_eq!(got, best.0);
        }
    }

    fn loss_fixture() -> (Model<f64>, Preprocessed, HeteroGraph) {
        let cfg = ModelConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            modes: 3,
            t_future: 30,
            ..Default::default()
        };
        let model = Model::new(cfg, 21).unwrap();
        let gen = GeneratorConfig {
            vehicles: 2,
            pedestrians: 1,
            cyclists: 0,
            lanes: 2,
            ..Default::default()
        };
        let scene = generate_synthetic(17, &gen).unwrap();
        let pre = preprocess(&scene);
        let graph = model.build_graph_for(&pre.scene);
        (model, pre, graph)
    }

    #[test]
    fn loss_composition_holds() {
        let (model, pre, graph) = loss_fixture();
        let mut out = model.forward(&pre.scene, &graph).unwrap();
        let targets: Vec<usize> = (0..graph.n_agents)
            .filter(|&i| pre.scene.agents[graph.nodes[i].element].is_target)
            .collect();
        let loss = mtp_loss(&model, &mut out, &pre, &graph, &targets).unwrap();
        let b = &loss.breakdown;
        assert!((b.total - (model.cfg.lambda * b.cls + b.reg)).abs() < 1e-6);
        assert!(b.total.is_finite());
        assert_eq!(b.winners.len(), targets.len());
    }

    /// Gradient of the regression term w.r.t. non-winner modes is zero:
    /// check via the regression-head output gradient.
    #[test]
    fn non_winner_gradients_are_zero() {
        let (model, pre, graph) = loss_fixture();
        let mut out = model.forward(&pre.scene, &graph).unwrap();
        let targets: Vec<usize> = (0..graph.n_agents)
            .filter(|&i| pre.scene.agents[graph.nodes[i].element].is_target)
            .collect();
        // decode one agent manually to inspect its reg gradient
        let node_idx = targets[0];
        let agent = &pre.scene.agents[graph.nodes[node_idx].element];
        let decode = model.decode_agent(&mut out, node_idx, agent.agent_type).unwrap();
        let gt = local_ground_truth(&pre.scene, graph.nodes[node_idx].element, &graph.nodes[node_idx].ref_pose);
        let mask = &pre.future_mask[graph.nodes[node_idx].element];
        let modes = crate::model::extract_modes(out.tape.value(decode.reg), 3, 30);
        let winner = winner_index(&modes, &gt, mask, false).unwrap();
        let span = 30 * 2;
        let pred = out.tape.slice_cols(decode.reg, winner * span, span).unwrap();
        let mut target = Tensor::<f64>::zeros(&[1, span]);
        for (t, p) in gt.iter().enumerate() {
            target.data_mut()[2 * t] = p[0];
            target.data_mut()[2 * t + 1] = p[1];
        }
        let reg = out.tape.smooth_l1_masked(pred, target, mask.clone()).unwrap();
        out.tape.backward(reg).unwrap();
        let g = out.tape.grad(decode.reg).unwrap();
        for k in 0..3usize {
            let slice: Vec<f64> = (0..span).map(|j| g.at(0, k * span + j)).collect();
            let norm: f64 = slice.iter().map(|v| v.abs()).sum();
            if k == winner {
                assert!(norm > 0.0, "winner slice should receive gradient");
            } else {
                assert_eq!(norm, 0.0, "non-winner mode {k} got gradient");
            }
        }
    }

    /// Formula oracle: uniform confidences give CE = ln K, and a winner
    /// that matches the ground truth exactly gives total = lambda * CE.
    #[test]
    fn analytic_loss_cases() {
        let (model, pre, graph) = loss_fixture();
        let mut out = model.forward(&pre.scene, &graph).unwrap();
        let node_idx = 0usize;
        let agent = &pre.scene.agents[graph.nodes[node_idx].element];
        let decode = model.decode_agent(&mut out, node_idx, agent.agent_type).unwrap();
        // CE of uniform logits is ln K
        let uniform = out.tape.constant(Tensor::row_from_f64(&[0.3; 3]));
        let ce = out.tape.cross_entropy_logits(uniform, 1).unwrap();
        let v = out.tape.value(ce).scalar_value();
        assert!((v - (3.0f64).ln()).abs() < 1e-12);
        let _ = decode;
    }

    /// Independent scalar re-implementation of the full objective.
    #[test]
    fn loss_matches_scalar_reference() {
        let (model, pre, graph) = loss_fixture();
        let mut out = model.forward(&pre.scene, &graph).unwrap();
        let targets: Vec<usize> = (0..graph.n_agents)
            .filter(|&i| pre.scene.agents[graph.nodes[i].element].is_target)
            .collect();

        // reference computation from decoded values
        let mut expect_reg = 0.0;
        let mut expect_cls = 0.0;
        for &node_idx in &targets {
            let agent = &pre.scene.agents[graph.nodes[node_idx].element];
            let decode = model.decode_agent(&mut out, node_idx, agent.agent_type).unwrap();
            let gt = local_ground_truth(
                &pre.scene,
                graph.nodes[node_idx].element,
                &graph.nodes[node_idx].ref_pose,
            );
            let mask = &pre.future_mask[graph.nodes[node_idx].element];
            let modes = crate::model::extract_modes(out.tape.value(decode.reg), 3, 30);
            let k = winner_index(&modes, &gt, mask, false).unwrap();
            expect_reg += mode_regression_cost(&modes[k], &gt, mask, false).unwrap();
            let logits = out.tape.value(decode.logits).to_f64_vec();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            expect_cls += lse - logits[k];
        }
        expect_reg /= targets.len() as f64;
        expect_cls /= targets.len() as f64;
        let expect_total = model.cfg.lambda * expect_cls + expect_reg;

        let mut out2 = model.forward(&pre.scene, &graph).unwrap();
        let loss = mtp_loss(&model, &mut out2, &pre, &graph, &targets).unwrap();
        assert!((loss.breakdown.reg - expect_reg).abs() < 1e-10);
        assert!((loss.breakdown.cls - expect_cls).abs() < 1e-10);
        assert!((loss.breakdown.total - expect_total).abs() < 1e-10);
    }

    #[test]
    fn loss_backward_reaches_parameters() {
        let (model, pre, graph) = loss_fixture();
        let mut out = model.forward(&pre.scene, &graph).unwrap();
        let targets: Vec<usize> = (0..graph.n_agents).collect();
        let targets: Vec<usize> = targets
            .into_iter()
            .filter(|&i| graph.nodes[i].node_type == crate::graph::NodeType::Agent)
            .take(2)
            .collect();
        let loss = mtp_loss(&model, &mut out, &pre, &graph, &targets).unwrap();
        out.tape.backward(loss.total).unwrap();
        let mut grads = GradTable::zeros_like(&model.params);
        out.tape.grads_into(&mut grads);
        // parameters on the path to a vehicle prediction must be reached
        for name in [
            "enc.agent.stem.w",
            "enc.map.l1.w",
            "enc.viewshift.lane.l1.w",
            "layer0.attn.lane_agent.wq",
            "layer0.fuse.agent.l1.w",
            "layer0.ffn.agent.l1.w",
            "layer0.edge.lane_agent.l1.w",
            "layer1.attn.lane_agent.wq",
            "head.vehicle.reg.out.w",
            "head.vehicle.cls.out.w",
        ] {
            let id = model.params.id_of(name).unwrap();
            assert!(grads.get(id).is_some(), "{name} unreached");
        }
        // untouched heads stay untouched (no cyclists in the fixture)
        let cyc = model.params.id_of("head.cyclist.reg.out.w").unwrap();
        assert!(grads.get(cyc).is_none());
        assert!(grads.all_finite());
    }
}
