//! Training loop: seeded shuffling and agent-drop augmentation, batched
//! forward/backward over scenes, decoupled-weight-decay updates under the
//! warmup/decay schedule, JSONL logging, and per-epoch validation.

use crate::decoder::{local_ground_truth, mtp_loss, LossBreakdown};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::model::Model;
use crate::optim::{adamw_step, lr_at, AdamWConfig, AdamWState};
use crate::scalar::Scalar;
use crate::scene::{preprocess, Scene};
use crate::tensor::{
    load_checkpoint, save_checkpoint, CheckpointError, GradTable, ParamTable, TensorError, Tensor,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub agent_drop_p: f64,
    pub seed: u64,
    pub workers: usize,
    /// Optional hard cap on optimizer steps (desk-scale runs).
    pub max_steps: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 30,
            warmup_epochs: 1,
            agent_drop_p: 0.1,
            seed: 0,
            workers: 1,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..1.0).contains(&self.agent_drop_p) {
            return Err(TrainError::Config(format!(
                "agent_drop_p {} must be in [0, 1)",
                self.agent_drop_p
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(TrainError::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("non-finite loss or gradient at step {step}; last good parameters retained")]
    NonFinite { step: u64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("worker pool error: {0}")]
    Pool(String),
}

/// Remove each non-target agent with probability `p`; targets are never
/// dropped.
pub fn agent_drop(scene: &Scene, p: f64, rng: &mut ChaCha8Rng) -> Scene {
    let mut out = scene.clone();
    out.agents = scene
        .agents
        .iter()
        .filter(|a| a.is_target || rng.gen_range(0.0..1.0) >= p)
        .cloned()
        .collect();
    out
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix-style derivation for stream independence
    let mut x = seed
        .wrapping_add(a.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(b.wrapping_mul(0xBF58476D1CE4E5B9));
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58476D1CE4E5B9);
    x ^= x >> 27;
    x
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub mr: f64,
    pub train_loss: f64,
}

#[derive(Debug)]
pub struct TrainReport<S> {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_params: Option<ParamTable<S>>,
    pub steps: u64,
    pub final_loss: Option<LossBreakdown>,
}

/// Evaluate marginal/joint metrics of the model over scenes, predicting
/// every target agent in each scene's local frames.
pub fn evaluate<S: Scalar>(model: &Model<S>, scenes: &[Scene]) -> Result<MetricReport, TrainError> {
    let mut acc = MetricAccumulator::new();
    for scene in scenes {
        let pre = preprocess(scene);
        let graph = model.build_graph_for(&pre.scene);
        let targets: Vec<usize> = (0..graph.n_agents)
            .filter(|&i| pre.scene.agents[graph.nodes[i].element].is_target)
            .collect();
        if targets.is_empty() {
            continue;
        }
        let pred = model.predict_scene(&pre.scene, &graph, &targets)?;
        let mut gts = Vec::new();
        let mut masks = Vec::new();
        for &node in &targets {
            let agent_index = graph.nodes[node].element;
            gts.push(local_ground_truth(
                &pre.scene,
                agent_index,
                &graph.nodes[node].ref_pose,
            ));
            masks.push(pre.future_mask[agent_index].clone());
        }
        acc.add_scene(
            &pre.scene.id,
            &pred.agent_ids,
            &pred.agent_types,
            &pred.trajectories,
            &gts,
            &masks,
        );
    }
    Ok(acc.report())
}

fn scene_pass<S: Scalar>(
    model: &Model<S>,
    scene: &Scene,
    drop_p: f64,
    drop_seed: u64,
) -> Result<Option<(GradTable<S>, LossBreakdown)>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(drop_seed);
    let dropped = agent_drop(scene, drop_p, &mut rng);
    let pre = preprocess(&dropped);
    let graph = model.build_graph_for(&pre.scene);
    let targets: Vec<usize> = (0..graph.n_agents)
        .filter(|&i| pre.scene.agents[graph.nodes[i].element].is_target)
        .collect();
    if targets.is_empty() {
        return Ok(None);
    }
    let mut out = model.forward(&pre.scene, &graph)?;
    let loss = mtp_loss(model, &mut out, &pre, &graph, &targets)?;
    out.tape.backward(loss.total)?;
    let mut grads = GradTable::zeros_like(&model.params);
    out.tape.grads_into(&mut grads);
    Ok(Some((grads, loss.breakdown)))
}

/// Train in place. Scenes are visited in seeded shuffled order; each
/// batch averages per-scene losses (and therefore gradients) before one
/// optimizer step. Logs one JSON line per step and one per epoch.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    cfg: &TrainConfig,
    opt_state: &mut AdamWState<S>,
    start_epoch: usize,
    end_epoch: Option<usize>,
    log: &mut dyn Write,
) -> Result<TrainReport<S>, TrainError> {
    cfg.validate()?;
    if train_scenes.is_empty() {
        return Err(TrainError::Config("no training scenes".into()));
    }
    let steps_per_epoch = train_scenes.len().div_ceil(cfg.batch_size) as u64;
    let mut total_steps = steps_per_epoch * cfg.epochs as u64;
    if let Some(cap) = cfg.max_steps {
        total_steps = total_steps.min(cap);
    }
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs as u64;
    let adamw_cfg = cfg.adamw();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| TrainError::Pool(e.to_string()))?;

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamTable<S>)> = None;
    let mut step = opt_state.step;
    let mut final_loss = None;

    let stop = end_epoch.unwrap_or(cfg.epochs).min(cfg.epochs);
    'epochs: for epoch in start_epoch..stop {
        // seeded shuffle
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_losses = Vec::new();
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            if step >= total_steps {
                break 'epochs;
            }
            let jobs: Vec<(usize, u64)> = batch
                .iter()
                .enumerate()
                .map(|(pos, &scene_idx)| {
                    let in_epoch = batch_idx * cfg.batch_size + pos;
                    (scene_idx, mix(cfg.seed, epoch as u64 + 1, in_epoch as u64))
                })
                .collect();
            let model_ref = &*model;
            let results: Vec<Result<Option<(GradTable<S>, LossBreakdown)>, TrainError>> =
                pool.install(|| {
                    use rayon::prelude::*;
                    jobs.par_iter()
                        .map(|&(scene_idx, drop_seed)| {
                            scene_pass(model_ref, &train_scenes[scene_idx], cfg.agent_drop_p, drop_seed)
                        })
                        .collect()
                });

            // fixed-order merge keeps results identical for any worker count
            let mut merged = GradTable::zeros_like(&model.params);
            let mut batch_loss = LossBreakdown {
                total: 0.0,
                reg: 0.0,
                cls: 0.0,
                winners: Vec::new(),
                skipped_agents: Vec::new(),
            };
            let mut contributing = 0usize;
            for r in results {
                if let Some((grads, breakdown)) = r? {
                    merged.merge(&grads);
                    batch_loss.total += breakdown.total;
                    batch_loss.reg += breakdown.reg;
                    batch_loss.cls += breakdown.cls;
                    batch_loss.skipped_agents.extend(breakdown.skipped_agents);
                    contributing += 1;
                }
            }
            if contributing == 0 {
                continue;
            }
            let inv = 1.0 / contributing as f64;
            merged.scale(S::from_f64(inv));
            batch_loss.total *= inv;
            batch_loss.reg *= inv;
            batch_loss.cls *= inv;

            if !batch_loss.total.is_finite() || !merged.all_finite() {
                return Err(TrainError::NonFinite { step });
            }

            let lr = lr_at(step + 1, total_steps, warmup_steps, cfg.lr);
            adamw_step(&mut model.params, &merged, opt_state, lr, &adamw_cfg);
            step += 1;

            writeln!(
                log,
                "{}",
                json!({
                    "step": step,
                    "lr": lr,
                    "loss": batch_loss.total,
                    "reg": batch_loss.reg,
                    "cls": batch_loss.cls,
                })
            )
            .map_err(|e| TrainError::Pool(e.to_string()))?;
            epoch_losses.push(batch_loss.total);
            final_loss = Some(batch_loss);

            if !model.params.all_finite() {
                return Err(TrainError::NonFinite { step });
            }
        }

        let report = evaluate(model, val_scenes)?;
        let train_loss = if epoch_losses.is_empty() {
            f64::NAN
        } else {
            epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64
        };
        writeln!(
            log,
            "{}",
            json!({
                "epoch": epoch,
                "min_ade": report.min_ade,
                "min_fde": report.min_fde,
                "mr": report.miss_rate,
                "train_loss": train_loss,
            })
        )
        .map_err(|e| TrainError::Pool(e.to_string()))?;
        history.push(EpochRecord {
            epoch,
            min_ade: report.min_ade,
            min_fde: report.min_fde,
            mr: report.miss_rate,
            train_loss,
        });
        let is_best = !val_scenes.is_empty()
            && best
                .as_ref()
                .map(|(_, ade, _)| report.min_ade < *ade)
                .unwrap_or(true);
        if is_best {
            best = Some((epoch, report.min_ade, model.params.clone()));
        }
    }

    let (best_epoch, best_params) = match best {
        Some((e, _, p)) => (Some(e), Some(p)),
        None => (None, None),
    };
    Ok(TrainReport {
        history,
        best_epoch,
        best_params,
        steps: step,
        final_loss,
    })
}

/// Persist optimizer state next to a checkpoint: moment tables prefixed
/// `m.`/`v.` plus the step counter, in the checkpoint container format.
pub fn save_opt_state<S: Scalar, W: Write>(
    state: &AdamWState<S>,
    params: &ParamTable<S>,
    w: &mut W,
) -> Result<(), CheckpointError> {
    let mut table = ParamTable::<S>::new();
    table.insert("step", Tensor::scalar(S::from_f64(state.step as f64)));
    for (id, name, _) in params.iter() {
        table.insert(format!("m.{name}"), state.m[id].clone());
        table.insert(format!("v.{name}"), state.v[id].clone());
    }
    save_checkpoint(&table, w)
}

pub fn load_opt_state<S: Scalar, R: std::io::Read>(
    params: &ParamTable<S>,
    r: &mut R,
) -> Result<AdamWState<S>, CheckpointError> {
    let table = load_checkpoint::<S, _>(r)?;
    let step_id = table
        .id_of("step")
        .ok_or_else(|| CheckpointError::Mismatch("missing step".into()))?;
    let step = table.get(step_id).scalar_value().to_f64() as u64;
    let mut state = AdamWState::zeros_like(params);
    for (id, name, tensor) in params.iter() {
        for (prefix, slot) in [("m", &mut state.m), ("v", &mut state.v)] {
            let key = format!("{prefix}.{name}");
            let tid = table
                .id_of(&key)
                .ok_or_else(|| CheckpointError::Mismatch(format!("missing {key}")))?;
            if table.get(tid).shape() != tensor.shape() {
                return Err(CheckpointError::Mismatch(format!("shape mismatch for {key}")));
            }
            slot[id] = table.get(tid).clone();
        }
    }
    state.step = step;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::scene::{generate_synthetic, GeneratorConfig};

    fn tiny_model(seed: u64) -> Model<f32> {
        let cfg = ModelConfig {
            hidden: 16,
            layers: 1,
            heads: 2,
            modes: 2,
            t_future: 30,
            ..Default::default()
        };
        Model::new(cfg, seed).unwrap()
    }

    fn tiny_dataset(n: usize) -> Vec<Scene> {
        let gen = GeneratorConfig {
            vehicles: 2,
            pedestrians: 0,
            cyclists: 0,
            lanes: 2,
            ..Default::default()
        };
        (0..n as u64).map(|s| generate_synthetic(s, &gen).unwrap()).collect()
    }

    #[test]
    fn agent_drop_keeps_targets() {
        let scenes = tiny_dataset(1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dropped = agent_drop(&scenes[0], 0.999999, &mut rng);
        assert!(dropped.agents.iter().all(|a| a.is_target));
        assert!(!dropped.agents.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let untouched = agent_drop(&scenes[0], 0.0, &mut rng);
        assert_eq!(untouched.agents.len(), scenes[0].agents.len());
    }

    #[test]
    fn agent_drop_is_seed_reproducible() {
        let gen = GeneratorConfig {
            vehicles: 6,
            pedestrians: 3,
            cyclists: 2,
            targets: 1,
            ..Default::default()
        };
        let scene = generate_synthetic(5, &gen).unwrap();
        let ids = |s: &Scene| s.agents.iter().map(|a| a.id.clone()).collect::<Vec<_>>();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            ids(&agent_drop(&scene, 0.5, &mut r1)),
            ids(&agent_drop(&scene, 0.5, &mut r2))
        );
    }

    #[test]
    fn smoke_train_two_epochs_decreases_loss() {
        let mut model = tiny_model(3);
        let scenes = tiny_dataset(4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            warmup_epochs: 1,
            agent_drop_p: 0.0,
            lr: 1e-3,
            ..Default::default()
        };
        let mut state = AdamWState::zeros_like(&model.params);
        let mut log = Vec::new();
        let report = train(&mut model, &scenes, &scenes[..1], &cfg, &mut state, 0, None, &mut log).unwrap();
        assert_eq!(report.steps, 4);
        assert_eq!(report.history.len(), 2);
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 6); // 4 step lines + 2 epoch lines
        assert!(text.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    }

    #[test]
    fn deterministic_across_runs_and_workers() {
        let run = |workers: usize| {
            let mut model = tiny_model(3);
            let scenes = tiny_dataset(4);
            let cfg = TrainConfig {
                epochs: 1,
                batch_size: 2,
                warmup_epochs: 0,
                workers,
                ..Default::default()
            };
            let mut state = AdamWState::zeros_like(&model.params);
            let mut log = Vec::new();
            train(&mut model, &scenes, &[], &cfg, &mut state, 0, None, &mut log).unwrap();
            let mut buf = Vec::new();
            model.save(&mut buf).unwrap();
            (buf, log)
        };
        let (ckpt1, log1) = run(1);
        let (ckpt2, log2) = run(1);
        assert_eq!(ckpt1, ckpt2);
        assert_eq!(log1, log2);
        // fixed-order merge makes multi-worker runs identical too
        let (ckpt4, log4) = run(4);
        assert_eq!(ckpt1, ckpt4);
        assert_eq!(log1, log4);
    }

    #[test]
    fn resume_reproduces_bitwise() {
        let scenes = tiny_dataset(4);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            warmup_epochs: 0,
            agent_drop_p: 0.1,
            ..Default::default()
        };

        // full run
        let mut full = tiny_model(3);
        let mut full_state = AdamWState::zeros_like(&full.params);
        let mut full_log = Vec::new();
        train(&mut full, &scenes, &[], &cfg, &mut full_state, 0, None, &mut full_log).unwrap();

        // two halves with a checkpoint round trip between epochs
        let mut first = tiny_model(3);
        let mut state = AdamWState::zeros_like(&first.params);
        train(&mut first, &scenes, &[], &cfg, &mut state, 0, Some(1), &mut Vec::new()).unwrap();
        let mut params_buf = Vec::new();
        first.save(&mut params_buf).unwrap();
        let mut opt_buf = Vec::new();
        save_opt_state(&state, &first.params, &mut opt_buf).unwrap();

        let mut resumed = tiny_model(99);
        resumed.load(&mut params_buf.as_slice()).unwrap();
        let mut resumed_state = load_opt_state(&resumed.params, &mut opt_buf.as_slice()).unwrap();
        train(&mut resumed, &scenes, &[], &cfg, &mut resumed_state, 1, None, &mut Vec::new()).unwrap();

        let dump = |m: &Model<f32>| {
            let mut b = Vec::new();
            m.save(&mut b).unwrap();
            b
        };
        assert_eq!(dump(&full), dump(&resumed));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig {
            agent_drop_p: 1.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        let cfg = TrainConfig {
            warmup_epochs: 31,
            epochs: 30,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_validation() {
        let mut model = tiny_model(3);
        let scenes = tiny_dataset(3);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            warmup_epochs: 0,
            ..Default::default()
        };
        let mut state = AdamWState::zeros_like(&model.params);
        train(&mut model, &scenes, &scenes, &cfg, &mut state, 0, None, &mut Vec::new()).unwrap();
        let before = evaluate(&model, &scenes).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let mut reloaded = tiny_model(55);
        reloaded.load(&mut buf.as_slice()).unwrap();
        let after = evaluate(&reloaded, &scenes).unwrap();
        assert_eq!(before.min_ade.to_bits(), after.min_ade.to_bits());
        assert_eq!(before.min_fde.to_bits(), after.min_fde.to_bits());
        assert_eq!(before.miss_rate.to_bits(), after.miss_rate.to_bits());
    }
}
