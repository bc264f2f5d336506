//! Marginal and joint forecasting metrics over multi-modal predictions.

use crate::scene::AgentType;
use serde_json::{json, Value};
use std::collections::BTreeMap;

/// Miss threshold on the final-step error, in meters.
pub const MISS_THRESHOLD_M: f64 = 2.0;

/// Mean Euclidean error of one mode over unmasked steps; `None` when the
/// agent has no valid future step.
fn mode_ade(mode: &[[f64; 2]], gt: &[[f64; 2]], mask: &[bool]) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (t, &m) in mask.iter().enumerate() {
        if m {
            acc += euclid(mode[t], gt[t]);
            n += 1;
        }
    }
    (n > 0).then(|| acc / n as f64)
}

/// Index of the last unmasked step.
fn last_valid(mask: &[bool]) -> Option<usize> {
    mask.iter().rposition(|&m| m)
}

fn mode_fde(mode: &[[f64; 2]], gt: &[[f64; 2]], t: usize) -> f64 {
    euclid(mode[t], gt[t])
}

#[inline]
fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Minimum over modes of the masked-mean Euclidean distance.
pub fn min_ade(modes: &[Vec<[f64; 2]>], gt: &[[f64; 2]], mask: &[bool]) -> Option<f64> {
    modes
        .iter()
        .filter_map(|m| mode_ade(m, gt, mask))
        .fold(None, |best, v| Some(best.map_or(v, |b: f64| b.min(v))))
}

/// Minimum over modes of the error at the last unmasked step.
pub fn min_fde(modes: &[Vec<[f64; 2]>], gt: &[[f64; 2]], mask: &[bool]) -> Option<f64> {
    let t = last_valid(mask)?;
    modes
        .iter()
        .map(|m| mode_fde(m, gt, t))
        .fold(None, |best, v| Some(best.map_or(v, |b: f64| b.min(v))))
}

/// 1 when every mode's final-step error exceeds the threshold (strictly),
/// 0 when any mode lands within it.
pub fn miss(modes: &[Vec<[f64; 2]>], gt: &[[f64; 2]], mask: &[bool], threshold: f64) -> Option<u8> {
    let fde = min_fde(modes, gt, mask)?;
    Some(if fde > threshold { 1 } else { 0 })
}

/// Joint metrics share the mode index across agents: the minimum over k
/// of the across-agent mean ADE/FDE, and the minimum over k of the
/// any-agent-missed indicator.
pub fn joint_metrics(
    preds: &[Vec<Vec<[f64; 2]>>],
    gts: &[Vec<[f64; 2]>],
    masks: &[Vec<bool>],
    threshold: f64,
) -> Option<(f64, f64, f64)> {
    let n = preds.len();
    if n == 0 {
        return None;
    }
    let k = preds[0].len();
    let usable: Vec<usize> = (0..n).filter(|&i| last_valid(&masks[i]).is_some()).collect();
    if usable.is_empty() {
        return None;
    }
    let mut best_sade = f64::INFINITY;
    let mut best_sfde = f64::INFINITY;
    let mut best_miss = 1.0f64;
    for mode in 0..k {
        let mut sade = 0.0;
        let mut sfde = 0.0;
        let mut any_miss = 0.0;
        for &i in &usable {
            let ade = mode_ade(&preds[i][mode], &gts[i], &masks[i]).unwrap();
            let t = last_valid(&masks[i]).unwrap();
            let fde = mode_fde(&preds[i][mode], &gts[i], t);
            sade += ade;
            sfde += fde;
            if fde > threshold {
                any_miss = 1.0;
            }
        }
        sade /= usable.len() as f64;
        sfde /= usable.len() as f64;
        best_sade = best_sade.min(sade);
        best_sfde = best_sfde.min(sfde);
        best_miss = best_miss.min(any_miss);
    }
    Some((best_sade, best_sfde, best_miss))
}

/// One evaluated agent.
#[derive(Debug, Clone)]
pub struct AgentMetrics {
    pub scene_id: String,
    pub agent_id: String,
    pub agent_type: AgentType,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss: u8,
}

#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    pub agents: Vec<AgentMetrics>,
    joint_sade: Vec<f64>,
    joint_sfde: Vec<f64>,
    joint_smr: Vec<f64>,
    /// Agents excluded for having no valid future step.
    pub skipped: usize,
}

/// Aggregate report across scenes.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub joint_min_sade: f64,
    pub joint_min_sfde: f64,
    pub joint_smr: f64,
    pub agents: usize,
    pub skipped_agents: usize,
    pub per_type: BTreeMap<String, TypeBreakdown>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TypeBreakdown {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub agents: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Evaluate every agent of one scene (shared mode index for the
    /// joint metrics) and fold into the running aggregate.
    pub fn add_scene(
        &mut self,
        scene_id: &str,
        agent_ids: &[String],
        agent_types: &[AgentType],
        preds: &[Vec<Vec<[f64; 2]>>],
        gts: &[Vec<[f64; 2]>],
        masks: &[Vec<bool>],
    ) {
        for i in 0..preds.len() {
            match (
                min_ade(&preds[i], &gts[i], &masks[i]),
                min_fde(&preds[i], &gts[i], &masks[i]),
                miss(&preds[i], &gts[i], &masks[i], MISS_THRESHOLD_M),
            ) {
                (Some(ade), Some(fde), Some(m)) => self.agents.push(AgentMetrics {
                    scene_id: scene_id.to_string(),
                    agent_id: agent_ids[i].clone(),
                    agent_type: agent_types[i],
                    min_ade: ade,
                    min_fde: fde,
                    miss: m,
                }),
                _ => self.skipped += 1,
            }
        }
        if let Some((sade, sfde, smr)) = joint_metrics(preds, gts, masks, MISS_THRESHOLD_M) {
            self.joint_sade.push(sade);
            self.joint_sfde.push(sfde);
            self.joint_smr.push(smr);
        }
    }

    pub fn report(&self) -> MetricReport {
        let n = self.agents.len().max(1) as f64;
        let mean = |f: &dyn Fn(&AgentMetrics) -> f64| -> f64 {
            self.agents.iter().map(|a| f(a)).sum::<f64>() / n
        };
        let joint_mean = |v: &[f64]| -> f64 {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let mut per_type = BTreeMap::new();
        for t in crate::scene::AGENT_TYPES {
            let of_type: Vec<&AgentMetrics> =
                self.agents.iter().filter(|a| a.agent_type == t).collect();
            if of_type.is_empty() {
                continue;
            }
            let tn = of_type.len() as f64;
            per_type.insert(
                t.name().to_string(),
                TypeBreakdown {
                    min_ade: of_type.iter().map(|a| a.min_ade).sum::<f64>() / tn,
                    min_fde: of_type.iter().map(|a| a.min_fde).sum::<f64>() / tn,
                    miss_rate: of_type.iter().map(|a| a.miss as f64).sum::<f64>() / tn,
                    agents: of_type.len(),
                },
            );
        }
        MetricReport {
            min_ade: mean(&|a| a.min_ade),
            min_fde: mean(&|a| a.min_fde),
            miss_rate: mean(&|a| a.miss as f64),
            joint_min_sade: joint_mean(&self.joint_sade),
            joint_min_sfde: joint_mean(&self.joint_sfde),
            joint_smr: joint_mean(&self.joint_smr),
            agents: self.agents.len(),
            skipped_agents: self.skipped,
            per_type,
        }
    }

    /// CSV rows: one per agent plus an aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scene_id,agent_id,type,min_ade,min_fde,miss\n");
        for a in &self.agents {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{}\n",
                a.scene_id,
                a.agent_id,
                a.agent_type.name(),
                a.min_ade,
                a.min_fde,
                a.miss
            ));
        }
        let r = self.report();
        out.push_str(&format!(
            "ALL,,,{:.6},{:.6},{:.6}\n",
            r.min_ade, r.min_fde, r.miss_rate
        ));
        out
    }

    pub fn to_json(&self) -> Value {
        json!(self.report())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_mode_scores_zero() {
        let gt = vec![[1.0, 2.0], [3.0, 4.0]];
        let modes = vec![vec![[9.0, 9.0], [9.0, 9.0]], gt.clone()];
        let mask = vec![true, true];
        assert_eq!(min_ade(&modes, &gt, &mask), Some(0.0));
        assert_eq!(min_fde(&modes, &gt, &mask), Some(0.0));
        assert_eq!(miss(&modes, &gt, &mask, 2.0), Some(0));
    }

    /// Hand case: min(0.5, 1.0) = 0.5.
    #[test]
    fn hand_computed_min_ade() {
        let gt = vec![[0.0, 0.0], [1.0, 2.0]];
        let modes = vec![
            vec![[0.0, 0.0], [1.0, 1.0]],
            vec![[0.0, 1.0], [2.0, 2.0]],
        ];
        let mask = vec![true, true];
        let got = min_ade(&modes, &gt, &mask).unwrap();
        assert!((got - 0.5).abs() < 1e-12, "{got}");
    }

    #[test]
    fn adding_a_worse_mode_never_increases_min_ade() {
        let gt = vec![[0.0, 0.0], [1.0, 2.0]];
        let mut modes = vec![vec![[0.1, 0.0], [1.0, 1.9]]];
        let mask = vec![true, true];
        let before = min_ade(&modes, &gt, &mask).unwrap();
        modes.push(vec![[5.0, 5.0], [6.0, 6.0]]);
        let after = min_ade(&modes, &gt, &mask).unwrap();
        assert!(after <= before);
    }

    #[test]
    fn fde_345_triangle() {
        let gt = vec![[0.0, 0.0], [0.0, 0.0]];
        let modes = vec![vec![[0.0, 0.0], [3.0, 4.0]]];
        let mask = vec![true, true];
        assert_eq!(min_fde(&modes, &gt, &mask), Some(5.0));
    }

    #[test]
    fn miss_threshold_is_strict() {
        let gt = vec![[0.0, 0.0]];
        let exactly_two = vec![vec![[2.0, 0.0]]];
        let mask = vec![true];
        assert_eq!(miss(&exactly_two, &gt, &mask, 2.0), Some(0));
        let further = vec![vec![[2.1, 0.0]]];
        assert_eq!(miss(&further, &gt, &mask, 2.0), Some(1));
    }

    #[test]
    fn masked_final_step_moves_fde() {
        let gt = vec![[0.0, 0.0], [1.0, 0.0], [9.0, 9.0]];
        let modes = vec![vec![[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]]];
        let mask = vec![true, true, false];
        // final valid step is t=1
        assert_eq!(min_fde(&modes, &gt, &mask), Some(1.0));
    }

    #[test]
    fn fully_masked_agent_is_excluded() {
        let gt = vec![[0.0, 0.0]];
        let modes = vec![vec![[0.0, 0.0]]];
        assert_eq!(min_ade(&modes, &gt, &[false]), None);
        let mut acc = MetricAccumulator::new();
        acc.add_scene(
            "s",
            &["a".into()],
            &[AgentType::Vehicle],
            &[modes],
            &[gt],
            &[vec![false]],
        );
        assert_eq!(acc.skipped, 1);
        assert_eq!(acc.agents.len(), 0);
    }

    #[test]
    fn single_agent_joint_equals_marginal() {
        let gt = vec![[0.0, 0.0], [1.0, 2.0]];
        let modes = vec![
            vec![[0.0, 0.0], [1.0, 1.0]],
            vec![[0.0, 1.0], [2.0, 2.0]],
        ];
        let mask = vec![true, true];
        let (sade, sfde, smr) =
            joint_metrics(&[modes.clone()], &[gt.clone()], &[mask.clone()], 2.0).unwrap();
        assert!((sade - min_ade(&modes, &gt, &mask).unwrap()).abs() < 1e-12);
        assert!((sfde - min_fde(&modes, &gt, &mask).unwrap()).abs() < 1e-12);
        assert_eq!(smr, 0.0);
    }

    #[test]
    fn joint_min_is_at_least_mean_of_marginal_mins() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.gen_range(1..4);
            let k = rng.gen_range(1..5);
            let t = rng.gen_range(1..6);
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            let mut masks = Vec::new();
            for _ in 0..n {
                gts.push((0..t).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect::<Vec<_>>());
                preds.push(
                    (0..k)
                        .map(|_| {
                            (0..t)
                                .map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
                                .collect::<Vec<_>>()
                        })
                        .collect::<Vec<_>>(),
                );
                masks.push(vec![true; t]);
            }
            let (sade, _, _) = joint_metrics(&preds, &gts, &masks, 2.0).unwrap();
            let mean_marginal: f64 = (0..n)
                .map(|i| min_ade(&preds[i], &gts[i], &masks[i]).unwrap())
                .sum::<f64>()
                / n as f64;
            assert!(sade >= mean_marginal - 1e-12);
        }
    }

    /// Exhaustive-mode oracle over random instances.
    #[test]
    fn metrics_match_exhaustive_oracle() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let k = rng.gen_range(1..7);
            let t = rng.gen_range(1..8);
            let gt: Vec<[f64; 2]> =
                (0..t).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
            let modes: Vec<Vec<[f64; 2]>> = (0..k)
                .map(|_| (0..t).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect())
                .collect();
            let mut mask: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.7)).collect();
            mask[t - 1] = true;

            // oracle: explicit loops
            let mut o_ade = f64::INFINITY;
            let mut o_fde = f64::INFINITY;
            for mode in &modes {
                let mut acc = 0.0;
                let mut cnt = 0;
                for ti in 0..t {
                    if mask[ti] {
                        acc += ((mode[ti][0] - gt[ti][0]).powi(2)
                            + (mode[ti][1] - gt[ti][1]).powi(2))
                        .sqrt();
                        cnt += 1;
                    }
                }
                o_ade = o_ade.min(acc / cnt as f64);
                let d = ((mode[t - 1][0] - gt[t - 1][0]).powi(2)
                    + (mode[t - 1][1] - gt[t - 1][1]).powi(2))
                .sqrt();
                o_fde = o_fde.min(d);
            }
            let got_ade = min_ade(&modes, &gt, &mask).unwrap();
            let got_fde = min_fde(&modes, &gt, &mask).unwrap();
            assert_eq!(got_ade, o_ade);
            assert_eq!(got_fde, o_fde);
            assert_eq!(
                miss(&modes, &gt, &mask, 2.0).unwrap(),
                u8::from(o_fde > 2.0)
            );
        }
    }

    #[test]
    fn metrics_invariant_under_rigid_motion() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let t = 5;
        let gt: Vec<[f64; 2]> =
            (0..t).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect();
        let modes: Vec<Vec<[f64; 2]>> = (0..3)
            .map(|_| (0..t).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect())
            .collect();
        let mask = vec![true; t];
        let (alpha, tx, ty) = (0.83f64, 100.0, -55.0);
        let (s, c) = alpha.sin_cos();
        let mov = |p: [f64; 2]| [c * p[0] - s * p[1] + tx, s * p[0] + c * p[1] + ty];
        let gt2: Vec<[f64; 2]> = gt.iter().map(|&p| mov(p)).collect();
        let modes2: Vec<Vec<[f64; 2]>> = modes
            .iter()
            .map(|m| m.iter().map(|&p| mov(p)).collect())
            .collect();
        let a = min_ade(&modes, &gt, &mask).unwrap();
        let b = min_ade(&modes2, &gt2, &mask).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn csv_has_aggregate_row() {
        let mut acc = MetricAccumulator::new();
        let gt = vec![[0.0, 0.0]];
        acc.add_scene(
            "s0",
            &["a0".into()],
            &[AgentType::Vehicle],
            &[vec![vec![[1.0, 0.0]]]],
            &[gt],
            &[vec![true]],
        );
        let csv = acc.to_csv();
        assert!(csv.starts_with("scene_id,agent_id,type,min_ade,min_fde,miss\n"));
        assert!(csv.contains("s0,a0,vehicle,1.000000,1.000000,0"));
        assert!(csv.lines().last().unwrap().starts_with("ALL,,,"));
    }
}
