//! Track preprocessing: fill invalid observed steps by linear
//! interpolation, mask invalid future steps for the loss.

use super::{AgentState, Scene};
use crate::geometry::wrap_angle;

/// Preprocessing output. `future_mask[i][t]` is true where agent `i`'s
/// future step `t` is valid and may contribute to the loss; `dropped`
/// lists agents removed because they had no valid observed step.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub scene: Scene,
    pub future_mask: Vec<Vec<bool>>,
    pub dropped: Vec<String>,
}

/// Fill invalid states inside the observed horizon by linear
/// interpolation between the nearest valid neighbors (endpoints hold the
/// nearest valid state) and record the future-horizon validity mask.
/// Valid states are never modified and track lengths never change.
pub fn preprocess(scene: &Scene) -> Preprocessed {
    let l_obs = scene.l_obs;
    let mut out = scene.clone();
    let mut dropped = Vec::new();
    let mut kept = Vec::new();
    for mut agent in out.agents.drain(..) {
        let obs_valid: Vec<usize> = (0..l_obs.min(agent.states.len()))
            .filter(|&t| agent.states[t].valid)
            .collect();
        if obs_valid.is_empty() {
            dropped.push(agent.id.clone());
            continue;
        }
        for t in 0..l_obs.min(agent.states.len()) {
            if agent.states[t].valid {
                continue;
            }
            let prev = obs_valid.iter().rev().find(|&&v| v < t).copied();
            let next = obs_valid.iter().find(|&&v| v > t).copied();
            let filled = match (prev, next) {
                (Some(p), Some(n)) => {
                    let alpha = (t - p) as f64 / (n - p) as f64;
                    lerp_state(&agent.states[p], &agent.states[n], alpha)
                }
                (Some(p), None) => hold(&agent.states[p]),
                (None, Some(n)) => hold(&agent.states[n]),
                (None, None) => unreachable!("obs_valid is non-empty"),
            };
            agent.states[t] = filled;
        }
        kept.push(agent);
    }
    out.agents = kept;
    let future_mask = out
        .agents
        .iter()
        .map(|a| {
            (0..scene.t_future)
                .map(|t| a.states.get(l_obs + t).map(|s| s.valid).unwrap_or(false))
                .collect()
        })
        .collect();
    Preprocessed {
        scene: out,
        future_mask,
        dropped,
    }
}

fn hold(s: &AgentState) -> AgentState {
    AgentState {
        valid: false,
        ..*s
    }
}

fn lerp_state(a: &AgentState, b: &AgentState, alpha: f64) -> AgentState {
    let lerp = |x: f64, y: f64| x + (y - x) * alpha;
    AgentState {
        x: lerp(a.x, b.x),
        y: lerp(a.y, b.y),
        vx: lerp(a.vx, b.vx),
        vy: lerp(a.vy, b.vy),
        heading: wrap_angle(a.heading + wrap_angle(b.heading - a.heading) * alpha),
        valid: false,
    }
}
