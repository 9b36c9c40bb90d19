//! Scripted baseline: greedy nearest-goal assignment, replanned at every
//! global step, driven by reciprocal avoidance and projected onto the four
//! discrete moves.

pub mod ablation;
pub mod avoidance;

use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvConfig, WorldState};
use crate::geom::Vec2;
use avoidance::{avoidance_velocity, AgentDisk, AvoidanceParams};

/// Speeds below this are treated as "no move".
pub const DEAD_ZONE: f64 = 1e-6;

/// Dominant-axis projection; ties go to the x-axis.
pub fn discretize(v: Vec2) -> Action {
    if v.norm() < DEAD_ZONE {
        return Action::Stay;
    }
    if v.x.abs() >= v.y.abs() {
        if v.x > 0.0 {
            Action::Right
        } else {
            Action::Left
        }
    } else if v.y > 0.0 {
        Action::Up
    } else {
        Action::Down
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedConfig {
    pub time_horizon: f64,
    /// Multiplier on the contact distance `2 * agent_radius`.
    pub safety_margin: f64,
}

impl Default for ScriptedConfig {
    fn default() -> Self {
        Self { time_horizon: 0.5, safety_margin: 1.1 }
    }
}

/// Agent-to-landmark assignment held between global steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPlan {
    /// Indexed by agent slot; `None` when no open landmark is left for it.
    pub assignment: Vec<Option<usize>>,
    pub replan_interval: usize,
}

impl ScriptedPlan {
    /// Active agents in index order claim their nearest open landmark.
    pub fn greedy(world: &WorldState, replan_interval: usize) -> Self {
        Self::replan(world, None, replan_interval)
    }

    /// Agents whose landmark is still open keep it; the rest claim the
    /// nearest open, unclaimed landmark in index order.
    pub fn replan(world: &WorldState, previous: Option<&ScriptedPlan>, replan_interval: usize) -> Self {
        let mut claimed = world.covered.clone();
        let mut assignment = vec![None; world.agent_pos.len()];
        let active = world.active_indices();
        if let Some(prev) = previous {
            for &i in &active {
                if let Some(g) = prev.assignment.get(i).copied().flatten() {
                    if !claimed[g] {
                        claimed[g] = true;
                        assignment[i] = Some(g);
                    }
                }
            }
        }
        for i in active {
            if assignment[i].is_some() {
                continue;
            }
            let p = world.agent_pos[i];
            let best = world
                .landmark_pos
                .iter()
                .enumerate()
                .filter(|(j, _)| !claimed[*j])
                .min_by(|a, b| p.distance(*a.1).total_cmp(&p.distance(*b.1)))
                .map(|(j, _)| j);
            if let Some(j) = best {
                claimed[j] = true;
            }
            assignment[i] = best;
        }
        Self { assignment, replan_interval }
    }
}

/// Scripted baseline policy with its own replanning clock.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub config: ScriptedConfig,
    pub plan: Option<ScriptedPlan>,
}

impl ScriptedPolicy {
    pub fn new(config: ScriptedConfig) -> Self {
        Self { config, plan: None }
    }

    pub fn act(&mut self, env: &EnvConfig, world: &WorldState) -> Vec<Action> {
        if world.t.is_multiple_of(env.global_interval) || self.plan.is_none() {
            self.plan = Some(ScriptedPlan::replan(world, self.plan.as_ref(), env.global_interval));
        }
        let plan = self.plan.as_ref().expect("plan set above");
        scripted_step(env, world, plan, &self.config)
    }
}

/// One action per active agent, in index order.
pub fn scripted_step(env: &EnvConfig, world: &WorldState, plan: &ScriptedPlan, cfg: &ScriptedConfig) -> Vec<Action> {
    let params = AvoidanceParams {
        time_horizon: cfg.time_horizon,
        radius: 2.0 * env.agent_radius * cfg.safety_margin,
        max_speed: env.max_speed,
        dt: env.dt,
    };
    let active = world.active_indices();
    let disks: Vec<AgentDisk> = active.iter().map(|&i| AgentDisk { position: world.agent_pos[i], velocity: world.agent_vel[i] }).collect();
    active
        .iter()
        .enumerate()
        .map(|(slot, &i)| {
            let goal = match plan.assignment.get(i).copied().flatten() {
                Some(g) if !world.covered[g] => g,
                _ => return Action::Stay,
            };
            let to_goal = world.landmark_pos[goal] - world.agent_pos[i];
            let preferred = to_goal.normalized().unwrap_or(Vec2::ZERO) * env.max_speed;
            let neighbors: Vec<AgentDisk> = disks.iter().enumerate().filter(|&(s, _)| s != slot).map(|(_, d)| *d).collect();
            let target = avoidance_velocity(&disks[slot], &neighbors, preferred, &params);
            // Push toward whatever velocity change the damped dynamics need.
            discretize(target - world.agent_vel[i] * (1.0 - env.damping))
        })
        .collect()
}
