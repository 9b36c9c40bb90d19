//! Deterministic 2D particle navigation arena.
//!
//! Agents are damped point masses driven by one of four axis-aligned forces
//! per step. Overlapping agents bounce off each other elastically, arena
//! walls clamp, and a landmark counts as covered once any active agent has
//! come within `cover_radius` of it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;

/// Placement attempts per entity before [`EnvError::Placement`] is raised.
const PLACEMENT_RETRIES: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("could not place entity {index} with separation {separation} in a {side} m arena")]
    Placement { index: usize, separation: f64, side: f64 },
    #[error("expected {expected} actions for the active agents, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("step called at t={t} with horizon {horizon}")]
    PastHorizon { t: usize, horizon: usize },
    #[error("agent {0} is not active")]
    InactiveAgent(usize),
    #[error("team size {requested} exceeds the configured cap {cap}")]
    TeamCap { requested: usize, cap: usize },
    #[error("team size must be at least 1")]
    EmptyTeam,
}

/// How landmark coverage is tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    /// A landmark stays covered once reached.
    #[default]
    Latching,
    /// A landmark is covered only while an agent is on it.
    Occupancy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_agents: usize,
    /// Side of the square arena in meters.
    pub map_side: f64,
    pub horizon: usize,
    /// Env steps between goal reassignments.
    pub global_interval: usize,
    pub agent_radius: f64,
    pub cover_radius: f64,
    pub dt: f64,
    pub damping: f64,
    pub accel: f64,
    pub max_speed: f64,
    /// Upper bound on the team size reachable through team switches.
    pub max_agents: usize,
    #[serde(default)]
    pub coverage: CoverageMode,
    pub seed: u64,
}

impl EnvConfig {
    /// Particle-world preset for `n` agents with explicit arena side and horizon.
    pub fn particle(n_agents: usize, map_side: f64, horizon: usize) -> Self {
        let dt = 0.1;
        Self {
            n_agents,
            map_side,
            horizon,
            global_interval: 3,
            agent_radius: 0.1,
            cover_radius: 0.15 * map_side / 2.0,
            dt,
            damping: 0.25,
            accel: 5.0,
            max_speed: 1.3 * map_side / (horizon as f64 * dt),
            max_agents: 64,
            coverage: CoverageMode::Latching,
            seed: 0,
        }
    }

    /// The three benchmark arenas: 5 agents on 4 m², 20 on 64 m², 50 on 400 m².
    /// Any other team size gets the arena of the nearest smaller benchmark.
    pub fn mpe(n_agents: usize) -> Self {
        let (side, horizon) = match n_agents {
            0..=5 => (2.0, 18),
            6..=20 => (8.0, 45),
            _ => (20.0, 90),
        };
        Self::particle(n_agents, side, horizon)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if self.n_agents < 1 {
            return bad("n_agents must be >= 1");
        }
        if self.global_interval < 1 {
            return bad("global_interval must be >= 1");
        }
        if self.max_agents < self.n_agents {
            return bad("max_agents must be >= n_agents");
        }
        let positive = [
            ("map_side", self.map_side),
            ("agent_radius", self.agent_radius),
            ("cover_radius", self.cover_radius),
            ("dt", self.dt),
            ("accel", self.accel),
            ("max_speed", self.max_speed),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be finite and positive"));
            }
        }
        if !(0.0..1.0).contains(&self.damping) {
            return bad("damping must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    /// Actions a learned policy chooses from, in head order.
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Action {
        Self::MOVES[i]
    }

    pub fn index(self) -> Option<usize> {
        Self::MOVES.iter().position(|&a| a == self)
    }

    pub fn direction(self) -> Vec2 {
        match self {
            Action::Up => Vec2::new(0.0, 1.0),
            Action::Down => Vec2::new(0.0, -1.0),
            Action::Left => Vec2::new(-1.0, 0.0),
            Action::Right => Vec2::new(1.0, 0.0),
            Action::Stay => Vec2::ZERO,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepEvents {
    /// Unordered pairs `(i, j)` with `i < j`.
    pub collisions: Vec<(usize, usize)>,
    pub newly_covered: Vec<usize>,
    pub all_covered: bool,
}

impl StepEvents {
    pub fn collisions_of(&self, agent: usize) -> usize {
        self.collisions.iter().filter(|&&(a, b)| a == agent || b == agent).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub t: usize,
    pub agent_pos: Vec<Vec2>,
    pub agent_vel: Vec<Vec2>,
    pub landmark_pos: Vec<Vec2>,
    pub covered: Vec<bool>,
    pub active: Vec<bool>,
    pub rng: ChaCha8Rng,
}

/// One agent's view of the world, normalized to the unit square.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub self_pos: Vec2,
    /// Velocity divided by `max_speed`.
    pub self_vel: Vec2,
    /// Active agents in index order, own entry included.
    pub agents: Vec<Vec2>,
    pub landmarks: Vec<(Vec2, bool)>,
}

impl WorldState {
    pub fn n_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }

    pub fn n_covered(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }

    pub fn all_covered(&self) -> bool {
        self.covered.iter().all(|&c| c)
    }
}

/// Fraction of landmarks currently covered.
pub fn coverage_fraction(state: &WorldState) -> f64 {
    if state.covered.is_empty() {
        return 1.0;
    }
    state.n_covered() as f64 / state.covered.len() as f64
}

fn sample_point(rng: &mut ChaCha8Rng, side: f64) -> Vec2 {
    Vec2::new(rng.gen::<f64>() * side, rng.gen::<f64>() * side)
}

fn spawn_agent(rng: &mut ChaCha8Rng, cfg: &EnvConfig, occupied: &[Vec2], index: usize) -> Result<Vec2, EnvError> {
    let sep = 2.0 * cfg.agent_radius;
    for _ in 0..PLACEMENT_RETRIES {
        let p = sample_point(rng, cfg.map_side);
        if occupied.iter().all(|q| p.distance(*q) >= sep) {
            return Ok(p);
        }
    }
    Err(EnvError::Placement { index, separation: sep, side: cfg.map_side })
}

pub fn reset(cfg: &EnvConfig) -> Result<WorldState, EnvError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent_pos = Vec::with_capacity(cfg.n_agents);
    for i in 0..cfg.n_agents {
        let p = spawn_agent(&mut rng, cfg, &agent_pos, i)?;
        agent_pos.push(p);
    }
    let landmark_pos = (0..cfg.n_agents).map(|_| sample_point(&mut rng, cfg.map_side)).collect();
    Ok(WorldState {
        t: 0,
        agent_vel: vec![Vec2::ZERO; cfg.n_agents],
        agent_pos,
        landmark_pos,
        covered: vec![false; cfg.n_agents],
        active: vec![true; cfg.n_agents],
        rng,
    })
}

/// Advance one step. `actions[i]` drives the i-th active agent in index order.
pub fn step(cfg: &EnvConfig, state: &WorldState, actions: &[Action]) -> Result<(WorldState, StepEvents), EnvError> {
    let mut next = state.clone();
    let events = step_in_place(cfg, &mut next, actions)?;
    Ok((next, events))
}

pub fn step_in_place(cfg: &EnvConfig, state: &mut WorldState, actions: &[Action]) -> Result<StepEvents, EnvError> {
    if state.t >= cfg.horizon {
        return Err(EnvError::PastHorizon { t: state.t, horizon: cfg.horizon });
    }
    let active = state.active_indices();
    if actions.len() != active.len() {
        return Err(EnvError::ActionCount { expected: active.len(), got: actions.len() });
    }
    let side = cfg.map_side;

    for (&i, &a) in active.iter().zip(actions) {
        let mut v = state.agent_vel[i] * (1.0 - cfg.damping) + a.direction() * (cfg.accel * cfg.dt);
        let speed = v.norm();
        if speed > cfg.max_speed {
            v = v * (cfg.max_speed / speed);
        }
        let mut p = state.agent_pos[i] + v * cfg.dt;
        clamp_to_arena(&mut p, &mut v, side);
        state.agent_pos[i] = p;
        state.agent_vel[i] = v;
    }

    let contact = 2.0 * cfg.agent_radius;
    let mut collisions = Vec::new();
    for (ai, &i) in active.iter().enumerate() {
        for &j in &active[ai + 1..] {
            let delta = state.agent_pos[j] - state.agent_pos[i];
            let dist = delta.norm();
            if dist >= contact {
                continue;
            }
            collisions.push((i, j));
            let normal = if dist > 1e-12 { delta * (1.0 / dist) } else { Vec2::new(1.0, 0.0) };
            // Equal masses: exchange normal components when approaching.
            let vi = state.agent_vel[i].dot(normal);
            let vj = state.agent_vel[j].dot(normal);
            if vi - vj > 0.0 {
                state.agent_vel[i] += normal * (vj - vi);
                state.agent_vel[j] += normal * (vi - vj);
            }
            let push = normal * (0.5 * (contact - dist));
            state.agent_pos[i] -= push;
            state.agent_pos[j] += push;
            for k in [i, j] {
                let (mut p, mut v) = (state.agent_pos[k], state.agent_vel[k]);
                clamp_to_arena(&mut p, &mut v, side);
                state.agent_pos[k] = p;
                state.agent_vel[k] = v;
            }
        }
    }

    let mut newly_covered = Vec::new();
    for (l, &lp) in state.landmark_pos.iter().enumerate() {
        let reached = active.iter().any(|&i| state.agent_pos[i].distance(lp) <= cfg.cover_radius);
        match cfg.coverage {
            CoverageMode::Latching => {
                if reached && !state.covered[l] {
                    state.covered[l] = true;
                    newly_covered.push(l);
                }
            }
            CoverageMode::Occupancy => {
                if reached && !state.covered[l] {
                    newly_covered.push(l);
                }
                state.covered[l] = reached;
            }
        }
    }
    state.t += 1;
    Ok(StepEvents { collisions, newly_covered, all_covered: state.all_covered() })
}

fn clamp_to_arena(p: &mut Vec2, v: &mut Vec2, side: f64) {
    if p.x < 0.0 {
        p.x = 0.0;
        v.x = 0.0;
    } else if p.x > side {
        p.x = side;
        v.x = 0.0;
    }
    if p.y < 0.0 {
        p.y = 0.0;
        v.y = 0.0;
    } else if p.y > side {
        p.y = side;
        v.y = 0.0;
    }
}

/// Change the number of active agents. Shrinking deactivates the highest
/// active indices; growing revives inactive slots (lowest first) and then
/// appends new ones, each at a fresh collision-free position at rest.
pub fn switch_team_size(cfg: &EnvConfig, state: &WorldState, n_new: usize) -> Result<WorldState, EnvError> {
    if n_new == 0 {
        return Err(EnvError::EmptyTeam);
    }
    if n_new > cfg.max_agents {
        return Err(EnvError::TeamCap { requested: n_new, cap: cfg.max_agents });
    }
    let mut next = state.clone();
    // Advance the generator so an identity switch is still observable.
    let _: u64 = next.rng.gen();
    let current = next.n_active();
    if n_new < current {
        let mut active = next.active_indices();
        for i in active.split_off(n_new) {
            next.active[i] = false;
            next.agent_vel[i] = Vec2::ZERO;
        }
    } else if n_new > current {
        let mut to_add = n_new - current;
        let mut slots: Vec<usize> = (0..next.active.len()).filter(|&i| !next.active[i]).collect();
        slots.truncate(to_add);
        to_add -= slots.len();
        let base = next.active.len();
        for extra in 0..to_add {
            next.agent_pos.push(Vec2::ZERO);
            next.agent_vel.push(Vec2::ZERO);
            next.active.push(false);
            slots.push(base + extra);
        }
        for i in slots {
            let occupied: Vec<Vec2> = next.active_indices().iter().map(|&j| next.agent_pos[j]).collect();
            let p = spawn_agent(&mut next.rng, cfg, &occupied, i)?;
            next.agent_pos[i] = p;
            next.agent_vel[i] = Vec2::ZERO;
            next.active[i] = true;
        }
    }
    Ok(next)
}

pub fn observe(cfg: &EnvConfig, state: &WorldState, agent: usize) -> Result<Observation, EnvError> {
    if !state.active.get(agent).copied().unwrap_or(false) {
        return Err(EnvError::InactiveAgent(agent));
    }
    let s = 1.0 / cfg.map_side;
    Ok(Observation {
        self_pos: state.agent_pos[agent] * s,
        self_vel: state.agent_vel[agent] * (1.0 / cfg.max_speed),
        agents: state.active_indices().iter().map(|&i| state.agent_pos[i] * s).collect(),
        landmarks: state.landmark_pos.iter().zip(&state.covered).map(|(&p, &c)| (p * s, c)).collect(),
    })
}
