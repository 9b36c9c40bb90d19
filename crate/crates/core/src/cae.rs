//! Action executor: fixed-size agent groups around the acting agent, a
//! graph merger over those groups, a goal encoder, a recurrent state and a
//! categorical head over the four moves.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, EnvConfig, EnvError, StepEvents, WorldState};
use crate::model::{choose, DecisionMode, ModelError};
use crate::tensor::{GcnLayer, GruCell, Linear, ParamStore, Tape, TensorError, Var};

pub const GROUP_SIZE: usize = 3;
pub const NODE_FEATURES: usize = 6;
pub const GOAL_FEATURES: usize = 7;
pub const N_ACTIONS: usize = 4;

/// Agent groups for one focal agent; the focal agent leads every group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSet {
    pub focal: usize,
    pub groups: Vec<[usize; GROUP_SIZE]>,
}

impl GroupSet {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

/// Number of groups for `n_active` agents.
pub fn group_count(n_active: usize) -> usize {
    let others = n_active.saturating_sub(1);
    others.div_ceil(GROUP_SIZE - 1).max(1)
}

/// Other active agents sorted by distance to the focal agent (index breaks
/// ties), chunked in pairs; a short last chunk repeats its nearest member.
pub fn make_groups(world: &WorldState, focal: usize) -> Result<GroupSet, ModelError> {
    if !world.active.get(focal).copied().unwrap_or(false) {
        return Err(EnvError::InactiveAgent(focal).into());
    }
    let me = world.agent_pos[focal];
    let mut others: Vec<usize> = world.active_indices().into_iter().filter(|&i| i != focal).collect();
    others.sort_by(|&a, &b| me.distance(world.agent_pos[a]).total_cmp(&me.distance(world.agent_pos[b])).then(a.cmp(&b)));
    if others.is_empty() {
        return Ok(GroupSet { focal, groups: vec![[focal; GROUP_SIZE]] });
    }
    let groups = others
        .chunks(GROUP_SIZE - 1)
        .map(|chunk| {
            let mut g = [focal; GROUP_SIZE];
            for (slot, member) in g.iter_mut().enumerate().skip(1) {
                *member = *chunk.get(slot - 1).unwrap_or(&chunk[0]);
            }
            g
        })
        .collect();
    Ok(GroupSet { focal, groups })
}

/// Node features of `agent` as seen from `focal`.
fn node_row(env: &EnvConfig, world: &WorldState, focal: usize, agent: usize) -> [f64; NODE_FEATURES] {
    let s = 1.0 / env.map_side;
    let v = 1.0 / env.max_speed;
    let d = world.agent_pos[agent] - world.agent_pos[focal];
    let vel = world.agent_vel[agent];
    [d.x * s, d.y * s, vel.x * v, vel.y * v, d.norm() * s, (agent == focal) as u8 as f64]
}

/// Everything the executor reads for one agent at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecObservation {
    /// `groups * GROUP_SIZE x NODE_FEATURES`, focal row first in each group.
    pub nodes: Array2<f64>,
    pub groups: usize,
    /// `1 x GOAL_FEATURES`.
    pub goal: Array2<f64>,
}

pub fn goal_features(env: &EnvConfig, world: &WorldState, agent: usize, goal: usize) -> Array2<f64> {
    let s = 1.0 / env.map_side;
    let half = 0.5 * env.map_side;
    let p = world.agent_pos[agent];
    let rel = world.landmark_pos[goal] - p;
    let v = world.agent_vel[agent] * (1.0 / env.max_speed);
    let f = [rel.x * s, rel.y * s, rel.norm() * s, v.x, v.y, (p.x - half) * s, (p.y - half) * s];
    Array2::from_shape_vec((1, GOAL_FEATURES), f.to_vec()).expect("fixed width")
}

pub fn exec_obs(env: &EnvConfig, world: &WorldState, agent: usize, goal: Option<usize>) -> Result<ExecObservation, ModelError> {
    let goal = goal.ok_or(ModelError::UnsetGoal(agent))?;
    let groups = make_groups(world, agent)?;
    let mut nodes = Array2::zeros((groups.len() * GROUP_SIZE, NODE_FEATURES));
    for (gi, g) in groups.groups.iter().enumerate() {
        for (slot, &member) in g.iter().enumerate() {
            let row = node_row(env, world, agent, member);
            nodes.row_mut(gi * GROUP_SIZE + slot).assign(&ndarray::ArrayView1::from(&row));
        }
    }
    Ok(ExecObservation { nodes, groups: groups.len(), goal: goal_features(env, world, agent, goal) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub hidden: usize,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self { hidden: 64 }
    }
}

/// One merger block: relu encoder, group convolution, residual sum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeBlock {
    pub encode: Linear,
    pub conv: GcnLayer,
}

impl MergeBlock {
    fn new(path: &str, input: usize, width: usize) -> Self {
        Self { encode: Linear::new(format!("{path}.encode"), input, width), conv: GcnLayer::new(format!("{path}.gcn"), width, width) }
    }

    fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), TensorError> {
        self.encode.init(store, 1.0, rng)?;
        self.conv.init(store, rng)
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let e = self.encode.forward(tape, store, x)?;
        let e = tape.relu(e);
        let m = self.conv.forward(tape, store, e, GROUP_SIZE)?;
        tape.add(e, m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphExecutor {
    pub config: ExecutorConfig,
    pub blocks: Vec<MergeBlock>,
    pub goal_hidden: Linear,
    pub goal_out: Linear,
    pub fuse: Linear,
    pub cell: GruCell,
    pub head: Linear,
}

/// Head logits and the next recurrent state for a batch.
#[derive(Debug, Clone, Copy)]
pub struct ExecOutput {
    pub logits: Var,
    pub hidden: Option<Var>,
}

impl GraphExecutor {
    pub fn new(prefix: &str, config: ExecutorConfig) -> Self {
        let d = config.hidden;
        Self {
            config,
            blocks: vec![
                MergeBlock::new(&format!("{prefix}.merger.0"), NODE_FEATURES, d),
                MergeBlock::new(&format!("{prefix}.merger.1"), d, d),
            ],
            goal_hidden: Linear::new(format!("{prefix}.goal.0"), GOAL_FEATURES, d),
            goal_out: Linear::new(format!("{prefix}.goal.1"), d, d),
            fuse: Linear::new(format!("{prefix}.state.fuse"), 2 * d, d),
            cell: GruCell::new(format!("{prefix}.state.gru"), d, d),
            head: Linear::new(format!("{prefix}.action"), d, N_ACTIONS),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), TensorError> {
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.goal_hidden.init(store, 1.0, rng)?;
        self.goal_out.init(store, 1.0, rng)?;
        self.fuse.init(store, 1.0, rng)?;
        self.cell.init(store, rng)?;
        self.head.init(store, 0.01, rng)
    }

    /// Focal feature per sample: `batch x d`, from `batch * groups * 3` node
    /// rows.
    pub fn graph_merge(&self, tape: &mut Tape, store: &ParamStore, nodes: Var, groups: usize) -> Result<Var, TensorError> {
        let mut h = nodes;
        for b in &self.blocks {
            h = b.forward(tape, store, h)?;
        }
        let rows = tape.shape(h).0;
        let focal: Vec<usize> = (0..rows / GROUP_SIZE).map(|g| g * GROUP_SIZE).collect();
        let f = tape.gather_rows(h, &focal)?;
        tape.group_mean_rows(f, groups)
    }

    pub fn goal_encode(&self, tape: &mut Tape, store: &ParamStore, goal: Var) -> Result<Var, TensorError> {
        let h = self.goal_hidden.forward(tape, store, goal)?;
        let h = tape.relu(h);
        let h = self.goal_out.forward(tape, store, h)?;
        Ok(tape.relu(h))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &[&ExecObservation], hidden: Var) -> Result<ExecOutput, ModelError> {
        let first = batch.first().ok_or(ModelError::EmptyBatch)?;
        let groups = first.groups;
        if batch.iter().any(|o| o.groups != groups) {
            return Err(ModelError::RaggedBatch);
        }
        let nodes = tape.constant(crate::mgm::stack(batch.iter().map(|o| &o.nodes)));
        let goals = tape.constant(crate::mgm::stack(batch.iter().map(|o| &o.goal)));
        let focal = self.graph_merge(tape, store, nodes, groups)?;
        let goal = self.goal_encode(tape, store, goals)?;
        let joined = tape.concat_cols(&[focal, goal])?;
        let fused = self.fuse.forward(tape, store, joined)?;
        let fused = tape.relu(fused);
        let h = self.cell.forward(tape, store, fused, hidden)?;
        let logits = self.head.forward(tape, store, h)?;
        Ok(ExecOutput { logits, hidden: Some(h) })
    }
}

/// Per-episode executor memory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExecState {
    /// Indexed by agent slot; resized when the team grows.
    pub hidden: Vec<Vec<f64>>,
    pub last_goal: Vec<Option<usize>>,
}

impl ExecState {
    pub fn new(slots: usize, width: usize) -> Self {
        Self { hidden: vec![vec![0.0; width]; slots], last_goal: vec![None; slots] }
    }

    /// Makes room for `slots` agents; new slots start from zero state.
    pub fn ensure(&mut self, slots: usize, width: usize) {
        while self.hidden.len() < slots {
            self.hidden.push(vec![0.0; width]);
            self.last_goal.push(None);
        }
    }

    pub fn hidden_rows(&self, agents: &[usize], width: usize) -> Array2<f64> {
        let mut out = Array2::zeros((agents.len(), width));
        for (r, &a) in agents.iter().enumerate() {
            for (c, &v) in self.hidden[a].iter().enumerate() {
                out[[r, c]] = v;
            }
        }
        out
    }
}

/// Action sampled from a row of logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChoice {
    pub action: Action,
    pub index: usize,
    pub log_prob: f64,
    pub probs: Vec<f64>,
}

pub fn choose_action<R: Rng + ?Sized>(logits: &[f64], mode: DecisionMode, rng: &mut R) -> ActionChoice {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let index = choose(&probs, mode, rng);
    ActionChoice { action: Action::from_index(index), index, log_prob: (logits[index] - m) - z.ln(), probs }
}

/// Runs the executor for `agents` (slot indices, with their goals) and
/// writes the new recurrent state back into `state`.
#[allow(clippy::too_many_arguments)]
pub fn cae_act<R: Rng + ?Sized>(
    env: &EnvConfig,
    world: &WorldState,
    executor: &GraphExecutor,
    store: &ParamStore,
    state: &mut ExecState,
    agents: &[usize],
    mode: DecisionMode,
    rng: &mut R,
) -> Result<Vec<ActionChoice>, ModelError> {
    let width = executor.hidden_size();
    state.ensure(world.agent_pos.len(), width);
    let obs: Vec<ExecObservation> = agents.iter().map(|&a| exec_obs(env, world, a, state.last_goal[a])).collect::<Result<_, _>>()?;
    let refs: Vec<&ExecObservation> = obs.iter().collect();
    let mut tape = Tape::new();
    let h0 = tape.constant(state.hidden_rows(agents, width));
    let out = executor.forward(&mut tape, store, &refs, h0)?;
    if let Some(h) = out.hidden {
        let h = tape.value(h);
        for (r, &a) in agents.iter().enumerate() {
            state.hidden[a] = h.row(r).to_vec();
        }
    }
    let logits = tape.value(out.logits);
    Ok((0..agents.len()).map(|r| choose_action(logits.row(r).as_slice().expect("row-major"), mode, rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Weight of the completion bonus.
    pub alpha: f64,
    /// Weight of the distance progress.
    pub beta: f64,
    /// Weight of the collision penalty.
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 1.0, gamma: 1.0 }
    }
}

/// Terms of the executor reward for one agent and one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub bonus: f64,
    pub progress: f64,
    pub collision: f64,
}

impl RewardTerms {
    pub fn total(&self, cfg: &RewardConfig) -> f64 {
        cfg.alpha * self.bonus + cfg.beta * self.progress + cfg.gamma * self.collision
    }
}

pub fn reward_terms(before: &WorldState, after: &WorldState, events: &StepEvents, agent: usize, goal: usize) -> RewardTerms {
    let mut bonus = 0.0;
    if !before.covered[goal] && after.covered[goal] {
        bonus += 1.0;
        if events.all_covered {
            bonus += 1.0;
        }
    }
    let g = before.landmark_pos[goal];
    let progress = before.agent_pos[agent].distance(g) - after.agent_pos[agent].distance(g);
    RewardTerms { bonus, progress, collision: -(events.collisions_of(agent) as f64) }
}

pub fn executor_reward(before: &WorldState, after: &WorldState, events: &StepEvents, agent: usize, goal: usize, cfg: &RewardConfig) -> f64 {
    reward_terms(before, after, events, agent, goal).total(cfg)
}
