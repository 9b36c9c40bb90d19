//! Two-level policies assembled from a matcher and an executor, plus a
//! common controller interface the harness drives.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::ablation::{random_goals, MlpExecutor, MlpMatcher};
use crate::baselines::{ScriptedConfig, ScriptedPolicy};
use crate::cae::{
    choose_action, exec_obs, goal_features, ExecObservation, ExecOutput, ExecState, ExecutorConfig, GraphExecutor, GOAL_FEATURES,
};
use crate::env::{Action, EnvConfig, WorldState};
use crate::mgm::{build_match_obs, AttentionMatcher, GoalDistribution, MatchObservation, MatcherConfig};
use crate::model::{DecisionMode, ModelError};
use crate::tensor::{Mlp, ParamStore, Tape, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum MatcherNet {
    Attention(AttentionMatcher),
    Mlp(MlpMatcher),
    /// Random open landmarks; nothing to learn.
    Random,
}

impl MatcherNet {
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), TensorError> {
        match self {
            MatcherNet::Attention(m) => m.init(store, rng),
            MatcherNet::Mlp(m) => m.init(store, rng),
            MatcherNet::Random => Ok(()),
        }
    }

    pub fn is_learned(&self) -> bool {
        !matches!(self, MatcherNet::Random)
    }

    pub fn log_probs(&self, tape: &mut Tape, store: &ParamStore, batch: &[&MatchObservation]) -> Result<Var, ModelError> {
        match self {
            MatcherNet::Attention(m) => m.log_probs(tape, store, batch),
            MatcherNet::Mlp(m) => m.log_probs(tape, store, batch),
            MatcherNet::Random => Err(ModelError::EmptyBatch),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecutorNet {
    Graph(GraphExecutor),
    Mlp(MlpExecutor),
}

impl ExecutorNet {
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), TensorError> {
        match self {
            ExecutorNet::Graph(e) => e.init(store, rng),
            ExecutorNet::Mlp(e) => e.init(store, rng),
        }
    }

    /// Recurrent width; zero for feed-forward executors.
    pub fn hidden_size(&self) -> usize {
        match self {
            ExecutorNet::Graph(e) => e.hidden_size(),
            ExecutorNet::Mlp(_) => 0,
        }
    }

    pub fn observe(&self, env: &EnvConfig, world: &WorldState, agent: usize, goal: Option<usize>) -> Result<ExecObservation, ModelError> {
        match self {
            ExecutorNet::Graph(_) => exec_obs(env, world, agent, goal),
            ExecutorNet::Mlp(e) => e.observe(env, world, agent, goal),
        }
    }

    /// `hidden` is a `batch x hidden_size` array (ignored when that is 0).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &[&ExecObservation],
        hidden: &Array2<f64>,
    ) -> Result<ExecOutput, ModelError> {
        match self {
            ExecutorNet::Graph(e) => {
                let h = tape.constant(hidden.clone());
                e.forward(tape, store, batch, h)
            }
            ExecutorNet::Mlp(e) => e.forward(tape, store, batch),
        }
    }
}

/// Width of [`global_state`] for a team of `n` agents and `n` landmarks.
pub fn global_state_width(n: usize) -> usize {
    4 * n + 3 * n + 1
}

/// Centralized critic view: active agents (position, velocity), landmarks
/// (position, covered), elapsed fraction of the horizon.
pub fn global_state(env: &EnvConfig, world: &WorldState) -> Vec<f64> {
    let s = 1.0 / env.map_side;
    let half = 0.5 * env.map_side;
    let vs = 1.0 / env.max_speed;
    let mut v = Vec::with_capacity(global_state_width(world.landmark_pos.len()));
    for i in world.active_indices() {
        let (p, q) = (world.agent_pos[i], world.agent_vel[i]);
        v.extend([(p.x - half) * s, (p.y - half) * s, q.x * vs, q.y * vs]);
    }
    for (j, l) in world.landmark_pos.iter().enumerate() {
        v.extend([(l.x - half) * s, (l.y - half) * s, world.covered[j] as u8 as f64]);
    }
    v.push(world.t as f64 / env.horizon.max(1) as f64);
    v
}

/// Matcher critic input: global state and the agent's own position.
pub fn matcher_critic_input(env: &EnvConfig, world: &WorldState, agent: usize) -> Vec<f64> {
    let mut v = global_state(env, world);
    let half = 0.5 * env.map_side;
    let p = world.agent_pos[agent];
    v.extend([(p.x - half) / env.map_side, (p.y - half) / env.map_side]);
    v
}

/// Executor critic input: global state and the agent's goal features.
pub fn executor_critic_input(env: &EnvConfig, world: &WorldState, agent: usize, goal: usize) -> Vec<f64> {
    let mut v = global_state(env, world);
    v.extend(goal_features(env, world, agent, goal).iter().copied());
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Attention matcher with the graph executor.
    Masp,
    /// Random goals with the graph executor.
    RandomGoal,
    /// MLP matcher with the graph executor.
    MgmMlp,
    /// Attention matcher with an MLP executor.
    CaeMlp,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Masp => "masp",
            PolicyKind::RandomGoal => "random_goal",
            PolicyKind::MgmMlp => "mgm_mlp",
            PolicyKind::CaeMlp => "cae_mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [PolicyKind::Masp, PolicyKind::RandomGoal, PolicyKind::MgmMlp, PolicyKind::CaeMlp].into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelWidths {
    pub embed: usize,
    pub heads: usize,
    pub hidden: usize,
    pub critic_hidden: usize,
}

impl Default for ModelWidths {
    fn default() -> Self {
        Self { embed: 64, heads: 4, hidden: 64, critic_hidden: 64 }
    }
}

/// Architecture of a trainable two-level policy and its critics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: PolicyKind,
    /// Team size the critics (and MLP parts) are sized for.
    pub n_agents: usize,
    pub matcher: MatcherNet,
    pub executor: ExecutorNet,
    pub matcher_critic: Mlp,
    pub executor_critic: Mlp,
}

impl ModelSpec {
    pub fn new(kind: PolicyKind, n_agents: usize, w: ModelWidths) -> Result<Self, TensorError> {
        let mcfg = MatcherConfig { embed: w.embed, heads: w.heads, ..MatcherConfig::default() };
        let ecfg = ExecutorConfig { hidden: w.hidden };
        let matcher = match kind {
            PolicyKind::Masp | PolicyKind::CaeMlp => MatcherNet::Attention(AttentionMatcher::new("mgm", mcfg)?),
            PolicyKind::MgmMlp => MatcherNet::Mlp(MlpMatcher::new("mgm", n_agents, n_agents, w.embed)),
            PolicyKind::RandomGoal => MatcherNet::Random,
        };
        let executor = match kind {
            PolicyKind::CaeMlp => ExecutorNet::Mlp(MlpExecutor::new("cae", n_agents, w.hidden)),
            _ => ExecutorNet::Graph(GraphExecutor::new("cae", ecfg)),
        };
        let g = global_state_width(n_agents);
        let c = w.critic_hidden;
        Ok(Self {
            kind,
            n_agents,
            matcher,
            executor,
            matcher_critic: Mlp::new("critic.matcher", &[g + 2, c, c, 1]),
            executor_critic: Mlp::new("critic.executor", &[g + GOAL_FEATURES, c, c, 1]),
        })
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<ParamStore, TensorError> {
        let mut store = ParamStore::new();
        self.matcher.init(&mut store, rng)?;
        self.executor.init(&mut store, rng)?;
        if self.matcher.is_learned() {
            self.matcher_critic.init(&mut store, 1.0, rng)?;
        }
        self.executor_critic.init(&mut store, 1.0, rng)?;
        Ok(store)
    }
}

/// Parameters together with the architecture that reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

impl Model {
    pub fn save(&self, path: &Path, extra: BTreeMap<String, serde_json::Value>) -> Result<(), TensorError> {
        let mut meta = extra;
        meta.insert("spec".into(), serde_json::to_value(&self.spec)?);
        self.params.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let (params, meta) = ParamStore::load(path)?;
        let spec = meta.get("spec").cloned().ok_or_else(|| TensorError::MissingParam("spec (checkpoint metadata)".into()))?;
        Ok(Self { spec: serde_json::from_value(spec)?, params })
    }

    /// Swap in a different matcher while keeping every executor tensor.
    pub fn with_matcher(&self, kind: PolicyKind, matcher: MatcherNet) -> Self {
        let mut spec = self.spec.clone();
        spec.kind = kind;
        spec.matcher = matcher;
        Self { spec, params: self.params.clone() }
    }
}

/// What a controller did at one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepDecision {
    /// One per active agent, index order.
    pub actions: Vec<Action>,
    /// `(agent, landmark)` pairs decided at this step, if it was a global step.
    pub assignments: Option<Vec<(usize, usize)>>,
}

/// Anything the harness can run for an episode.
pub trait Controller {
    fn name(&self) -> String;
    fn begin_episode(&mut self, env: &EnvConfig, world: &WorldState);
    fn act(&mut self, env: &EnvConfig, world: &WorldState, rng: &mut dyn rand::RngCore) -> Result<StepDecision, ModelError>;
}

/// Runs a [`Model`]: goals at global steps (and for agents that have none),
/// executor actions every step. Agents without a goal stay put.
#[derive(Debug, Clone)]
pub struct HierController {
    pub model: Model,
    pub mode: DecisionMode,
    pub state: ExecState,
}

impl HierController {
    pub fn new(model: Model, mode: DecisionMode) -> Self {
        Self { model, mode, state: ExecState::default() }
    }

    pub fn goals(&self) -> &[Option<usize>] {
        &self.state.last_goal
    }

    fn decide_goals(
        &mut self,
        env: &EnvConfig,
        world: &WorldState,
        agents: &[usize],
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<(usize, usize)>, ModelError> {
        if world.all_covered() || agents.is_empty() {
            return Ok(Vec::new());
        }
        let spec = &self.model.spec;
        match &spec.matcher {
            MatcherNet::Random => Ok(random_goals(world, agents, rng)),
            net => {
                let obs: Vec<MatchObservation> = agents.iter().map(|&a| build_match_obs(env, world, a)).collect::<Result<_, _>>()?;
                let refs: Vec<&MatchObservation> = obs.iter().collect();
                let mut tape = Tape::new();
                let lp = net.log_probs(&mut tape, &self.model.params, &refs)?;
                let lp = tape.value(lp);
                Ok(agents
                    .iter()
                    .enumerate()
                    .map(|(r, &a)| {
                        let d = GoalDistribution::from_log_probs(lp.row(r).as_slice().expect("row-major"), self.mode, rng);
                        (a, d.chosen)
                    })
                    .collect())
            }
        }
    }
}

impl Controller for HierController {
    fn name(&self) -> String {
        self.model.spec.kind.name().to_string()
    }

    fn begin_episode(&mut self, _env: &EnvConfig, world: &WorldState) {
        self.state = ExecState::new(world.agent_pos.len(), self.model.spec.executor.hidden_size());
    }

    fn act(&mut self, env: &EnvConfig, world: &WorldState, rng: &mut dyn rand::RngCore) -> Result<StepDecision, ModelError> {
        let width = self.model.spec.executor.hidden_size();
        self.state.ensure(world.agent_pos.len(), width);
        let active = world.active_indices();
        let global = world.t.is_multiple_of(env.global_interval);
        let assignments = if global {
            let decided = self.decide_goals(env, world, &active, rng)?;
            for &(a, g) in &decided {
                self.state.last_goal[a] = Some(g);
            }
            Some(decided)
        } else {
            None
        };
        let acting: Vec<usize> = active.iter().copied().filter(|&a| self.state.last_goal[a].is_some()).collect();
        let mut actions = vec![Action::Stay; active.len()];
        if !acting.is_empty() {
            let exec = &self.model.spec.executor;
            let obs: Vec<ExecObservation> =
                acting.iter().map(|&a| exec.observe(env, world, a, self.state.last_goal[a])).collect::<Result<_, _>>()?;
            let refs: Vec<&ExecObservation> = obs.iter().collect();
            let mut tape = Tape::new();
            let out = exec.forward(&mut tape, &self.model.params, &refs, &self.state.hidden_rows(&acting, width))?;
            if let Some(h) = out.hidden {
                let h = tape.value(h);
                for (r, &a) in acting.iter().enumerate() {
                    self.state.hidden[a] = h.row(r).to_vec();
                }
            }
            let logits = tape.value(out.logits);
            for (r, &a) in acting.iter().enumerate() {
                let c = choose_action(logits.row(r).as_slice().expect("row-major"), self.mode, rng);
                let slot = active.iter().position(|&x| x == a).expect("acting agents are active");
                actions[slot] = c.action;
            }
        }
        Ok(StepDecision { actions, assignments })
    }
}

/// Greedy assignment with reciprocal avoidance behind the controller trait.
#[derive(Debug, Clone)]
pub struct ScriptedController {
    pub inner: ScriptedPolicy,
}

impl ScriptedController {
    pub fn new(config: ScriptedConfig) -> Self {
        Self { inner: ScriptedPolicy::new(config) }
    }
}

impl Controller for ScriptedController {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn begin_episode(&mut self, _env: &EnvConfig, _world: &WorldState) {
        self.inner.plan = None;
    }

    fn act(&mut self, env: &EnvConfig, world: &WorldState, _rng: &mut dyn rand::RngCore) -> Result<StepDecision, ModelError> {
        let global = world.t.is_multiple_of(env.global_interval) || self.inner.plan.is_none();
        let actions = self.inner.act(env, world);
        let assignments = if global {
            self.inner.plan.as_ref().map(|p| p.assignment.iter().enumerate().filter_map(|(a, g)| g.map(|g| (a, g))).collect())
        } else {
            None
        };
        Ok(StepDecision { actions, assignments })
    }
}
