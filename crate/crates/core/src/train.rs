//! MAPPO over the two-level policy: matcher transitions at global steps,
//! executor transitions every step, each stream with its own critic.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assign::{cost_matrix, matcher_reward, AssignError, AssignmentOutcome};
use crate::cae::{choose_action, executor_reward, ExecObservation, ExecState, RewardConfig};
use crate::env::{reset, step_in_place, Action, EnvConfig, EnvError, WorldState};
use crate::harness::{evaluate_model, QuickEval};
use crate::mgm::{build_match_obs, GoalDistribution, MatchObservation};
use crate::model::{DecisionMode, ModelError};
use crate::policy::{executor_critic_input, matcher_critic_input, Model, ModelSpec, ModelWidths, PolicyKind};
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Gradients, Mlp, ParamStore, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Assign(#[from] AssignError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("stream lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("non-finite {what} at update {update}")]
    Diverged { what: String, update: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: PolicyKind,
    pub widths: ModelWidths,
    /// Discount per environment step.
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub total_env_steps: usize,
    /// Episodes collected per update.
    pub parallel_envs: usize,
    pub reward: RewardConfig,
    /// Greedy evaluation every this many env steps (0 disables).
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Masp,
            widths: ModelWidths::default(),
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            lr: 3e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            total_env_steps: 2_000_000,
            parallel_envs: 16,
            reward: RewardConfig::default(),
            eval_interval: 50_000,
            eval_episodes: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if self.clip <= 0.0 {
            return bad("clip must be positive");
        }
        if self.epochs == 0 || self.minibatches == 0 || self.parallel_envs == 0 || self.total_env_steps == 0 {
            return bad("counts must be at least 1");
        }
        if self.lr < 0.0 || self.entropy_coef < 0.0 || self.value_coef < 0.0 || self.max_grad_norm <= 0.0 {
            return bad("coefficients must be non-negative");
        }
        let (a, b, g) = (self.reward.alpha, self.reward.beta, self.reward.gamma);
        if a < 0.0 || b < 0.0 || g < 0.0 {
            return bad("reward weights must be non-negative");
        }
        Ok(())
    }
}

/// A training run as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub env: EnvConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainJob {
    fn default() -> Self {
        Self { env: EnvConfig::mpe(5), train: TrainConfig::default(), output_dir: None }
    }
}

/// One decision of one agent at a global step.
#[derive(Debug, Clone)]
pub struct MatcherSample {
    pub obs: MatchObservation,
    pub critic_input: Vec<f64>,
    pub goal: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// Last decision of the agent's episode.
    pub done: bool,
}

/// One action of one agent at one step.
#[derive(Debug, Clone)]
pub struct ExecutorSample {
    pub obs: ExecObservation,
    pub hidden: Vec<f64>,
    pub critic_input: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

/// Transitions of whole episodes, grouped per agent so the reward streams
/// keep their time order.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    /// `[trajectory][decision]`
    pub matcher: Vec<Vec<MatcherSample>>,
    /// `[trajectory][step]`
    pub executor: Vec<Vec<ExecutorSample>>,
    pub env_steps: usize,
    pub episodes: usize,
}

impl RolloutBuffer {
    pub fn matcher_len(&self) -> usize {
        self.matcher.iter().map(Vec::len).sum()
    }

    pub fn executor_len(&self) -> usize {
        self.executor.iter().map(Vec::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        let m = self.matcher.iter().flatten().all(|s| s.reward.is_finite() && s.value.is_finite() && s.log_prob.is_finite());
        let e = self.executor.iter().flatten().all(|s| s.reward.is_finite() && s.value.is_finite() && s.log_prob.is_finite());
        m && e
    }
}

/// Advantages and returns by generalized advantage estimation.
///
/// `dones[t]` marks that the episode ended after step `t`; `last_value`
/// bootstraps a stream cut off before its episode ended. `discount` is the
/// per-transition discount.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    discount: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let n = rewards.len();
    if values.len() != n {
        return Err(TrainError::Length(n, values.len()));
    }
    if dones.len() != n {
        return Err(TrainError::Length(n, dones.len()));
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let (next_v, carry) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 < n {
            (values[t + 1], running)
        } else {
            (last_value, 0.0)
        };
        let delta = rewards[t] + discount * next_v - values[t];
        running = delta + discount * lambda * carry;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Rescale to zero mean and unit standard deviation.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for x in xs.iter_mut() {
        *x = (*x - mean) / std;
    }
}

fn critic_values(tape: &mut Tape, store: &ParamStore, critic: &Mlp, rows: &[&Vec<f64>]) -> Result<Var, TensorError> {
    let width = rows[0].len();
    let mut x = Array2::zeros((rows.len(), width));
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            x[[r, c]] = v;
        }
    }
    let x = tape.constant(x);
    critic.forward(tape, store, x)
}

fn predict(store: &ParamStore, critic: &Mlp, rows: &[&Vec<f64>]) -> Result<Vec<f64>, TensorError> {
    let mut tape = Tape::new();
    let v = critic_values(&mut tape, store, critic, rows)?;
    Ok(tape.value(v).iter().copied().collect())
}

struct EnvSlot {
    world: WorldState,
    state: ExecState,
    done: bool,
    /// Open trajectory index per agent slot.
    match_traj: Vec<usize>,
    exec_traj: Vec<usize>,
}

/// Plays `episodes` full episodes in lockstep with sampled decisions.
pub fn collect_rollout<R: Rng>(
    env: &EnvConfig,
    model: &Model,
    reward: &RewardConfig,
    episodes: usize,
    rng: &mut R,
) -> Result<RolloutBuffer, TrainError> {
    let spec = &model.spec;
    let store = &model.params;
    let width = spec.executor.hidden_size();
    let mut buf = RolloutBuffer::default();
    let mut slots = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let world = reset(&env.clone().with_seed(rng.gen()))?;
        let n = world.agent_pos.len();
        let mut match_traj = Vec::with_capacity(n);
        let mut exec_traj = Vec::with_capacity(n);
        for _ in 0..n {
            if spec.matcher.is_learned() {
                match_traj.push(buf.matcher.len());
                buf.matcher.push(Vec::new());
            }
            exec_traj.push(buf.executor.len());
            buf.executor.push(Vec::new());
        }
        slots.push(EnvSlot { world, state: ExecState::new(n, width), done: false, match_traj, exec_traj });
    }
    buf.episodes = episodes;

    loop {
        let live: Vec<usize> = (0..slots.len()).filter(|&i| !slots[i].done).collect();
        if live.is_empty() {
            break;
        }
        // Goal decisions for every environment at a global step.
        let deciding: Vec<usize> = live.iter().copied().filter(|&i| slots[i].world.t % env.global_interval == 0).collect();
        if !deciding.is_empty() {
            decide_goals(env, model, &mut slots, &deciding, &mut buf, rng)?;
        }
        // Executor actions for every live environment at once.
        let mut obs = Vec::new();
        let mut who = Vec::new();
        for &i in &live {
            let s = &slots[i];
            for a in s.world.active_indices() {
                obs.push(spec.executor.observe(env, &s.world, a, s.state.last_goal[a])?);
                who.push((i, a));
            }
        }
        let mut hidden = Array2::zeros((who.len(), width));
        for (r, &(i, a)) in who.iter().enumerate() {
            for (c, &v) in slots[i].state.hidden[a].iter().enumerate() {
                hidden[[r, c]] = v;
            }
        }
        let refs: Vec<&ExecObservation> = obs.iter().collect();
        let mut tape = Tape::new();
        let out = spec.executor.forward(&mut tape, store, &refs, &hidden)?;
        let logits = tape.value(out.logits).clone();
        let new_hidden = out.hidden.map(|h| tape.value(h).clone());
        let critic_rows: Vec<Vec<f64>> = who
            .iter()
            .map(|&(i, a)| {
                let goal = slots[i].state.last_goal[a].ok_or(ModelError::UnsetGoal(a))?;
                Ok(executor_critic_input(env, &slots[i].world, a, goal))
            })
            .collect::<Result<_, ModelError>>()?;
        let values = predict(store, &spec.executor_critic, &critic_rows.iter().collect::<Vec<_>>())?;

        let mut actions: BTreeMap<usize, Vec<Action>> = BTreeMap::new();
        let mut pending = Vec::with_capacity(who.len());
        for (r, (&(i, a), obs)) in who.iter().zip(obs).enumerate() {
            let c = choose_action(logits.row(r).as_slice().expect("row-major"), DecisionMode::Sample, rng);
            actions.entry(i).or_default().push(c.action);
            let hidden_in = slots[i].state.hidden[a].clone();
            if let Some(h) = &new_hidden {
                slots[i].state.hidden[a] = h.row(r).to_vec();
            }
            pending.push(ExecutorSample {
                obs,
                hidden: hidden_in,
                critic_input: critic_rows[r].clone(),
                action: c.index,
                log_prob: c.log_prob,
                value: values[r],
                reward: 0.0,
                done: false,
            });
        }
        let mut before: BTreeMap<usize, WorldState> = BTreeMap::new();
        let mut events = BTreeMap::new();
        for (&i, acts) in &actions {
            before.insert(i, slots[i].world.clone());
            let ev = step_in_place(env, &mut slots[i].world, acts)?;
            buf.env_steps += 1;
            events.insert(i, ev);
        }
        for (&(i, a), mut sample) in who.iter().zip(pending) {
            let s = &slots[i];
            let goal = s.state.last_goal[a].ok_or(ModelError::UnsetGoal(a))?;
            sample.reward = executor_reward(&before[&i], &s.world, &events[&i], a, goal, reward);
            let finished = s.world.all_covered() || s.world.t >= env.horizon;
            sample.done = finished;
            buf.executor[s.exec_traj[a]].push(sample);
        }
        for &i in &live {
            let s = &mut slots[i];
            if s.world.all_covered() || s.world.t >= env.horizon {
                s.done = true;
                for &tr in &s.match_traj {
                    if let Some(last) = buf.matcher[tr].last_mut() {
                        last.done = true;
                    }
                }
            }
        }
    }
    buf.matcher.retain(|t| !t.is_empty());
    buf.executor.retain(|t| !t.is_empty());
    Ok(buf)
}

fn decide_goals<R: Rng>(
    env: &EnvConfig,
    model: &Model,
    slots: &mut [EnvSlot],
    deciding: &[usize],
    buf: &mut RolloutBuffer,
    rng: &mut R,
) -> Result<(), TrainError> {
    let spec = &model.spec;
    if !spec.matcher.is_learned() {
        for &i in deciding {
            let s = &mut slots[i];
            let agents = s.world.active_indices();
            for (a, g) in crate::baselines::ablation::random_goals(&s.world, &agents, rng) {
                s.state.last_goal[a] = Some(g);
            }
        }
        return Ok(());
    }
    let mut obs = Vec::new();
    let mut who = Vec::new();
    for &i in deciding {
        for a in slots[i].world.active_indices() {
            obs.push(build_match_obs(env, &slots[i].world, a)?);
            who.push((i, a));
        }
    }
    let refs: Vec<&MatchObservation> = obs.iter().collect();
    let mut tape = Tape::new();
    let lp = spec.matcher.log_probs(&mut tape, &model.params, &refs)?;
    let lp = tape.value(lp).clone();
    let critic_rows: Vec<Vec<f64>> = who.iter().map(|&(i, a)| matcher_critic_input(env, &slots[i].world, a)).collect();
    let values = predict(&model.params, &spec.matcher_critic, &critic_rows.iter().collect::<Vec<_>>())?;
    let dists: Vec<GoalDistribution> = (0..who.len())
        .map(|r| GoalDistribution::from_log_probs(lp.row(r).as_slice().expect("row-major"), DecisionMode::Sample, rng))
        .collect();

    let mut start = 0;
    for &i in deciding {
        let s = &mut slots[i];
        let agents = s.world.active_indices();
        let picks: Vec<usize> = dists[start..start + agents.len()].iter().map(|d| d.chosen).collect();
        let positions: Vec<_> = agents.iter().map(|&a| s.world.agent_pos[a]).collect();
        let costs = cost_matrix(&positions, &s.world.landmark_pos)?;
        let outcome = AssignmentOutcome::with_covered(&costs, picks.clone(), &s.world.covered)?;
        for (k, &a) in agents.iter().enumerate() {
            let r = start + k;
            s.state.last_goal[a] = Some(picks[k]);
            buf.matcher[s.match_traj[a]].push(MatcherSample {
                obs: obs[r].clone(),
                critic_input: critic_rows[r].clone(),
                goal: picks[k],
                log_prob: dists[r].log_prob,
                value: values[r],
                reward: matcher_reward(&outcome, k)?,
                done: false,
            });
        }
        start += agents.len();
    }
    Ok(())
}

/// Per-update diagnostics, averaged over minibatches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub matcher: StreamStats,
    pub executor: StreamStats,
}

/// Pieces of the clipped objective for a batch, built on a tape.
pub struct PpoTerms {
    pub policy_loss: Var,
    pub entropy: Var,
    pub ratio: Var,
}

/// `-mean(min(r A, clip(r, 1-eps, 1+eps) A))` and the mean entropy, from
/// `batch x choices` log-probabilities.
pub fn ppo_terms(
    tape: &mut Tape,
    log_probs: Var,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
) -> Result<PpoTerms, TensorError> {
    let n = actions.len();
    let picked = tape.pick(log_probs, actions)?;
    let old = Array2::from_shape_vec((n, 1), old_log_probs.iter().map(|x| -x).collect()).expect("n x 1");
    let diff = tape.add_const(picked, &old)?;
    let ratio = tape.exp(diff);
    let adv = tape.constant(Array2::from_shape_vec((n, 1), advantages.to_vec()).expect("n x 1"));
    let s1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let s2 = tape.mul(clipped, adv)?;
    let m = tape.minimum(s1, s2)?;
    let mean = tape.mean_all(m);
    let policy_loss = tape.scale(mean, -1.0);
    let p = tape.exp(log_probs);
    let plogp = tape.mul(p, log_probs)?;
    let per_row = tape.sum_cols(plogp);
    let neg = tape.mean_all(per_row);
    let entropy = tape.scale(neg, -1.0);
    Ok(PpoTerms { policy_loss, entropy, ratio })
}

fn value_loss(tape: &mut Tape, store: &ParamStore, critic: &Mlp, inputs: &[&Vec<f64>], returns: &[f64]) -> Result<Var, TensorError> {
    let v = critic_values(tape, store, critic, inputs)?;
    let target = Array2::from_shape_vec((returns.len(), 1), returns.iter().map(|r| -r).collect()).expect("n x 1");
    let err = tape.add_const(v, &target)?;
    let sq = tape.square(err);
    Ok(tape.mean_all(sq))
}

fn finite(what: &str, x: f64, update: usize) -> Result<f64, TrainError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(TrainError::Diverged { what: what.to_string(), update })
    }
}

fn merge(into: &mut Gradients, from: Gradients) {
    for (k, g) in from {
        match into.get_mut(&k) {
            Some(acc) => *acc += &g,
            None => {
                into.insert(k, g);
            }
        }
    }
}

struct Flat<'a, S> {
    samples: Vec<&'a S>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
}

fn flatten_matcher<'a>(buf: &'a RolloutBuffer, cfg: &TrainConfig, k: usize) -> Result<Flat<'a, MatcherSample>, TrainError> {
    let discount = cfg.gamma.powi(k as i32);
    let mut out = Flat { samples: Vec::new(), advantages: Vec::new(), returns: Vec::new() };
    for traj in &buf.matcher {
        let r: Vec<f64> = traj.iter().map(|s| s.reward).collect();
        let v: Vec<f64> = traj.iter().map(|s| s.value).collect();
        let d: Vec<bool> = traj.iter().map(|s| s.done).collect();
        let (a, ret) = gae(&r, &v, &d, 0.0, discount, cfg.gae_lambda)?;
        out.samples.extend(traj.iter());
        out.advantages.extend(a);
        out.returns.extend(ret);
    }
    Ok(out)
}

fn flatten_executor<'a>(buf: &'a RolloutBuffer, cfg: &TrainConfig) -> Result<Flat<'a, ExecutorSample>, TrainError> {
    let mut out = Flat { samples: Vec::new(), advantages: Vec::new(), returns: Vec::new() };
    for traj in &buf.executor {
        let r: Vec<f64> = traj.iter().map(|s| s.reward).collect();
        let v: Vec<f64> = traj.iter().map(|s| s.value).collect();
        let d: Vec<bool> = traj.iter().map(|s| s.done).collect();
        let (a, ret) = gae(&r, &v, &d, 0.0, cfg.gamma, cfg.gae_lambda)?;
        out.samples.extend(traj.iter());
        out.advantages.extend(a);
        out.returns.extend(ret);
    }
    Ok(out)
}

fn chunks(n: usize, parts: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let parts = parts.min(n).max(1);
    let size = n.div_ceil(parts);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Clipped policy-gradient epochs over both streams.
pub fn ppo_update<R: Rng>(
    buf: &RolloutBuffer,
    model: &mut Model,
    opt: &mut Adam,
    env: &EnvConfig,
    cfg: &TrainConfig,
    update: usize,
    rng: &mut R,
) -> Result<UpdateStats, TrainError> {
    if !buf.all_finite() {
        return Err(TrainError::Diverged { what: "rollout".into(), update });
    }
    let mut mflat = flatten_matcher(buf, cfg, env.global_interval)?;
    let mut eflat = flatten_executor(buf, cfg)?;
    normalize(&mut mflat.advantages);
    normalize(&mut eflat.advantages);
    let spec = model.spec.clone();
    let mut stats = UpdateStats::default();
    let (mut m_batches, mut e_batches) = (0usize, 0usize);

    for _ in 0..cfg.epochs {
        let e_chunks = chunks(eflat.samples.len(), cfg.minibatches, rng);
        let m_chunks = if mflat.samples.is_empty() { Vec::new() } else { chunks(mflat.samples.len(), cfg.minibatches, rng) };
        for (c, e_idx) in e_chunks.iter().enumerate() {
            let mut grads = Gradients::new();
            // Executor actor.
            {
                let s: Vec<&ExecutorSample> = e_idx.iter().map(|&i| eflat.samples[i]).collect();
                let obs: Vec<&ExecObservation> = s.iter().map(|x| &x.obs).collect();
                let width = spec.executor.hidden_size();
                let mut hidden = Array2::zeros((s.len(), width));
                for (r, x) in s.iter().enumerate() {
                    for (j, &v) in x.hidden.iter().enumerate() {
                        hidden[[r, j]] = v;
                    }
                }
                let mut tape = Tape::new();
                let out = spec.executor.forward(&mut tape, &model.params, &obs, &hidden)?;
                let lp = tape.log_softmax(out.logits);
                let actions: Vec<usize> = s.iter().map(|x| x.action).collect();
                let old: Vec<f64> = s.iter().map(|x| x.log_prob).collect();
                let adv: Vec<f64> = e_idx.iter().map(|&i| eflat.advantages[i]).collect();
                let terms = ppo_terms(&mut tape, lp, &actions, &old, &adv, cfg.clip)?;
                let ent = tape.scale(terms.entropy, -cfg.entropy_coef);
                let loss = tape.add(terms.policy_loss, ent)?;
                accumulate_policy_stats(&mut stats.executor, &tape, &terms, &old, &actions, lp, cfg.clip);
                finite("executor policy loss", tape.scalar(loss), update)?;
                let mut g = tape.backward(loss)?;
                clip_grad_norm(&mut g, cfg.max_grad_norm);
                merge(&mut grads, g);
            }
            // Executor critic.
            {
                let inputs: Vec<&Vec<f64>> = e_idx.iter().map(|&i| &eflat.samples[i].critic_input).collect();
                let rets: Vec<f64> = e_idx.iter().map(|&i| eflat.returns[i]).collect();
                let mut tape = Tape::new();
                let vl = value_loss(&mut tape, &model.params, &spec.executor_critic, &inputs, &rets)?;
                stats.executor.value_loss += finite("executor value loss", tape.scalar(vl), update)?;
                let loss = tape.scale(vl, cfg.value_coef);
                let mut g = tape.backward(loss)?;
                clip_grad_norm(&mut g, cfg.max_grad_norm);
                merge(&mut grads, g);
            }
            e_batches += 1;
            if let Some(m_idx) = m_chunks.get(c) {
                {
                    let s: Vec<&MatcherSample> = m_idx.iter().map(|&i| mflat.samples[i]).collect();
                    let obs: Vec<&MatchObservation> = s.iter().map(|x| &x.obs).collect();
                    let mut tape = Tape::new();
                    let lp = spec.matcher.log_probs(&mut tape, &model.params, &obs)?;
                    let actions: Vec<usize> = s.iter().map(|x| x.goal).collect();
                    let old: Vec<f64> = s.iter().map(|x| x.log_prob).collect();
                    let adv: Vec<f64> = m_idx.iter().map(|&i| mflat.advantages[i]).collect();
                    let terms = ppo_terms(&mut tape, lp, &actions, &old, &adv, cfg.clip)?;
                    let ent = tape.scale(terms.entropy, -cfg.entropy_coef);
                    let loss = tape.add(terms.policy_loss, ent)?;
                    accumulate_policy_stats(&mut stats.matcher, &tape, &terms, &old, &actions, lp, cfg.clip);
                    finite("matcher policy loss", tape.scalar(loss), update)?;
                    let mut g = tape.backward(loss)?;
                    clip_grad_norm(&mut g, cfg.max_grad_norm);
                    merge(&mut grads, g);
                }
                {
                    let inputs: Vec<&Vec<f64>> = m_idx.iter().map(|&i| &mflat.samples[i].critic_input).collect();
                    let rets: Vec<f64> = m_idx.iter().map(|&i| mflat.returns[i]).collect();
                    let mut tape = Tape::new();
                    let vl = value_loss(&mut tape, &model.params, &spec.matcher_critic, &inputs, &rets)?;
                    stats.matcher.value_loss += finite("matcher value loss", tape.scalar(vl), update)?;
                    let loss = tape.scale(vl, cfg.value_coef);
                    let mut g = tape.backward(loss)?;
                    clip_grad_norm(&mut g, cfg.max_grad_norm);
                    merge(&mut grads, g);
                }
                m_batches += 1;
            }
            if grads.values().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(TrainError::Diverged { what: "gradient".into(), update });
            }
            opt.update(&mut model.params, &grads);
        }
    }
    scale_stats(&mut stats.executor, e_batches);
    scale_stats(&mut stats.matcher, m_batches);
    Ok(stats)
}

fn accumulate_policy_stats(
    into: &mut StreamStats,
    tape: &Tape,
    terms: &PpoTerms,
    old: &[f64],
    actions: &[usize],
    log_probs: Var,
    clip: f64,
) {
    let n = old.len() as f64;
    into.policy_loss += tape.scalar(terms.policy_loss);
    into.entropy += tape.scalar(terms.entropy);
    let lp = tape.value(log_probs);
    into.approx_kl += old.iter().zip(actions).enumerate().map(|(r, (o, &a))| o - lp[[r, a]]).sum::<f64>() / n;
    into.clip_fraction += tape.value(terms.ratio).iter().filter(|r| (*r - 1.0).abs() > clip).count() as f64 / n;
}

fn scale_stats(s: &mut StreamStats, n: usize) {
    if n == 0 {
        return;
    }
    let k = 1.0 / n as f64;
    s.policy_loss *= k;
    s.value_loss *= k;
    s.entropy *= k;
    s.approx_kl *= k;
    s.clip_fraction *= k;
}

/// One row of the learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_steps: usize,
    pub sr_mean: f64,
    pub sr_std: f64,
    /// NaN when no evaluation episode completed.
    pub steps_mean: f64,
    pub stats: UpdateStats,
}

pub const CURVE_HEADER: &str = "env_steps,sr_mean,sr_std,steps_mean,matcher_policy_loss,matcher_value_loss,matcher_entropy,matcher_kl,matcher_clip_fraction,executor_policy_loss,executor_value_loss,executor_entropy,executor_kl,executor_clip_fraction";

impl CurvePoint {
    pub fn csv_row(&self) -> String {
        let m = &self.stats.matcher;
        let e = &self.stats.executor;
        let steps = if self.steps_mean.is_finite() { format!("{}", self.steps_mean) } else { String::new() };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.env_steps,
            self.sr_mean,
            self.sr_std,
            steps,
            m.policy_loss,
            m.value_loss,
            m.entropy,
            m.approx_kl,
            m.clip_fraction,
            e.policy_loss,
            e.value_loss,
            e.entropy,
            e.approx_kl,
            e.clip_fraction
        )
    }
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in points {
        s.push_str(&p.csv_row());
        s.push('\n');
    }
    s
}

/// Where [`train`] writes its artifacts; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
    pub env_steps: usize,
    pub updates: usize,
}

fn write_artifacts(dir: &Path, model: &Model, curve: &[CurvePoint], cfg: &TrainConfig, env_steps: usize) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    let mut meta = BTreeMap::new();
    meta.insert("train_config".into(), serde_json::to_value(cfg).map_err(TensorError::from)?);
    meta.insert("env_steps".into(), serde_json::json!(env_steps));
    model.save(&dir.join("checkpoint.json"), meta)?;
    let mut f = fs::File::create(dir.join("curve.csv"))?;
    f.write_all(curve_csv(curve).as_bytes())?;
    Ok(())
}

/// Collect/update until the env-step budget is spent. The seed fixes the
/// initial parameters, every episode and every sampled decision.
pub fn train(cfg: &TrainConfig, env: &EnvConfig, out: &TrainOutput) -> Result<TrainResult, TrainError> {
    train_from(cfg, env, out, None)
}

/// Like [`train`], optionally starting from existing parameters.
pub fn train_from(cfg: &TrainConfig, env: &EnvConfig, out: &TrainOutput, init: Option<Model>) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    env.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = match init {
        Some(m) => m,
        None => {
            let spec = ModelSpec::new(cfg.kind, env.n_agents, cfg.widths)?;
            let params = spec.init(&mut rng)?;
            Model { spec, params }
        }
    };
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut curve = Vec::new();
    let mut env_steps = 0;
    let mut updates = 0;
    let mut next_eval = 0;
    let eval =
        |m: &Model| -> Result<QuickEval, TrainError> { Ok(evaluate_model(env, m, cfg.eval_episodes, cfg.seed.wrapping_add(0x5eed))?) };
    let mut last_stats = UpdateStats::default();
    let mut last_good = model.clone();
    while env_steps < cfg.total_env_steps {
        if cfg.eval_interval > 0 && env_steps >= next_eval {
            let q = eval(&model)?;
            curve.push(CurvePoint { env_steps, sr_mean: q.sr_mean, sr_std: q.sr_std, steps_mean: q.steps_mean, stats: last_stats });
            log::info!("env steps {env_steps}: sr {:.3} steps {:.2}", q.sr_mean, q.steps_mean);
            next_eval += cfg.eval_interval;
            if let Some(dir) = &out.dir {
                write_artifacts(dir, &model, &curve, cfg, env_steps)?;
            }
        }
        let buf = collect_rollout(env, &model, &cfg.reward, cfg.parallel_envs, &mut rng)?;
        env_steps += buf.env_steps;
        match ppo_update(&buf, &mut model, &mut opt, env, cfg, updates, &mut rng) {
            Ok(s) => last_stats = s,
            Err(e @ TrainError::Diverged { .. }) => {
                if let Some(dir) = &out.dir {
                    write_artifacts(dir, &last_good, &curve, cfg, env_steps)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        updates += 1;
        if !model.params.all_finite() {
            if let Some(dir) = &out.dir {
                write_artifacts(dir, &last_good, &curve, cfg, env_steps)?;
            }
            return Err(TrainError::Diverged { what: "parameters".into(), update: updates });
        }
        last_good.params = model.params.clone();
    }
    if cfg.eval_interval > 0 {
        let q = eval(&model)?;
        curve.push(CurvePoint { env_steps, sr_mean: q.sr_mean, sr_std: q.sr_std, steps_mean: q.steps_mean, stats: last_stats });
    }
    if let Some(dir) = &out.dir {
        write_artifacts(dir, &model, &curve, cfg, env_steps)?;
    }
    Ok(TrainResult { model, curve, env_steps, updates })
}
