//! Goal matcher: attention over the agent graph and the goal graph, then a
//! pointer-style score from the deciding agent to every goal.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, EnvError, WorldState};
use crate::model::{choose, DecisionMode, ModelError, MASKED_LOGIT};
use crate::tensor::{Linear, MultiHeadAttention, ParamStore, Tape, TensorError, Var};

pub const AGENT_FEATURES: usize = 5;
pub const GOAL_FEATURES: usize = 6;

/// The two node sets one agent sees when choosing a goal.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchObservation {
    /// `n_active x AGENT_FEATURES`: centered position, offset from the
    /// deciding agent, own flag.
    pub agent_nodes: Array2<f64>,
    /// `n_landmarks x GOAL_FEATURES`: centered position, offset from the
    /// deciding agent, distance, covered flag.
    pub goal_nodes: Array2<f64>,
    /// Row of the deciding agent in `agent_nodes`.
    pub self_index: usize,
    pub covered: Vec<bool>,
}

impl MatchObservation {
    pub fn n_agents(&self) -> usize {
        self.agent_nodes.nrows()
    }

    pub fn n_goals(&self) -> usize {
        self.goal_nodes.nrows()
    }

    /// `1 x n_goals` additive mask for covered goals.
    pub fn mask_row(&self) -> Array2<f64> {
        Array2::from_shape_fn((1, self.n_goals()), |(_, j)| if self.covered[j] { MASKED_LOGIT } else { 0.0 })
    }
}

pub fn build_match_obs(env: &EnvConfig, world: &WorldState, agent: usize) -> Result<MatchObservation, ModelError> {
    if !world.active.get(agent).copied().unwrap_or(false) {
        return Err(EnvError::InactiveAgent(agent).into());
    }
    let s = 1.0 / env.map_side;
    let half = 0.5 * env.map_side;
    let me = world.agent_pos[agent];
    let active = world.active_indices();
    let mut agent_nodes = Array2::zeros((active.len(), AGENT_FEATURES));
    let mut self_index = 0;
    for (row, &i) in active.iter().enumerate() {
        let p = world.agent_pos[i];
        let own = i == agent;
        if own {
            self_index = row;
        }
        let f = [(p.x - half) * s, (p.y - half) * s, (p.x - me.x) * s, (p.y - me.y) * s, own as u8 as f64];
        agent_nodes.row_mut(row).assign(&ndarray::ArrayView1::from(&f));
    }
    let m = world.landmark_pos.len();
    let mut goal_nodes = Array2::zeros((m, GOAL_FEATURES));
    for (j, &g) in world.landmark_pos.iter().enumerate() {
        let f = [(g.x - half) * s, (g.y - half) * s, (g.x - me.x) * s, (g.y - me.y) * s, g.distance(me) * s, world.covered[j] as u8 as f64];
        goal_nodes.row_mut(j).assign(&ndarray::ArrayView1::from(&f));
    }
    Ok(MatchObservation { agent_nodes, goal_nodes, self_index, covered: world.covered.clone() })
}

/// Probability of every landmark for one agent, and the one it picked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalDistribution {
    pub probs: Vec<f64>,
    pub chosen: usize,
    pub log_prob: f64,
}

impl GoalDistribution {
    /// From one row of masked log-probabilities.
    pub fn from_log_probs<R: Rng + ?Sized>(log_probs: &[f64], mode: DecisionMode, rng: &mut R) -> Self {
        let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
        let chosen = choose(&probs, mode, rng);
        Self { log_prob: log_probs[chosen], probs, chosen }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub embed: usize,
    pub heads: usize,
    /// Scores pass through `c * tanh(x / c)` when set.
    pub logit_clip: Option<f64>,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self { embed: 64, heads: 4, logit_clip: Some(10.0) }
    }
}

/// Self-attention and feed-forward sublayers, each with a residual.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub attention: MultiHeadAttention,
    pub hidden: Linear,
    pub output: Linear,
}

impl EncoderBlock {
    pub fn new(path: &str, dim: usize, heads: usize) -> Result<Self, TensorError> {
        Ok(Self {
            attention: MultiHeadAttention::new(format!("{path}.attention"), dim, heads)?,
            hidden: Linear::new(format!("{path}.ff_hidden"), dim, dim),
            output: Linear::new(format!("{path}.ff_output"), dim, dim),
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), TensorError> {
        self.attention.init(store, rng)?;
        self.hidden.init(store, 1.0, rng)?;
        self.output.init(store, 1.0, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, blocks: usize) -> Result<Var, TensorError> {
        let att = self.attention.forward(tape, store, x, x, blocks, None)?;
        let x = tape.add(x, att)?;
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.output.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatcher {
    pub config: MatcherConfig,
    pub agent_embed: Linear,
    pub goal_embed: Linear,
    pub agent_encoder: EncoderBlock,
    pub goal_encoder: EncoderBlock,
    /// Goals attend to the encoded agents, so goal keys carry who else
    /// is nearby.
    pub goal_context: MultiHeadAttention,
    /// The deciding agent attends to the goals.
    pub cross: MultiHeadAttention,
    pub query: Linear,
    pub key: Linear,
}

impl AttentionMatcher {
    pub fn new(prefix: &str, config: MatcherConfig) -> Result<Self, TensorError> {
        let d = config.embed;
        let h = config.heads;
        Ok(Self {
            config,
            agent_embed: Linear::new(format!("{prefix}.agent_embed"), AGENT_FEATURES, d),
            goal_embed: Linear::new(format!("{prefix}.goal_embed"), GOAL_FEATURES, d),
            agent_encoder: EncoderBlock::new(&format!("{prefix}.inter.agents"), d, h)?,
            goal_encoder: EncoderBlock::new(&format!("{prefix}.inter.goals"), d, h)?,
            goal_context: MultiHeadAttention::new(format!("{prefix}.intra.goal_context"), d, h)?,
            cross: MultiHeadAttention::new(format!("{prefix}.intra.cross"), d, h)?,
            query: Linear::new(format!("{prefix}.intra.query"), d, d),
            key: Linear::new(format!("{prefix}.intra.key"), d, d),
        })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), TensorError> {
        self.agent_embed.init(store, 1.0, rng)?;
        self.goal_embed.init(store, 1.0, rng)?;
        self.agent_encoder.init(store, rng)?;
        self.goal_encoder.init(store, rng)?;
        self.goal_context.init(store, rng)?;
        self.cross.init(store, rng)?;
        self.query.init(store, 1.0, rng)?;
        self.key.init(store, 0.1, rng)
    }

    /// Embeds `blocks` stacked node sets and runs the matching encoder
    /// block over each set independently.
    pub fn inter_encode(&self, tape: &mut Tape, store: &ParamStore, nodes: Var, goals: bool, blocks: usize) -> Result<Var, TensorError> {
        let (embed, encoder) = if goals { (&self.goal_embed, &self.goal_encoder) } else { (&self.agent_embed, &self.agent_encoder) };
        let e = embed.forward(tape, store, nodes)?;
        let e = tape.relu(e);
        encoder.forward(tape, store, e, blocks)
    }

    /// Scores of each deciding agent (`blocks x d`) against its goals
    /// (`blocks * m x d`), masked and normalized: `blocks x m` log-probs.
    pub fn intra_match(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        agent_k: Var,
        goals: Var,
        mask: &Array2<f64>,
        blocks: usize,
    ) -> Result<Var, TensorError> {
        let ctx = self.cross.forward(tape, store, agent_k, goals, blocks, None)?;
        let q = tape.add(agent_k, ctx)?;
        let q = self.query.forward(tape, store, q)?;
        let k = self.key.forward(tape, store, goals)?;
        let raw = tape.block_matmul_bt(q, k, blocks)?;
        let mut scores = tape.scale(raw, 1.0 / (self.config.embed as f64).sqrt());
        if let Some(c) = self.config.logit_clip {
            let shrunk = tape.scale(scores, 1.0 / c);
            let squashed = tape.tanh(shrunk);
            scores = tape.scale(squashed, c);
        }
        let masked = tape.add_const(scores, mask)?;
        Ok(tape.log_softmax(masked))
    }

    /// Full forward pass over observations sharing agent and goal counts.
    pub fn log_probs(&self, tape: &mut Tape, store: &ParamStore, batch: &[&MatchObservation]) -> Result<Var, ModelError> {
        let first = batch.first().ok_or(ModelError::EmptyBatch)?;
        let (n, m) = (first.n_agents(), first.n_goals());
        if batch.iter().any(|o| o.n_agents() != n || o.n_goals() != m) {
            return Err(ModelError::RaggedBatch);
        }
        let b = batch.len();
        let agents = stack(batch.iter().map(|o| &o.agent_nodes));
        let goals = stack(batch.iter().map(|o| &o.goal_nodes));
        let mask = stack(batch.iter().map(|o| o.mask_row()).collect::<Vec<_>>().iter());
        let agents = tape.constant(agents);
        let goals = tape.constant(goals);
        let a = self.inter_encode(tape, store, agents, false, b)?;
        let g = self.inter_encode(tape, store, goals, true, b)?;
        let ctx = self.goal_context.forward(tape, store, g, a, b, None)?;
        let g = tape.add(g, ctx)?;
        let rows: Vec<usize> = batch.iter().enumerate().map(|(i, o)| i * n + o.self_index).collect();
        let k = tape.gather_rows(a, &rows)?;
        Ok(self.intra_match(tape, store, k, g, &mask, b)?)
    }
}

pub(crate) fn stack<'a>(rows: impl Iterator<Item = &'a Array2<f64>>) -> Array2<f64> {
    let views: Vec<_> = rows.map(|r| r.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform column counts")
}

/// Decentralized decisions: every active agent picks a goal from its own
/// observation. Returned in active-index order as `(agent, distribution)`.
pub fn mgm_decide<R: Rng + ?Sized>(
    env: &EnvConfig,
    world: &WorldState,
    matcher: &AttentionMatcher,
    store: &ParamStore,
    mode: DecisionMode,
    rng: &mut R,
) -> Result<Vec<(usize, GoalDistribution)>, ModelError> {
    if world.covered.iter().all(|&c| c) {
        return Err(ModelError::AllMasked);
    }
    let agents = world.active_indices();
    let obs: Vec<MatchObservation> = agents.iter().map(|&i| build_match_obs(env, world, i)).collect::<Result<_, _>>()?;
    let refs: Vec<&MatchObservation> = obs.iter().collect();
    let mut tape = Tape::new();
    let lp = matcher.log_probs(&mut tape, store, &refs)?;
    let lp = tape.value(lp);
    Ok(agents
        .iter()
        .enumerate()
        .map(|(row, &i)| (i, GoalDistribution::from_log_probs(lp.row(row).as_slice().expect("row-major"), mode, rng)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::reset;
    use crate::geom::Vec2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (AttentionMatcher, ParamStore) {
        let cfg = MatcherConfig { embed: 8, heads: 2, logit_clip: Some(10.0) };
        let m = AttentionMatcher::new("mgm", cfg).unwrap();
        let mut ps = ParamStore::new();
        m.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (m, ps)
    }

    #[test]
    fn single_agent_world() {
        let env = EnvConfig::mpe(1);
        let w = reset(&env).unwrap();
        let o = build_match_obs(&env, &w, 0).unwrap();
        assert_eq!((o.n_agents(), o.n_goals()), (1, 1));
        let (m, ps) = small();
        let d = mgm_decide(&env, &w, &m, &ps, DecisionMode::Sample, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d[0].1.chosen, 0);
        assert!((d[0].1.probs[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn covered_flag_and_inactive_agent() {
        let env = EnvConfig::mpe(3);
        let mut w = reset(&env).unwrap();
        w.covered[1] = true;
        let o = build_match_obs(&env, &w, 0).unwrap();
        assert_eq!(o.goal_nodes[[1, 5]], 1.0);
        assert_eq!(o.goal_nodes[[0, 5]], 0.0);
        w.active[2] = false;
        assert!(build_match_obs(&env, &w, 2).is_err());
        assert_eq!(build_match_obs(&env, &w, 0).unwrap().n_agents(), 2);
    }

    #[test]
    fn mirrored_agents_mirror_features() {
        let env = EnvConfig::mpe(2);
        let mut w = reset(&env).unwrap();
        w.agent_pos = vec![Vec2::new(0.5, 0.8), Vec2::new(1.5, 1.2)];
        w.landmark_pos = vec![Vec2::new(0.3, 1.9), Vec2::new(1.7, 0.1)];
        let a = build_match_obs(&env, &w, 0).unwrap();
        let b = build_match_obs(&env, &w, 1).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                assert!((a.agent_nodes[[r, c]] + b.agent_nodes[[1 - r, c]]).abs() < 1e-12);
                assert!((a.goal_nodes[[r, c]] + b.goal_nodes[[1 - r, c]]).abs() < 1e-12);
            }
            assert_eq!(a.agent_nodes[[r, 4]], b.agent_nodes[[1 - r, 4]]);
            assert!((a.goal_nodes[[r, 4]] - b.goal_nodes[[1 - r, 4]]).abs() < 1e-12);
        }
    }

    #[test]
    fn covered_goals_get_zero_probability() {
        let env = EnvConfig::mpe(5);
        let (m, ps) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let mut w = reset(&env.clone().with_seed(seed)).unwrap();
            w.covered = vec![seed % 2 == 0, true, false, seed % 3 == 0, false];
            for (_, d) in mgm_decide(&env, &w, &m, &ps, DecisionMode::Sample, &mut rng).unwrap() {
                assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (j, &p) in d.probs.iter().enumerate() {
                    if w.covered[j] {
                        assert_eq!(p, 0.0);
                    }
                }
                assert!(!w.covered[d.chosen]);
                assert!((d.log_prob - d.probs[d.chosen].ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn all_covered_is_an_error() {
        let env = EnvConfig::mpe(2);
        let mut w = reset(&env).unwrap();
        w.covered = vec![true, true];
        let (m, ps) = small();
        let r = mgm_decide(&env, &w, &m, &ps, DecisionMode::Greedy, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(ModelError::AllMasked)));
    }

    #[test]
    fn identical_goals_are_uniform() {
        let env = EnvConfig::mpe(4);
        let mut w = reset(&env).unwrap();
        let spot = Vec2::new(1.2, 0.4);
        w.landmark_pos = vec![spot; 4];
        w.covered[2] = true;
        let (m, ps) = small();
        let d = mgm_decide(&env, &w, &m, &ps, DecisionMode::Greedy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (_, g) in d {
            for j in [0, 1, 3] {
                assert!((g.probs[j] - 1.0 / 3.0).abs() < 1e-12);
            }
            assert_eq!(g.chosen, 0);
        }
    }

    #[test]
    fn twin_agents_choose_the_same_goal() {
        let env = EnvConfig::mpe(2);
        let mut w = reset(&env).unwrap();
        w.agent_pos = vec![Vec2::new(1.0, 1.0), Vec2::new(1.0, 1.0)];
        let (m, ps) = small();
        let d = mgm_decide(&env, &w, &m, &ps, DecisionMode::Greedy, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(d[0].1.chosen, d[1].1.chosen);
        assert_eq!(d[0].1.probs, d[1].1.probs);
    }

    #[test]
    fn decision_ignores_order_of_other_agents() {
        let env = EnvConfig::mpe(5);
        let (m, ps) = small();
        let w = reset(&env.clone().with_seed(3)).unwrap();
        let mut permuted = w.clone();
        // Swap two agents other than agent 0.
        permuted.agent_pos.swap(2, 4);
        permuted.agent_vel.swap(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = mgm_decide(&env, &w, &m, &ps, DecisionMode::Greedy, &mut rng).unwrap();
        let b = mgm_decide(&env, &permuted, &m, &ps, DecisionMode::Greedy, &mut rng).unwrap();
        for (x, y) in a[0].1.probs.iter().zip(&b[0].1.probs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn inter_encoder_is_equivariant_and_handles_duplicates() {
        let (m, ps) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((4, AGENT_FEATURES), |_| rng.gen_range(-1.0..1.0));
        let mut xd = x.clone();
        let r0 = x.row(0).to_owned();
        xd.row_mut(3).assign(&r0);
        let order = [2, 0, 3, 1];
        let xp = x.select(ndarray::Axis(0), &order);
        let mut t = Tape::new();
        let (a, b, c) = (t.constant(x), t.constant(xp), t.constant(xd));
        let ya = m.inter_encode(&mut t, &ps, a, false, 1).unwrap();
        let yb = m.inter_encode(&mut t, &ps, b, false, 1).unwrap();
        let yc = m.inter_encode(&mut t, &ps, c, false, 1).unwrap();
        let ya_p = t.value(ya).select(ndarray::Axis(0), &order);
        for (p, q) in ya_p.iter().zip(t.value(yb).iter()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert_eq!(t.value(yc).row(0), t.value(yc).row(3));
    }
}
