//! Stand-ins for one learned component at a time: a flat MLP goal matcher,
//! a flat MLP executor, and random goal assignment.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cae::{goal_features, ExecObservation, ExecOutput, GOAL_FEATURES, N_ACTIONS};
use crate::env::{EnvConfig, WorldState};
use crate::mgm::{stack, MatchObservation};
use crate::model::ModelError;
use crate::tensor::{Mlp, ParamStore, Tape, TensorError, Var};

/// Goal scores from one affine stack over every position, the deciding
/// agent's own position first. Sized for a fixed team.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpMatcher {
    pub n_agents: usize,
    pub n_goals: usize,
    pub net: Mlp,
}

impl MlpMatcher {
    pub fn new(prefix: &str, n_agents: usize, n_goals: usize, hidden: usize) -> Self {
        let input = 2 * n_agents + 3 * n_goals;
        Self { n_agents, n_goals, net: Mlp::new(&format!("{prefix}.mlp"), &[input, hidden, hidden, n_goals]) }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), TensorError> {
        self.net.init(store, 0.1, rng)
    }

    /// Own position, the others' positions in index order, then each goal's
    /// position and covered flag.
    pub fn flatten(&self, obs: &MatchObservation) -> Result<Vec<f64>, ModelError> {
        if obs.n_agents() != self.n_agents || obs.n_goals() != self.n_goals {
            return Err(ModelError::TeamSize { expected: self.n_agents, got: obs.n_agents() });
        }
        let mut v = Vec::with_capacity(self.net.input());
        v.extend([obs.agent_nodes[[obs.self_index, 0]], obs.agent_nodes[[obs.self_index, 1]]]);
        for r in (0..obs.n_agents()).filter(|&r| r != obs.self_index) {
            v.extend([obs.agent_nodes[[r, 0]], obs.agent_nodes[[r, 1]]]);
        }
        for r in 0..obs.n_goals() {
            v.extend([obs.goal_nodes[[r, 0]], obs.goal_nodes[[r, 1]], obs.goal_nodes[[r, 5]]]);
        }
        Ok(v)
    }

    pub fn log_probs(&self, tape: &mut Tape, store: &ParamStore, batch: &[&MatchObservation]) -> Result<Var, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let width = self.net.input();
        let mut x = Array2::zeros((batch.len(), width));
        let mut mask = Array2::zeros((batch.len(), self.n_goals));
        for (r, o) in batch.iter().enumerate() {
            for (c, v) in self.flatten(o)?.into_iter().enumerate() {
                x[[r, c]] = v;
            }
            mask.row_mut(r).assign(&o.mask_row().row(0));
        }
        let x = tape.constant(x);
        let logits = self.net.forward(tape, store, x)?;
        let masked = tape.add_const(logits, &mask)?;
        Ok(tape.log_softmax(masked))
    }
}

/// Move logits from one affine stack over the acting agent's state, its
/// goal, and every other agent's relative position and velocity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpExecutor {
    pub n_agents: usize,
    pub net: Mlp,
}

impl MlpExecutor {
    pub fn new(prefix: &str, n_agents: usize, hidden: usize) -> Self {
        let input = GOAL_FEATURES + 4 * n_agents.saturating_sub(1);
        Self { n_agents, net: Mlp::new(&format!("{prefix}.mlp"), &[input, hidden, hidden, N_ACTIONS]) }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<(), TensorError> {
        self.net.init(store, 0.01, rng)
    }

    pub fn observe(&self, env: &EnvConfig, world: &WorldState, agent: usize, goal: Option<usize>) -> Result<ExecObservation, ModelError> {
        let goal = goal.ok_or(ModelError::UnsetGoal(agent))?;
        let others: Vec<usize> = world.active_indices().into_iter().filter(|&i| i != agent).collect();
        if others.len() + 1 != self.n_agents {
            return Err(ModelError::TeamSize { expected: self.n_agents, got: others.len() + 1 });
        }
        let s = 1.0 / env.map_side;
        let vs = 1.0 / env.max_speed;
        let me = world.agent_pos[agent];
        let mut flat = Array2::zeros((1, 4 * others.len()));
        for (k, &o) in others.iter().enumerate() {
            let d = world.agent_pos[o] - me;
            let v = world.agent_vel[o];
            for (c, x) in [d.x * s, d.y * s, v.x * vs, v.y * vs].into_iter().enumerate() {
                flat[[0, 4 * k + c]] = x;
            }
        }
        Ok(ExecObservation { nodes: flat, groups: 0, goal: goal_features(env, world, agent, goal) })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &[&ExecObservation]) -> Result<ExecOutput, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let goals = tape.constant(stack(batch.iter().map(|o| &o.goal)));
        let x = if self.n_agents > 1 {
            let others = tape.constant(stack(batch.iter().map(|o| &o.nodes)));
            tape.concat_cols(&[goals, others])?
        } else {
            goals
        };
        let logits = self.net.forward(tape, store, x)?;
        Ok(ExecOutput { logits, hidden: None })
    }
}

/// Open landmarks in random order; surplus agents draw from the open set
/// again. Without covered landmarks and with as many agents as landmarks
/// this is a uniform random permutation.
pub fn random_goals<R: Rng + ?Sized>(world: &WorldState, agents: &[usize], rng: &mut R) -> Vec<(usize, usize)> {
    let mut open: Vec<usize> = (0..world.landmark_pos.len()).filter(|&j| !world.covered[j]).collect();
    if open.is_empty() {
        open = (0..world.landmark_pos.len()).collect();
    }
    open.shuffle(rng);
    agents.iter().enumerate().map(|(k, &a)| (a, if k < open.len() { open[k] } else { open[rng.gen_range(0..open.len())] })).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::reset;
    use crate::mgm::build_match_obs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_matcher_distribution_is_valid() {
        let env = EnvConfig::mpe(5);
        let mut w = reset(&env).unwrap();
        w.covered[3] = true;
        let m = MlpMatcher::new("mgm", 5, 5, 16);
        let mut ps = ParamStore::new();
        m.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let obs: Vec<_> = (0..5).map(|i| build_match_obs(&env, &w, i).unwrap()).collect();
        let refs: Vec<_> = obs.iter().collect();
        let mut t = Tape::new();
        let lp = m.log_probs(&mut t, &ps, &refs).unwrap();
        for row in t.value(lp).rows() {
            let p: Vec<f64> = row.iter().map(|l| l.exp()).collect();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(p[3], 0.0);
        }
        // Own position leads the flat input.
        let flat = m.flatten(&obs[2]).unwrap();
        assert_eq!(flat[0], obs[2].agent_nodes[[2, 0]]);
    }

    #[test]
    fn random_goals_are_permutations() {
        let env = EnvConfig::mpe(5);
        let w = reset(&env).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let g = random_goals(&w, &w.active_indices(), &mut rng);
            let mut goals: Vec<usize> = g.iter().map(|&(_, j)| j).collect();
            goals.sort_unstable();
            assert_eq!(goals, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn random_goals_skip_covered() {
        let env = EnvConfig::mpe(5);
        let mut w = reset(&env).unwrap();
        w.covered = vec![true, false, true, false, true];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_goals(&w, &w.active_indices(), &mut rng);
        assert!(g.iter().all(|&(_, j)| !w.covered[j]));
    }

    #[test]
    fn mlp_executor_shapes() {
        let env = EnvConfig::mpe(3);
        let w = reset(&env).unwrap();
        let e = MlpExecutor::new("cae", 3, 16);
        let mut ps = ParamStore::new();
        e.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let o = e.observe(&env, &w, 1, Some(0)).unwrap();
        let mut t = Tape::new();
        let out = e.forward(&mut t, &ps, &[&o, &o]).unwrap();
        assert_eq!(t.shape(out.logits), (2, 4));
        assert!(out.hidden.is_none());
    }
}
