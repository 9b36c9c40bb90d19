//! Goal assignment: distance costs, the exact Hungarian solver, greedy and
//! random assignments, and the matcher reward built on top of them.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;

#[derive(Debug, Error, PartialEq)]
pub enum AssignError {
    #[error("{agents} agents but {landmarks} landmarks")]
    CountMismatch { agents: usize, landmarks: usize },
    #[error("cost matrix entry ({0}, {1}) is not finite")]
    NonFinite(usize, usize),
    #[error("cost matrix is empty")]
    Empty,
    #[error("agent index {0} out of range")]
    AgentIndex(usize),
}

/// Square matrix of agent-to-landmark distances, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssignError> {
        let n = rows.len();
        if n == 0 {
            return Err(AssignError::Empty);
        }
        let mut entries = Vec::with_capacity(n * n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(AssignError::CountMismatch { agents: n, landmarks: r.len() });
            }
            for (j, &c) in r.iter().enumerate() {
                if !c.is_finite() {
                    return Err(AssignError::NonFinite(i, j));
                }
            }
            entries.extend_from_slice(r);
        }
        Ok(Self { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    /// Total cost of `assignment`, summed in row order.
    pub fn total(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { n: self.n, entries: self.entries.iter().map(|e| e * c).collect() }
    }
}

pub fn cost_matrix(agent_pos: &[Vec2], landmark_pos: &[Vec2]) -> Result<CostMatrix, AssignError> {
    if agent_pos.len() != landmark_pos.len() {
        return Err(AssignError::CountMismatch { agents: agent_pos.len(), landmarks: landmark_pos.len() });
    }
    let rows: Vec<Vec<f64>> = agent_pos.iter().map(|a| landmark_pos.iter().map(|l| a.distance(*l)).collect()).collect();
    CostMatrix::from_rows(&rows)
}

/// Minimum-cost perfect matching. Among all optimal permutations the
/// lexicographically smallest one is returned.
pub fn hungarian(costs: &CostMatrix) -> (Vec<usize>, f64) {
    let n = costs.n();
    let (mut row_to_col, u, v) = solve_potentials(costs);

    let scale = costs.entries.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale;
    let mut tight = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            tight[i][j] = costs.get(i, j) - u[i] - v[j] <= tol;
        }
        tight[i][row_to_col[i]] = true;
    }
    let mut col_to_row = vec![0; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }

    // Every optimal permutation uses tight edges only, so walk rows in order
    // and swap in the smallest column an alternating cycle can reach.
    let mut fixed_col = vec![false; n];
    for i in 0..n {
        let current = row_to_col[i];
        for j in 0..current {
            if fixed_col[j] || !tight[i][j] {
                continue;
            }
            let mut visited = vec![false; n];
            let mut search = Rematch {
                tight: &tight,
                fixed_col: &fixed_col,
                banned: j,
                target: current,
                visited: &mut visited,
                row_to_col: &mut row_to_col,
                col_to_row: &mut col_to_row,
            };
            let r = search.col_to_row[j];
            if search.augment(r) {
                row_to_col[i] = j;
                col_to_row[j] = i;
                break;
            }
        }
        fixed_col[row_to_col[i]] = true;
    }
    let total = costs.total(&row_to_col);
    (row_to_col, total)
}

struct Rematch<'a> {
    tight: &'a [Vec<bool>],
    fixed_col: &'a [bool],
    banned: usize,
    target: usize,
    visited: &'a mut [bool],
    row_to_col: &'a mut [usize],
    col_to_row: &'a mut [usize],
}

impl Rematch<'_> {
    fn augment(&mut self, r: usize) -> bool {
        for c in 0..self.tight.len() {
            if !self.tight[r][c] || self.fixed_col[c] || c == self.banned || self.visited[c] {
                continue;
            }
            self.visited[c] = true;
            if c == self.target || self.augment(self.col_to_row[c]) {
                self.row_to_col[r] = c;
                self.col_to_row[c] = r;
                return true;
            }
        }
        false
    }
}

/// Shortest augmenting path Hungarian method with row/column potentials.
fn solve_potentials(costs: &CostMatrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = costs.n();
    // 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Agents in `agent_order` each claim their nearest unclaimed landmark
/// (lowest index on ties).
pub fn greedy_nearest(costs: &CostMatrix, agent_order: &[usize]) -> Vec<usize> {
    let n = costs.n();
    let mut claimed = vec![false; n];
    let mut out = vec![usize::MAX; n];
    for &i in agent_order {
        let mut best: Option<(usize, f64)> = None;
        for (j, &c) in costs.row(i).iter().enumerate() {
            if claimed[j] {
                continue;
            }
            if best.is_none_or(|(_, b)| c < b) {
                best = Some((j, c));
            }
        }
        if let Some((j, _)) = best {
            claimed[j] = true;
            out[i] = j;
        }
    }
    out
}

pub fn random_assignment<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Minimum total over every permutation. Exponential; an oracle for small n.
pub fn brute_force_min(costs: &CostMatrix) -> f64 {
    fn go(costs: &CostMatrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == costs.n() {
            *best = best.min(acc);
            return;
        }
        for j in 0..costs.n() {
            if !used[j] {
                used[j] = true;
                go(costs, row + 1, used, acc + costs.get(row, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(costs, 0, &mut vec![false; costs.n()], 0.0, &mut best);
    best
}

/// Predicted goals next to the Hungarian reference for one global step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentOutcome {
    pub predicted: Vec<usize>,
    pub reference: Vec<usize>,
    pub c_predicted: f64,
    pub c_reference: f64,
    pub n_repeat: Vec<usize>,
    pub n_agents: usize,
}

impl AssignmentOutcome {
    /// Score `predicted` against the optimal matching of `costs`.
    pub fn new(costs: &CostMatrix, predicted: Vec<usize>) -> Result<Self, AssignError> {
        Self::with_covered(costs, predicted, &vec![false; costs.n()])
    }

    /// Like [`AssignmentOutcome::new`], but covered landmarks cost nothing in
    /// the reference, so the agents the reference sends there are the ones
    /// left over once every open landmark has its optimal agent.
    pub fn with_covered(costs: &CostMatrix, predicted: Vec<usize>, covered: &[bool]) -> Result<Self, AssignError> {
        let n = costs.n();
        if predicted.len() != n || covered.len() != n {
            return Err(AssignError::CountMismatch { agents: predicted.len(), landmarks: n });
        }
        if let Some(&bad) = predicted.iter().find(|&&g| g >= n) {
            return Err(AssignError::AgentIndex(bad));
        }
        let open_costs = if covered.iter().any(|&c| c) {
            let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if covered[j] { 0.0 } else { costs.get(i, j) }).collect()).collect();
            CostMatrix::from_rows(&rows)?
        } else {
            costs.clone()
        };
        let (reference, c_reference) = hungarian(&open_costs);
        let c_predicted = costs.total(&predicted);
        let n_repeat =
            predicted.iter().enumerate().map(|(k, g)| predicted.iter().enumerate().filter(|&(o, h)| o != k && h == g).count()).collect();
        Ok(Self { predicted, reference, c_predicted, c_reference, n_repeat, n_agents: n })
    }
}

/// Which branch of the matcher reward applies to an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardCase {
    Matched,
    Conflict,
    Unshared,
}

pub fn reward_case(outcome: &AssignmentOutcome, agent: usize) -> RewardCase {
    if outcome.predicted[agent] == outcome.reference[agent] {
        RewardCase::Matched
    } else if outcome.n_repeat[agent] > 0 {
        RewardCase::Conflict
    } else {
        RewardCase::Unshared
    }
}

/// Reward for agent `agent`'s predicted goal:
/// `0` when it agrees with the reference, `-(1 + n_repeat / N)` when another
/// agent predicted the same goal, and `-(1 - C_h / C_m)` otherwise.
///
/// The unshared branch is clamped to `<= 0` and returns `0` when `C_m = 0`.
pub fn matcher_reward(outcome: &AssignmentOutcome, agent: usize) -> Result<f64, AssignError> {
    if agent >= outcome.n_agents {
        return Err(AssignError::AgentIndex(agent));
    }
    Ok(match reward_case(outcome, agent) {
        RewardCase::Matched => 0.0,
        RewardCase::Conflict => -(1.0 + outcome.n_repeat[agent] as f64 / outcome.n_agents as f64),
        RewardCase::Unshared => {
            if outcome.c_predicted <= 0.0 {
                log::debug!("matcher reward: zero predicted cost for agent {agent}");
                0.0
            } else {
                let r = -(1.0 - outcome.c_reference / outcome.c_predicted);
                if r > 0.0 {
                    log::debug!("matcher reward: predicted cost below reference, clamping {r}");
                }
                r.min(0.0)
            }
        }
    })
}
