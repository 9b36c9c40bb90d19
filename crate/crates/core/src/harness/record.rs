//! Per-step episode logs, written as JSON lines: a header line, then one
//! line per visited state.

use serde::{Deserialize, Serialize};

use crate::env::{coverage_fraction, Action, EnvConfig, WorldState};

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub version: u32,
    pub policy: String,
    pub seed: u64,
    pub map_side: f64,
    pub horizon: usize,
    pub global_interval: usize,
    pub agent_radius: f64,
    pub cover_radius: f64,
    pub landmarks: Vec<[f64; 2]>,
    /// `(n1, n2, switch_at)` when the team size changes mid-episode.
    pub team_switch: Option<(usize, usize, usize)>,
}

/// The state at `t` and, unless the episode ended there, what was decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Every agent slot, active or not.
    pub positions: Vec<[f64; 2]>,
    pub active: Vec<bool>,
    pub covered: Vec<bool>,
    pub coverage: f64,
    /// One per active agent in index order; empty on the final state.
    pub actions: Vec<Action>,
    /// `(agent, landmark)` pairs decided at a global step.
    pub assignments: Option<Vec<(usize, usize)>>,
    /// Collisions caused by the step out of this state.
    pub collisions: usize,
}

impl StepRecord {
    pub fn observe(world: &WorldState) -> Self {
        Self {
            t: world.t,
            positions: world.agent_pos.iter().map(|p| [p.x, p.y]).collect(),
            active: world.active.clone(),
            covered: world.covered.clone(),
            coverage: coverage_fraction(world),
            actions: Vec::new(),
            assignments: None,
            collisions: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub header: EpisodeHeader,
    pub steps: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "line", rename_all = "snake_case")]
enum Line {
    Header(EpisodeHeader),
    Step(StepRecord),
}

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {0}: step before any header")]
    Orphan(usize),
    #[error("record version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
}

impl EpisodeRecord {
    pub fn new(env: &EnvConfig, world: &WorldState, policy: &str, team_switch: Option<(usize, usize, usize)>) -> Self {
        Self {
            header: EpisodeHeader {
                version: RECORD_VERSION,
                policy: policy.to_string(),
                seed: env.seed,
                map_side: env.map_side,
                horizon: env.horizon,
                global_interval: env.global_interval,
                agent_radius: env.agent_radius,
                cover_radius: env.cover_radius,
                landmarks: world.landmark_pos.iter().map(|p| [p.x, p.y]).collect(),
                team_switch,
            },
            steps: Vec::new(),
        }
    }

    pub fn final_coverage(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.coverage)
    }

    pub fn collisions(&self) -> usize {
        self.steps.iter().map(|s| s.collisions).sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Line::Header(self.header.clone())).expect("header serializes");
        out.push('\n');
        for s in &self.steps {
            out.push_str(&serde_json::to_string(&Line::Step(s.clone())).expect("step serializes"));
            out.push('\n');
        }
        out
    }

    /// Every episode in a JSONL stream, in order.
    pub fn parse_jsonl(text: &str) -> Result<Vec<EpisodeRecord>, RecordError> {
        let mut out: Vec<EpisodeRecord> = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str(line).map_err(|source| RecordError::Json { line: i + 1, source })? {
                Line::Header(h) => {
                    if h.version != RECORD_VERSION {
                        return Err(RecordError::Version { found: h.version, expected: RECORD_VERSION });
                    }
                    out.push(EpisodeRecord { header: h, steps: Vec::new() });
                }
                Line::Step(s) => out.last_mut().ok_or(RecordError::Orphan(i + 1))?.steps.push(s),
            }
        }
        Ok(out)
    }
}

/// First `t` at which coverage reaches `target`; `None` if it never does.
pub fn steps_metric(record: &EpisodeRecord, target: f64) -> Option<usize> {
    record.steps.iter().find(|s| s.coverage >= target - 1e-12).map(|s| s.t)
}

/// Whether each agent that became active mid-episode was assigned a goal at
/// the first global step at or after its arrival (when the episode lasted
/// that long).
pub fn new_agents_assigned(record: &EpisodeRecord) -> bool {
    let k = record.header.global_interval;
    let mut any_missing = false;
    for w in 1..record.steps.len() {
        let (prev, cur) = (&record.steps[w - 1], &record.steps[w]);
        for a in 0..cur.active.len() {
            let arrived = cur.active[a] && !prev.active.get(a).copied().unwrap_or(false);
            if !arrived {
                continue;
            }
            let next_global = record.steps[w..].iter().find(|s| s.t % k == 0 && !s.actions.is_empty());
            if let Some(s) = next_global {
                let got = s.assignments.as_ref().is_some_and(|v| v.iter().any(|&(agent, _)| agent == a));
                any_missing |= !got;
            }
        }
    }
    !any_missing
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::reset;

    fn record_with(coverages: &[f64]) -> EpisodeRecord {
        let env = EnvConfig::mpe(2);
        let w = reset(&env).unwrap();
        let mut r = EpisodeRecord::new(&env, &w, "test", None);
        for (t, &c) in coverages.iter().enumerate() {
            let mut s = StepRecord::observe(&w);
            s.t = t;
            s.coverage = c;
            r.steps.push(s);
        }
        r
    }

    #[test]
    fn steps_metric_first_crossing() {
        let r = record_with(&[0.0, 0.2, 0.4, 0.4, 0.6, 0.8, 0.8, 1.0, 1.0]);
        assert_eq!(steps_metric(&r, 1.0), Some(7));
        assert_eq!(steps_metric(&r, 0.0), Some(0));
        assert_eq!(steps_metric(&record_with(&[0.0, 0.5, 0.5]), 1.0), None);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut r = record_with(&[0.0, 0.5, 1.0]);
        r.steps[0].actions = vec![Action::Up, Action::Left];
        r.steps[0].assignments = Some(vec![(0, 1), (1, 0)]);
        let text = r.to_jsonl();
        assert_eq!(text.lines().count(), 4);
        let back = EpisodeRecord::parse_jsonl(&format!("{text}{text}")).unwrap();
        assert_eq!(back, vec![r.clone(), r]);
        assert!(matches!(EpisodeRecord::parse_jsonl(text.lines().nth(1).unwrap()), Err(RecordError::Orphan(1))));
    }
}
