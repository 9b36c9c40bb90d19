//! Evaluation protocol: seeded episode schedules, SR and Steps aggregation,
//! team switching, reports and trajectory export.

pub mod record;
pub mod render;
pub mod stats;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::ScriptedConfig;
use crate::env::{reset, step_in_place, switch_team_size, EnvConfig, EnvError};
use crate::model::{DecisionMode, ModelError};
use crate::policy::{Controller, ExecutorNet, HierController, MatcherNet, Model, PolicyKind, ScriptedController};
use crate::tensor::TensorError;

pub use record::{new_agents_assigned, steps_metric, EpisodeRecord, StepRecord};
pub use stats::{bootstrap_mean_ci, mean_std, Interval};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("bad experiment config: {0}")]
    Config(String),
    #[error("checkpoint {path} does not fit this experiment: {reason}")]
    Incompatible { path: PathBuf, reason: String },
}

/// Mid-episode change of team size at `floor(horizon / 3)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeamSwitch {
    pub n1: usize,
    pub n2: usize,
}

impl TeamSwitch {
    pub fn switch_at(&self, horizon: usize) -> usize {
        horizon / 3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub seeds: Vec<u64>,
    pub episodes_per_seed: usize,
    /// Coverage fraction that counts as reaching the target for Steps.
    pub target_coverage: f64,
    pub team_switch: Option<TeamSwitch>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], episodes_per_seed: 100, target_coverage: 1.0, team_switch: None }
    }
}

impl EvalProtocol {
    pub fn episodes(&self) -> usize {
        self.seeds.len() * self.episodes_per_seed
    }

    /// Environment seeds for every episode, seed-major.
    pub fn schedule(&self) -> Vec<(u64, u64)> {
        let mut out = Vec::with_capacity(self.episodes());
        for &s in &self.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            for _ in 0..self.episodes_per_seed {
                out.push((s, rng.gen()));
            }
        }
        out
    }
}

/// Which controller to run and where its parameters live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    /// `scripted`, `masp`, `random_goal`, `mgm_mlp` or `cae_mlp`.
    pub kind: String,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub scripted: ScriptedConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub policy: PolicySpec,
    #[serde(default)]
    pub protocol: EvalProtocol,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Episodes written to `episodes.jsonl` (from the start of the schedule).
    #[serde(default)]
    pub record_episodes: usize,
}

impl ExperimentConfig {
    /// Hash of everything that shapes the results; `output_dir` is left out
    /// so the same experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        config_hash(&Self { output_dir: None, ..self.clone() })
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Per-episode outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub env_seed: u64,
    /// Final coverage fraction.
    pub sr: f64,
    pub steps: Option<usize>,
    pub collisions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub policy: String,
    pub n_agents: usize,
    pub team_switch: Option<TeamSwitch>,
    pub episodes: usize,
    pub sr_mean: f64,
    pub sr_std: f64,
    /// Over episodes that reached the target; absent if none did.
    pub steps_mean: Option<f64>,
    pub steps_std: Option<f64>,
    /// Episodes that reached the target coverage.
    pub reached: usize,
    pub target_coverage: f64,
    pub collisions_mean: f64,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub per_episode: Vec<EpisodeMetrics>,
}

pub const REPORT_CSV_HEADER: &str =
    "policy,n_agents,team_switch,episodes,sr_mean,sr_std,steps_mean,steps_std,reached,collisions_mean,seeds,config_hash";

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "\\".to_string(), |v| format!("{v:.4}"))
}

impl EvalReport {
    pub fn from_episodes(policy: &str, n_agents: usize, protocol: &EvalProtocol, hash: String, per_episode: Vec<EpisodeMetrics>) -> Self {
        let sr: Vec<f64> = per_episode.iter().map(|e| e.sr).collect();
        let steps: Vec<f64> = per_episode.iter().filter_map(|e| e.steps.map(|s| s as f64)).collect();
        let collisions: Vec<f64> = per_episode.iter().map(|e| e.collisions as f64).collect();
        let (sr_mean, sr_std) = mean_std(&sr).unwrap_or((0.0, 0.0));
        let st = mean_std(&steps);
        Self {
            version: REPORT_VERSION,
            policy: policy.to_string(),
            n_agents,
            team_switch: protocol.team_switch,
            episodes: per_episode.len(),
            sr_mean,
            sr_std,
            steps_mean: st.map(|s| s.0),
            steps_std: st.map(|s| s.1),
            reached: steps.len(),
            target_coverage: protocol.target_coverage,
            collisions_mean: mean_std(&collisions).map_or(0.0, |c| c.0),
            seeds: protocol.seeds.clone(),
            config_hash: hash,
            per_episode,
        }
    }

    pub fn sr_values(&self) -> Vec<f64> {
        self.per_episode.iter().map(|e| e.sr).collect()
    }

    pub fn steps_values(&self) -> Vec<f64> {
        self.per_episode.iter().filter_map(|e| e.steps.map(|s| s as f64)).collect()
    }

    /// Fraction of episodes that covered everything.
    pub fn full_coverage_fraction(&self) -> f64 {
        if self.episodes == 0 {
            return 0.0;
        }
        self.per_episode.iter().filter(|e| e.sr >= 1.0).count() as f64 / self.episodes as f64
    }

    pub fn csv_row(&self) -> String {
        let switch = self.team_switch.map_or_else(String::new, |s| format!("{}=>{}", s.n1, s.n2));
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "{},{},{},{},{:.4},{:.4},{},{},{},{:.4},{},{}",
            self.policy,
            self.n_agents,
            switch,
            self.episodes,
            self.sr_mean,
            self.sr_std,
            fmt_opt(self.steps_mean),
            fmt_opt(self.steps_std),
            self.reached,
            self.collisions_mean,
            seeds.join(" "),
            self.config_hash
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_CSV_HEADER}\n{}\n", self.csv_row())
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        Ok(())
    }
}

/// Play one episode to termination, switching team size if asked.
pub fn run_episode(
    env: &EnvConfig,
    controller: &mut dyn Controller,
    team_switch: Option<TeamSwitch>,
    policy_seed: u64,
) -> Result<EpisodeRecord, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);
    let mut world = reset(env)?;
    let switch = team_switch.map(|s| (s.n1, s.n2, s.switch_at(env.horizon)));
    let mut record = EpisodeRecord::new(env, &world, &controller.name(), switch);
    controller.begin_episode(env, &world);
    loop {
        if let Some((_, n2, at)) = switch {
            if world.t == at && at < env.horizon && !world.all_covered() {
                world = switch_team_size(env, &world, n2)?;
            }
        }
        let mut rec = StepRecord::observe(&world);
        if world.t >= env.horizon || world.all_covered() {
            record.steps.push(rec);
            break;
        }
        let decision = controller.act(env, &world, &mut rng)?;
        let events = step_in_place(env, &mut world, &decision.actions)?;
        rec.actions = decision.actions;
        rec.assignments = decision.assignments;
        rec.collisions = events.collisions.len();
        record.steps.push(rec);
    }
    Ok(record)
}

fn metrics(record: &EpisodeRecord, seed: u64, target: f64) -> EpisodeMetrics {
    EpisodeMetrics {
        seed,
        env_seed: record.header.seed,
        sr: record.final_coverage(),
        steps: steps_metric(record, target),
        collisions: record.collisions(),
    }
}

/// Run the protocol with one controller. `keep` episodes from the start of
/// the schedule are returned as full records.
pub fn evaluate(
    env: &EnvConfig,
    controller: &mut dyn Controller,
    protocol: &EvalProtocol,
    keep: usize,
) -> Result<(EvalReport, Vec<EpisodeRecord>), HarnessError> {
    if protocol.seeds.is_empty() || protocol.episodes_per_seed == 0 {
        return Err(HarnessError::Config("protocol needs at least one seed and one episode".into()));
    }
    let mut env = env.clone();
    if let Some(s) = protocol.team_switch {
        if s.n1 == 0 || s.n2 == 0 {
            return Err(HarnessError::Config("team sizes must be at least 1".into()));
        }
        env.n_agents = s.n1;
        env.max_agents = env.max_agents.max(s.n1).max(s.n2);
    }
    env.validate()?;
    let name = controller.name();
    let hash = config_hash(&(&env, protocol, &name));
    let mut per_episode = Vec::with_capacity(protocol.episodes());
    let mut kept = Vec::new();
    for (seed, env_seed) in protocol.schedule() {
        let e = env.clone().with_seed(env_seed);
        let record = run_episode(&e, controller, protocol.team_switch, env_seed ^ 0x9e37_79b9_7f4a_7c15)?;
        per_episode.push(metrics(&record, seed, protocol.target_coverage));
        if kept.len() < keep {
            kept.push(record);
        }
    }
    let report = EvalReport::from_episodes(&name, env.n_agents, protocol, hash, per_episode);
    Ok((report, kept))
}

/// Greedy SR and Steps of a model over `episodes` fixed episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuickEval {
    pub sr_mean: f64,
    pub sr_std: f64,
    /// NaN when no episode completed.
    pub steps_mean: f64,
}

pub fn evaluate_model(env: &EnvConfig, model: &Model, episodes: usize, seed: u64) -> Result<QuickEval, ModelError> {
    let protocol = EvalProtocol { seeds: vec![seed], episodes_per_seed: episodes.max(1), ..EvalProtocol::default() };
    let mut c = HierController::new(model.clone(), DecisionMode::Greedy);
    match evaluate(env, &mut c, &protocol, 0) {
        Ok((r, _)) => Ok(QuickEval { sr_mean: r.sr_mean, sr_std: r.sr_std, steps_mean: r.steps_mean.unwrap_or(f64::NAN) }),
        Err(HarnessError::Model(e)) => Err(e),
        Err(HarnessError::Env(e)) => Err(e.into()),
        Err(HarnessError::Tensor(e)) => Err(e.into()),
        Err(e) => Err(ModelError::Tensor(TensorError::Io(std::io::Error::other(e.to_string())))),
    }
}

/// Check a model can run every team size the protocol visits.
pub fn check_compatible(model: &Model, sizes: &[usize], path: &Path) -> Result<(), HarnessError> {
    let fixed = matches!(model.spec.matcher, MatcherNet::Mlp(_)) || matches!(model.spec.executor, ExecutorNet::Mlp(_));
    if fixed {
        if let Some(&n) = sizes.iter().find(|&&n| n != model.spec.n_agents) {
            return Err(HarnessError::Incompatible {
                path: path.to_path_buf(),
                reason: format!("fixed-size {} model built for {} agents, asked to run {n}", model.spec.kind.name(), model.spec.n_agents),
            });
        }
    }
    Ok(())
}

/// Controller for a policy spec; learned kinds load their checkpoint.
pub fn build_controller(spec: &PolicySpec, sizes: &[usize]) -> Result<Box<dyn Controller>, HarnessError> {
    if spec.kind == "scripted" {
        return Ok(Box::new(ScriptedController::new(spec.scripted)));
    }
    let kind = PolicyKind::parse(&spec.kind).ok_or_else(|| HarnessError::Config(format!("unknown policy kind {:?}", spec.kind)))?;
    let path = spec.checkpoint.as_ref().ok_or_else(|| HarnessError::Config(format!("policy {} needs a checkpoint", spec.kind)))?;
    if !path.exists() {
        return Err(HarnessError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let mut model = Model::load(path)?;
    if kind == PolicyKind::RandomGoal && model.spec.kind != PolicyKind::RandomGoal {
        // Reuse a trained executor with random goals.
        model = model.with_matcher(PolicyKind::RandomGoal, MatcherNet::Random);
    }
    if model.spec.kind != kind {
        return Err(HarnessError::Incompatible {
            path: path.clone(),
            reason: format!("holds a {} model, config asks for {}", model.spec.kind.name(), kind.name()),
        });
    }
    check_compatible(&model, sizes, path)?;
    Ok(Box::new(HierController::new(model, DecisionMode::Greedy)))
}

fn sizes(cfg: &ExperimentConfig) -> Vec<usize> {
    match cfg.protocol.team_switch {
        Some(s) => vec![s.n1, s.n2],
        None => vec![cfg.env.n_agents],
    }
}

fn finish(cfg: &ExperimentConfig, mut report: EvalReport, records: &[EpisodeRecord], stem: &str) -> Result<EvalReport, HarnessError> {
    report.config_hash = cfg.hash();
    if let Some(dir) = &cfg.output_dir {
        report.write(dir, stem)?;
        if !records.is_empty() {
            let text: String = records.iter().map(EpisodeRecord::to_jsonl).collect();
            fs::write(dir.join("episodes.jsonl"), text)?;
        }
    }
    Ok(report)
}

/// Fixed-team evaluation; writes `report.json`, `report.csv` and any kept
/// episodes under the output directory.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<EvalReport, HarnessError> {
    let mut controller = build_controller(&cfg.policy, &sizes(cfg))?;
    let (report, records) = evaluate(&cfg.env, controller.as_mut(), &cfg.protocol, cfg.record_episodes)?;
    finish(cfg, report, &records, "report")
}

/// Evaluation with a mid-episode team switch.
pub fn run_vary_team(cfg: &ExperimentConfig) -> Result<EvalReport, HarnessError> {
    if cfg.protocol.team_switch.is_none() {
        return Err(HarnessError::Config("vary-team needs protocol.team_switch".into()));
    }
    if cfg.policy.kind != "scripted" && cfg.policy.checkpoint.is_none() {
        return Err(HarnessError::Config("vary-team needs a checkpoint".into()));
    }
    let mut controller = build_controller(&cfg.policy, &sizes(cfg))?;
    let (report, records) = evaluate(&cfg.env, controller.as_mut(), &cfg.protocol, cfg.record_episodes)?;
    finish(cfg, report, &records, "vary_team")
}

/// Several policies under one protocol, with bootstrap intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub report: EvalReport,
    pub sr_ci: Option<Interval>,
    pub steps_ci: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub env: EnvConfig,
    pub policies: Vec<PolicySpec>,
    #[serde(default)]
    pub protocol: EvalProtocol,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: u32,
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

pub const BOOTSTRAP_RESAMPLES: usize = 2000;

impl AblationRow {
    pub fn new(report: EvalReport) -> Self {
        let sr_ci = bootstrap_mean_ci(&report.sr_values(), 0.95, BOOTSTRAP_RESAMPLES, 17);
        let steps_ci = bootstrap_mean_ci(&report.steps_values(), 0.95, BOOTSTRAP_RESAMPLES, 17);
        Self { report, sr_ci, steps_ci }
    }
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let ci = |c: &Option<Interval>| c.map_or_else(|| "\\,\\".to_string(), |c| format!("{:.4},{:.4}", c.lo, c.hi));
        let mut s = format!("{REPORT_CSV_HEADER},sr_ci_lo,sr_ci_hi,steps_ci_lo,steps_ci_hi\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.report.csv_row(), ci(&r.sr_ci), ci(&r.steps_ci)));
        }
        s
    }
}

pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport, HarnessError> {
    let hash = config_hash(&AblationConfig { output_dir: None, ..cfg.clone() });
    let mut rows = Vec::with_capacity(cfg.policies.len());
    for p in &cfg.policies {
        let mut c = build_controller(p, &[cfg.env.n_agents])?;
        let (mut report, _) = evaluate(&cfg.env, c.as_mut(), &cfg.protocol, 0)?;
        if p.kind != report.policy {
            report.policy = p.kind.clone();
        }
        report.config_hash = hash.clone();
        rows.push(AblationRow::new(report));
    }
    let out = AblationReport { version: REPORT_VERSION, config_hash: hash, rows };
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&out)?)?;
        fs::write(dir.join("ablation.csv"), out.to_csv())?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(episodes: usize) -> EvalProtocol {
        EvalProtocol { seeds: vec![0, 1], episodes_per_seed: episodes, ..EvalProtocol::default() }
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig {
            env: EnvConfig::mpe(3),
            policy: PolicySpec { kind: "scripted".into(), checkpoint: None, scripted: Default::default() },
            protocol: quick(1),
            output_dir: Some("a".into()),
            record_episodes: 0,
        };
        let b = ExperimentConfig { output_dir: Some("b".into()), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ExperimentConfig { record_episodes: 1, ..a.clone() }.hash());
    }

    #[test]
    fn schedule_is_seed_major_and_stable() {
        let p = quick(3);
        let s = p.schedule();
        assert_eq!(s.len(), 6);
        assert!(s[..3].iter().all(|x| x.0 == 0) && s[3..].iter().all(|x| x.0 == 1));
        assert_eq!(s, p.schedule());
    }

    #[test]
    fn scripted_report_counts_and_ranges() {
        let env = EnvConfig::mpe(5);
        let mut c = ScriptedController::new(ScriptedConfig::default());
        let (r, kept) = evaluate(&env, &mut c, &quick(5), 2).unwrap();
        assert_eq!(r.episodes, 10);
        assert_eq!(kept.len(), 2);
        assert!((0.0..=1.0).contains(&r.sr_mean));
        assert_eq!(r.reached, r.per_episode.iter().filter(|e| e.steps.is_some()).count());
        assert!(r.to_csv().lines().count() == 2);
    }

    #[test]
    fn zero_horizon_reports_initial_coverage() {
        let env = EnvConfig { horizon: 0, ..EnvConfig::mpe(5) };
        let mut c = ScriptedController::new(ScriptedConfig::default());
        let (r, kept) = evaluate(&env, &mut c, &quick(3), 6).unwrap();
        for (e, rec) in r.per_episode.iter().zip(&kept) {
            assert_eq!(rec.steps.len(), 1);
            assert_eq!(e.sr, rec.steps[0].coverage);
        }
        assert_eq!(r.steps_mean, None);
        assert!(r.to_csv().contains(",\\,\\,"));
    }

    #[test]
    fn identity_switch_matches_fixed_team_metrics() {
        let env = EnvConfig::mpe(4);
        let mut c = ScriptedController::new(ScriptedConfig::default());
        let (fixed, _) = evaluate(&env, &mut c, &quick(4), 0).unwrap();
        let p = EvalProtocol { team_switch: Some(TeamSwitch { n1: 4, n2: 4 }), ..quick(4) };
        let (switched, _) = evaluate(&env, &mut c, &p, 0).unwrap();
        assert_eq!(fixed.sr_values(), switched.sr_values());
        assert_eq!(fixed.steps_values(), switched.steps_values());
    }

    #[test]
    fn grown_team_gets_goals() {
        use crate::policy::{ModelSpec, ModelWidths};
        let env = EnvConfig::mpe(5);
        let w = ModelWidths { embed: 8, heads: 2, hidden: 8, critic_hidden: 8 };
        let spec = ModelSpec::new(PolicyKind::Masp, 5, w).unwrap();
        let params = spec.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut c = HierController::new(Model { spec, params }, DecisionMode::Greedy);
        let p = EvalProtocol { team_switch: Some(TeamSwitch { n1: 3, n2: 5 }), ..quick(5) };
        let (_, kept) = evaluate(&env, &mut c, &p, 10).unwrap();
        for rec in &kept {
            assert_eq!(rec.header.landmarks.len(), 3);
            assert!(new_agents_assigned(rec));
        }
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let spec = PolicySpec { kind: "masp".into(), checkpoint: Some("/nonexistent/x.json".into()), scripted: ScriptedConfig::default() };
        assert!(matches!(build_controller(&spec, &[5]), Err(HarnessError::Config(_))));
        let spec = PolicySpec { kind: "nope".into(), checkpoint: None, scripted: ScriptedConfig::default() };
        assert!(build_controller(&spec, &[5]).is_err());
    }
}
