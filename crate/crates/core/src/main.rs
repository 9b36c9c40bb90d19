use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use masp::env::EnvConfig;
use masp::harness::render::write_svg;
use masp::harness::{
    build_controller, run_ablation, run_episode, run_eval, run_vary_team, AblationConfig, EpisodeRecord, EvalProtocol, ExperimentConfig,
    PolicySpec, TeamSwitch,
};
use masp::policy::PolicyKind;
use masp::selftest;
use masp::train::{train, TrainJob, TrainOutput};

#[derive(Parser)]
#[command(name = "masp", version, about = "Train, evaluate and render multi-agent goal assignment policies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file for the subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override. Evaluation runs use seed, seed+1, ... for as many
    /// seeds as the protocol lists.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct PlayArgs {
    /// scripted, masp, random_goal, mgm_mlp or cae_mlp.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct PolicyArgs {
    #[command(flatten)]
    play: PlayArgs,
    /// Episodes per seed.
    #[arg(long)]
    episodes: Option<usize>,
    /// Output directory for reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Episodes to keep as JSONL trajectories.
    #[arg(long)]
    record: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy with MAPPO; writes checkpoint.json and curve.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Total environment steps.
        #[arg(long)]
        steps: Option<usize>,
        /// masp, random_goal, mgm_mlp or cae_mlp.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        n_agents: Option<usize>,
    },
    /// Evaluate one policy on a fixed team size.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        n_agents: Option<usize>,
    },
    /// Evaluate with a team-size switch at one third of the horizon.
    VaryTeam {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        n1: Option<usize>,
        #[arg(long)]
        n2: Option<usize>,
    },
    /// Evaluate several policies under one protocol with bootstrap intervals.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw an episode as SVG, from a JSONL log or by running a policy.
    Render {
        #[command(flatten)]
        common: Common,
        /// JSONL episode log; without it an episode is played from --config.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Which episode of the log.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        /// SVG file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        play: PlayArgs,
    },
    /// Run the built-in property suites.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn reseed(protocol: &mut EvalProtocol, seed: Option<u64>) {
    if let Some(s) = seed {
        let n = protocol.seeds.len().max(1) as u64;
        protocol.seeds = (s..s + n).collect();
    }
}

fn experiment(common: &Common, args: &PolicyArgs, n_agents: Option<usize>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig {
            env: EnvConfig::mpe(n_agents.unwrap_or(5)),
            policy: PolicySpec { kind: "scripted".into(), checkpoint: None, scripted: Default::default() },
            protocol: EvalProtocol::default(),
            output_dir: None,
            record_episodes: 0,
        },
    };
    if let (Some(n), Some(_)) = (n_agents, &common.config) {
        let seed = cfg.env.seed;
        cfg.env = EnvConfig::mpe(n).with_seed(seed);
    }
    if let Some(kind) = &args.play.policy {
        cfg.policy.kind = kind.clone();
    }
    if let Some(c) = &args.play.checkpoint {
        cfg.policy.checkpoint = Some(c.clone());
    }
    if let Some(e) = args.episodes {
        cfg.protocol.episodes_per_seed = e;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = Some(o.clone());
    }
    if let Some(r) = args.record {
        cfg.record_episodes = r;
    }
    reseed(&mut cfg.protocol, common.seed);
    Ok(cfg)
}

fn print_report(r: &masp::harness::EvalReport) {
    print!("{}", r.to_csv());
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { common, out, steps, kind, n_agents } => {
            let mut job: TrainJob = match &common.config {
                Some(p) => read_json(p)?,
                None => TrainJob::default(),
            };
            if let Some(n) = n_agents {
                job.env = EnvConfig::mpe(n);
            }
            if let Some(s) = common.seed {
                job.train.seed = s;
            }
            if let Some(s) = steps {
                job.train.total_env_steps = s;
            }
            if let Some(k) = kind {
                job.train.kind = PolicyKind::parse(&k).with_context(|| format!("unknown policy kind {k:?}"))?;
            }
            if let Some(o) = out {
                job.output_dir = Some(o);
            }
            let dir = job.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
            let r = train(&job.train, &job.env, &TrainOutput { dir: Some(dir.clone()) })?;
            if let Some(p) = r.curve.last() {
                println!("env_steps={} updates={} sr={:.3} steps={:.2}", r.env_steps, r.updates, p.sr_mean, p.steps_mean);
            }
            println!("wrote {}", dir.display());
        }
        Cmd::Eval { common, policy, n_agents } => {
            let cfg = experiment(&common, &policy, n_agents)?;
            print_report(&run_eval(&cfg)?);
        }
        Cmd::VaryTeam { common, policy, n1, n2 } => {
            let mut cfg = experiment(&common, &policy, None)?;
            let switch = cfg.protocol.team_switch.get_or_insert(TeamSwitch { n1: 3, n2: 5 });
            if let Some(n) = n1 {
                switch.n1 = n;
            }
            if let Some(n) = n2 {
                switch.n2 = n;
            }
            print_report(&run_vary_team(&cfg)?);
        }
        Cmd::Ablate { common, episodes, out } => {
            let Some(path) = &common.config else { bail!("ablate needs --config listing the policies") };
            let mut cfg: AblationConfig = read_json(path)?;
            if let Some(e) = episodes {
                cfg.protocol.episodes_per_seed = e;
            }
            if let Some(o) = out {
                cfg.output_dir = Some(o);
            }
            reseed(&mut cfg.protocol, common.seed);
            print!("{}", run_ablation(&cfg)?.to_csv());
        }
        Cmd::Render { common, input, episode, out, play } => {
            let record = match input {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    let mut all = EpisodeRecord::parse_jsonl(&text)?;
                    if episode >= all.len() {
                        bail!("{} holds {} episodes, asked for index {episode}", p.display(), all.len());
                    }
                    all.swap_remove(episode)
                }
                None => {
                    let args = PolicyArgs { play, episodes: None, out: None, record: None };
                    let cfg = experiment(&common, &args, None)?;
                    let sizes = match cfg.protocol.team_switch {
                        Some(s) => vec![s.n1, s.n2],
                        None => vec![cfg.env.n_agents],
                    };
                    let mut env = cfg.env.clone().with_seed(common.seed.unwrap_or(cfg.env.seed));
                    if let Some(s) = cfg.protocol.team_switch {
                        env.n_agents = s.n1;
                        env.max_agents = env.max_agents.max(s.n2);
                    }
                    let mut c = build_controller(&cfg.policy, &sizes)?;
                    run_episode(&env, c.as_mut(), cfg.protocol.team_switch, env.seed)?
                }
            };
            write_svg(&record, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
        }
        Cmd::Selftest { common } => {
            if let Some(p) = &common.config {
                bail!("selftest takes no config (got {})", p.display());
            }
            let results = selftest::run_all(common.seed.unwrap_or(0));
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", results.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
