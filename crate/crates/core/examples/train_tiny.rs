//! A short MAPPO run on three agents. Writes checkpoint.json and curve.csv.

use masp::env::EnvConfig;
use masp::policy::ModelWidths;
use masp::train::{train, TrainConfig, TrainOutput};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example_train".into());
    let cfg = TrainConfig {
        widths: ModelWidths { embed: 16, heads: 2, hidden: 16, critic_hidden: 32 },
        total_env_steps: 5_000,
        parallel_envs: 8,
        eval_interval: 1_000,
        eval_episodes: 10,
        ..TrainConfig::default()
    };
    let r = train(&cfg, &EnvConfig::mpe(3), &TrainOutput { dir: Some(out.clone().into()) })?;
    for p in &r.curve {
        println!("{:>6} sr {:.3} steps {:.2}", p.env_steps, p.sr_mean, p.steps_mean);
    }
    println!("wrote {out}");
    Ok(())
}
