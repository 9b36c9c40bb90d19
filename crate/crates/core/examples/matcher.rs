//! Goal distribution of a freshly initialised attention matcher. Covered
//! landmarks get zero probability.

use masp::env::{reset, EnvConfig};
use masp::mgm::{build_match_obs, AttentionMatcher, MatcherConfig};
use masp::tensor::{ParamStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = EnvConfig::mpe(4).with_seed(11);
    let mut world = reset(&env)?;
    world.covered[2] = true;
    let matcher = AttentionMatcher::new("mgm", MatcherConfig { embed: 16, heads: 2, ..MatcherConfig::default() })?;
    let mut params = ParamStore::new();
    matcher.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0))?;
    for agent in 0..env.n_agents {
        let obs = build_match_obs(&env, &world, agent)?;
        let mut tape = Tape::new();
        let lp = matcher.log_probs(&mut tape, &params, &[&obs])?;
        let probs: Vec<String> = tape.value(lp).iter().map(|l| format!("{:.3}", l.exp())).collect();
        println!("agent {agent}: [{}]", probs.join(", "));
    }
    Ok(())
}
