//! Agent groups and untrained action logits of the grouped graph executor.

use masp::cae::{exec_obs, make_groups, ExecutorConfig, GraphExecutor};
use masp::env::{reset, EnvConfig};
use masp::tensor::{ParamStore, Tape};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = EnvConfig::mpe(5).with_seed(2);
    let world = reset(&env)?;
    println!("groups of agent 0: {:?}", make_groups(&world, 0)?.groups);
    let ex = GraphExecutor::new("cae", ExecutorConfig { hidden: 16 });
    let mut params = ParamStore::new();
    ex.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0))?;
    let obs: Vec<_> = (0..env.n_agents).map(|a| exec_obs(&env, &world, a, Some(a))).collect::<Result<_, _>>()?;
    let refs: Vec<_> = obs.iter().collect();
    let mut tape = Tape::new();
    let h = tape.constant(Array2::zeros((refs.len(), ex.hidden_size())));
    let out = ex.forward(&mut tape, &params, &refs, h)?;
    for (a, row) in tape.value(out.logits).rows().into_iter().enumerate() {
        println!("agent {a} logits {:.3?}", row.to_vec());
    }
    Ok(())
}
