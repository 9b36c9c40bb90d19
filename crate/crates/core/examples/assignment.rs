//! Optimal and greedy matchings on one world, and the matcher reward of each agent.

use masp::assign::{cost_matrix, greedy_nearest, hungarian, matcher_reward, AssignmentOutcome};
use masp::env::{reset, EnvConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let world = reset(&EnvConfig::mpe(5).with_seed(3))?;
    let costs = cost_matrix(&world.agent_pos, &world.landmark_pos)?;
    let (best, total) = hungarian(&costs);
    println!("hungarian {best:?} cost {total:.3}");
    let order: Vec<usize> = (0..costs.n()).collect();
    let greedy = greedy_nearest(&costs, &order);
    println!("greedy    {greedy:?} cost {:.3}", costs.total(&greedy));
    let outcome = AssignmentOutcome::new(&costs, greedy)?;
    for k in 0..costs.n() {
        println!("agent {k} reward {:+.3}", matcher_reward(&outcome, k)?);
    }
    Ok(())
}
