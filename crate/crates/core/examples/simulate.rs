//! Drive the particle world with a fixed action pattern and print coverage.

use masp::env::{coverage_fraction, reset, step, Action, EnvConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env = EnvConfig::mpe(5).with_seed(7);
    let mut world = reset(&env)?;
    let pattern = [Action::Up, Action::Right, Action::Down, Action::Left, Action::Stay];
    for t in 0..env.horizon {
        let actions: Vec<Action> = (0..env.n_agents).map(|i| pattern[(i + t / 4) % pattern.len()]).collect();
        let (next, events) = step(&env, &world, &actions)?;
        world = next;
        println!("t={:2} coverage={:.2} collisions={}", world.t, coverage_fraction(&world), events.collisions.len());
    }
    Ok(())
}
