//! Grow the team from 3 to 5 agents a third of the way in.
//!
//! Pass a masp checkpoint to run the learned policy; without one the scripted
//! baseline runs, and it leaves agents beyond the open landmarks idle.

use masp::baselines::ScriptedConfig;
use masp::env::EnvConfig;
use masp::harness::{evaluate, new_agents_assigned, EvalProtocol, TeamSwitch};
use masp::model::DecisionMode;
use masp::policy::{Controller, HierController, Model, ScriptedController};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let protocol = EvalProtocol { episodes_per_seed: 10, team_switch: Some(TeamSwitch { n1: 3, n2: 5 }), ..EvalProtocol::default() };
    let mut controller: Box<dyn Controller> = match std::env::args().nth(1) {
        Some(path) => Box::new(HierController::new(Model::load(path.as_ref())?, DecisionMode::Greedy)),
        None => Box::new(ScriptedController::new(ScriptedConfig::default())),
    };
    let (report, records) = evaluate(&EnvConfig::mpe(3), controller.as_mut(), &protocol, 5)?;
    print!("{}", report.to_csv());
    for r in &records {
        println!("env seed {} new agents assigned: {}", r.header.seed, new_agents_assigned(r));
    }
    Ok(())
}
