//! Evaluate the scripted baseline under a short protocol and print the CSV row.

use masp::baselines::ScriptedConfig;
use masp::env::EnvConfig;
use masp::harness::{evaluate, EvalProtocol};
use masp::policy::ScriptedController;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let protocol = EvalProtocol { episodes_per_seed: 20, ..EvalProtocol::default() };
    let mut scripted = ScriptedController::new(ScriptedConfig::default());
    let (report, _) = evaluate(&EnvConfig::mpe(5), &mut scripted, &protocol, 0)?;
    print!("{}", report.to_csv());
    println!("full coverage in {:.1}% of episodes", 100.0 * report.full_coverage_fraction());
    Ok(())
}
