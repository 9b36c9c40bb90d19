//! Play one scripted episode and draw it as SVG.

use masp::baselines::ScriptedConfig;
use masp::env::EnvConfig;
use masp::harness::render::write_svg;
use masp::harness::run_episode;
use masp::policy::ScriptedController;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "episode.svg".into());
    let env = EnvConfig::mpe(5).with_seed(5);
    let mut scripted = ScriptedController::new(ScriptedConfig::default());
    let record = run_episode(&env, &mut scripted, None, 0)?;
    write_svg(&record, out.as_ref())?;
    println!("coverage {:.2}, wrote {out}", record.final_coverage());
    Ok(())
}
