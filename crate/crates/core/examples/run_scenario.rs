//! Runs a scenario file and prints its metrics.

use std::path::PathBuf;

use dada_core::simulator::{run_scenario, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path: PathBuf = std::env::args()
        .nth(1)
        .ok_or("usage: run_scenario <scenario.json>")?
        .into();
    let scenario = Scenario::load(&path)?;
    let out = run_scenario(&scenario)?;
    println!("{}", serde_json::to_string_pretty(&out.metrics)?);
    for r in &out.reports {
        println!(
            "report {} w{} score {:.2} {:?} {:?}",
            r.mac, r.window_start_s, r.score, r.proposed_action, r.offending_dims
        );
    }
    for f in scenario.expect.check(&out.metrics) {
        println!("FAIL {f}");
    }
    Ok(())
}
