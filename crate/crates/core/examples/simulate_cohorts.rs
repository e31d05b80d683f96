//! Writes a small simulated cohort directory (NIfTI volumes plus JSON
//! metadata), the same layout `sct-sentinel simulate` produces.
//!
//!     cargo run --example simulate_cohorts -- [out_dir]

use std::path::PathBuf;

use sct_sentinel::sim::{simulate_cohorts, SimulationConfig};

fn main() -> Result<(), sct_sentinel::Error> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "cohort".into());
    let cfg = SimulationConfig {
        counts: [3, 3, 3],
        dims: [48, 48, 48],
        ..SimulationConfig::default()
    };
    let plan = simulate_cohorts(&cfg)?;
    for c in &plan.cases {
        println!("{} {:<15} {:?} reference={}", c.case_id, c.cohort.as_str(), c.shift, c.has_reference);
    }
    plan.write_to(&out, 0)?;
    println!("wrote {} cases to {}", plan.len(), out.display());
    Ok(())
}
