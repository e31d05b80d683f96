//! Simulates the three cohorts in memory, runs the QC pipeline on every case
//! and writes report.csv, report.json and the two SVG plots.
//!
//!     cargo run --release --example cohort_report -- [out_dir] [--dims N] [--jobs N]

use std::path::PathBuf;
use std::time::Instant;

use sct_sentinel::pipeline::{evaluate_plan, EvalOptions};
use sct_sentinel::report::{build_report, CorrelationGroup};
use sct_sentinel::sim::{simulate_cohorts, Cohort, SimulationConfig};
use sct_sentinel::stats::{calibrate_threshold, ThresholdMethod};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut out = PathBuf::from("cohort_report");
    let mut cfg = SimulationConfig::default();
    let mut jobs = 0;
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "--dims" => cfg.dims = [args.next().ok_or("--dims needs a value")?.parse()?; 3],
            "--jobs" => jobs = args.next().ok_or("--jobs needs a value")?.parse()?,
            _ => out = PathBuf::from(a),
        }
    }

    let start = Instant::now();
    let plan = simulate_cohorts(&cfg)?;
    let outcomes = evaluate_plan(&plan, &EvalOptions::default(), jobs)?;
    let elapsed = start.elapsed();

    let in_dist: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.cohort == Cohort::InDist)
        .map(|o| o.mean_uncertainty)
        .collect();
    let threshold = calibrate_threshold(&in_dist, ThresholdMethod::MaxPlusMargin { margin: 0.0 })?;
    let report = build_report(&outcomes, &threshold, "1970-01-01T00:00:00Z")?;
    report.write_to(&out, true)?;

    println!("{} cases in {:.1?}", outcomes.len(), elapsed);
    for c in &report.cohorts {
        println!(
            "{:<15} n={:<3} mean uncertainty {:7.2} ± {:5.2} HU",
            c.cohort.as_str(),
            c.stats.n,
            c.stats.mean_u,
            c.stats.std_u
        );
    }
    for t in &report.t_tests {
        println!("welch {} vs {}: t={:.2} df={:.1} p={:.3e}", t.a, t.b, t.welch.t, t.welch.df, t.welch.p_two_sided);
    }
    if let Some(c) = report.correlation(CorrelationGroup::Pooled) {
        println!("pooled r={:.3} slope={:.3} (n={})", c.r, c.fit.slope, c.n);
    }
    println!("threshold {:.2} HU ({}), outputs in {}", threshold.value, threshold.method, out.display());
    Ok(())
}
