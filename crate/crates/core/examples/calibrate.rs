//! Threshold calibration on in-distribution cases and classification of the
//! shifted cohorts.

use sct_sentinel::pipeline::{evaluate_plan, EvalOptions};
use sct_sentinel::sim::{simulate_cohorts, Cohort, SimulationConfig};
use sct_sentinel::stats::{calibrate_threshold, classify, ThresholdMethod, Verdict};

fn main() -> Result<(), sct_sentinel::Error> {
    let cfg = SimulationConfig {
        counts: [8, 6, 6],
        dims: [48, 48, 48],
        ..SimulationConfig::default()
    };
    let outcomes = evaluate_plan(&simulate_cohorts(&cfg)?, &EvalOptions::default(), 0)?;
    let calib: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.cohort == Cohort::InDist)
        .map(|o| o.mean_uncertainty)
        .collect();
    for method in [
        ThresholdMethod::MaxPlusMargin { margin: 0.0 },
        ThresholdMethod::MeanPlusKSigma { k: 3.0 },
    ] {
        let t = calibrate_threshold(&calib, method)?;
        println!("{method}: {:.2} HU from {} cases", t.value, t.calibration_cohort_size);
        for cohort in Cohort::ALL {
            let flagged = outcomes
                .iter()
                .filter(|o| o.cohort == cohort)
                .filter(|o| classify(o.mean_uncertainty, &t) == Verdict::OutOfDistribution)
                .count();
            let n = outcomes.iter().filter(|o| o.cohort == cohort).count();
            println!("  {:<15} flagged {flagged}/{n}", cohort.as_str());
        }
    }
    Ok(())
}
