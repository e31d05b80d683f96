//! One case end to end: phantom, three generator stubs, median fusion,
//! uncertainty inside the body contour, and a QC verdict.

use sct_sentinel::contour::ContourParams;
use sct_sentinel::ensemble::run_ensemble;
use sct_sentinel::phantom::{apply_shift, generate_phantom, stub_generate, PhantomSpec, Plane, ShiftMode, StubErrorModel};
use sct_sentinel::stats::{mae_within_mask, QcReport, QcThreshold};

fn main() -> Result<(), sct_sentinel::Error> {
    let phantom = generate_phantom(&PhantomSpec::head([64, 64, 64], 1))?;
    let threshold = QcThreshold::explicit(60.0)?;

    for (name, mode) in [
        ("in-distribution", ShiftMode::InDist),
        ("scanner shift", ShiftMode::ScannerShift { gamma: 0.6, noise_scale: 1.5 }),
    ] {
        let mr = apply_shift(&phantom.mr, &mode, &phantom.brain, 9)?;
        let members = Plane::ALL
            .iter()
            .enumerate()
            .map(|(i, &plane)| stub_generate(&phantom.ct, &mr, &phantom.mr, &StubErrorModel::new(plane, 100 + i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let run = run_ensemble(&members, &mr, &ContourParams::default())?;
        let mae = mae_within_mask(&run.result.fused, &phantom.ct, &run.body)?;
        let report = QcReport::new(name, run.mean_uncertainty, &threshold, Some(mae), "1970-01-01T00:00:00Z");
        println!("{}", serde_json::to_string_pretty(&report).unwrap());
    }
    Ok(())
}
