//! Body contour of a phantom MR, compared against the constructed truth.

use sct_sentinel::contour::{extract_body_contour, otsu_threshold, Connectivity, ContourParams, ThresholdMode};
use sct_sentinel::phantom::{generate_phantom, PhantomSpec};

fn main() -> Result<(), sct_sentinel::Error> {
    let phantom = generate_phantom(&PhantomSpec::head([64, 64, 64], 5))?;
    println!("otsu cutoff {:.2}", otsu_threshold(&phantom.mr)?);
    for params in [
        ContourParams::default(),
        ContourParams {
            threshold_mode: ThresholdMode::FixedFraction(0.3),
            closing_radius_voxels: 1,
            connectivity: Connectivity::FaceEdgeVertex26,
        },
    ] {
        let body = extract_body_contour(&phantom.mr, &params)?;
        println!(
            "{:?}: {} voxels, dice vs truth {:.4}",
            params,
            body.count(),
            body.dice(&phantom.body)?
        );
    }
    Ok(())
}
