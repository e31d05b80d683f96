//! NIfTI-1 and raw sidecar round trips.

use sct_sentinel::io::{read_header, read_raw, read_volume, write_raw, write_volume};
use sct_sentinel::volume::{Semantics, Volume, VoxelGrid};

fn main() -> Result<(), sct_sentinel::Error> {
    let dir = std::env::temp_dir().join("sct_sentinel_nifti_example");
    std::fs::create_dir_all(&dir).map_err(|e| sct_sentinel::Error::IoFailure { path: dir.clone(), source: e })?;
    let grid = VoxelGrid::new([20, 16, 12], [1.0, 1.2, 2.5], [-10.0, -9.6, -15.0])?;
    let v = Volume::from_fn(grid, Semantics::HounsfieldUnits, |x, y, z| (x * 10 + y) as f32 - z as f32 * 0.5)?;

    for name in ["vol.nii", "vol.nii.gz"] {
        let path = dir.join(name);
        write_volume(&v, &path)?;
        let back = read_volume(&path, Semantics::HounsfieldUnits)?;
        let h = read_header(&path)?;
        println!("{name}: dims {:?}, pixdim {:?}, identical {}", &h.dim[1..4], &h.pixdim[1..4], back == v);
    }

    let stem = dir.join("vol");
    write_raw(&v, &stem, Default::default())?;
    let (back, meta) = read_raw(&stem)?;
    println!("raw: {} {:?}, identical {}", meta.format, meta.dims, back == v);
    Ok(())
}
