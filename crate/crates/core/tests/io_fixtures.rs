mod common;

use common::{malformed_fixtures, RawNifti};
use sct_sentinel::io::{decode_nifti, read_volume, write_volume};
use sct_sentinel::volume::{Semantics, Volume, VoxelGrid};

#[test]
fn malformed_headers_map_to_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    for (name, bytes, kind) in malformed_fixtures() {
        let path = dir.path().join(format!("{name}.nii"));
        std::fs::write(&path, &bytes).unwrap();
        let err = read_volume(&path, Semantics::MrIntensityArbitrary).unwrap_err();
        assert_eq!(err.kind(), kind, "{name}: {err}");
    }
}

#[test]
fn missing_file_is_input_not_found() {
    let err = read_volume("/no/such/file.nii", Semantics::HounsfieldUnits).unwrap_err();
    assert_eq!(err.kind(), "InputNotFound");
}

#[test]
fn int16_with_slope_and_intercept() {
    let raw: Vec<i16> = vec![0, 1, -1, 2048, 4000, -32768, 32767, 100];
    let bytes = RawNifti::int16([2, 2, 2], &raw, 0.5, -1024.0).to_bytes();
    let mr = decode_nifti(&bytes, Semantics::MrIntensityArbitrary).unwrap();
    for (&r, &v) in raw.iter().zip(mr.values()) {
        assert_eq!(v, (f64::from(r) * 0.5 - 1024.0) as f32);
    }
    let ct = decode_nifti(&bytes, Semantics::HounsfieldUnits).unwrap();
    for (&r, &v) in raw.iter().zip(ct.values()) {
        assert_eq!(v, ((f64::from(r) * 0.5 - 1024.0) as f32).clamp(-1024.0, 3071.0));
    }
}

#[test]
fn gz_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let grid = VoxelGrid::new([5, 4, 3], [0.9, 1.1, 2.0], [1.0, -2.0, 3.5]).unwrap();
    let v = Volume::from_fn(grid, Semantics::HounsfieldUnits, |x, y, z| (x + 7 * y) as f32 - 0.25 * z as f32).unwrap();
    let path = dir.path().join("a.nii.gz");
    write_volume(&v, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..2], &[0x1f, 0x8b]);
    let back = read_volume(&path, Semantics::HounsfieldUnits).unwrap();
    // spacing is stored as float32 in the header
    assert!(back.grid().is_compatible(v.grid()));
    assert_eq!(back.grid().dims(), v.grid().dims());
    assert_eq!(back.values(), v.values());
}
