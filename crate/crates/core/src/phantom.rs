//! Synthetic head phantoms and plane-specific generator stubs.
//!
//! A phantom is three nested ellipsoids (scalp, skull, brain) with an air
//! pocket inside the brain, rendered as a paired MR and CT volume. Generator
//! stubs turn the CT into a synthetic CT by adding spatially smooth error
//! whose amplitude grows with how far the input MR has drifted from the
//! reference appearance.
//!
//! # Random streams
//!
//! Every random draw comes from a ChaCha8 generator whose 32-byte key is
//! `SHA-256("sct-sentinel/v1" ‖ seed_le ‖ index_le ‖ stream)`, with `seed` and
//! `index` as little-endian u64 and `stream` a UTF-8 name such as
//! `"phantom"` or `"stub_axial"`. Per-case seeds stored in metadata are the
//! first eight bytes of the same digest, so any implementation of SHA-256 and
//! ChaCha8 reproduces the streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contour::otsu_threshold;
use crate::error::{Error, Result};
use crate::volume::{KahanSum, Mask, Semantics, Volume, VoxelGrid};

const SEED_DOMAIN: &[u8] = b"sct-sentinel/v1";

fn seed_digest(seed: u64, index: u64, stream: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(SEED_DOMAIN);
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    h.update(stream.as_bytes());
    h.finalize().into()
}

/// Derives an independent 64-bit seed for `(seed, index, stream)`.
pub fn derive_seed(seed: u64, index: u64, stream: &str) -> u64 {
    let d = seed_digest(seed, index, stream);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Generator for one named stream of a seed.
pub fn stream_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(seed_digest(seed, 0, stream))
}

/// Per-layer values for one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueValues {
    pub air: f32,
    pub scalp: f32,
    pub skull: f32,
    pub brain: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Ellipsoid semi-axes in voxels, outermost first.
    pub scalp_radii: [f64; 3],
    pub skull_radii: [f64; 3],
    pub brain_radii: [f64; 3],
    /// Semi-axes of the air pocket inside the brain, as fractions of the
    /// brain radii. Zero disables it.
    pub cavity_fraction: [f64; 3],
    pub mr: TissueValues,
    pub ct_hu: TissueValues,
    pub mr_noise_std: f64,
    pub ct_noise_std: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Default head sized to fill most of a `dims` grid.
    pub fn head(dims: [usize; 3], seed: u64) -> Self {
        let scalp = [
            0.42 * dims[0] as f64,
            0.46 * dims[1] as f64,
            0.40 * dims[2] as f64,
        ];
        Self {
            dims,
            spacing_mm: [1.0; 3],
            scalp_radii: scalp,
            skull_radii: scalp.map(|r| r * 0.92),
            brain_radii: scalp.map(|r| r * 0.85),
            cavity_fraction: [0.25, 0.18, 0.18],
            mr: TissueValues {
                air: 0.0,
                scalp: 120.0,
                skull: 75.0,
                brain: 90.0,
            },
            ct_hu: TissueValues {
                air: -1000.0,
                scalp: 40.0,
                skull: 700.0,
                brain: 30.0,
            },
            mr_noise_std: 3.0,
            ct_noise_std: 5.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.dims.iter().any(|&d| d < 32) {
            return bad(format!("dims must each be >= 32, got {:?}", self.dims));
        }
        for (name, r) in [
            ("scalp", self.scalp_radii),
            ("skull", self.skull_radii),
            ("brain", self.brain_radii),
        ] {
            if r.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
                return bad(format!("{name} radii must be finite and > 0, got {r:?}"));
            }
        }
        let nested = (0..3).all(|i| {
            self.scalp_radii[i] > self.skull_radii[i] && self.skull_radii[i] > self.brain_radii[i]
        });
        if !nested {
            return bad("radii must be strictly nested: scalp > skull > brain".into());
        }
        if self.cavity_fraction.iter().any(|&f| !(0.0..0.5).contains(&f)) {
            return bad(format!("cavity fractions must be in [0, 0.5), got {:?}", self.cavity_fraction));
        }
        if !(self.mr_noise_std >= 0.0 && self.ct_noise_std >= 0.0)
            || !self.mr_noise_std.is_finite()
            || !self.ct_noise_std.is_finite()
        {
            return bad("noise std must be finite and >= 0".into());
        }
        VoxelGrid::new(self.dims, self.spacing_mm, [0.0; 3])
            .map_err(|e| Error::InvalidSpec(e.to_string()))?;
        Ok(())
    }

    fn center(&self) -> [f64; 3] {
        self.dims.map(|d| (d as f64 - 1.0) / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Air,
    Scalp,
    Skull,
    Brain,
    Cavity,
}

fn inside(d: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|i| (d[i] / r[i]).powi(2)).sum::<f64>() <= 1.0
}

fn tissue_at(spec: &PhantomSpec, x: usize, y: usize, z: usize) -> Tissue {
    let c = spec.center();
    let d = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
    if !inside(d, spec.scalp_radii) {
        return Tissue::Air;
    }
    if !inside(d, spec.skull_radii) {
        return Tissue::Scalp;
    }
    if !inside(d, spec.brain_radii) {
        return Tissue::Skull;
    }
    if spec.cavity_fraction.iter().all(|&f| f > 0.0) {
        // frontal air pocket
        let br = spec.brain_radii;
        let cav_c = [0.0, 0.45 * br[1], -0.2 * br[2]];
        let cav_r = [
            spec.cavity_fraction[0] * br[0],
            spec.cavity_fraction[1] * br[1],
            spec.cavity_fraction[2] * br[2],
        ];
        if inside([d[0] - cav_c[0], d[1] - cav_c[1], d[2] - cav_c[2]], cav_r) {
            return Tissue::Cavity;
        }
    }
    Tissue::Brain
}

/// Paired MR/CT phantom with its ground-truth masks.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub mr: Volume,
    pub ct: Volume,
    /// Everything inside the outer head surface, air pocket included.
    pub body: Mask,
    /// Brain tissue, air pocket excluded.
    pub brain: Mask,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = VoxelGrid::new(spec.dims, spec.spacing_mm, [0.0; 3])?;
    let labels: Vec<Tissue> = {
        let [nx, ny, nz] = spec.dims;
        let mut v = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    v.push(tissue_at(spec, x, y, z));
                }
            }
        }
        v
    };
    let pick = |t: Tissue, tv: &TissueValues| match t {
        Tissue::Air | Tissue::Cavity => tv.air,
        Tissue::Scalp => tv.scalp,
        Tissue::Skull => tv.skull,
        Tissue::Brain => tv.brain,
    };
    let mut mr_rng = stream_rng(spec.seed, "phantom_mr");
    let mut ct_rng = stream_rng(spec.seed, "phantom_ct");
    let mr_sigma = spec.mr_noise_std as f32;
    let ct_sigma = spec.ct_noise_std as f32;
    let mut mr = Vec::with_capacity(grid.len());
    let mut ct = Vec::with_capacity(grid.len());
    for &t in &labels {
        let mut m = pick(t, &spec.mr);
        if mr_sigma > 0.0 {
            m += mr_sigma * mr_rng.sample::<f32, _>(StandardNormal);
        }
        mr.push(m);
        let mut c = pick(t, &spec.ct_hu);
        if ct_sigma > 0.0 {
            c += ct_sigma * ct_rng.sample::<f32, _>(StandardNormal);
        }
        ct.push(c);
    }
    let body = Mask::new(grid, labels.iter().map(|&t| t != Tissue::Air).collect())?;
    let brain = Mask::new(grid, labels.iter().map(|&t| t == Tissue::Brain).collect())?;
    Ok(Phantom {
        mr: Volume::new(grid, mr, Semantics::MrIntensityArbitrary)?,
        ct: Volume::ingest_hu(grid, ct)?,
        body,
        brain,
    })
}

/// Appearance change applied to the MR input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ShiftMode {
    InDist,
    /// Local enhancement: a compact blob covering `region_fraction` of the
    /// brain voxels is multiplied by `boost_factor`.
    ContrastAgent {
        boost_factor: f64,
        region_fraction: f64,
    },
    /// Global remap: gamma on min–max normalized intensities, then extra
    /// noise so the total noise level is `noise_scale` times the original.
    ScannerShift { gamma: f64, noise_scale: f64 },
}

impl ShiftMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ShiftMode::InDist => Ok(()),
            ShiftMode::ContrastAgent {
                boost_factor,
                region_fraction,
            } => {
                if !(boost_factor.is_finite() && boost_factor > 1.0) {
                    return Err(Error::InvalidSpec(format!("boost factor must be > 1, got {boost_factor}")));
                }
                if !(region_fraction > 0.0 && region_fraction <= 0.2) {
                    return Err(Error::InvalidSpec(format!(
                        "region fraction must be in (0, 0.2], got {region_fraction}"
                    )));
                }
                Ok(())
            }
            ShiftMode::ScannerShift { gamma, noise_scale } => {
                if !(gamma.is_finite() && gamma > 0.0) {
                    return Err(Error::InvalidSpec(format!("gamma must be > 0, got {gamma}")));
                }
                if !(noise_scale.is_finite() && noise_scale > 0.0) {
                    return Err(Error::InvalidSpec(format!("noise scale must be > 0, got {noise_scale}")));
                }
                Ok(())
            }
        }
    }
}

/// Robust noise level from the median absolute difference of x-neighbours.
pub fn estimate_noise_std(v: &Volume) -> f64 {
    let [nx, _, _] = v.grid().dims();
    let mut diffs: Vec<f32> = v
        .values()
        .chunks_exact(nx)
        .flat_map(|row| row.windows(2).map(|w| (w[1] - w[0]).abs()))
        .collect();
    if diffs.is_empty() {
        return 0.0;
    }
    let mid = diffs.len() / 2;
    let (_, med, _) = diffs.select_nth_unstable_by(mid, f32::total_cmp);
    f64::from(*med) / (0.674_489_75 * std::f64::consts::SQRT_2)
}

/// Indices of the `count` brain voxels closest to a seeded brain voxel.
pub fn contrast_blob(brain: &Mask, region_fraction: f64, seed: u64) -> Vec<usize> {
    let grid = brain.grid();
    let mut candidates: Vec<usize> = brain
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return candidates;
    }
    let mut rng = stream_rng(seed, "contrast_blob");
    let center = grid.coords(candidates[rng.random_range(0..candidates.len())]);
    let count = ((region_fraction * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    let key = |i: usize| {
        let c = grid.coords(i);
        let d2: usize = (0..3).map(|k| c[k].abs_diff(center[k]).pow(2)).sum();
        (d2, i)
    };
    if count < candidates.len() {
        candidates.select_nth_unstable_by_key(count - 1, |&i| key(i));
        candidates.truncate(count);
    }
    candidates.sort_unstable();
    candidates
}

pub fn apply_shift(mr: &Volume, mode: &ShiftMode, brain: &Mask, seed: u64) -> Result<Volume> {
    mode.validate()?;
    mr.grid().ensure_compatible(brain.grid())?;
    match *mode {
        ShiftMode::InDist => Ok(mr.clone()),
        ShiftMode::ContrastAgent {
            boost_factor,
            region_fraction,
        } => {
            let mut vals = mr.values().to_vec();
            let boost = boost_factor as f32;
            for i in contrast_blob(brain, region_fraction, seed) {
                vals[i] *= boost;
            }
            mr.with_values(vals)
        }
        ShiftMode::ScannerShift { gamma, noise_scale } => {
            let (lo, hi) = crate::contour::value_range(mr.values());
            let span = hi - lo;
            let extra = if noise_scale > 1.0 {
                estimate_noise_std(mr) * (noise_scale * noise_scale - 1.0).sqrt()
            } else {
                0.0
            };
            let mut rng = stream_rng(seed, "scanner_noise");
            let vals = mr
                .values()
                .iter()
                .map(|&x| {
                    let remapped = if span > 0.0 {
                        let n = (f64::from(x) - lo) / span;
                        lo + span * n.powf(gamma)
                    } else {
                        f64::from(x)
                    };
                    let noise = if extra > 0.0 {
                        extra * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    (remapped + noise) as f32
                })
                .collect();
            mr.with_values(vals)
        }
    }
}

/// Mean absolute intensity difference between the shifted and reference MR
/// inside the reference foreground, divided by the mean reference intensity
/// there. Zero when the two volumes are identical.
pub fn shift_magnitude(mr_shifted: &Volume, mr_reference: &Volume) -> Result<f64> {
    mr_shifted.grid().ensure_compatible(mr_reference.grid())?;
    let cutoff = otsu_threshold(mr_reference)?;
    let mut diff = KahanSum::default();
    let mut level = KahanSum::default();
    let mut n = 0usize;
    for (&s, &r) in mr_shifted.values().iter().zip(mr_reference.values()) {
        if f64::from(r) > cutoff {
            diff.add((f64::from(s) - f64::from(r)).abs());
            level.add(f64::from(r).abs());
            n += 1;
        }
    }
    if n == 0 || level.total() == 0.0 {
        return Err(Error::NoForeground);
    }
    Ok(diff.total() / level.total())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn short_name(self) -> &'static str {
        match self {
            Plane::Axial => "axi",
            Plane::Coronal => "cor",
            Plane::Sagittal => "sag",
        }
    }

    /// Axis (0 = x, 1 = y, 2 = z) normal to the slices this generator sees.
    pub fn normal_axis(self) -> usize {
        match self {
            Plane::Axial => 2,
            Plane::Coronal => 1,
            Plane::Sagittal => 0,
        }
    }
}

/// Error model of one plane-specific generator stub.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StubErrorModel {
    pub plane: Plane,
    /// Error std (HU) on in-distribution input.
    pub base_error_std: f64,
    /// Relative error growth per unit of shift magnitude.
    pub shift_sensitivity: f64,
    /// In-plane correlation length in voxels; the smoothing kernel has
    /// sigma = length / 2 in-plane and length / 8 across slices.
    pub correlation_length: f64,
    pub seed: u64,
}

impl StubErrorModel {
    pub fn new(plane: Plane, seed: u64) -> Self {
        Self {
            plane,
            base_error_std: 80.0,
            shift_sensitivity: 6.0,
            correlation_length: 5.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_error_std.is_finite() && self.base_error_std >= 0.0) {
            return Err(Error::InvalidSpec("base error std must be >= 0".into()));
        }
        if !(self.shift_sensitivity.is_finite() && self.shift_sensitivity >= 0.0) {
            return Err(Error::InvalidSpec("shift sensitivity must be >= 0".into()));
        }
        if !(self.correlation_length.is_finite() && self.correlation_length >= 0.0) {
            return Err(Error::InvalidSpec("correlation length must be >= 0".into()));
        }
        Ok(())
    }

    /// Error std after accounting for a shift magnitude `d`.
    pub fn effective_std(&self, d: f64) -> f64 {
        self.base_error_std * (1.0 + self.shift_sensitivity * d)
    }

    fn sigmas(&self) -> [f64; 3] {
        let mut s = [self.correlation_length / 2.0; 3];
        s[self.plane.normal_axis()] = self.correlation_length / 8.0;
        s
    }
}

/// Normalized sampled Gaussian, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|&x| (x / s) as f32).collect()
}

/// "Valid" convolution along one axis of a `dims`-shaped block; that axis
/// shrinks by `kernel.len() - 1`.
fn filter_valid(src: &[f32], dims: [usize; 3], kernel: &[f32], axis: usize) -> (Vec<f32>, [usize; 3]) {
    let taps = kernel.len();
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - taps;
    let [nx, ny, _] = dims;
    let [ox, oy, oz] = out_dims;
    let mut out = vec![0f32; ox * oy * oz];
    match axis {
        0 => {
            for (row_in, row_out) in src.chunks_exact(nx).zip(out.chunks_exact_mut(ox)) {
                for (x, o) in row_out.iter_mut().enumerate() {
                    *o = kernel.iter().zip(&row_in[x..x + taps]).map(|(k, v)| k * v).sum();
                }
            }
        }
        1 => {
            for z in 0..oz {
                for y in 0..oy {
                    let o = ox * (y + oy * z);
                    for (j, &k) in kernel.iter().enumerate() {
                        let s = nx * (y + j + ny * z);
                        for (d, v) in out[o..o + ox].iter_mut().zip(&src[s..s + nx]) {
                            *d += k * v;
                        }
                    }
                }
            }
        }
        _ => {
            let plane = nx * ny;
            for z in 0..oz {
                let o = z * plane;
                for (j, &k) in kernel.iter().enumerate() {
                    let s = (z + j) * plane;
                    for (d, v) in out[o..o + plane].iter_mut().zip(&src[s..s + plane]) {
                        *d += k * v;
                    }
                }
            }
        }
    }
    (out, out_dims)
}

/// Unit-variance smooth noise for a stub, anisotropic along its plane.
///
/// White noise is drawn on a block padded by each kernel radius and filtered
/// without boundary handling, so the field is stationary up to the edges.
pub fn smooth_error_field(grid: &VoxelGrid, model: &StubErrorModel) -> Vec<f32> {
    let kernels = model.sigmas().map(gaussian_kernel);
    let mut dims = grid.dims();
    for (d, k) in dims.iter_mut().zip(&kernels) {
        *d += k.len() - 1;
    }
    let mut rng = stream_rng(model.seed, "stub_error");
    let mut field: Vec<f32> = (0..dims.iter().product::<usize>())
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    let mut gain = 1.0f64;
    for (axis, k) in kernels.iter().enumerate() {
        gain *= k.iter().map(|&w| f64::from(w) * f64::from(w)).sum::<f64>();
        (field, dims) = filter_valid(&field, dims, k, axis);
    }
    debug_assert_eq!(dims, grid.dims());
    let norm = (1.0 / gain.sqrt()) as f32;
    field.iter_mut().for_each(|v| *v *= norm);
    field
}

/// Stub sCT given a precomputed shift magnitude `d`.
pub fn stub_generate_with_magnitude(ct: &Volume, d: f64, model: &StubErrorModel) -> Result<Volume> {
    model.validate()?;
    ct.ensure_semantics(Semantics::HounsfieldUnits)?;
    let sigma = model.effective_std(d);
    if sigma == 0.0 {
        return Ok(ct.clone());
    }
    let field = smooth_error_field(ct.grid(), model);
    let s = sigma as f32;
    let vals = ct
        .values()
        .iter()
        .zip(&field)
        .map(|(&c, &e)| c + s * e)
        .collect();
    Volume::ingest_hu(*ct.grid(), vals)
}

/// Stub sCT: `ct` plus smooth error scaled by the MR shift magnitude.
pub fn stub_generate(
    ct: &Volume,
    mr_shifted: &Volume,
    mr_reference: &Volume,
    model: &StubErrorModel,
) -> Result<Volume> {
    ct.grid().ensure_compatible(mr_shifted.grid())?;
    ct.grid().ensure_compatible(mr_reference.grid())?;
    let d = if mr_shifted.values() == mr_reference.values() {
        0.0
    } else {
        shift_magnitude(mr_shifted, mr_reference)?
    };
    stub_generate_with_magnitude(ct, d, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contour::{extract_body_contour, ContourParams};
    use crate::ensemble::uncertainty_map;
    use crate::volume::stats_within_mask;

    fn small_spec(seed: u64) -> PhantomSpec {
        PhantomSpec::head([40, 40, 36], seed)
    }

    #[test]
    fn noiseless_ct_has_four_values() {
        let mut spec = small_spec(1);
        spec.ct_noise_std = 0.0;
        spec.mr_noise_std = 0.0;
        let p = generate_phantom(&spec).unwrap();
        let mut vals: Vec<f32> = p.ct.values().to_vec();
        vals.sort_by(f32::total_cmp);
        vals.dedup();
        assert_eq!(vals, vec![-1000.0, 30.0, 40.0, 700.0]);
    }

    #[test]
    fn phantom_is_deterministic() {
        let a = generate_phantom(&small_spec(5)).unwrap();
        let b = generate_phantom(&small_spec(5)).unwrap();
        assert_eq!(a.mr, b.mr);
        assert_eq!(a.ct, b.ct);
        let c = generate_phantom(&small_spec(6)).unwrap();
        assert_ne!(a.mr, c.mr);
    }

    #[test]
    fn invalid_specs() {
        let mut s = small_spec(1);
        s.dims = [31, 40, 40];
        assert_eq!(generate_phantom(&s).unwrap_err().kind(), "InvalidSpec");
        let mut s = small_spec(1);
        s.skull_radii = s.scalp_radii;
        assert_eq!(generate_phantom(&s).unwrap_err().kind(), "InvalidSpec");
    }

    #[test]
    fn default_contour_matches_truth() {
        let p = generate_phantom(&PhantomSpec::head([64, 64, 64], 3)).unwrap();
        let mask = extract_body_contour(&p.mr, &ContourParams::default()).unwrap();
        let dice = mask.dice(&p.body).unwrap();
        assert!(dice >= 0.98, "dice {dice}");
    }

    #[test]
    fn in_dist_shift_is_identity() {
        let p = generate_phantom(&small_spec(2)).unwrap();
        let out = apply_shift(&p.mr, &ShiftMode::InDist, &p.brain, 9).unwrap();
        assert_eq!(out.values(), p.mr.values());
    }

    #[test]
    fn contrast_changes_only_blob() {
        let p = generate_phantom(&small_spec(2)).unwrap();
        let mode = ShiftMode::ContrastAgent {
            boost_factor: 1.5,
            region_fraction: 0.05,
        };
        let out = apply_shift(&p.mr, &mode, &p.brain, 9).unwrap();
        let blob = contrast_blob(&p.brain, 0.05, 9);
        let expected = (0.05 * p.brain.count() as f64).round() as usize;
        assert_eq!(blob.len(), expected);
        let mut in_blob = vec![false; p.mr.values().len()];
        blob.iter().for_each(|&i| in_blob[i] = true);
        for i in 0..in_blob.len() {
            let (a, b) = (p.mr.values()[i], out.values()[i]);
            if in_blob[i] {
                assert!(p.brain.bits()[i]);
                assert_eq!(b, a * 1.5);
                assert_ne!(a.to_bits(), b.to_bits());
            } else {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn scanner_gamma_preserves_rank_order() {
        let p = generate_phantom(&small_spec(4)).unwrap();
        // gamma stage alone: output must be a monotone function of the input
        let mode = ShiftMode::ScannerShift {
            gamma: 0.7,
            noise_scale: 1.0,
        };
        let out = apply_shift(&p.mr, &mode, &p.brain, 1).unwrap();
        let mut idx: Vec<usize> = (0..p.mr.values().len()).collect();
        idx.sort_by(|&a, &b| p.mr.values()[a].total_cmp(&p.mr.values()[b]).then(a.cmp(&b)));
        for w in idx.windows(2) {
            assert!(out.values()[w[0]] <= out.values()[w[1]]);
        }
    }

    #[test]
    fn scanner_noise_rescale_raises_noise() {
        let p = generate_phantom(&small_spec(4)).unwrap();
        let base = estimate_noise_std(&p.mr);
        assert!((base - 3.0).abs() < 0.5, "estimated {base}");
        let mode = ShiftMode::ScannerShift {
            gamma: 1.0,
            noise_scale: 1.5,
        };
        let out = apply_shift(&p.mr, &mode, &p.brain, 1).unwrap();
        let shifted = estimate_noise_std(&out);
        assert!((shifted / base - 1.5).abs() < 0.15, "ratio {}", shifted / base);
    }

    #[test]
    fn shift_mode_validation() {
        let p = generate_phantom(&small_spec(2)).unwrap();
        for bad in [
            ShiftMode::ContrastAgent { boost_factor: 1.0, region_fraction: 0.1 },
            ShiftMode::ContrastAgent { boost_factor: 1.5, region_fraction: 0.3 },
            ShiftMode::ScannerShift { gamma: 0.0, noise_scale: 1.0 },
        ] {
            assert_eq!(apply_shift(&p.mr, &bad, &p.brain, 0).unwrap_err().kind(), "InvalidSpec");
        }
    }

    #[test]
    fn zero_error_model_is_identity() {
        let p = generate_phantom(&small_spec(7)).unwrap();
        let mut model = StubErrorModel::new(Plane::Axial, 3);
        model.base_error_std = 0.0;
        let sct = stub_generate(&p.ct, &p.mr, &p.mr, &model).unwrap();
        assert_eq!(sct.values(), p.ct.values());
    }

    #[test]
    fn error_field_has_unit_variance() {
        let grid = VoxelGrid::with_dims([48, 48, 48]).unwrap();
        let f = smooth_error_field(&grid, &StubErrorModel::new(Plane::Coronal, 1));
        let n = f.len() as f64;
        let m = f.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = f.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0).abs() < 0.25, "var {var}");
    }

    #[test]
    fn scanner_shift_raises_stub_error() {
        let p = generate_phantom(&small_spec(8)).unwrap();
        let shifted = apply_shift(
            &p.mr,
            &ShiftMode::ScannerShift { gamma: 0.6, noise_scale: 1.5 },
            &p.brain,
            2,
        )
        .unwrap();
        let model = StubErrorModel::new(Plane::Sagittal, 5);
        let err_std = |mr: &Volume| {
            let sct = stub_generate(&p.ct, mr, &p.mr, &model).unwrap();
            let diff = sct.with_values(
                sct.values().iter().zip(p.ct.values()).map(|(a, b)| a - b).collect(),
            )
            .unwrap();
            stats_within_mask(&diff, &p.body).unwrap().std
        };
        assert!(err_std(&shifted) > err_std(&p.mr));
    }

    #[test]
    fn three_stub_disagreement_bounds() {
        // expected range of three iid normals is about 1.69 sigma, so c = 1
        let p = generate_phantom(&small_spec(9)).unwrap();
        let members: Vec<Volume> = Plane::ALL
            .iter()
            .enumerate()
            .map(|(i, &pl)| stub_generate(&p.ct, &p.mr, &p.mr, &StubErrorModel::new(pl, 100 + i as u64)).unwrap())
            .collect();
        let u = uncertainty_map(&members).unwrap();
        let mean_u = stats_within_mask(&u, &p.body).unwrap().mean;
        assert!(mean_u > 0.0 && mean_u < 3.0 * 80.0, "mean_u {mean_u}");
    }

    #[test]
    fn stub_error_fields_weakly_correlated() {
        let grid = VoxelGrid::with_dims([40, 40, 40]).unwrap();
        let fields: Vec<Vec<f32>> = Plane::ALL
            .iter()
            .enumerate()
            .map(|(i, &pl)| smooth_error_field(&grid, &StubErrorModel::new(pl, derive_seed(42, 0, &format!("stub{i}")))))
            .collect();
        for i in 0..3 {
            for j in (i + 1)..3 {
                let a: Vec<f64> = fields[i].iter().map(|&v| v as f64).collect();
                let b: Vec<f64> = fields[j].iter().map(|&v| v as f64).collect();
                let r = crate::stats::pearson(&a, &b).unwrap();
                assert!(r.abs() < 0.5, "r = {r}");
            }
        }
    }

    #[test]
    fn seed_derivation_is_stable_and_distinct() {
        assert_eq!(derive_seed(42, 0, "phantom"), derive_seed(42, 0, "phantom"));
        assert_ne!(derive_seed(42, 0, "phantom"), derive_seed(42, 1, "phantom"));
        assert_ne!(derive_seed(42, 0, "phantom"), derive_seed(42, 0, "shift"));
    }
}
