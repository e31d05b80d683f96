//! Body-contour extraction from an MR volume.
//!
//! The pipeline is: threshold, keep the largest connected foreground
//! component, close with a discrete ball, then fill every cavity that cannot
//! reach the volume border.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Mask, Semantics, Volume, VoxelGrid};

pub const OTSU_BINS: usize = 256;
pub const MAX_CLOSING_RADIUS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdMode {
    Otsu,
    /// Foreground is anything above this fraction of the volume maximum.
    FixedFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Face6,
    FaceEdgeVertex26,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [[i32; 3]] {
        const FACE: [[i32; 3]; 6] = [
            [-1, 0, 0],
            [1, 0, 0],
            [0, -1, 0],
            [0, 1, 0],
            [0, 0, -1],
            [0, 0, 1],
        ];
        static FULL: std::sync::OnceLock<Vec<[i32; 3]>> = std::sync::OnceLock::new();
        match self {
            Connectivity::Face6 => &FACE,
            Connectivity::FaceEdgeVertex26 => FULL.get_or_init(|| {
                let mut v = Vec::with_capacity(26);
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            if (dx, dy, dz) != (0, 0, 0) {
                                v.push([dx, dy, dz]);
                            }
                        }
                    }
                }
                v
            }),
        }
    }

    /// Connectivity used for the background when the foreground uses `self`.
    pub fn dual(self) -> Self {
        match self {
            Connectivity::Face6 => Connectivity::FaceEdgeVertex26,
            Connectivity::FaceEdgeVertex26 => Connectivity::Face6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourParams {
    pub threshold_mode: ThresholdMode,
    pub closing_radius_voxels: u32,
    pub connectivity: Connectivity,
}

impl Default for ContourParams {
    fn default() -> Self {
        Self {
            threshold_mode: ThresholdMode::Otsu,
            closing_radius_voxels: 2,
            connectivity: Connectivity::Face6,
        }
    }
}

impl ContourParams {
    pub fn validate(&self) -> Result<()> {
        if let ThresholdMode::FixedFraction(f) = self.threshold_mode {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidParams(format!(
                    "fixed fraction must be in (0, 1), got {f}"
                )));
            }
        }
        if self.closing_radius_voxels > MAX_CLOSING_RADIUS {
            return Err(Error::InvalidParams(format!(
                "closing radius must be <= {MAX_CLOSING_RADIUS}, got {}",
                self.closing_radius_voxels
            )));
        }
        Ok(())
    }
}

/// Otsu threshold over a 256-bin histogram spanning the value range.
///
/// Returns the upper edge of the last background bin; foreground is `x > t`.
/// Ties in between-class variance resolve to the lowest bin.
pub fn otsu_threshold(v: &Volume) -> Result<f64> {
    let (min, max) = value_range(v.values());
    if !(max > min) {
        return Err(Error::DegenerateHistogram);
    }
    let hist = histogram(v.values(), min, max);
    let width = (max - min) / OTSU_BINS as f64;

    let total: f64 = v.values().len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();

    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best = f64::NEG_INFINITY;
    let mut best_bin = 0usize;
    for (k, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64;
        sum0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best {
            best = between;
            best_bin = k;
        }
    }
    Ok(min + (best_bin + 1) as f64 * width)
}

pub(crate) fn value_range(values: &[f32]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        let x = f64::from(x);
        (lo.min(x), hi.max(x))
    })
}

fn histogram(values: &[f32], min: f64, max: f64) -> Vec<u64> {
    let width = (max - min) / OTSU_BINS as f64;
    let mut hist = vec![0u64; OTSU_BINS];
    for &x in values {
        let bin = ((f64::from(x) - min) / width) as usize;
        hist[bin.min(OTSU_BINS - 1)] += 1;
    }
    hist
}

/// Intensity cutoff for the given mode; foreground is `x > cutoff`.
pub fn threshold_value(mr: &Volume, mode: ThresholdMode) -> Result<f64> {
    match mode {
        ThresholdMode::Otsu => otsu_threshold(mr),
        ThresholdMode::FixedFraction(f) => {
            let (_, max) = value_range(mr.values());
            Ok(f * max)
        }
    }
}

pub fn threshold_mask(v: &Volume, cutoff: f64) -> Mask {
    let bits = v.values().iter().map(|&x| f64::from(x) > cutoff).collect();
    Mask::new(*v.grid(), bits).expect("length matches grid")
}

pub fn extract_body_contour(mr: &Volume, params: &ContourParams) -> Result<Mask> {
    params.validate()?;
    mr.ensure_semantics(Semantics::MrIntensityArbitrary)?;
    let cutoff = threshold_value(mr, params.threshold_mode)?;
    let fg = threshold_mask(mr, cutoff);
    if fg.is_empty() {
        return Err(Error::NoForeground);
    }
    let largest = largest_component(&fg, params.connectivity);
    let closed = close(&largest, params.closing_radius_voxels);
    Ok(fill_cavities(&closed, params.connectivity.dual()))
}

/// Neighbour visitor with precomputed linear offsets. Voxels far enough from
/// every face skip the per-offset bounds checks.
struct Stepper {
    dims: [usize; 3],
    reach: usize,
    offs: Vec<([i32; 3], isize)>,
}

impl Stepper {
    fn new(grid: &VoxelGrid, offs: &[[i32; 3]]) -> Self {
        let [nx, ny, _] = grid.dims();
        let reach = offs
            .iter()
            .flat_map(|o| o.iter().map(|c| c.unsigned_abs() as usize))
            .max()
            .unwrap_or(0);
        let offs = offs
            .iter()
            .map(|&o| {
                let d = o[0] as isize + nx as isize * (o[1] as isize + ny as isize * o[2] as isize);
                (o, d)
            })
            .collect();
        Self {
            dims: grid.dims(),
            reach,
            offs,
        }
    }

    #[inline]
    fn each_at(&self, idx: usize, [x, y, z]: [usize; 3], mut f: impl FnMut(usize)) {
        let [nx, ny, nz] = self.dims;
        let r = self.reach;
        if x >= r && y >= r && z >= r && x + r < nx && y + r < ny && z + r < nz {
            for &(_, d) in &self.offs {
                f(idx.wrapping_add_signed(d));
            }
            return;
        }
        for &(o, d) in &self.offs {
            let (tx, ty, tz) = (x as i64 + o[0] as i64, y as i64 + o[1] as i64, z as i64 + o[2] as i64);
            if tx >= 0 && ty >= 0 && tz >= 0 && tx < nx as i64 && ty < ny as i64 && tz < nz as i64 {
                f(idx.wrapping_add_signed(d));
            }
        }
    }

    #[inline]
    fn each(&self, idx: usize, f: impl FnMut(usize)) {
        let [nx, ny, _] = self.dims;
        self.each_at(idx, [idx % nx, (idx / nx) % ny, idx / (nx * ny)], f);
    }
}

/// Labels connected true voxels. Label 0 is background; components are
/// numbered from 1 in scan order of their first voxel.
pub fn label_components(mask: &Mask, conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let grid = *mask.grid();
    let bits = mask.bits();
    let mut labels = vec![0u32; bits.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    let step = Stepper::new(&grid, conn.offsets());
    for start in 0..bits.len() {
        if !bits[start] || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        let mut size = 0usize;
        labels[start] = label;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            size += 1;
            step.each(idx, |n| {
                if bits[n] && labels[n] == 0 {
                    labels[n] = label;
                    queue.push_back(n);
                }
            });
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the largest component; ties go to the one found first.
pub fn largest_component(mask: &Mask, conn: Connectivity) -> Mask {
    let (labels, sizes) = label_components(mask, conn);
    let Some(keep) = sizes
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, usize)>, (i, &s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i as u32 + 1)
    else {
        return mask.clone();
    };
    let bits = labels.iter().map(|&l| l == keep).collect();
    Mask::new(*mask.grid(), bits).expect("length matches grid")
}

/// Integer offsets within Euclidean distance `radius` of the origin.
pub fn ball_offsets(radius: u32) -> Vec<[i32; 3]> {
    let r = radius as i32;
    let r2 = r * r;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r2 {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Scatter-style dilation; offsets landing outside the grid are dropped.
fn dilate_bits(grid: &VoxelGrid, bits: &[bool], ball: &[[i32; 3]]) -> Vec<bool> {
    let [nx, ny, nz] = grid.dims();
    let step = Stepper::new(grid, ball);
    let mut out = vec![false; bits.len()];
    for z in 0..nz {
        for y in 0..ny {
            let row = grid.index(0, y, z);
            for x in 0..nx {
                if bits[row + x] {
                    step.each_at(row + x, [x, y, z], |n| out[n] = true);
                }
            }
        }
    }
    out
}

pub fn dilate(mask: &Mask, radius: u32) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let ball = ball_offsets(radius);
    let bits = dilate_bits(mask.grid(), mask.bits(), &ball);
    Mask::new(*mask.grid(), bits).expect("length matches grid")
}

/// Erosion as the dual of dilation: voxels outside the grid count as
/// foreground, so an object touching the border is not eaten from outside.
pub fn erode(mask: &Mask, radius: u32) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let ball = ball_offsets(radius);
    let complement: Vec<bool> = mask.bits().iter().map(|&b| !b).collect();
    let grown = dilate_bits(mask.grid(), &complement, &ball);
    let bits = grown.into_iter().map(|b| !b).collect();
    Mask::new(*mask.grid(), bits).expect("length matches grid")
}

/// Dilation followed by erosion with the same ball. Extensive.
pub fn close(mask: &Mask, radius: u32) -> Mask {
    erode(&dilate(mask, radius), radius)
}

/// Sets every false voxel that cannot reach the grid border through false
/// voxels (under `background_conn`) to true.
pub fn fill_cavities(mask: &Mask, background_conn: Connectivity) -> Mask {
    let grid = *mask.grid();
    let [nx, ny, nz] = grid.dims();
    let bits = mask.bits();
    let mut outside = vec![false; bits.len()];
    let mut queue = VecDeque::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let on_border =
                    x == 0 || y == 0 || z == 0 || x == nx - 1 || y == ny - 1 || z == nz - 1;
                if !on_border {
                    continue;
                }
                let i = grid.index(x, y, z);
                if !bits[i] && !outside[i] {
                    outside[i] = true;
                    queue.push_back(i);
                }
            }
        }
    }
    let step = Stepper::new(&grid, background_conn.offsets());
    while let Some(idx) = queue.pop_front() {
        step.each(idx, |n| {
            if !bits[n] && !outside[n] {
                outside[n] = true;
                queue.push_back(n);
            }
        });
    }
    Mask::new(grid, outside.into_iter().map(|o| !o).collect()).expect("length matches grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize) -> VoxelGrid {
        VoxelGrid::with_dims([n, n, n]).unwrap()
    }

    fn ellipsoid(g: VoxelGrid, c: [f64; 3], r: [f64; 3]) -> Mask {
        Mask::from_fn(g, |x, y, z| {
            let d = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
            (0..3).map(|i| (d[i] / r[i]).powi(2)).sum::<f64>() <= 1.0
        })
    }

    fn mr_from_mask(m: &Mask, fg: f32) -> Volume {
        let vals = m.bits().iter().map(|&b| if b { fg } else { 0.0 }).collect();
        Volume::new(*m.grid(), vals, Semantics::MrIntensityArbitrary).unwrap()
    }

    fn params(radius: u32) -> ContourParams {
        ContourParams {
            closing_radius_voxels: radius,
            ..ContourParams::default()
        }
    }

    #[test]
    fn otsu_bimodal_and_constant() {
        let g = VoxelGrid::with_dims([10, 10, 10]).unwrap();
        let v = Volume::from_fn(g, Semantics::MrIntensityArbitrary, |x, _, _| {
            if x < 5 { 0.0 } else { 100.0 }
        })
        .unwrap();
        let t = otsu_threshold(&v).unwrap();
        assert!(t > 0.0 && t < 100.0, "t = {t}");

        let c = Volume::filled(g, 3.0, Semantics::MrIntensityArbitrary).unwrap();
        assert_eq!(otsu_threshold(&c).unwrap_err().kind(), "DegenerateHistogram");
    }

    #[test]
    fn solid_ellipsoid_is_reproduced_exactly() {
        let g = grid(32);
        let truth = ellipsoid(g, [15.5, 16.0, 15.0], [10.0, 12.0, 8.0]);
        let mr = mr_from_mask(&truth, 100.0);
        let mask = extract_body_contour(&mr, &params(0)).unwrap();
        assert_eq!(mask, truth);
    }

    #[test]
    fn interior_cavity_is_filled() {
        let g = grid(32);
        let outer = ellipsoid(g, [16.0; 3], [12.0; 3]);
        let cavity = ellipsoid(g, [16.0; 3], [5.0; 3]);
        let shell = Mask::new(
            g,
            outer.bits().iter().zip(cavity.bits()).map(|(&o, &c)| o && !c).collect(),
        )
        .unwrap();
        let mr = mr_from_mask(&shell, 100.0);
        let mask = extract_body_contour(&mr, &params(2)).unwrap();
        for i in 0..g.len() {
            if cavity.bits()[i] {
                assert!(mask.bits()[i]);
            }
        }
        assert_eq!(mask, outer);
    }

    #[test]
    fn only_largest_blob_survives() {
        let g = grid(32);
        // 10x10x10 cube and a 10-voxel rod.
        let big = Mask::from_fn(g, |x, y, z| (2..12).contains(&x) && (2..12).contains(&y) && (2..12).contains(&z));
        let small = Mask::from_fn(g, |x, y, z| (20..30).contains(&x) && y == 25 && z == 25);
        assert_eq!(big.count(), 1000);
        assert_eq!(small.count(), 10);
        let both = Mask::new(
            g,
            big.bits().iter().zip(small.bits()).map(|(&a, &b)| a || b).collect(),
        )
        .unwrap();
        let kept = largest_component(&both, Connectivity::Face6);
        assert_eq!(kept, big);
        let mr = mr_from_mask(&both, 50.0);
        assert_eq!(extract_body_contour(&mr, &params(0)).unwrap(), big);
    }

    #[test]
    fn no_foreground_and_param_errors() {
        let g = grid(8);
        // half of a negative maximum lies above every voxel
        let v = Volume::from_fn(g, Semantics::MrIntensityArbitrary, |_, _, _| -5.0).unwrap();
        let p = ContourParams {
            threshold_mode: ThresholdMode::FixedFraction(0.5),
            ..ContourParams::default()
        };
        assert_eq!(extract_body_contour(&v, &p).unwrap_err().kind(), "NoForeground");

        let bad = ContourParams {
            threshold_mode: ThresholdMode::FixedFraction(1.5),
            ..ContourParams::default()
        };
        assert_eq!(extract_body_contour(&v, &bad).unwrap_err().kind(), "InvalidParams");
        assert_eq!(extract_body_contour(&v, &params(11)).unwrap_err().kind(), "InvalidParams");

        let ct = Volume::filled(g, 0.0, Semantics::HounsfieldUnits).unwrap();
        assert_eq!(extract_body_contour(&ct, &params(1)).unwrap_err().kind(), "WrongSemantics");
    }

    #[test]
    fn ball_sizes() {
        assert_eq!(ball_offsets(0).len(), 1);
        assert_eq!(ball_offsets(1).len(), 7);
        assert_eq!(ball_offsets(2).len(), 33);
    }

    #[test]
    fn closing_bridges_a_gap() {
        let g = grid(16);
        let m = Mask::from_fn(g, |x, y, z| (4..12).contains(&y) && (4..12).contains(&z) && (2..14).contains(&x) && x != 8);
        let closed = close(&m, 1);
        assert!(closed.get(8, 7, 7));
        assert!(m.bits().iter().zip(closed.bits()).all(|(&a, &b)| !a || b));
    }

    fn blob_strategy() -> impl Strategy<Value = Vec<bool>> {
        prop::collection::vec(prop::bool::weighted(0.45), 12 * 12 * 12)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn contour_invariants(bits in blob_strategy(), radius in 0u32..3, full in any::<bool>()) {
            let g = grid(12);
            let m = Mask::new(g, bits).unwrap();
            prop_assume!(!m.is_empty());
            let conn = if full { Connectivity::FaceEdgeVertex26 } else { Connectivity::Face6 };
            let mr = mr_from_mask(&m, 10.0);
            let p = ContourParams { threshold_mode: ThresholdMode::FixedFraction(0.5), closing_radius_voxels: radius, connectivity: conn };
            let out = extract_body_contour(&mr, &p).unwrap();

            let closed = close(&largest_component(&m, conn), radius);
            prop_assert!(closed.bits().iter().zip(out.bits()).all(|(&c, &o)| !c || o));
            // no enclosed background left
            prop_assert_eq!(&fill_cavities(&out, conn.dual()), &out);
            let (_, sizes) = label_components(&out, conn);
            prop_assert_eq!(sizes.len(), 1);
            prop_assert_eq!(extract_body_contour(&mr, &p).unwrap(), out);
        }

        #[test]
        fn fixed_fraction_scale_invariant(bits in blob_strategy(), exp in -4i32..8) {
            let g = grid(12);
            let m = Mask::new(g, bits).unwrap();
            prop_assume!(!m.is_empty());
            let vals: Vec<f32> = m.bits().iter().enumerate()
                .map(|(i, &b)| if b { 50.0 + (i % 17) as f32 } else { (i % 5) as f32 }).collect();
            let a = Volume::new(g, vals.clone(), Semantics::MrIntensityArbitrary).unwrap();
            let k = 2f32.powi(exp);
            let b = Volume::new(g, vals.iter().map(|v| v * k).collect(), Semantics::MrIntensityArbitrary).unwrap();
            let p = ContourParams { threshold_mode: ThresholdMode::FixedFraction(0.3), ..ContourParams::default() };
            prop_assert_eq!(extract_body_contour(&a, &p).unwrap(), extract_body_contour(&b, &p).unwrap());
        }
    }
}
