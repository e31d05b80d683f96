//! Voxel-grid data model shared by every other module.
//!
//! Values are stored x-fastest: the voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`, the same order NIfTI uses on disk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest HU value kept on ingest.
pub const HU_MIN: f32 = -1024.0;
/// Highest HU value kept on ingest (12-bit CT range).
pub const HU_MAX: f32 = 3071.0;

const SPACING_TOL_MM: f64 = 1e-6;
const ORIGIN_TOL_MM: f64 = 1e-3;

/// Regular grid geometry, axis-aligned, in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be finite and > 0, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("origin must be finite, got {origin:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidGrid(format!("dims {dims:?} overflow")))?;
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit spacing, zero origin.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3], [0.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn is_compatible(&self, other: &VoxelGrid) -> bool {
        check_compatible(self, other)
    }

    pub(crate) fn ensure_compatible(&self, other: &VoxelGrid) -> Result<()> {
        if check_compatible(self, other) {
            Ok(())
        } else {
            Err(Error::IncompatibleGrids(format!(
                "dims {:?} spacing {:?} origin {:?} vs dims {:?} spacing {:?} origin {:?}",
                self.dims, self.spacing, self.origin, other.dims, other.spacing, other.origin
            )))
        }
    }
}

/// Two grids are compatible when dims match exactly, spacings agree within
/// 1e-6 mm and origins within 1e-3 mm.
pub fn check_compatible(a: &VoxelGrid, b: &VoxelGrid) -> bool {
    a.dims == b.dims
        && a.spacing
            .iter()
            .zip(&b.spacing)
            .all(|(p, q)| (p - q).abs() <= SPACING_TOL_MM)
        && a.origin
            .iter()
            .zip(&b.origin)
            .all(|(p, q)| (p - q).abs() <= ORIGIN_TOL_MM)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Semantics {
    HounsfieldUnits,
    MrIntensityArbitrary,
}

impl Semantics {
    pub fn name(self) -> &'static str {
        match self {
            Semantics::HounsfieldUnits => "HounsfieldUnits",
            Semantics::MrIntensityArbitrary => "MrIntensityArbitrary",
        }
    }
}

/// Dense f32 scalar field on a [`VoxelGrid`]. Always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: VoxelGrid,
    values: Vec<f32>,
    semantics: Semantics,
}

impl Volume {
    pub fn new(grid: VoxelGrid, values: Vec<f32>, semantics: Semantics) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: values.len(),
            });
        }
        let bad = values.iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFiniteInput { count: bad });
        }
        Ok(Self {
            grid,
            values,
            semantics,
        })
    }

    pub fn filled(grid: VoxelGrid, value: f32, semantics: Semantics) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()], semantics)
    }

    /// Builds a volume from a function of voxel coordinates.
    pub fn from_fn(
        grid: VoxelGrid,
        semantics: Semantics,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let [nx, ny, nz] = grid.dims();
        let mut values = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    values.push(f(x, y, z));
                }
            }
        }
        Self::new(grid, values, semantics)
    }

    /// HU ingest: clamps into `[HU_MIN, HU_MAX]` and tags the result as HU.
    pub fn ingest_hu(grid: VoxelGrid, values: Vec<f32>) -> Result<Self> {
        let v = Self::new(grid, values, Semantics::HounsfieldUnits)?;
        clamp_to_hu_range(&v)
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn semantics(&self) -> Semantics {
        self.semantics
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.grid.index(x, y, z)]
    }

    pub(crate) fn ensure_semantics(&self, expected: Semantics) -> Result<()> {
        if self.semantics == expected {
            Ok(())
        } else {
            Err(Error::WrongSemantics {
                expected: expected.name(),
                actual: self.semantics.name(),
            })
        }
    }

    /// Same grid and semantics, new values. Rejects non-finite output.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        Self::new(self.grid, values, self.semantics)
    }
}

/// Clamps a HU volume into the 12-bit CT range. Idempotent.
pub fn clamp_to_hu_range(v: &Volume) -> Result<Volume> {
    v.ensure_semantics(Semantics::HounsfieldUnits)?;
    let values = v.values.iter().map(|&x| x.clamp(HU_MIN, HU_MAX)).collect();
    v.with_values(values)
}

/// Boolean voxel mask, same ordering as [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    grid: VoxelGrid,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(grid: VoxelGrid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: bits.len(),
            });
        }
        Ok(Self { grid, bits })
    }

    pub fn empty(grid: VoxelGrid) -> Self {
        Self {
            bits: vec![false; grid.len()],
            grid,
        }
    }

    pub fn from_fn(grid: VoxelGrid, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let [nx, ny, nz] = grid.dims();
        let mut bits = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    bits.push(f(x, y, z));
                }
            }
        }
        Self { grid, bits }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.bits
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.grid.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Dice overlap `2|A∩B| / (|A|+|B|)`. Two empty masks give 1.
    pub fn dice(&self, other: &Mask) -> Result<f64> {
        self.grid.ensure_compatible(&other.grid)?;
        let both = self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count();
        let total = self.count() + other.count();
        if total == 0 {
            return Ok(1.0);
        }
        Ok(2.0 * both as f64 / total as f64)
    }

    /// Mask rendered as a 0/1 volume, e.g. for writing to disk.
    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid,
            values: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            semantics: Semantics::MrIntensityArbitrary,
        }
    }

    /// Voxels strictly above 0.5 become true.
    pub fn from_volume(v: &Volume) -> Self {
        Self {
            grid: v.grid,
            bits: v.values.iter().map(|&x| x > 0.5).collect(),
        }
    }
}

/// Summary statistics over the masked voxels; `std` is the population value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskedStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn stats_within_mask(v: &Volume, m: &Mask) -> Result<MaskedStats> {
    v.grid.ensure_compatible(&m.grid)?;
    let masked = || {
        v.values
            .iter()
            .zip(&m.bits)
            .filter(|(_, &b)| b)
            .map(|(&x, _)| f64::from(x))
    };
    let mut sum = KahanSum::default();
    let mut count = 0usize;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for x in masked() {
        sum.add(x);
        count += 1;
        min = min.min(x);
        max = max.max(x);
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mean = sum.total() / count as f64;
    let mut sq = KahanSum::default();
    for x in masked() {
        sq.add((x - mean) * (x - mean));
    }
    Ok(MaskedStats {
        count,
        mean,
        std: (sq.total() / count as f64).sqrt(),
        min,
        max,
    })
}

/// Masked arithmetic mean, compensated summation.
pub(crate) fn masked_mean(values: impl Iterator<Item = f64>) -> Result<f64> {
    let mut sum = KahanSum::default();
    let mut count = 0usize;
    for x in values {
        sum.add(x);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sum.total() / count as f64)
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    #[inline]
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(dims: [usize; 3]) -> VoxelGrid {
        VoxelGrid::with_dims(dims).unwrap()
    }

    #[test]
    fn compatible_identity_and_mismatch() {
        let a = VoxelGrid::new([128, 128, 128], [0.9, 0.9, 1.0], [0.0; 3]).unwrap();
        assert!(check_compatible(&a, &a));
        let b = VoxelGrid::new([128, 128, 127], [0.9, 0.9, 1.0], [0.0; 3]).unwrap();
        assert!(!check_compatible(&a, &b));
        let c = VoxelGrid::new([128, 128, 128], [0.9 + 1e-9, 0.9, 1.0], [0.0; 3]).unwrap();
        assert!(check_compatible(&a, &c));
        let d = VoxelGrid::new([128, 128, 128], [0.9, 0.9, 1.0], [0.0, 0.0, 0.01]).unwrap();
        assert!(!check_compatible(&a, &d));
    }

    #[test]
    fn grid_rejects_bad_geometry() {
        assert!(VoxelGrid::new([0, 4, 4], [1.0; 3], [0.0; 3]).is_err());
        assert!(VoxelGrid::new([4, 4, 4], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(VoxelGrid::new([4, 4, 4], [1.0, f64::NAN, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn index_roundtrip() {
        let g = grid([5, 7, 3]);
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 5);
        assert_eq!(g.index(0, 0, 1), 35);
    }

    #[test]
    fn volume_rejects_nan_and_wrong_length() {
        let g = grid([2, 2, 2]);
        let err = Volume::new(g, vec![0.0; 7], Semantics::HounsfieldUnits).unwrap_err();
        assert_eq!(err.kind(), "LengthMismatch");
        let mut vals = vec![0.0; 8];
        vals[3] = f32::NAN;
        let err = Volume::new(g, vals, Semantics::HounsfieldUnits).unwrap_err();
        assert_eq!(err.kind(), "NonFiniteInput");
    }

    #[test]
    fn clamp_examples() {
        let g = grid([3, 1, 1]);
        let v = Volume::new(g, vec![-2000.0, 500.0, 4000.0], Semantics::HounsfieldUnits).unwrap();
        let c = clamp_to_hu_range(&v).unwrap();
        assert_eq!(c.values(), &[-1024.0, 500.0, 3071.0]);
        let mr = Volume::new(g, vec![1.0; 3], Semantics::MrIntensityArbitrary).unwrap();
        assert_eq!(clamp_to_hu_range(&mr).unwrap_err().kind(), "WrongSemantics");
    }

    #[test]
    fn stats_constant_and_small() {
        let g = grid([4, 4, 4]);
        let v = Volume::filled(g, 7.0, Semantics::HounsfieldUnits).unwrap();
        let m = Mask::from_fn(g, |x, _, _| x < 2);
        let s = stats_within_mask(&v, &m).unwrap();
        assert_eq!(s.mean, 7.0);
        assert_eq!(s.std, 0.0);

        let g = grid([5, 1, 1]);
        let v = Volume::new(
            g,
            vec![1.0, 99.0, 2.0, -50.0, 3.0],
            Semantics::HounsfieldUnits,
        )
        .unwrap();
        let m = Mask::new(g, vec![true, false, true, false, true]).unwrap();
        let s = stats_within_mask(&v, &m).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 3.0);
        assert_eq!(s.count, 3);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn stats_errors() {
        let g = grid([4, 4, 4]);
        let v = Volume::filled(g, 1.0, Semantics::HounsfieldUnits).unwrap();
        assert_eq!(
            stats_within_mask(&v, &Mask::empty(g)).unwrap_err().kind(),
            "EmptyMask"
        );
        let other = Mask::from_fn(grid([4, 4, 5]), |_, _, _| true);
        assert_eq!(
            stats_within_mask(&v, &other).unwrap_err().kind(),
            "IncompatibleGrids"
        );
    }

    #[test]
    fn stats_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = grid([16, 16, 16]);
        let vals: Vec<f32> = (0..g.len()).map(|_| rng.random_range(-1000.0..3000.0)).collect();
        let bits: Vec<bool> = (0..g.len()).map(|_| rng.random_bool(0.3)).collect();
        let v = Volume::new(g, vals.clone(), Semantics::HounsfieldUnits).unwrap();
        let m = Mask::new(g, bits.clone()).unwrap();
        let s = stats_within_mask(&v, &m).unwrap();

        let mut n = 0.0;
        let mut sum = 0.0;
        for i in 0..vals.len() {
            if bits[i] {
                n += 1.0;
                sum += vals[i] as f64;
            }
        }
        let mean = sum / n;
        let mut ss = 0.0;
        for i in 0..vals.len() {
            if bits[i] {
                ss += (vals[i] as f64 - mean).powi(2);
            }
        }
        let std = (ss / n).sqrt();
        assert!((s.mean - mean).abs() <= 1e-6 * mean.abs());
        assert!((s.std - std).abs() <= 1e-6 * std);
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(vals in prop::collection::vec(-5000.0f32..5000.0, 8)) {
            let g = grid([2, 2, 2]);
            let v = Volume::new(g, vals, Semantics::HounsfieldUnits).unwrap();
            let once = clamp_to_hu_range(&v).unwrap();
            let twice = clamp_to_hu_range(&once).unwrap();
            prop_assert_eq!(once.values(), twice.values());
            prop_assert!(once.values().iter().all(|&x| (HU_MIN..=HU_MAX).contains(&x)));
        }

        #[test]
        fn stats_ignore_unmasked_voxels(
            vals in prop::collection::vec(-1000.0f32..1000.0, 27),
            bits in prop::collection::vec(any::<bool>(), 27),
            junk in prop::collection::vec(-1e6f32..1e6, 27),
        ) {
            prop_assume!(bits.iter().any(|&b| b));
            let g = grid([3, 3, 3]);
            let m = Mask::new(g, bits.clone()).unwrap();
            let a = Volume::new(g, vals.clone(), Semantics::HounsfieldUnits).unwrap();
            let perturbed: Vec<f32> = vals.iter().zip(&bits).zip(&junk)
                .map(|((&v, &b), &j)| if b { v } else { j }).collect();
            let b = Volume::new(g, perturbed, Semantics::HounsfieldUnits).unwrap();
            prop_assert_eq!(stats_within_mask(&a, &m).unwrap(), stats_within_mask(&b, &m).unwrap());
        }

        #[test]
        fn compatibility_symmetric_reflexive(
            d in prop::array::uniform3(1usize..5),
            e in prop::array::uniform3(1usize..5),
            s in prop::array::uniform3(0.5f64..2.0),
            ds in -2e-6f64..2e-6,
        ) {
            let a = VoxelGrid::new(d, s, [0.0; 3]).unwrap();
            let b = VoxelGrid::new(e, [s[0] + ds, s[1], s[2]], [0.0; 3]).unwrap();
            prop_assert!(check_compatible(&a, &a));
            prop_assert_eq!(check_compatible(&a, &b), check_compatible(&b, &a));
        }
    }
}
