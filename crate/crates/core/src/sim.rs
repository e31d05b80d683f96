//! Cohort simulation: three test sets standing in for in-distribution,
//! contrast-enhanced and different-scanner MR inputs.
//!
//! A [`CohortPlan`] is cheap, a list of per-case descriptors with all seeds
//! fixed. Volumes are produced one case at a time by [`CohortPlan::materialize`],
//! so large cohorts never need to be held in memory at once.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_volume;
use crate::phantom::{
    apply_shift, derive_seed, generate_phantom, shift_magnitude, stream_rng, stub_generate_with_magnitude,
    Phantom, PhantomSpec, Plane, ShiftMode, StubErrorModel,
};
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    InDist,
    ContrastAgent,
    ScannerShift,
}

impl Cohort {
    pub const ALL: [Cohort; 3] = [Cohort::InDist, Cohort::ContrastAgent, Cohort::ScannerShift];

    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::InDist => "in_dist",
            Cohort::ContrastAgent => "contrast_agent",
            Cohort::ScannerShift => "scanner_shift",
        }
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Cohort {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Cohort::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown cohort {s:?}")))
    }
}

/// Closed interval sampled uniformly per case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("{name} range [{}, {}] is invalid", self.lo, self.hi)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Cases per cohort: in-distribution, contrast agent, scanner shift.
    pub counts: [usize; 3],
    pub dims: [usize; 3],
    pub seed: u64,
    /// Per-case head size scale.
    pub anatomy_scale: Range,
    pub contrast_boost: Range,
    pub contrast_region_fraction: Range,
    pub scanner_gamma: Range,
    pub scanner_noise_scale: Range,
    /// Per-case multiplier on the stub error level, standing in for
    /// patient-to-patient variation in generator accuracy.
    pub case_difficulty: Range,
    pub base_error_std: f64,
    pub shift_sensitivity: f64,
    pub correlation_length: f64,
    /// Whether scanner-shift cases get a reference CT on disk. Off by default:
    /// that cohort models outside data with no planning CT.
    pub scanner_reference_ct: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            counts: [20, 20, 34],
            dims: [96, 96, 96],
            seed: 42,
            anatomy_scale: Range::new(0.9, 1.0),
            contrast_boost: Range::new(1.3, 1.8),
            contrast_region_fraction: Range::new(0.02, 0.06),
            scanner_gamma: Range::new(0.55, 0.7),
            scanner_noise_scale: Range::new(1.3, 1.7),
            case_difficulty: Range::new(0.9, 1.1),
            base_error_std: 80.0,
            shift_sensitivity: 6.0,
            correlation_length: 5.0,
            scanner_reference_ct: false,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.counts.iter().any(|&c| c < 2) {
            return Err(Error::InvalidSpec(format!(
                "every cohort needs at least 2 cases, got {:?}",
                self.counts
            )));
        }
        self.anatomy_scale.validate("anatomy scale")?;
        if self.anatomy_scale.lo <= 0.0 || self.anatomy_scale.hi > 1.0 {
            return Err(Error::InvalidSpec("anatomy scale must lie in (0, 1]".into()));
        }
        for (name, r) in [
            ("contrast boost", self.contrast_boost),
            ("contrast region fraction", self.contrast_region_fraction),
            ("scanner gamma", self.scanner_gamma),
            ("scanner noise scale", self.scanner_noise_scale),
            ("case difficulty", self.case_difficulty),
        ] {
            r.validate(name)?;
        }
        if self.case_difficulty.lo < 0.0 {
            return Err(Error::InvalidSpec("case difficulty must be >= 0".into()));
        }
        PhantomSpec::head(self.dims, 0).validate()?;
        Ok(())
    }

    pub fn total_cases(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Everything needed to rebuild one case bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDescriptor {
    pub case_id: String,
    pub index: usize,
    pub cohort: Cohort,
    pub phantom: PhantomSpec,
    pub shift: ShiftMode,
    pub shift_seed: u64,
    pub stubs: [StubErrorModel; 3],
    pub has_reference: bool,
}

/// One materialized case.
#[derive(Debug, Clone)]
pub struct SimulatedCase {
    pub descriptor: CaseDescriptor,
    pub phantom: Phantom,
    /// MR after the cohort's appearance shift; this is the pipeline input.
    pub mr: Volume,
    pub shift_magnitude: f64,
    /// Stub outputs in axial, coronal, sagittal order.
    pub scts: Vec<Volume>,
}

impl SimulatedCase {
    pub fn reference_ct(&self) -> Option<&Volume> {
        self.descriptor.has_reference.then_some(&self.phantom.ct)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortPlan {
    pub config: SimulationConfig,
    pub cases: Vec<CaseDescriptor>,
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Lays out every case of the three cohorts with fixed per-case seeds.
pub fn simulate_cohorts(config: &SimulationConfig) -> Result<CohortPlan> {
    config.validate()?;
    let mut cases = Vec::with_capacity(config.total_cases());
    let mut index = 0usize;
    for (cohort, &count) in Cohort::ALL.iter().zip(&config.counts) {
        for _ in 0..count {
            cases.push(describe_case(config, *cohort, index));
            index += 1;
        }
    }
    Ok(CohortPlan {
        config: config.clone(),
        cases,
    })
}

fn describe_case(config: &SimulationConfig, cohort: Cohort, index: usize) -> CaseDescriptor {
    let i = index as u64;
    let mut params = stream_rng(derive_seed(config.seed, i, "case_params"), "case_params");

    let mut phantom = PhantomSpec::head(config.dims, derive_seed(config.seed, i, "phantom"));
    let scale = config.anatomy_scale.sample(&mut params);
    phantom.scalp_radii = phantom.scalp_radii.map(|r| r * scale);
    phantom.skull_radii = phantom.skull_radii.map(|r| r * scale);
    phantom.brain_radii = phantom.brain_radii.map(|r| r * scale);

    let shift = match cohort {
        Cohort::InDist => ShiftMode::InDist,
        Cohort::ContrastAgent => ShiftMode::ContrastAgent {
            boost_factor: config.contrast_boost.sample(&mut params),
            region_fraction: config.contrast_region_fraction.sample(&mut params),
        },
        Cohort::ScannerShift => ShiftMode::ScannerShift {
            gamma: config.scanner_gamma.sample(&mut params),
            noise_scale: config.scanner_noise_scale.sample(&mut params),
        },
    };
    let difficulty = config.case_difficulty.sample(&mut params);
    let stubs = Plane::ALL.map(|plane| StubErrorModel {
        plane,
        base_error_std: config.base_error_std * difficulty,
        shift_sensitivity: config.shift_sensitivity,
        correlation_length: config.correlation_length,
        seed: derive_seed(config.seed, i, &format!("stub_{}", plane.short_name())),
    });
    CaseDescriptor {
        case_id: case_id(index),
        index,
        cohort,
        phantom,
        shift,
        shift_seed: derive_seed(config.seed, i, "shift"),
        stubs,
        has_reference: cohort != Cohort::ScannerShift || config.scanner_reference_ct,
    }
}

impl CohortPlan {
    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn materialize(&self, i: usize) -> Result<SimulatedCase> {
        materialize_case(&self.cases[i])
    }

    /// Writes every case under `dir` (see [`write_case`]) plus `cohort.json`.
    pub fn write_to(&self, dir: &Path, jobs: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::write_io(dir, e))?;
        crate::pipeline::run_indexed(self.len(), jobs, |i| {
            let case = self.materialize(i)?;
            write_case(&case, dir)
        })?;
        let manifest = CohortManifest::from_plan(self);
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::write_io(&path, e))
    }
}

pub fn materialize_case(desc: &CaseDescriptor) -> Result<SimulatedCase> {
    let phantom = generate_phantom(&desc.phantom)?;
    let mr = apply_shift(&phantom.mr, &desc.shift, &phantom.brain, desc.shift_seed)?;
    let d = match desc.shift {
        ShiftMode::InDist => 0.0,
        _ => shift_magnitude(&mr, &phantom.mr)?,
    };
    let scts = desc
        .stubs
        .iter()
        .map(|m| stub_generate_with_magnitude(&phantom.ct, d, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulatedCase {
        descriptor: desc.clone(),
        phantom,
        mr,
        shift_magnitude: d,
        scts,
    })
}

pub const MANIFEST_FILE: &str = "cohort.json";
pub const CASE_META_FILE: &str = "meta.json";

/// File names inside a case directory.
pub mod layout {
    pub const MR: &str = "mr.nii";
    pub const CT: &str = "ct.nii";
    pub const SCT: [&str; 3] = ["sct_axi.nii", "sct_cor.nii", "sct_sag.nii"];
}

/// `cohort.json` at the top of a simulated cohort directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub config: SimulationConfig,
    pub cases: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub cohort: Cohort,
}

impl CohortManifest {
    fn from_plan(plan: &CohortPlan) -> Self {
        Self {
            config: plan.config.clone(),
            cases: plan
                .cases
                .iter()
                .map(|c| ManifestEntry {
                    case_id: c.case_id.clone(),
                    cohort: c.cohort,
                })
                .collect(),
        }
    }
}

/// `case_<id>/meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub case_id: String,
    pub cohort: Cohort,
    pub shift: ShiftMode,
    pub shift_seed: u64,
    pub shift_magnitude: f64,
    pub phantom: PhantomSpec,
    pub stubs: [StubErrorModel; 3],
    pub has_reference: bool,
}

/// Writes `case_<id>/{mr,ct,sct_axi,sct_cor,sct_sag}.nii` and `meta.json`.
/// `ct.nii` is only written for cases that carry a reference CT.
pub fn write_case(case: &SimulatedCase, dir: &Path) -> Result<()> {
    let d = &case.descriptor;
    let case_dir = dir.join(&d.case_id);
    std::fs::create_dir_all(&case_dir).map_err(|e| Error::write_io(&case_dir, e))?;
    write_volume(&case.mr, case_dir.join(layout::MR))?;
    if let Some(ct) = case.reference_ct() {
        write_volume(ct, case_dir.join(layout::CT))?;
    }
    for (sct, name) in case.scts.iter().zip(layout::SCT) {
        write_volume(sct, case_dir.join(name))?;
    }
    let meta = CaseMeta {
        case_id: d.case_id.clone(),
        cohort: d.cohort,
        shift: d.shift,
        shift_seed: d.shift_seed,
        shift_magnitude: case.shift_magnitude,
        phantom: d.phantom.clone(),
        stubs: d.stubs,
        has_reference: d.has_reference,
    };
    let path = case_dir.join(CASE_META_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::write_io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SimulationConfig {
        SimulationConfig {
            counts: [2, 2, 2],
            dims: [32, 32, 32],
            seed: 7,
            ..SimulationConfig::default()
        }
    }

    #[test]
    fn paper_sized_plan() {
        let cfg = SimulationConfig::default();
        let plan = simulate_cohorts(&cfg).unwrap();
        assert_eq!(plan.len(), 74);
        assert_eq!(plan.cases.iter().filter(|c| c.cohort == Cohort::InDist).count(), 20);
        assert_eq!(plan.cases.iter().filter(|c| c.has_reference).count(), 40);
        assert_eq!(plan.cases[0].case_id, "case_000");
        assert_eq!(plan.cases[73].case_id, "case_073");
        assert_eq!(plan, simulate_cohorts(&cfg).unwrap());
        let mut seeds: Vec<u64> = plan.cases.iter().map(|c| c.phantom.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 74);
    }

    #[test]
    fn too_few_cases_rejected() {
        let cfg = SimulationConfig {
            counts: [1, 2, 2],
            ..tiny()
        };
        assert_eq!(simulate_cohorts(&cfg).unwrap_err().kind(), "InvalidSpec");
    }

    #[test]
    fn materialize_is_deterministic() {
        let plan = simulate_cohorts(&tiny()).unwrap();
        for i in [0, 3, 5] {
            let a = plan.materialize(i).unwrap();
            let b = plan.materialize(i).unwrap();
            assert_eq!(a.mr, b.mr);
            assert_eq!(a.scts, b.scts);
        }
        let in_dist = plan.materialize(0).unwrap();
        assert_eq!(in_dist.shift_magnitude, 0.0);
        assert_eq!(in_dist.mr, in_dist.phantom.mr);
        let scanner = plan.materialize(5).unwrap();
        assert!(scanner.shift_magnitude > 0.0);
        assert!(scanner.reference_ct().is_none());
    }

    #[test]
    fn cohort_names_roundtrip() {
        for c in Cohort::ALL {
            assert_eq!(c.as_str().parse::<Cohort>().unwrap(), c);
        }
        assert!("oasis".parse::<Cohort>().is_err());
    }
}
