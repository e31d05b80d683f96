//! Case-level execution: run the ensemble QC on one case, or on a whole
//! cohort in parallel.
//!
//! Parallel runs collect results in case order and report the first failing
//! case by index, so output never depends on the number of worker threads.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contour::ContourParams;
use crate::ensemble::{run_ensemble, EnsembleRun};
use crate::error::{Error, Result};
use crate::io::read_volume;
use crate::sim::{layout, CaseMeta, Cohort, CohortManifest, CohortPlan, SimulatedCase, CASE_META_FILE, MANIFEST_FILE};
use crate::stats::{mae_full_volume, mae_within_mask};
use crate::volume::{Semantics, Volume};

/// Runs `f(0..n)` on `jobs` worker threads (0 = one per core) and returns the
/// results in index order.
pub fn run_indexed<T, F>(n: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {jobs} worker threads: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| (0..n).into_par_iter().map(&f).collect());
    results.into_iter().collect()
}

/// Where MAE against the reference CT is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaeScope {
    #[default]
    BodyContour,
    FullVolume,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    pub contour: ContourParams,
    pub mae_scope: MaeScope,
    /// Fail with `MissingReference` instead of skipping MAE.
    pub require_reference: bool,
}

/// Scalar result of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    pub cohort: Cohort,
    pub mean_uncertainty: f64,
    /// Fused sCT against the reference CT; absent without a reference.
    pub mae: Option<f64>,
}

/// Fused-sCT MAE for an ensemble run.
pub fn fused_mae(run: &EnsembleRun, reference: &Volume, scope: MaeScope) -> Result<f64> {
    match scope {
        MaeScope::BodyContour => mae_within_mask(&run.result.fused, reference, &run.body),
        MaeScope::FullVolume => mae_full_volume(&run.result.fused, reference),
    }
}

pub fn evaluate_members(
    mr: &Volume,
    members: &[Volume],
    reference: Option<&Volume>,
    opts: &EvalOptions,
) -> Result<(EnsembleRun, Option<f64>)> {
    let run = run_ensemble(members, mr, &opts.contour)?;
    if reference.is_none() && opts.require_reference {
        return Err(Error::MissingReference("MAE requested but no reference CT was given".into()));
    }
    let mae = reference.map(|ct| fused_mae(&run, ct, opts.mae_scope)).transpose()?;
    Ok((run, mae))
}

pub fn evaluate_simulated(case: &SimulatedCase, opts: &EvalOptions) -> Result<CaseOutcome> {
    let (run, mae) = evaluate_members(&case.mr, &case.scts, case.reference_ct(), opts)?;
    Ok(CaseOutcome {
        case_id: case.descriptor.case_id.clone(),
        cohort: case.descriptor.cohort,
        mean_uncertainty: run.mean_uncertainty,
        mae,
    })
}

/// Simulates and evaluates every case of a plan without touching disk.
pub fn evaluate_plan(plan: &CohortPlan, opts: &EvalOptions, jobs: usize) -> Result<Vec<CaseOutcome>> {
    run_indexed(plan.len(), jobs, |i| evaluate_simulated(&plan.materialize(i)?, opts))
}

/// One case directory on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseInputs {
    pub case_id: String,
    pub cohort: Cohort,
    pub mr: PathBuf,
    pub members: Vec<PathBuf>,
    pub reference: Option<PathBuf>,
}

impl CaseInputs {
    /// Reads `meta.json` when present; otherwise the case is taken as
    /// in-distribution, named after its directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::MalformedCase {
            path: dir.to_path_buf(),
            reason,
        };
        if !dir.is_dir() {
            return Err(Error::InputNotFound(dir.to_path_buf()));
        }
        let meta_path = dir.join(CASE_META_FILE);
        let (case_id, cohort, expects_ct) = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let meta: CaseMeta = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
            (meta.case_id, meta.cohort, meta.has_reference)
        } else {
            let name = dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| malformed("directory name is not valid UTF-8".into()))?;
            (name.to_string(), Cohort::InDist, false)
        };
        let mr = dir.join(layout::MR);
        if !mr.exists() {
            return Err(malformed(format!("missing {}", layout::MR)));
        }
        let members: Vec<PathBuf> = layout::SCT.iter().map(|n| dir.join(n)).filter(|p| p.exists()).collect();
        if members.len() < 2 {
            return Err(malformed(format!(
                "needs at least 2 of {:?}, found {}",
                layout::SCT,
                members.len()
            )));
        }
        let ct = dir.join(layout::CT);
        let reference = if ct.exists() {
            Some(ct)
        } else if expects_ct {
            return Err(malformed(format!("meta.json declares a reference but {} is missing", layout::CT)));
        } else {
            None
        };
        Ok(Self {
            case_id,
            cohort,
            mr,
            members,
            reference,
        })
    }

    pub fn evaluate(&self, opts: &EvalOptions) -> Result<CaseOutcome> {
        if self.reference.is_none() && opts.require_reference {
            return Err(Error::MissingReference(format!("{} has no {}", self.case_id, layout::CT)));
        }
        let mr = read_volume(&self.mr, Semantics::MrIntensityArbitrary)?;
        let members = self
            .members
            .iter()
            .map(|p| read_volume(p, Semantics::HounsfieldUnits))
            .collect::<Result<Vec<_>>>()?;
        let reference = self
            .reference
            .as_ref()
            .map(|p| read_volume(p, Semantics::HounsfieldUnits))
            .transpose()?;
        let (run, mae) = evaluate_members(&mr, &members, reference.as_ref(), opts)?;
        Ok(CaseOutcome {
            case_id: self.case_id.clone(),
            cohort: self.cohort,
            mean_uncertainty: run.mean_uncertainty,
            mae,
        })
    }
}

/// Case directories of a cohort, in manifest order when `cohort.json` exists,
/// else every subdirectory holding an `mr.nii`, sorted by name.
pub fn discover_cases(cohort_dir: &Path) -> Result<Vec<CaseInputs>> {
    if !cohort_dir.is_dir() {
        return Err(Error::InputNotFound(cohort_dir.to_path_buf()));
    }
    let manifest_path = cohort_dir.join(MANIFEST_FILE);
    let dirs: Vec<PathBuf> = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CohortManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
        manifest.cases.iter().map(|c| cohort_dir.join(&c.case_id)).collect()
    } else {
        let entries = std::fs::read_dir(cohort_dir).map_err(|e| Error::io(cohort_dir, e))?;
        let mut dirs = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(cohort_dir, e))?.path();
            if path.join(layout::MR).exists() {
                dirs.push(path);
            }
        }
        dirs.sort();
        dirs
    };
    if dirs.is_empty() {
        return Err(Error::MalformedCase {
            path: cohort_dir.to_path_buf(),
            reason: "no case directories found".into(),
        });
    }
    dirs.iter().map(|d| CaseInputs::from_dir(d)).collect()
}

pub fn evaluate_cases(cases: &[CaseInputs], opts: &EvalOptions, jobs: usize) -> Result<Vec<CaseOutcome>> {
    run_indexed(cases.len(), jobs, |i| cases[i].evaluate(opts))
}
