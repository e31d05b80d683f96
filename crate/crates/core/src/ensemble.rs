//! Ensemble fusion and disagreement.
//!
//! The fused sCT is the voxel-wise median of the members; the uncertainty map
//! is the largest absolute difference between any two members at each voxel,
//! which is the same number as the per-voxel range (max − min). Computing it
//! as a range keeps the cost linear in the member count.

use rayon::prelude::*;

use crate::contour::{extract_body_contour, ContourParams};
use crate::error::{Error, Result};
use crate::volume::{masked_mean, Mask, Semantics, Volume};

#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub fused: Volume,
    pub uncertainty: Volume,
    pub member_count: usize,
}

/// Everything [`run_ensemble`] produces for one case.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub result: EnsembleResult,
    pub body: Mask,
    pub mean_uncertainty: f64,
}

fn check_members(members: &[Volume]) -> Result<()> {
    if members.len() < 2 {
        return Err(Error::TooFewMembers(members.len()));
    }
    let grid = members[0].grid();
    for m in members {
        m.ensure_semantics(Semantics::HounsfieldUnits)?;
        grid.ensure_compatible(m.grid())?;
    }
    Ok(())
}

/// Applies `f` to the member values at every voxel, in parallel.
fn per_voxel(members: &[Volume], f: impl Fn(&mut [f32]) -> f32 + Sync) -> Vec<f32> {
    let n = members[0].values().len();
    let slices: Vec<&[f32]> = members.iter().map(|m| m.values()).collect();
    (0..n)
        .into_par_iter()
        .map_init(
            || vec![0f32; slices.len()],
            |buf, i| {
                for (b, s) in buf.iter_mut().zip(&slices) {
                    *b = s[i];
                }
                f(buf)
            },
        )
        .collect()
}

/// Voxel-wise median. For an even member count the two middle values are
/// averaged.
pub fn fuse_median(members: &[Volume]) -> Result<Volume> {
    check_members(members)?;
    let values = per_voxel(members, |buf| {
        buf.sort_unstable_by(f32::total_cmp);
        let n = buf.len();
        if n % 2 == 1 {
            buf[n / 2]
        } else {
            ((f64::from(buf[n / 2 - 1]) + f64::from(buf[n / 2])) / 2.0) as f32
        }
    });
    members[0].with_values(values)
}

/// Voxel-wise maximum pairwise absolute difference, computed as the range.
pub fn uncertainty_map(members: &[Volume]) -> Result<Volume> {
    check_members(members)?;
    let values = per_voxel(members, |buf| {
        let mut lo = buf[0];
        let mut hi = buf[0];
        for &v in &buf[1..] {
            if v.total_cmp(&lo).is_lt() {
                lo = v;
            }
            if v.total_cmp(&hi).is_gt() {
                hi = v;
            }
        }
        hi - lo
    });
    members[0].with_values(values)
}

/// Mean of the uncertainty map over the body contour. Only in-mask voxels
/// contribute, so the value does not grow with head size.
pub fn mean_uncertainty(uncertainty: &Volume, body: &Mask) -> Result<f64> {
    uncertainty.grid().ensure_compatible(body.grid())?;
    masked_mean(
        uncertainty
            .values()
            .iter()
            .zip(body.bits())
            .filter(|(_, &b)| b)
            .map(|(&u, _)| f64::from(u)),
    )
}

pub fn run_ensemble(members: &[Volume], mr: &Volume, params: &ContourParams) -> Result<EnsembleRun> {
    check_members(members)?;
    mr.grid().ensure_compatible(members[0].grid())?;
    let body = extract_body_contour(mr, params)?;
    let fused = fuse_median(members)?;
    let uncertainty = uncertainty_map(members)?;
    let mean_uncertainty = mean_uncertainty(&uncertainty, &body)?;
    Ok(EnsembleRun {
        result: EnsembleResult {
            fused,
            uncertainty,
            member_count: members.len(),
        },
        body,
        mean_uncertainty,
    })
}
