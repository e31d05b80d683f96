//! QC verdicts and cohort statistics.
//!
//! Everything here works on plain `f64` scalars: per-case mean uncertainty,
//! per-case MAE, and the cohort-level tests built on them. The Student-t tail
//! probability is evaluated in-crate through the regularized incomplete beta
//! function.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::volume::{masked_mean, KahanSum, Mask, Semantics, Volume};

/// How a QC threshold was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMethod {
    /// Largest calibration value plus a fixed HU margin.
    MaxPlusMargin { margin: f64 },
    /// Calibration mean plus `k` sample standard deviations.
    MeanPlusKSigma { k: f64 },
    /// Set by hand, not calibrated.
    Explicit,
}

impl Default for ThresholdMethod {
    fn default() -> Self {
        ThresholdMethod::MeanPlusKSigma { k: 3.0 }
    }
}

impl fmt::Display for ThresholdMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMethod::MaxPlusMargin { margin } => write!(f, "max_plus_margin:{margin}"),
            ThresholdMethod::MeanPlusKSigma { k } => write!(f, "mean_plus_k_sigma:{k}"),
            ThresholdMethod::Explicit => write!(f, "explicit"),
        }
    }
}

impl FromStr for ThresholdMethod {
    type Err = Error;

    /// Parses `max_plus_margin:<hu>`, `mean_plus_k_sigma:<k>` or `explicit`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown threshold method {s:?}"));
        if s == "explicit" {
            return Ok(ThresholdMethod::Explicit);
        }
        let (name, arg) = s.split_once(':').ok_or_else(bad)?;
        let value: f64 = arg.trim().parse().map_err(|_| bad())?;
        if !value.is_finite() {
            return Err(bad());
        }
        match name.trim() {
            "max_plus_margin" => Ok(ThresholdMethod::MaxPlusMargin { margin: value }),
            "mean_plus_k_sigma" => Ok(ThresholdMethod::MeanPlusKSigma { k: value }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ThresholdMethod {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ThresholdMethod {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Mean-uncertainty cutoff. Serialized as `{value_hu, method, n}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcThreshold {
    #[serde(rename = "value_hu")]
    pub value: f64,
    pub method: ThresholdMethod,
    #[serde(rename = "n")]
    pub calibration_cohort_size: usize,
}

impl QcThreshold {
    pub fn explicit(value: f64) -> Result<Self> {
        let t = Self {
            value,
            method: ThresholdMethod::Explicit,
            calibration_cohort_size: 0,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.value.is_finite() && self.value > 0.0) {
            return Err(Error::InvalidThreshold(format!(
                "threshold must be finite and > 0 HU, got {}",
                self.value
            )));
        }
        if self.method != ThresholdMethod::Explicit && self.calibration_cohort_size < 2 {
            return Err(Error::TooFewCalibrationCases(self.calibration_cohort_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    InDistribution,
    OutOfDistribution,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::InDistribution => "in_distribution",
            Verdict::OutOfDistribution => "out_of_distribution",
        }
    }
}

/// Per-case QC result, serialized with stable key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub case_id: String,
    pub mean_uncertainty_hu: f64,
    pub threshold_hu: f64,
    pub threshold_method: ThresholdMethod,
    pub verdict: Verdict,
    pub mae_hu: Option<f64>,
    pub timestamp: String,
}

impl QcReport {
    pub fn new(
        case_id: impl Into<String>,
        mean_uncertainty: f64,
        threshold: &QcThreshold,
        mae: Option<f64>,
        timestamp: impl Into<String>,
    ) -> Self {
        Self {
            case_id: case_id.into(),
            mean_uncertainty_hu: mean_uncertainty,
            threshold_hu: threshold.value,
            threshold_method: threshold.method,
            verdict: classify(mean_uncertainty, threshold),
            mae_hu: mae,
            timestamp: timestamp.into(),
        }
    }
}

/// Summary of one cohort's mean uncertainties (sample std), plus MAE when
/// reference CTs exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub n: usize,
    pub mean_u: f64,
    pub std_u: f64,
    pub mean_mae: Option<f64>,
    pub std_mae: Option<f64>,
}

pub fn cohort_stats(mean_uncertainties: &[f64], maes: Option<&[f64]>) -> Result<CohortStats> {
    let (mean_u, std_u) = mean_and_sample_std(mean_uncertainties)?;
    let (mean_mae, std_mae) = match maes {
        Some(m) => {
            if m.len() != mean_uncertainties.len() {
                return Err(Error::LengthMismatch {
                    expected: mean_uncertainties.len(),
                    actual: m.len(),
                });
            }
            let (a, b) = mean_and_sample_std(m)?;
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    Ok(CohortStats {
        n: mean_uncertainties.len(),
        mean_u,
        std_u,
        mean_mae,
        std_mae,
    })
}

fn mean(xs: &[f64]) -> f64 {
    let mut s = KahanSum::default();
    xs.iter().for_each(|&x| s.add(x));
    s.total() / xs.len() as f64
}

/// Two-pass mean and sample (n − 1) standard deviation.
pub fn mean_and_sample_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::TooFewSamples);
    }
    let m = mean(xs);
    let mut ss = KahanSum::default();
    xs.iter().for_each(|&x| ss.add((x - m) * (x - m)));
    Ok((m, (ss.total() / (xs.len() - 1) as f64).sqrt()))
}

pub fn calibrate_threshold(in_dist_means: &[f64], method: ThresholdMethod) -> Result<QcThreshold> {
    if in_dist_means.len() < 2 {
        return Err(Error::TooFewCalibrationCases(in_dist_means.len()));
    }
    if let Some(bad) = in_dist_means.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::InvalidThreshold(format!(
            "calibration values must be finite and >= 0, got {bad}"
        )));
    }
    let value = match method {
        ThresholdMethod::MaxPlusMargin { margin } => {
            in_dist_means.iter().copied().fold(f64::NEG_INFINITY, f64::max) + margin
        }
        ThresholdMethod::MeanPlusKSigma { k } => {
            let (m, s) = mean_and_sample_std(in_dist_means)?;
            m + k * s
        }
        ThresholdMethod::Explicit => {
            return Err(Error::InvalidConfig(
                "explicit thresholds are not calibrated".into(),
            ))
        }
    };
    let t = QcThreshold {
        value,
        method,
        calibration_cohort_size: in_dist_means.len(),
    };
    t.validate()?;
    Ok(t)
}

/// Strict exceedance flags a case; equality stays in distribution.
pub fn classify(mean_uncertainty: f64, threshold: &QcThreshold) -> Verdict {
    if mean_uncertainty > threshold.value {
        Verdict::OutOfDistribution
    } else {
        Verdict::InDistribution
    }
}

/// Mean absolute HU error over the masked voxels.
pub fn mae_within_mask(sct: &Volume, reference: &Volume, body: &Mask) -> Result<f64> {
    sct.ensure_semantics(Semantics::HounsfieldUnits)?;
    reference.ensure_semantics(Semantics::HounsfieldUnits)?;
    sct.grid().ensure_compatible(reference.grid())?;
    sct.grid().ensure_compatible(body.grid())?;
    masked_mean(
        sct.values()
            .iter()
            .zip(reference.values())
            .zip(body.bits())
            .filter(|(_, &b)| b)
            .map(|((&a, &r), _)| (f64::from(a) - f64::from(r)).abs()),
    )
}

/// Mean absolute HU error over the whole grid.
pub fn mae_full_volume(sct: &Volume, reference: &Volume) -> Result<f64> {
    let all = Mask::from_fn(*sct.grid(), |_, _, _| true);
    mae_within_mask(sct, reference, &all)
}

struct Moments {
    n: usize,
    mean_x: f64,
    mean_y: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

fn paired_moments(xs: &[f64], ys: &[f64]) -> Result<Moments> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::TooFewSamples);
    }
    let mean_x = mean(xs);
    let mean_y = mean(ys);
    let (mut sxx, mut syy, mut sxy) = (KahanSum::default(), KahanSum::default(), KahanSum::default());
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mean_x, y - mean_y);
        sxx.add(dx * dx);
        syy.add(dy * dy);
        sxy.add(dx * dy);
    }
    Ok(Moments {
        n: xs.len(),
        mean_x,
        mean_y,
        sxx: sxx.total(),
        syy: syy.total(),
        sxy: sxy.total(),
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let m = paired_moments(xs, ys)?;
    if m.sxx == 0.0 {
        return Err(Error::ZeroVariance("xs"));
    }
    if m.syy == 0.0 {
        return Err(Error::ZeroVariance("ys"));
    }
    Ok((m.sxy / (m.sxx.sqrt() * m.syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

impl LinearFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    let m = paired_moments(xs, ys)?;
    if m.sxx == 0.0 {
        return Err(Error::ZeroVariance("xs"));
    }
    debug_assert!(m.n >= 2);
    let slope = m.sxy / m.sxx;
    Ok(LinearFit {
        slope,
        intercept: m.mean_y - slope * m.mean_x,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_two_sided: f64,
}

/// Welch's unequal-variance t-test. Positive `t` means `a` has the larger
/// mean.
///
/// When both samples have zero variance the statistic is undefined; the
/// convention here is `t = 0, p = 1` for equal means and `t = ±inf, p = 0`
/// otherwise, with `df = n_a + n_b − 2`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::TooFewSamples);
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput {
            count: a.iter().chain(b).filter(|x| !x.is_finite()).count(),
        });
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, sa) = mean_and_sample_std(a)?;
    let (mb, sb) = mean_and_sample_std(b)?;
    let (qa, qb) = (sa * sa / na, sb * sb / nb);
    let se2 = qa + qb;
    let diff = ma - mb;
    if se2 == 0.0 {
        let df = na + nb - 2.0;
        return Ok(if diff == 0.0 {
            WelchResult { t: 0.0, df, p_two_sided: 1.0 }
        } else {
            WelchResult {
                t: f64::INFINITY.copysign(diff),
                df,
                p_two_sided: 0.0,
            }
        });
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    Ok(WelchResult {
        t,
        df,
        p_two_sided: student_t_two_sided_p(t, df),
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 500;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
