//! Cohort-level report: per-case verdicts, cohort statistics, pairwise Welch
//! tests, uncertainty/MAE correlation, and their CSV, JSON and SVG renderings.
//!
//! CSV columns, in order: `cohort,case_id,mean_uncertainty_hu,mae_hu,verdict`.
//! HU values have two decimals; `mae_hu` is empty for cases without a
//! reference CT.
//!
//! Every SVG point carries its plotted numbers in `data-*` attributes.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::CaseOutcome;
use crate::sim::Cohort;
use crate::stats::{cohort_stats, linear_fit, pearson, welch_t_test, CohortStats, LinearFit, QcReport, QcThreshold, WelchResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub cohort: Cohort,
    #[serde(flatten)]
    pub report: QcReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub cohort: Cohort,
    #[serde(flatten)]
    pub stats: CohortStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub a: Cohort,
    pub b: Cohort,
    #[serde(flatten)]
    pub welch: WelchResult,
}

/// Which cases a correlation was computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationGroup {
    Cohort(Cohort),
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub group: CorrelationGroup,
    pub n: usize,
    pub r: f64,
    pub fit: LinearFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub threshold: QcThreshold,
    pub cases: Vec<CaseEntry>,
    pub cohorts: Vec<CohortSummary>,
    pub t_tests: Vec<PairTest>,
    pub correlations: Vec<Correlation>,
}

fn present_cohorts(outcomes: &[CaseOutcome]) -> Vec<Cohort> {
    Cohort::ALL
        .into_iter()
        .filter(|c| outcomes.iter().any(|o| o.cohort == *c))
        .collect()
}

fn column(outcomes: &[CaseOutcome], cohort: Cohort) -> (Vec<f64>, Vec<Option<f64>>) {
    outcomes
        .iter()
        .filter(|o| o.cohort == cohort)
        .map(|o| (o.mean_uncertainty, o.mae))
        .unzip()
}

/// Correlation over paired samples; `None` when either side is constant.
fn correlate(group: CorrelationGroup, us: &[f64], maes: &[f64]) -> Result<Option<Correlation>> {
    match (pearson(us, maes), linear_fit(us, maes)) {
        (Ok(r), Ok(fit)) => Ok(Some(Correlation {
            group,
            n: us.len(),
            r,
            fit,
        })),
        (Err(Error::ZeroVariance(_)), _) | (_, Err(Error::ZeroVariance(_))) => Ok(None),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

/// Assembles the report. Every cohort present needs at least two cases.
/// Correlations are computed per cohort whose cases all carry an MAE, and
/// pooled over those cohorts when there are two or more.
pub fn build_report(outcomes: &[CaseOutcome], threshold: &QcThreshold, timestamp: &str) -> Result<CohortReport> {
    threshold.validate()?;
    let cohorts = present_cohorts(outcomes);
    if cohorts.is_empty() {
        return Err(Error::TooFewSamples);
    }
    let cases = outcomes
        .iter()
        .map(|o| CaseEntry {
            cohort: o.cohort,
            report: QcReport::new(o.case_id.clone(), o.mean_uncertainty, threshold, o.mae, timestamp),
        })
        .collect();

    let mut summaries = Vec::new();
    let mut pooled_u = Vec::new();
    let mut pooled_mae = Vec::new();
    let mut correlations = Vec::new();
    let mut with_mae = 0;
    for &c in &cohorts {
        let (us, maes) = column(outcomes, c);
        let maes: Option<Vec<f64>> = maes.into_iter().collect();
        summaries.push(CohortSummary {
            cohort: c,
            stats: cohort_stats(&us, maes.as_deref())?,
        });
        if let Some(m) = maes {
            correlations.extend(correlate(CorrelationGroup::Cohort(c), &us, &m)?);
            pooled_u.extend_from_slice(&us);
            pooled_mae.extend(m);
            with_mae += 1;
        }
    }
    if with_mae >= 2 {
        correlations.extend(correlate(CorrelationGroup::Pooled, &pooled_u, &pooled_mae)?);
    }

    let mut t_tests = Vec::new();
    for (i, &a) in cohorts.iter().enumerate() {
        for &b in &cohorts[i + 1..] {
            let welch = welch_t_test(&column(outcomes, a).0, &column(outcomes, b).0)?;
            t_tests.push(PairTest { a, b, welch });
        }
    }
    Ok(CohortReport {
        threshold: *threshold,
        cases,
        cohorts: summaries,
        t_tests,
        correlations,
    })
}

impl CohortReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cohort,case_id,mean_uncertainty_hu,mae_hu,verdict\n");
        for c in &self.cases {
            let mae = c.report.mae_hu.map(|m| format!("{m:.2}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{:.2},{},{}",
                c.cohort,
                csv_field(&c.report.case_id),
                c.report.mean_uncertainty_hu,
                mae,
                c.report.verdict.as_str()
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn correlation(&self, group: CorrelationGroup) -> Option<&Correlation> {
        self.correlations.iter().find(|c| c.group == group)
    }

    /// Per-case mean uncertainty grouped by cohort, with the threshold line.
    pub fn strip_plot_svg(&self) -> String {
        let cohorts: Vec<Cohort> = self.cohorts.iter().map(|c| c.cohort).collect();
        let values = self.cases.iter().map(|c| c.report.mean_uncertainty_hu);
        let (lo, hi) = padded_range(values.chain([self.threshold.value]));
        let (w, h) = (560.0, 400.0);
        let frame = Frame::new(w, h, (0.0, cohorts.len() as f64), (lo, hi));
        let mut s = svg_open(w, h, "strip", "Mean ensemble uncertainty per case");
        frame.axes(&mut s, "cohort", "mean uncertainty (HU)");
        for (k, c) in cohorts.iter().enumerate() {
            let x = frame.x(k as f64 + 0.5);
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
                frame.bottom + 16.0,
                c
            );
            let members: Vec<&CaseEntry> = self.cases.iter().filter(|e| e.cohort == *c).collect();
            for (j, e) in members.iter().enumerate() {
                // deterministic horizontal jitter inside the group
                let jitter = if members.len() > 1 {
                    (j as f64 / (members.len() - 1) as f64 - 0.5) * 0.5
                } else {
                    0.0
                };
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" data-cohort="{}" data-case-id="{}" data-mean-uncertainty-hu="{}" data-verdict="{}"/>"#,
                    frame.x(k as f64 + 0.5 + jitter),
                    frame.y(e.report.mean_uncertainty_hu),
                    color(*c),
                    c,
                    xml_escape(&e.report.case_id),
                    e.report.mean_uncertainty_hu,
                    e.report.verdict.as_str()
                );
            }
        }
        let ty = frame.y(self.threshold.value);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ty:.2}" x2="{:.2}" y2="{ty:.2}" stroke="gray" stroke-dasharray="4 3" data-threshold-hu="{}" data-method="{}"/>"#,
            frame.left,
            frame.right,
            self.threshold.value,
            self.threshold.method
        );
        s.push_str("</svg>\n");
        s
    }

    /// Mean uncertainty against MAE for cases with a reference CT, with one
    /// OLS line and r annotation per cohort.
    pub fn scatter_plot_svg(&self) -> String {
        let points: Vec<(&CaseEntry, f64)> = self
            .cases
            .iter()
            .filter_map(|c| c.report.mae_hu.map(|m| (c, m)))
            .collect();
        let (xlo, xhi) = padded_range(points.iter().map(|(c, _)| c.report.mean_uncertainty_hu));
        let (ylo, yhi) = padded_range(points.iter().map(|&(_, m)| m));
        let (w, h) = (560.0, 400.0);
        let frame = Frame::new(w, h, (xlo, xhi), (ylo, yhi));
        let mut s = svg_open(w, h, "scatter", "Mean ensemble uncertainty against MAE");
        frame.axes(&mut s, "mean uncertainty (HU)", "MAE (HU)");
        for (c, mae) in &points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" data-cohort="{}" data-case-id="{}" data-mean-uncertainty-hu="{}" data-mae-hu="{}"/>"#,
                frame.x(c.report.mean_uncertainty_hu),
                frame.y(*mae),
                color(c.cohort),
                c.cohort,
                xml_escape(&c.report.case_id),
                c.report.mean_uncertainty_hu,
                mae
            );
        }
        let mut row = 0;
        for corr in &self.correlations {
            let CorrelationGroup::Cohort(cohort) = corr.group else {
                continue;
            };
            let xs = points
                .iter()
                .filter(|(c, _)| c.cohort == cohort)
                .map(|(c, _)| c.report.mean_uncertainty_hu);
            let (a, b) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" data-cohort="{}" data-slope="{}" data-intercept="{}"/>"#,
                frame.x(a),
                frame.y(corr.fit.predict(a)),
                frame.x(b),
                frame.y(corr.fit.predict(b)),
                color(cohort),
                cohort,
                corr.fit.slope,
                corr.fit.intercept
            );
            let r = format!("{:.2}", corr.r);
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="12" fill="{}" data-cohort="{}" data-r="{r}">{}: r = {r}</text>"#,
                frame.left + 8.0,
                frame.top + 14.0 + 16.0 * row as f64,
                color(cohort),
                cohort,
                cohort
            );
            row += 1;
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `report.json`, `report.csv` and, if asked, `strip_plot.svg`
    /// and `scatter_plot.svg` under `dir`.
    pub fn write_to(&self, dir: &Path, plots: bool) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::write_io(dir, e))?;
        let mut files = vec![("report.json", self.to_json()), ("report.csv", self.to_csv())];
        if plots {
            files.push(("strip_plot.svg", self.strip_plot_svg()));
            files.push(("scatter_plot.svg", self.scatter_plot_svg()));
        }
        for (name, text) in files {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::write_io(&path, e))?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn color(c: Cohort) -> &'static str {
    match c {
        Cohort::InDist => "#1f77b4",
        Cohort::ContrastAgent => "#ff7f0e",
        Cohort::ScannerShift => "#2ca02c",
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.08 * (hi - lo) } else { lo.abs().max(1.0) * 0.1 };
    (lo - pad, hi + pad)
}

fn svg_open(w: f64, h: f64, kind: &str, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" data-plot=\"{kind}\">\n<title>{}</title>\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
        xml_escape(title)
    )
}

struct Frame {
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Frame {
    fn new(w: f64, h: f64, xr: (f64, f64), yr: (f64, f64)) -> Self {
        Self {
            left: 64.0,
            right: w - 16.0,
            top: 16.0,
            bottom: h - 48.0,
            xr,
            yr,
        }
    }

    fn x(&self, v: f64) -> f64 {
        self.left + (v - self.xr.0) / (self.xr.1 - self.xr.0) * (self.right - self.left)
    }

    fn y(&self, v: f64) -> f64 {
        self.bottom - (v - self.yr.0) / (self.yr.1 - self.yr.0) * (self.bottom - self.top)
    }

    fn axes(&self, s: &mut String, xlabel: &str, ylabel: &str) {
        let _ = writeln!(
            s,
            r#"<path d="M{l:.2},{t:.2} V{b:.2} H{r:.2}" fill="none" stroke="black"/>"#,
            l = self.left,
            t = self.top,
            b = self.bottom,
            r = self.right
        );
        for k in 0..=4 {
            let v = self.yr.0 + (self.yr.1 - self.yr.0) * k as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{v:.1}</text>"#,
                self.left - 4.0,
                self.y(v) + 3.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
            (self.left + self.right) / 2.0,
            self.bottom + 36.0,
            xml_escape(xlabel)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {:.2})">{}</text>"#,
            (self.top + self.bottom) / 2.0,
            (self.top + self.bottom) / 2.0,
            xml_escape(ylabel)
        );
    }
}
