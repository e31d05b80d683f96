//! The `sct-sentinel` command line.
//!
//! Exit codes: 0 for success (and for an in-distribution `qc run` verdict),
//! 2 for an out-of-distribution verdict, 1 for any error. Errors are printed
//! to stderr as `{"error": {"kind": ..., "message": ...}}`.
//!
//! Every command accepts `--config <file.json>`; explicit flags override the
//! file. `SCT_SENTINEL_SEED` sits between the `--seed` flag and the file.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::contour::{extract_body_contour, Connectivity, ContourParams, ThresholdMode};
use crate::ensemble::{fuse_median, mean_uncertainty, uncertainty_map};
use crate::error::{Error, Result};
use crate::io::{read_volume, write_volume};
use crate::pipeline::{discover_cases, evaluate_cases, evaluate_members, CaseOutcome, EvalOptions, MaeScope};
use crate::report::build_report;
use crate::sim::{simulate_cohorts, Cohort, SimulationConfig};
use crate::stats::{calibrate_threshold, QcReport, QcThreshold, ThresholdMethod, Verdict};
use crate::volume::Semantics;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_OUT_OF_DISTRIBUTION: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sct-sentinel", version, about = "Ensemble-disagreement QC for synthetic CT")]
pub struct Cli {
    /// JSON file with default settings; flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write simulated phantom cohorts to disk.
    Simulate(SimulateArgs),
    /// Extract the body contour of an MR volume.
    Contour(ContourArgs),
    /// Fuse ensemble members and compute the uncertainty map.
    Fuse(FuseArgs),
    /// Single-case QC and threshold calibration.
    #[command(subcommand)]
    Qc(QcCommand),
    /// Evaluate a cohort directory and write CSV, JSON and SVG summaries.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum QcCommand {
    /// QC one case; exits 2 when the case is out of distribution.
    Run(QcRunArgs),
    /// Derive a threshold from the in-distribution cases of a cohort.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Cases per cohort: in_dist,contrast_agent,scanner_shift.
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    /// Grid size, one value for a cube or three for nx,ny,nz.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long, env = "SCT_SENTINEL_SEED")]
    pub seed: Option<u64>,
    /// Also write ct.nii for scanner-shift cases.
    #[arg(long)]
    pub scanner_reference_ct: bool,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct ContourFlags {
    /// `otsu` or `fraction:<f>`.
    #[arg(long, value_name = "MODE")]
    pub threshold_mode: Option<String>,
    #[arg(long, value_name = "VOXELS")]
    pub closing_radius: Option<u32>,
    /// 6 or 26.
    #[arg(long)]
    pub connectivity: Option<u8>,
}

#[derive(Debug, Args)]
pub struct ContourArgs {
    #[arg(long)]
    pub mr: PathBuf,
    /// Output mask volume (0/1).
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub contour: ContourFlags,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Ensemble member; repeat for each.
    #[arg(long = "sct", required = true)]
    pub members: Vec<PathBuf>,
    #[arg(long)]
    pub out_fused: PathBuf,
    #[arg(long)]
    pub out_uncertainty: Option<PathBuf>,
    /// With an MR volume, also report mean uncertainty inside its contour.
    #[arg(long)]
    pub mr: Option<PathBuf>,
    #[command(flatten)]
    pub contour: ContourFlags,
}

#[derive(Debug, Args, Default)]
pub struct ThresholdFlags {
    /// Threshold JSON written by `qc calibrate`.
    #[arg(long, value_name = "FILE", conflicts_with = "threshold_hu")]
    pub threshold_file: Option<PathBuf>,
    #[arg(long, value_name = "HU")]
    pub threshold_hu: Option<f64>,
}

#[derive(Debug, Args)]
pub struct QcRunArgs {
    #[arg(long)]
    pub mr: PathBuf,
    #[arg(long = "sct", required = true)]
    pub members: Vec<PathBuf>,
    /// Reference CT; enables MAE.
    #[arg(long)]
    pub ct: Option<PathBuf>,
    #[command(flatten)]
    pub threshold: ThresholdFlags,
    /// Directory for fused sCT, uncertainty map and qc_report.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long)]
    pub case_id: Option<String>,
    #[arg(long)]
    pub timestamp: Option<String>,
    #[command(flatten)]
    pub contour: ContourFlags,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, value_name = "DIR")]
    pub cohort: PathBuf,
    /// `mean_plus_k_sigma:<k>` or `max_plus_margin:<hu>`.
    #[arg(long)]
    pub method: Option<ThresholdMethod>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub contour: ContourFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, value_name = "DIR")]
    pub cohort: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[command(flatten)]
    pub threshold: ThresholdFlags,
    /// Calibration method when no threshold is given.
    #[arg(long)]
    pub method: Option<ThresholdMethod>,
    #[arg(long)]
    pub no_plots: bool,
    /// Fail unless every case has a reference CT.
    #[arg(long)]
    pub require_mae: bool,
    /// Measure MAE over the whole grid instead of the body contour.
    #[arg(long)]
    pub mae_full_volume: bool,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub timestamp: Option<String>,
    #[command(flatten)]
    pub contour: ContourFlags,
}

/// Contents of `--config`. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub counts: Option<[usize; 3]>,
    pub dims: Option<[usize; 3]>,
    /// Base simulation settings; `seed`, `counts` and `dims` above win.
    pub simulation: Option<SimulationConfig>,
    pub contour: Option<ContourParams>,
    pub threshold_hu: Option<f64>,
    pub threshold_file: Option<PathBuf>,
    pub method: Option<ThresholdMethod>,
    pub emit_plots: Option<bool>,
    pub mae_scope: Option<MaeScope>,
    pub timestamp: Option<String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            report_error(&Error::InvalidConfig(e.to_string().trim_end().to_string()));
            return EXIT_ERROR;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            report_error(&e);
            EXIT_ERROR
        }
    }
}

/// Machine-readable form of an error, as printed on stderr.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}}).to_string()
}

fn report_error(e: &Error) {
    eprintln!("{}", error_json(e));
}

pub fn execute(cli: Cli) -> Result<i32> {
    let config = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a, &config),
        Command::Contour(a) => cmd_contour(&a, &config),
        Command::Fuse(a) => cmd_fuse(&a, &config),
        Command::Qc(QcCommand::Run(a)) => cmd_qc_run(&a, &config),
        Command::Qc(QcCommand::Calibrate(a)) => cmd_calibrate(&a, &config),
        Command::Report(a) => cmd_report(&a, &config),
    }
}

/// `--timestamp`, then the config file, then `SOURCE_DATE_EPOCH`, then the
/// current UTC time.
pub fn resolve_timestamp(flag: Option<&str>, config: &ConfigFile) -> Result<String> {
    if let Some(t) = flag.or(config.timestamp.as_deref()) {
        return Ok(t.to_string());
    }
    let when = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(s) => {
            let secs: i64 = s
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("SOURCE_DATE_EPOCH is not an integer: {s:?}")))?;
            chrono::DateTime::from_timestamp(secs, 0)
                .ok_or_else(|| Error::InvalidConfig(format!("SOURCE_DATE_EPOCH out of range: {secs}")))?
        }
        Err(_) => chrono::Utc::now(),
    };
    Ok(when.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
}

fn contour_params(flags: &ContourFlags, config: &ConfigFile) -> Result<ContourParams> {
    let mut p = config.contour.unwrap_or_default();
    if let Some(m) = &flags.threshold_mode {
        p.threshold_mode = match m.as_str() {
            "otsu" => ThresholdMode::Otsu,
            other => {
                let f = other
                    .strip_prefix("fraction:")
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidParams(format!("unknown threshold mode {other:?}")))?;
                ThresholdMode::FixedFraction(f)
            }
        };
    }
    if let Some(r) = flags.closing_radius {
        p.closing_radius_voxels = r;
    }
    if let Some(c) = flags.connectivity {
        p.connectivity = match c {
            6 => Connectivity::Face6,
            26 => Connectivity::FaceEdgeVertex26,
            _ => return Err(Error::InvalidParams(format!("connectivity must be 6 or 26, got {c}"))),
        };
    }
    p.validate()?;
    Ok(p)
}

fn jobs(flag: Option<usize>, config: &ConfigFile) -> usize {
    flag.or(config.jobs).unwrap_or(0)
}

fn read_threshold_file(path: &Path) -> Result<QcThreshold> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let t: QcThreshold = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    t.validate()?;
    Ok(t)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::write_io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::write_io(path, e))
}

/// Explicit threshold from flags or config, if any.
fn given_threshold(flags: &ThresholdFlags, config: &ConfigFile) -> Result<Option<QcThreshold>> {
    if let Some(p) = &flags.threshold_file {
        return read_threshold_file(p).map(Some);
    }
    if let Some(v) = flags.threshold_hu {
        return QcThreshold::explicit(v).map(Some);
    }
    if let Some(p) = &config.threshold_file {
        return read_threshold_file(p).map(Some);
    }
    config.threshold_hu.map(QcThreshold::explicit).transpose()
}

fn cmd_simulate(a: &SimulateArgs, config: &ConfigFile) -> Result<i32> {
    let mut sim = config.simulation.clone().unwrap_or_default();
    if let Some(s) = a.seed.or(config.seed) {
        sim.seed = s;
    }
    let counts = match a.counts.as_deref() {
        Some(&[x, y, z]) => Some([x, y, z]),
        Some(other) => {
            return Err(Error::InvalidSpec(format!("--counts takes 3 values, got {}", other.len())))
        }
        None => config.counts,
    };
    if let Some(c) = counts {
        sim.counts = c;
    }
    let dims = match a.dims.as_deref() {
        Some([n]) => Some([*n; 3]),
        Some([x, y, z]) => Some([*x, *y, *z]),
        Some(other) => {
            return Err(Error::InvalidSpec(format!("--dims takes 1 or 3 values, got {}", other.len())))
        }
        None => config.dims,
    };
    if let Some(d) = dims {
        sim.dims = d;
    }
    if a.scanner_reference_ct {
        sim.scanner_reference_ct = true;
    }
    let plan = simulate_cohorts(&sim)?;
    plan.write_to(&a.out, jobs(a.jobs, config))?;
    println!(
        "{}",
        serde_json::json!({"out": a.out, "cases": plan.len(), "seed": sim.seed})
    );
    Ok(EXIT_OK)
}

fn cmd_contour(a: &ContourArgs, config: &ConfigFile) -> Result<i32> {
    let params = contour_params(&a.contour, config)?;
    let mr = read_volume(&a.mr, Semantics::MrIntensityArbitrary)?;
    let mask = extract_body_contour(&mr, &params)?;
    write_volume(&mask.to_volume(), &a.out)?;
    println!("{}", serde_json::json!({"out": a.out, "voxels": mask.count()}));
    Ok(EXIT_OK)
}

fn cmd_fuse(a: &FuseArgs, config: &ConfigFile) -> Result<i32> {
    let members = a
        .members
        .iter()
        .map(|p| read_volume(p, Semantics::HounsfieldUnits))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_median(&members)?;
    let u = uncertainty_map(&members)?;
    write_volume(&fused, &a.out_fused)?;
    if let Some(p) = &a.out_uncertainty {
        write_volume(&u, p)?;
    }
    let mean_u = match &a.mr {
        Some(p) => {
            let params = contour_params(&a.contour, config)?;
            let mr = read_volume(p, Semantics::MrIntensityArbitrary)?;
            let body = extract_body_contour(&mr, &params)?;
            Some(mean_uncertainty(&u, &body)?)
        }
        None => None,
    };
    println!(
        "{}",
        serde_json::json!({"member_count": members.len(), "mean_uncertainty_hu": mean_u})
    );
    Ok(EXIT_OK)
}

fn check_distinct(paths: &[&Path]) -> Result<()> {
    for (i, a) in paths.iter().enumerate() {
        if paths[i + 1..].contains(a) {
            return Err(Error::InvalidConfig(format!("{} is given more than once", a.display())));
        }
    }
    Ok(())
}

fn cmd_qc_run(a: &QcRunArgs, config: &ConfigFile) -> Result<i32> {
    if a.members.len() < 2 {
        return Err(Error::TooFewMembers(a.members.len()));
    }
    let mut paths: Vec<&Path> = vec![&a.mr];
    paths.extend(a.members.iter().map(PathBuf::as_path));
    paths.extend(a.ct.as_deref());
    check_distinct(&paths)?;
    let threshold = given_threshold(&a.threshold, config)?
        .ok_or_else(|| Error::InvalidConfig("qc run needs --threshold-file or --threshold-hu".into()))?;
    let opts = EvalOptions {
        contour: contour_params(&a.contour, config)?,
        mae_scope: config.mae_scope.unwrap_or_default(),
        require_reference: false,
    };
    let timestamp = resolve_timestamp(a.timestamp.as_deref(), config)?;

    let mr = read_volume(&a.mr, Semantics::MrIntensityArbitrary)?;
    let members = a
        .members
        .iter()
        .map(|p| read_volume(p, Semantics::HounsfieldUnits))
        .collect::<Result<Vec<_>>>()?;
    let reference = a
        .ct
        .as_ref()
        .map(|p| read_volume(p, Semantics::HounsfieldUnits))
        .transpose()?;
    let (run, mae) = evaluate_members(&mr, &members, reference.as_ref(), &opts)?;
    let case_id = a.case_id.clone().unwrap_or_else(|| {
        a.mr.parent()
            .and_then(Path::file_name)
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "case".into())
    });
    let report = QcReport::new(case_id, run.mean_uncertainty, &threshold, mae, timestamp);

    std::fs::create_dir_all(&a.out).map_err(|e| Error::write_io(&a.out, e))?;
    write_volume(&run.result.fused, a.out.join("fused_sct.nii"))?;
    write_volume(&run.result.uncertainty, a.out.join("uncertainty.nii"))?;
    write_json(&report, &a.out.join("qc_report.json"))?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(match report.verdict {
        Verdict::InDistribution => EXIT_OK,
        Verdict::OutOfDistribution => EXIT_OUT_OF_DISTRIBUTION,
    })
}

fn cmd_calibrate(a: &CalibrateArgs, config: &ConfigFile) -> Result<i32> {
    let method = a.method.or(config.method).unwrap_or_default();
    let opts = EvalOptions {
        contour: contour_params(&a.contour, config)?,
        ..EvalOptions::default()
    };
    let cases: Vec<_> = discover_cases(&a.cohort)?
        .into_iter()
        .filter(|c| c.cohort == Cohort::InDist)
        .collect();
    if cases.len() < 2 {
        return Err(Error::TooFewCalibrationCases(cases.len()));
    }
    let outcomes = evaluate_cases(&cases, &opts, jobs(a.jobs, config))?;
    let means: Vec<f64> = outcomes.iter().map(|o| o.mean_uncertainty).collect();
    let threshold = calibrate_threshold(&means, method)?;
    write_json(&threshold, &a.out)?;
    println!("{}", serde_json::to_string(&threshold).expect("threshold serializes"));
    Ok(EXIT_OK)
}

/// Threshold for a report: given explicitly, or calibrated on the
/// in-distribution outcomes.
fn report_threshold(outcomes: &[CaseOutcome], method: ThresholdMethod) -> Result<QcThreshold> {
    let means: Vec<f64> = outcomes
        .iter()
        .filter(|o| o.cohort == Cohort::InDist)
        .map(|o| o.mean_uncertainty)
        .collect();
    calibrate_threshold(&means, method)
}

fn cmd_report(a: &ReportArgs, config: &ConfigFile) -> Result<i32> {
    let opts = EvalOptions {
        contour: contour_params(&a.contour, config)?,
        mae_scope: if a.mae_full_volume {
            MaeScope::FullVolume
        } else {
            config.mae_scope.unwrap_or_default()
        },
        require_reference: a.require_mae,
    };
    let given = given_threshold(&a.threshold, config)?;
    let timestamp = resolve_timestamp(a.timestamp.as_deref(), config)?;
    let cases = discover_cases(&a.cohort)?;
    let outcomes = evaluate_cases(&cases, &opts, jobs(a.jobs, config))?;
    let threshold = match given {
        Some(t) => t,
        None => report_threshold(&outcomes, a.method.or(config.method).unwrap_or_default())?,
    };
    let report = build_report(&outcomes, &threshold, &timestamp)?;
    let plots = !a.no_plots && config.emit_plots.unwrap_or(true);
    report.write_to(&a.out, plots)?;
    println!(
        "{}",
        serde_json::json!({"out": a.out, "cases": report.cases.len(), "threshold_hu": threshold.value})
    );
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_command() {
        for args in [
            vec!["s", "simulate", "--out", "d", "--counts", "2,2,2", "--dims", "32"],
            vec!["s", "contour", "--mr", "a.nii", "--out", "m.nii", "--connectivity", "26"],
            vec!["s", "fuse", "--sct", "a", "--sct", "b", "--out-fused", "f"],
            vec!["s", "qc", "run", "--mr", "m", "--sct", "a", "--sct", "b", "--threshold-hu", "10", "--out", "o"],
            vec!["s", "qc", "calibrate", "--cohort", "c", "--out", "t.json", "--method", "max_plus_margin:0"],
            vec!["s", "report", "--cohort", "c", "--out", "r", "--jobs", "2"],
        ] {
            Cli::try_parse_from(&args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["s", "qc", "run"]), EXIT_ERROR);
        assert_eq!(run(["s", "bogus"]), EXIT_ERROR);
    }

    #[test]
    fn contour_flag_overrides_config() {
        let config = ConfigFile {
            contour: Some(ContourParams {
                closing_radius_voxels: 4,
                ..ContourParams::default()
            }),
            ..ConfigFile::default()
        };
        let flags = ContourFlags {
            threshold_mode: Some("fraction:0.2".into()),
            ..ContourFlags::default()
        };
        let p = contour_params(&flags, &config).unwrap();
        assert_eq!(p.closing_radius_voxels, 4);
        assert_eq!(p.threshold_mode, ThresholdMode::FixedFraction(0.2));
        let flags = ContourFlags {
            closing_radius: Some(1),
            ..ContourFlags::default()
        };
        assert_eq!(contour_params(&flags, &config).unwrap().closing_radius_voxels, 1);
    }

    #[test]
    fn explicit_timestamp_wins() {
        let config = ConfigFile {
            timestamp: Some("from-config".into()),
            ..ConfigFile::default()
        };
        assert_eq!(resolve_timestamp(Some("flag"), &config).unwrap(), "flag");
        assert_eq!(resolve_timestamp(None, &config).unwrap(), "from-config");
    }

    #[test]
    fn duplicate_paths_rejected() {
        let a = Path::new("a.nii");
        let b = Path::new("b.nii");
        assert!(check_distinct(&[a, b]).is_ok());
        assert_eq!(check_distinct(&[a, b, a]).unwrap_err().kind(), "InvalidConfig");
    }

    #[test]
    fn error_json_shape() {
        let v: serde_json::Value =
            serde_json::from_str(&error_json(&Error::InputNotFound("x.nii".into()))).unwrap();
        assert_eq!(v["error"]["kind"], "InputNotFound");
    }
}
