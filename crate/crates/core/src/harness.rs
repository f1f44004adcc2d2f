//! Closed-loop scenario runner, trace I/O, summaries and calibration.
//!
//! Per sample `k` at `t = k dt_sample`: the true terminal voltage is read
//! with the current that flowed over the previous interval, the sensor
//! attack is applied, the charger issues `u_k` from the measurement, the
//! actuation attack produces the applied current, and the cell is stepped
//! to the next sample. The monitor sees the measured voltage and the
//! commanded current.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::attack::{apply_actuation, apply_sensor, AttackKind, AttackScenario};
use crate::battery::{
    cccv_command, step, terminal_voltage, BatteryParams, BatteryState, ChargerConfig, ChargerState, Phase,
};
use crate::detector::{calibrate_detection, DetectorConfig, FlagEvent};
use crate::error::{Error, Result};
use crate::isolator::{calibrate_isolation, IsoFlag, IsolatorConfig};
use crate::koopman::WindowConfig;
use crate::pipeline::{detect_stream, Monitor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    /// Plant integration substep in seconds.
    pub dt_sim: f64,
    /// Measurement period in seconds.
    pub dt_sample: f64,
    /// Run horizon in seconds.
    pub t_max: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self { dt_sim: 0.1, dt_sample: 1.0, t_max: 3600.0 }
    }
}

impl TimingConfig {
    /// Plant substeps per sample.
    pub fn substeps(&self) -> Result<usize> {
        let n = (self.dt_sample / self.dt_sim).round();
        if !(self.dt_sim > 0.0 && self.dt_sample > 0.0)
            || n < 1.0
            || ((n * self.dt_sim - self.dt_sample) / self.dt_sample).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "dt_sample {} must be a positive integer multiple of dt_sim {}",
                self.dt_sample, self.dt_sim
            )));
        }
        Ok(n as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub csv: Option<PathBuf>,
}

/// Everything needed for one closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub battery: BatteryParams,
    pub charger: ChargerConfig,
    pub window: WindowConfig,
    pub detector: DetectorConfig,
    pub isolator: IsolatorConfig,
    pub scenario: AttackScenario,
    pub timing: TimingConfig,
    /// Seed for randomized test data; the simulation itself is deterministic.
    pub seed: u64,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.battery.validate()?;
        self.charger.validate()?;
        self.window.validate()?;
        self.detector.validate()?;
        self.isolator.validate()?;
        self.scenario.validate()?;
        self.timing.substeps()?;
        if self.window.q != 1 || self.window.p != 1 {
            return Err(Error::Config("the battery loop has one output and one input".into()));
        }
        if self.scenario.kind != AttackKind::None && self.timing.t_max <= self.scenario.t_end {
            return Err(Error::Config(format!(
                "t_max {} must exceed the attack end {}",
                self.timing.t_max, self.scenario.t_end
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// One row of a closed-loop trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRecord {
    pub t: f64,
    pub y_true: f64,
    pub y_meas: f64,
    pub y_pred: Option<f64>,
    pub u_cmd: f64,
    pub u_applied: f64,
    pub soc: f64,
    pub r_d: Option<f64>,
    pub det_flag: bool,
    pub r_i: Option<f64>,
    pub iso_flag: IsoFlag,
}

/// Result of a closed-loop run. An overcharge abort ends the run early and
/// is reported in `aborted_at` with the records up to that point.
#[derive(Debug, Clone)]
pub struct Run {
    pub records: Vec<RunRecord>,
    pub events: Vec<FlagEvent>,
    /// Time of the first CC to CV transition.
    pub cv_start: Option<f64>,
    pub done_at: Option<f64>,
    pub aborted_at: Option<f64>,
    /// Samples at which the applied current hit the hardware clamp.
    pub saturated: usize,
}

impl Run {
    pub fn r_i_values(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.r_i).collect()
    }

    pub fn max_soc(&self) -> f64 {
        self.records.iter().map(|r| r.soc).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Runs the charging loop with the configured attack and monitor.
pub fn run_scenario(cfg: &RunConfig) -> Result<Run> {
    cfg.validate()?;
    let p = &cfg.battery;
    let dt = cfg.timing.dt_sample;
    let substeps = cfg.timing.substeps()?;
    let h = dt / substeps as f64;
    let n_samples = (cfg.timing.t_max / dt).floor() as usize + 1;

    let mut x = BatteryState::at_soc(cfg.charger.soc_start);
    let mut charger = ChargerState::new(&cfg.charger, p.capacity_c());
    let mut monitor = Monitor::new(cfg.window.clone(), cfg.detector.clone(), cfg.isolator.clone())?;
    let mut i_prev = 0.0;
    let mut run = Run {
        records: Vec::with_capacity(n_samples),
        events: Vec::new(),
        cv_start: None,
        done_at: None,
        aborted_at: None,
        saturated: 0,
    };

    for k in 0..n_samples {
        let t = k as f64 * dt;
        let y_true = terminal_voltage(&x, i_prev, p)?;
        let y_meas = apply_sensor(y_true, t, &cfg.scenario);
        let u_cmd = cccv_command(&mut charger, y_meas, dt);
        if run.cv_start.is_none() && charger.phase == Phase::ConstantVoltage {
            run.cv_start = Some(t);
        }
        let (u_applied, sat) = if charger.phase == Phase::Done {
            (0.0, false)
        } else {
            apply_actuation(u_cmd, t, &cfg.scenario, cfg.charger.i_limit)
        };
        run.saturated += sat as usize;
        let out = monitor.push(t, &DVector::from_element(1, y_meas), &DVector::from_element(1, u_cmd))?;
        run.records.push(RunRecord {
            t,
            y_true,
            y_meas,
            y_pred: out.y_pred.map(|v| v[0]),
            u_cmd,
            u_applied,
            soc: x.soc,
            r_d: out.r_d,
            det_flag: out.det_flag,
            r_i: out.r_i,
            iso_flag: out.iso_flag,
        });
        if charger.phase == Phase::Done {
            run.done_at = Some(t);
            break;
        }
        let mut aborted = false;
        for _ in 0..substeps {
            match step(&x, u_applied, h, p) {
                Ok(nx) => x = nx,
                Err(Error::Overcharge { soc, .. }) => {
                    info!("overcharge abort at t = {t} s, soc = {soc:.4}");
                    run.aborted_at = Some(t);
                    aborted = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if aborted {
            break;
        }
        i_prev = u_applied;
    }
    run.events = monitor.events().to_vec();
    Ok(run)
}

const HEADER: [&str; 11] =
    ["t", "y_true", "y_meas", "y_pred", "u_cmd", "u_applied", "soc", "r_d", "det_flag", "r_i", "iso_flag"];

fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

/// Writes the trace as CSV with 17 significant digits and empty cells for
/// absent values.
pub fn write_csv<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Argument("no records to write".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            fmt_real(r.t),
            fmt_real(r.y_true),
            fmt_real(r.y_meas),
            fmt_opt(r.y_pred),
            fmt_real(r.u_cmd),
            fmt_real(r.u_applied),
            fmt_real(r.soc),
            fmt_opt(r.r_d),
            (r.det_flag as u8).to_string(),
            fmt_opt(r.r_i),
            r.iso_flag.code().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(records: &[RunRecord], path: &Path) -> Result<()> {
    write_csv(records, std::fs::File::create(path)?)
}

/// Parsed CSV table keyed by header name.
struct Table {
    header: Vec<String>,
    rows: Vec<(usize, csv::StringRecord)>,
}

impl Table {
    fn read<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = rdr
            .headers()
            .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
            .iter()
            .map(str::to_owned)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            rows.push((line, rec));
        }
        Ok(Self { header, rows })
    }

    fn col(&self, names: &[&str]) -> Option<usize> {
        names.iter().find_map(|n| self.header.iter().position(|h| h == n))
    }

    fn need(&self, names: &[&str]) -> Result<usize> {
        self.col(names).ok_or_else(|| Error::Parse { line: 1, msg: format!("missing column {}", names.join(" or ")) })
    }
}

fn parse_real(rec: &csv::StringRecord, idx: usize, line: usize, name: &str) -> Result<f64> {
    let s = rec.get(idx).unwrap_or("");
    s.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::Parse { line, msg: format!("bad {name} value {s:?}") })
}

/// Like [`parse_real`] but also accepts `NaN`, which offline traces use for
/// plant quantities they do not know.
fn parse_real_or_nan(rec: &csv::StringRecord, idx: usize, line: usize, name: &str) -> Result<f64> {
    match rec.get(idx).unwrap_or("") {
        "NaN" => Ok(f64::NAN),
        _ => parse_real(rec, idx, line, name),
    }
}

fn parse_opt(rec: &csv::StringRecord, idx: usize, line: usize, name: &str) -> Result<Option<f64>> {
    match rec.get(idx).unwrap_or("") {
        "" => Ok(None),
        _ => parse_real(rec, idx, line, name).map(Some),
    }
}

/// Reads `(t, y, u)` frames. Accepts `y`/`u` columns or the `y_meas`/`u_cmd`
/// columns of an exported trace. Time must advance with a constant step.
pub fn ingest_csv<R: Read>(input: R) -> Result<Vec<(f64, f64, f64)>> {
    let tab = Table::read(input)?;
    let it = tab.need(&["t"])?;
    let iy = tab.need(&["y", "y_meas"])?;
    let iu = tab.need(&["u", "u_cmd"])?;
    let mut frames: Vec<(f64, f64, f64)> = Vec::with_capacity(tab.rows.len());
    let mut step: Option<f64> = None;
    for (line, rec) in &tab.rows {
        let t = parse_real(rec, it, *line, "t")?;
        let y = parse_real(rec, iy, *line, "y")?;
        let u = parse_real(rec, iu, *line, "u")?;
        if let Some(&(tp, _, _)) = frames.last() {
            let dt = t - tp;
            if !(dt > 0.0) {
                return Err(Error::Parse { line: *line, msg: format!("time {t} does not increase") });
            }
            match step {
                None => step = Some(dt),
                Some(s) if ((dt - s) / s).abs() > 1e-9 => {
                    return Err(Error::Parse { line: *line, msg: format!("gap in time series at t = {t}") });
                }
                _ => {}
            }
        }
        frames.push((t, y, u));
    }
    Ok(frames)
}

pub fn ingest_csv_file(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    ingest_csv(std::fs::File::open(path)?)
}

/// Reads a full exported trace back into records.
pub fn read_records<R: Read>(input: R) -> Result<Vec<RunRecord>> {
    let tab = Table::read(input)?;
    let idx: Vec<usize> = HEADER.iter().map(|h| tab.need(&[h])).collect::<Result<_>>()?;
    tab.rows
        .iter()
        .map(|(line, rec)| {
            let line = *line;
            let flag = |i: usize, name: &str| -> Result<u8> {
                rec.get(idx[i])
                    .unwrap_or("")
                    .parse::<u8>()
                    .map_err(|_| Error::Parse { line, msg: format!("bad {name} value") })
            };
            let iso = flag(10, "iso_flag")?;
            Ok(RunRecord {
                t: parse_real(rec, idx[0], line, "t")?,
                y_true: parse_real_or_nan(rec, idx[1], line, "y_true")?,
                y_meas: parse_real(rec, idx[2], line, "y_meas")?,
                y_pred: parse_opt(rec, idx[3], line, "y_pred")?,
                u_cmd: parse_real(rec, idx[4], line, "u_cmd")?,
                u_applied: parse_real_or_nan(rec, idx[5], line, "u_applied")?,
                soc: parse_real_or_nan(rec, idx[6], line, "soc")?,
                r_d: parse_opt(rec, idx[7], line, "r_d")?,
                det_flag: flag(8, "det_flag")? != 0,
                r_i: parse_opt(rec, idx[9], line, "r_i")?,
                iso_flag: IsoFlag::from_code(iso)
                    .ok_or_else(|| Error::Parse { line, msg: format!("bad iso_flag {iso}") })?,
            })
        })
        .collect()
}

/// Offline detection over ingested frames with a config's monitor settings.
pub fn detect_offline(frames: &[(f64, f64, f64)], cfg: &RunConfig) -> Result<Vec<RunRecord>> {
    let (outs, _) = detect_stream(frames, &cfg.window, &cfg.detector, &cfg.isolator)?;
    Ok(frames
        .iter()
        .zip(outs)
        .map(|(&(t, y, u), o)| RunRecord {
            t,
            y_true: f64::NAN,
            y_meas: y,
            y_pred: o.y_pred.map(|v| v[0]),
            u_cmd: u,
            u_applied: f64::NAN,
            soc: f64::NAN,
            r_d: o.r_d,
            det_flag: o.det_flag,
            r_i: o.r_i,
            iso_flag: o.iso_flag,
        })
        .collect())
}

/// Interval during which the detection flag was on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlagInterval {
    pub on: f64,
    /// `None` if the flag was still on at the end of the trace.
    pub off: Option<f64>,
    pub r_i_max: Option<f64>,
    pub r_i_min: Option<f64>,
    pub iso_flags: Vec<u8>,
}

/// Aggregate view of a trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub samples: usize,
    pub duration: f64,
    pub first_detection: Option<f64>,
    pub intervals: Vec<FlagInterval>,
    /// Largest detection residual before the first detection.
    pub max_nominal_residual: Option<f64>,
    pub final_soc: f64,
    pub max_soc: f64,
    pub overcharge: bool,
    /// First time the command left the constant-current value.
    pub cc_end: Option<f64>,
}

impl Summary {
    /// Detection latency relative to an attack start time.
    pub fn latency(&self, t_start: f64) -> Option<f64> {
        self.intervals.iter().map(|i| i.on).find(|&t| t >= t_start).map(|t| t - t_start)
    }

    /// `key: value` report.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let o = |x: Option<f64>| x.map(|v| format!("{v}")).unwrap_or_else(|| "none".into());
        let _ = writeln!(s, "samples: {}", self.samples);
        let _ = writeln!(s, "duration_s: {}", self.duration);
        let _ = writeln!(s, "first_detection_s: {}", o(self.first_detection));
        let _ = writeln!(s, "flag_intervals: {}", self.intervals.len());
        for (i, iv) in self.intervals.iter().enumerate() {
            let flags: Vec<String> = iv.iso_flags.iter().map(u8::to_string).collect();
            let _ = writeln!(
                s,
                "interval_{i}: on={} off={} r_i_min={} r_i_max={} iso_flags=[{}]",
                iv.on,
                o(iv.off),
                o(iv.r_i_min),
                o(iv.r_i_max),
                flags.join(",")
            );
        }
        let _ = writeln!(s, "max_nominal_residual: {}", o(self.max_nominal_residual));
        let _ = writeln!(s, "final_soc: {:.6}", self.final_soc);
        let _ = writeln!(s, "max_soc: {:.6}", self.max_soc);
        let _ = writeln!(s, "overcharge: {}", self.overcharge);
        let _ = writeln!(s, "cc_end_s: {}", o(self.cc_end));
        s
    }
}

/// SOC margin above the cutoff counted as overcharge.
pub const OVERCHARGE_TOLERANCE: f64 = 0.005;

/// Summarizes a trace against a charge cutoff.
pub fn summarize(records: &[RunRecord], soc_cutoff: f64) -> Summary {
    let mut intervals: Vec<FlagInterval> = Vec::new();
    let mut prev = false;
    let mut max_nominal: Option<f64> = None;
    for r in records {
        if r.det_flag && !prev {
            intervals.push(FlagInterval { on: r.t, off: None, r_i_max: None, r_i_min: None, iso_flags: Vec::new() });
        } else if !r.det_flag && prev {
            if let Some(iv) = intervals.last_mut() {
                iv.off = Some(r.t);
            }
        }
        if r.det_flag {
            let iv = intervals.last_mut().expect("interval opened");
            if let Some(ri) = r.r_i {
                iv.r_i_max = Some(iv.r_i_max.map_or(ri, |m| m.max(ri)));
                iv.r_i_min = Some(iv.r_i_min.map_or(ri, |m| m.min(ri)));
                iv.iso_flags.push(r.iso_flag.code());
            }
        } else if intervals.is_empty() {
            if let Some(rd) = r.r_d {
                max_nominal = Some(max_nominal.map_or(rd, |m| m.max(rd)));
            }
        }
        prev = r.det_flag;
    }
    let soc: Vec<f64> = records.iter().map(|r| r.soc).filter(|s| s.is_finite()).collect();
    let max_soc = soc.iter().cloned().fold(f64::NAN, f64::max);
    let u0 = records.first().map(|r| r.u_cmd);
    Summary {
        samples: records.len(),
        duration: records.last().map_or(0.0, |r| r.t) - records.first().map_or(0.0, |r| r.t),
        first_detection: intervals.first().map(|i| i.on),
        intervals,
        max_nominal_residual: max_nominal,
        final_soc: soc.last().copied().unwrap_or(f64::NAN),
        max_soc,
        overcharge: max_soc > soc_cutoff + OVERCHARGE_TOLERANCE,
        cc_end: records.iter().find(|r| Some(r.u_cmd) != u0).map(|r| r.t),
    }
}

/// Which threshold to calibrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationTarget {
    Detection,
    Isolation,
}

/// Detection threshold from an attack-free run of `cfg`.
pub fn calibrate_detection_threshold(cfg: &RunConfig) -> Result<f64> {
    let mut nominal = cfg.clone();
    nominal.scenario = AttackScenario { kind: AttackKind::None, ..cfg.scenario.clone() };
    let run = run_scenario(&nominal)?;
    let residuals: Vec<f64> = run.records.iter().filter_map(|r| r.r_d).collect();
    if residuals.is_empty() {
        return Err(Error::Calibration(format!(
            "the detector never warmed up (needs more than {} samples)",
            cfg.window.w
        )));
    }
    calibrate_detection(&residuals, cfg.detector.margin)
}

/// Config for a maximum-capacity actuation attack over `cfg`'s window.
pub fn max_actuation_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.scenario = AttackScenario {
        kind: AttackKind::Actuation,
        signal: crate::attack::AttackSignal::Constant(-cfg.isolator.u_max),
        ..cfg.scenario.clone()
    };
    c
}

/// Isolation threshold from a maximum-capacity actuation run.
pub fn calibrate_isolation_threshold(cfg: &RunConfig) -> Result<f64> {
    let run = run_scenario(&max_actuation_config(cfg))?;
    calibrate_isolation(&run.r_i_values(), cfg.isolator.margin)
}

/// Runs the requested calibration and returns the updated config.
pub fn calibrate(cfg: &RunConfig, which: CalibrationTarget) -> Result<RunConfig> {
    let mut out = cfg.clone();
    match which {
        CalibrationTarget::Detection => out.detector.threshold = calibrate_detection_threshold(cfg)?,
        CalibrationTarget::Isolation => out.isolator.epsilon = calibrate_isolation_threshold(cfg)?,
    }
    Ok(out)
}
