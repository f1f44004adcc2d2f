//! End-to-end checks of the closed-loop harness, CSV exchange, offline
//! detection, summaries and calibration guards.

use kcad_core::harness::{detect_offline, ingest_csv, read_records, write_csv};
use kcad_core::{
    calibrate, run_scenario, summarize, AttackScenario, CalibrationTarget, Error, IsoFlag, RunConfig, RunRecord,
};

fn short(scenario: AttackScenario, t_max: f64) -> RunConfig {
    let mut cfg = RunConfig { scenario, ..RunConfig::default() };
    cfg.timing.t_max = t_max;
    cfg
}

fn to_csv(records: &[RunRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf).unwrap();
    buf
}

#[test]
fn csv_round_trip_is_bit_exact() {
    let run = run_scenario(&short(AttackScenario::actuation(-10.0), 1700.0)).unwrap();
    let bytes = to_csv(&run.records);
    let back = read_records(bytes.as_slice()).unwrap();
    assert_eq!(back, run.records);
    assert_eq!(to_csv(&back), bytes);
}

#[test]
fn single_warm_up_record_has_empty_cells() {
    let run = run_scenario(&short(AttackScenario::none(), 0.0)).unwrap();
    assert_eq!(run.records.len(), 1);
    let text = String::from_utf8(to_csv(&run.records)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "t,y_true,y_meas,y_pred,u_cmd,u_applied,soc,r_d,det_flag,r_i,iso_flag");
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cells[3], "");
    assert_eq!(cells[7], "");
    assert_eq!(cells[8], "0");
    assert_eq!(cells[9], "");
    assert_eq!(cells[10], "0");
}

#[test]
fn empty_trace_is_rejected() {
    assert!(matches!(write_csv(&[], Vec::new()), Err(Error::Argument(_))));
}

#[test]
fn ingest_accepts_both_column_conventions() {
    let short_form = "t,y,u\n0,3.7,-5\n1,3.71,-5\n2,3.72,-5\n";
    assert_eq!(
        ingest_csv(short_form.as_bytes()).unwrap(),
        vec![(0.0, 3.7, -5.0), (1.0, 3.71, -5.0), (2.0, 3.72, -5.0)]
    );
    let run = run_scenario(&short(AttackScenario::none(), 30.0)).unwrap();
    let frames = ingest_csv(to_csv(&run.records).as_slice()).unwrap();
    assert_eq!(frames.len(), run.records.len());
    assert!(frames.iter().zip(&run.records).all(|(f, r)| *f == (r.t, r.y_meas, r.u_cmd)));
}

#[test]
fn ingest_reports_the_offending_line() {
    let backwards = "t,y,u\n0,3.7,-5\n1,3.7,-5\n1,3.7,-5\n";
    assert!(matches!(ingest_csv(backwards.as_bytes()), Err(Error::Parse { line: 4, .. })));
    let malformed = "t,y,u\n0,3.7,-5\n1,volts,-5\n";
    assert!(matches!(ingest_csv(malformed.as_bytes()), Err(Error::Parse { line: 3, .. })));
    let gap = "t,y,u\n0,3.7,-5\n1,3.7,-5\n3,3.7,-5\n";
    assert!(matches!(ingest_csv(gap.as_bytes()), Err(Error::Parse { line: 4, .. })));
    let missing = "t,y\n0,3.7\n";
    assert!(matches!(ingest_csv(missing.as_bytes()), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn repeated_runs_are_bit_identical() {
    let cfg = short(AttackScenario::sensor(-0.1), 1700.0);
    let a = to_csv(&run_scenario(&cfg).unwrap().records);
    let b = to_csv(&run_scenario(&cfg).unwrap().records);
    assert_eq!(a, b);
}

#[test]
fn offline_detection_reproduces_online_outputs() {
    let cfg = short(AttackScenario::actuation(-10.0), 1800.0);
    let run = run_scenario(&cfg).unwrap();
    let frames = ingest_csv(to_csv(&run.records).as_slice()).unwrap();
    let offline = detect_offline(&frames, &cfg).unwrap();
    assert_eq!(offline.len(), run.records.len());
    for (a, b) in run.records.iter().zip(&offline) {
        assert_eq!(a.y_pred, b.y_pred, "t = {}", a.t);
        assert_eq!(a.r_d, b.r_d, "t = {}", a.t);
        assert_eq!(a.det_flag, b.det_flag, "t = {}", a.t);
        assert_eq!(a.r_i, b.r_i, "t = {}", a.t);
        assert_eq!(a.iso_flag, b.iso_flag, "t = {}", a.t);
    }
    // An offline trace with unknown plant columns still reads back.
    let back = read_records(to_csv(&offline).as_slice()).unwrap();
    assert!(back.iter().all(|r| r.soc.is_nan() && r.y_true.is_nan()));
    assert_eq!(summarize(&back, 0.94).intervals, summarize(&run.records, 0.94).intervals);
}

#[test]
fn warm_up_samples_carry_no_outputs() {
    let run = run_scenario(&short(AttackScenario::none(), 60.0)).unwrap();
    let w = RunConfig::default().window.w;
    for r in &run.records[..w] {
        assert!(r.y_pred.is_none() && r.r_d.is_none() && !r.det_flag && r.iso_flag == IsoFlag::None);
    }
    assert!(run.records[w..].iter().all(|r| r.y_pred.is_some()));
}

#[test]
fn calibration_requires_a_warmed_up_detector() {
    let cfg = short(AttackScenario::none(), 10.0);
    assert!(matches!(calibrate(&cfg, CalibrationTarget::Detection), Err(Error::Calibration(_))));
}

#[test]
fn detection_calibration_writes_a_positive_threshold() {
    let cfg = short(AttackScenario::none(), 1200.0);
    let out = calibrate(&cfg, CalibrationTarget::Detection).unwrap();
    assert!(out.detector.threshold > 0.0);
    assert_eq!(out.isolator, cfg.isolator);
}

#[test]
fn summary_of_a_nominal_prefix() {
    let run = run_scenario(&short(AttackScenario::none(), 600.0)).unwrap();
    let s = summarize(&run.records, 0.94);
    assert_eq!(s.samples, 601);
    assert_eq!(s.duration, 600.0);
    assert!(s.intervals.is_empty() && s.first_detection.is_none());
    assert!(!s.overcharge);
    assert_eq!(s.cc_end, None);
    assert!(s.max_nominal_residual.unwrap() < 0.002);
    let text = s.to_text();
    assert!(text.contains("flag_intervals: 0\n"));
    assert!(text.contains("first_detection_s: none\n"));
}

#[test]
fn summary_reports_flag_intervals() {
    let cfg = short(AttackScenario::actuation(-5.0), 1800.0);
    let run = run_scenario(&cfg).unwrap();
    let s = summarize(&run.records, 0.94);
    assert_eq!(s.intervals.len(), 1);
    let iv = &s.intervals[0];
    assert_eq!(Some(iv.on), run.events.first().map(|e| e.t));
    assert_eq!(iv.off, run.events.get(1).map(|e| e.t));
    assert_eq!(s.latency(cfg.scenario.t_start), Some(iv.on - 700.0));
    assert!(iv.r_i_min.unwrap() <= iv.r_i_max.unwrap());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = short(AttackScenario::sensor(-0.2), 2000.0);
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    assert!(matches!(RunConfig::from_toml_str("[window]\nbogus = 1\n"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_toml_str("[window]\nw = 8\n"), Err(Error::Config(_))));
}

#[test]
fn runaway_actuation_returns_a_partial_trace() {
    let run = run_scenario(&short(AttackScenario::actuation(-25.0), 1700.0)).unwrap();
    let t = run.aborted_at.expect("overcharge abort");
    assert!(t > 700.0 && t < 1600.0);
    assert_eq!(run.records.last().unwrap().t, t);
    assert!(run.max_soc() > 1.1);
}
