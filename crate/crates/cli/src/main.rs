//! `kcad`: run, calibrate and inspect the attack detection pipeline.
//!
//! Log verbosity follows the `KCAD_LOG` environment variable
//! (`error`, `warn`, `info`, `debug`, `trace`).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kcad_core::harness::{detect_offline, ingest_csv_file, read_records, write_csv, write_csv_file};
use kcad_core::{calibrate, run_scenario, summarize, AttackKind, AttackSignal, CalibrationTarget, Error, RunConfig};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_PARSE: u8 = 4;
const EXIT_OVERCHARGE: u8 = 5;
const EXIT_CALIBRATION: u8 = 6;

/// Default attack magnitudes used when a scenario is selected on the
/// command line without one.
const DEFAULT_DELTA_U: f64 = -10.0;
const DEFAULT_DELTA_Y: f64 = -0.1;

#[derive(Parser)]
#[command(name = "kcad", version, about = "Koopman-based cyberattack detection for a battery charging loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    None,
    Actuation,
    Sensor,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhichArg {
    Detection,
    Isolation,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the closed loop and write the trace as CSV.
    Run {
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the attack kind from the config.
        #[arg(long, value_enum)]
        scenario: Option<ScenarioArg>,
        /// Constant attack magnitude (amps or volts).
        #[arg(long, allow_negative_numbers = true)]
        magnitude: Option<f64>,
        /// Output CSV path; falls back to `output.csv` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Calibrate a threshold and print a config overlay.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        which: WhichArg,
        /// Write the overlay here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run detection offline on a recorded (t, y, u) trace.
    Detect {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the re-detected trace here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize an exported trace.
    Summarize {
        #[arg(long)]
        input: PathBuf,
        /// SOC cutoff used for the overcharge indicator.
        #[arg(long, default_value_t = 0.94)]
        cutoff: f64,
        /// Emit JSON instead of key: value text.
        #[arg(long)]
        json: bool,
    },
}

fn load_config(path: Option<&Path>) -> kcad_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => EXIT_CONFIG,
        Error::Parse { .. } => EXIT_PARSE,
        Error::Overcharge { .. } => EXIT_OVERCHARGE,
        Error::Calibration(_) => EXIT_CALIBRATION,
        _ => EXIT_OTHER,
    }
}

fn apply_scenario(cfg: &mut RunConfig, scenario: Option<ScenarioArg>, magnitude: Option<f64>) -> kcad_core::Result<()> {
    if let Some(s) = scenario {
        let kind = match s {
            ScenarioArg::None => AttackKind::None,
            ScenarioArg::Actuation => AttackKind::Actuation,
            ScenarioArg::Sensor => AttackKind::Sensor,
        };
        if kind != cfg.scenario.kind {
            cfg.scenario.kind = kind;
            cfg.scenario.signal = AttackSignal::Constant(match kind {
                AttackKind::Actuation => DEFAULT_DELTA_U,
                AttackKind::Sensor => DEFAULT_DELTA_Y,
                AttackKind::None => 0.0,
            });
        }
    }
    if let Some(m) = magnitude {
        cfg.scenario.signal = AttackSignal::Constant(m);
    }
    cfg.validate()
}

fn cmd_run(
    config: Option<PathBuf>,
    scenario: Option<ScenarioArg>,
    magnitude: Option<f64>,
    out: Option<PathBuf>,
) -> kcad_core::Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    apply_scenario(&mut cfg, scenario, magnitude)?;
    let run = run_scenario(&cfg)?;
    match out.or_else(|| cfg.output.csv.clone()) {
        Some(p) => write_csv_file(&run.records, &p)?,
        None => write_csv(&run.records, std::io::stdout().lock())?,
    }
    let summary = summarize(&run.records, cfg.charger.soc_cutoff);
    eprint!("{}", summary.to_text());
    if let Some(t) = run.aborted_at {
        return Err(Error::Overcharge { t, soc: run.max_soc() });
    }
    Ok(())
}

fn cmd_calibrate(config: Option<PathBuf>, which: WhichArg, out: Option<PathBuf>) -> kcad_core::Result<()> {
    let cfg = load_config(config.as_deref())?;
    let (target, overlay) = match which {
        WhichArg::Detection => (CalibrationTarget::Detection, "detector"),
        WhichArg::Isolation => (CalibrationTarget::Isolation, "isolator"),
    };
    let updated = calibrate(&cfg, target)?;
    let text = match target {
        CalibrationTarget::Detection => format!("[{overlay}]\nthreshold = {:e}\n", updated.detector.threshold),
        CalibrationTarget::Isolation => format!("[{overlay}]\nepsilon = {:e}\n", updated.isolator.epsilon),
    };
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_detect(input: PathBuf, config: Option<PathBuf>, out: Option<PathBuf>) -> kcad_core::Result<()> {
    let cfg = load_config(config.as_deref())?;
    let frames = ingest_csv_file(&input)?;
    let records = detect_offline(&frames, &cfg)?;
    if let Some(p) = out {
        write_csv_file(&records, &p)?;
    }
    let mut stdout = std::io::stdout().lock();
    let mut prev = false;
    for r in &records {
        if r.det_flag != prev {
            writeln!(stdout, "t={} det_flag={}", r.t, r.det_flag as u8)?;
            prev = r.det_flag;
        }
    }
    write!(stdout, "{}", summarize(&records, cfg.charger.soc_cutoff).to_text())?;
    Ok(())
}

fn cmd_summarize(input: PathBuf, cutoff: f64, json: bool) -> kcad_core::Result<()> {
    let records = read_records(std::fs::File::open(&input)?)?;
    let summary = summarize(&records, cutoff);
    let text = if json {
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Argument(e.to_string()))? + "\n"
    } else {
        summary.to_text()
    };
    std::io::stdout().lock().write_all(text.as_bytes())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KCAD_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, scenario, magnitude, out } => cmd_run(config, scenario, magnitude, out),
        Command::Calibrate { config, which, out } => cmd_calibrate(config, which, out),
        Command::Detect { input, config, out } => cmd_detect(input, config, out),
        Command::Summarize { input, cutoff, json } => cmd_summarize(input, cutoff, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
