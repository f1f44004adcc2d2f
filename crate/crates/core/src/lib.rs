//! Model-free detection and isolation of cyberattacks on a battery charging
//! loop.
//!
//! The crate simulates a two-RC lithium-ion cell under CCCV charging,
//! injects actuation or sensor attacks, identifies a delay-embedded linear
//! (Koopman) surrogate online over sliding windows, and raises detection and
//! isolation flags from the prediction residual.

// Validation uses negated comparisons such as `!(x > 0.0)` so that NaN is
// rejected along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod battery;
pub mod detector;
pub mod error;
pub mod harness;
pub mod isolator;
pub mod koopman;
pub mod pipeline;

pub use attack::{ActuationMode, AttackKind, AttackScenario, AttackSignal};
pub use battery::{BatteryParams, BatteryState, ChargerConfig, ChargerState, OcvCurve, Phase};
pub use detector::{DetectorConfig, DetectorState, FlagEvent};
pub use error::{Error, Result};
pub use harness::{
    calibrate, run_scenario, summarize, CalibrationTarget, Run, RunConfig, RunRecord, Summary, TimingConfig,
};
pub use isolator::{IsoFlag, IsolatorConfig};
pub use koopman::{DelayMatrices, KoopmanModel, ModeSet, WindowConfig};
pub use pipeline::{Monitor, SampleOutput};
