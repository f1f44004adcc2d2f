//! Residual-threshold detector with a toggle-style attack flag.
//!
//! Each excursion of the residual above the threshold flips the flag once.
//! An excursion is confirmed after `min_run` consecutive samples above the
//! threshold, and it only ends after `gap` consecutive samples at or below
//! it, so that short dips inside one disturbance do not count as new onsets.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on any calibrated threshold.
pub const THRESHOLD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Residual threshold in volts.
    pub threshold: f64,
    /// Calibration margin over the largest nominal residual.
    pub margin: f64,
    /// Consecutive above-threshold samples needed to confirm an excursion.
    pub min_run: usize,
    /// Consecutive at-or-below samples needed to end an excursion.
    pub gap: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { threshold: 0.002, margin: 2.0, min_run: 3, gap: 8 }
    }
}

impl DetectorConfig {
    /// The plain rule: every contiguous run above threshold is one excursion.
    pub fn plain(threshold: f64) -> Self {
        Self { threshold, min_run: 1, gap: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || self.min_run == 0 || self.gap == 0 || !(self.margin > 0.0) {
            return Err(Error::Config(format!("invalid detector settings: {self:?}")));
        }
        Ok(())
    }
}

/// Flag transition record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlagEvent {
    pub t: f64,
    /// New flag value.
    pub on: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    pub cfg: DetectorConfig,
    pub flag: bool,
    pub in_excursion: bool,
    pub events: Vec<FlagEvent>,
    above: usize,
    below: usize,
}

impl DetectorState {
    pub fn new(cfg: DetectorConfig) -> Self {
        Self { cfg, flag: false, in_excursion: false, events: Vec::new(), above: 0, below: 0 }
    }

    /// Number of confirmed excursion onsets so far.
    pub fn onsets(&self) -> usize {
        self.events.len()
    }
}

/// Euclidean distance between measurement and prediction.
pub fn residual(y_meas: &DVector<f64>, y_pred: &DVector<f64>) -> f64 {
    (y_meas - y_pred).norm()
}

/// Feeds one residual sample taken at time `t` and returns the flag.
pub fn update_flag(state: &mut DetectorState, r: f64, t: f64) -> bool {
    if r > state.cfg.threshold {
        state.above += 1;
        state.below = 0;
        if !state.in_excursion && state.above >= state.cfg.min_run {
            state.in_excursion = true;
            state.flag = !state.flag;
            state.events.push(FlagEvent { t, on: state.flag });
        }
    } else {
        state.above = 0;
        state.below += 1;
        if state.in_excursion && state.below >= state.cfg.gap {
            state.in_excursion = false;
        }
    }
    state.flag
}

/// Threshold as `margin` times the largest nominal residual, refusing
/// degenerate results below [`THRESHOLD_FLOOR`].
pub fn calibrate_detection(nominal_residuals: &[f64], margin: f64) -> Result<f64> {
    if nominal_residuals.is_empty() {
        return Err(Error::Calibration("no nominal residuals to calibrate on".into()));
    }
    if !(margin > 0.0) {
        return Err(Error::Calibration(format!("margin must be positive, got {margin}")));
    }
    let max = nominal_residuals.iter().cloned().fold(0.0, f64::max);
    let th = margin * max;
    if !(th >= THRESHOLD_FLOOR) || !th.is_finite() {
        return Err(Error::Calibration(format!("calibrated threshold {th} is below the floor {THRESHOLD_FLOOR}")));
    }
    Ok(th)
}
