//! Actuation and sensor attack injection.
//!
//! An actuation attack corrupts the current the plant receives while the
//! controller and the detector keep seeing the commanded value. A sensor
//! attack corrupts the reported terminal voltage without touching the plant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which channel the adversary corrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    #[default]
    None,
    Actuation,
    Sensor,
}

/// How an actuation signal combines with the command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActuationMode {
    /// Applied current is command plus signal.
    #[default]
    Additive,
    /// Applied current is the signal alone.
    Override,
}

/// Time profile of the attack signal, in amps or volts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackSignal {
    Constant(f64),
    /// Linear ramp from `start` at `t_start` to `end` at `t_end`.
    Ramp {
        start: f64,
        end: f64,
    },
    /// Zero-order hold through (t, value) pairs.
    Samples(Vec<(f64, f64)>),
}

impl Default for AttackSignal {
    fn default() -> Self {
        AttackSignal::Constant(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackScenario {
    pub kind: AttackKind,
    pub t_start: f64,
    pub t_end: f64,
    pub signal: AttackSignal,
    pub actuation_mode: ActuationMode,
}

impl Default for AttackScenario {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            t_start: 700.0,
            t_end: 1600.0,
            signal: AttackSignal::Constant(0.0),
            actuation_mode: ActuationMode::Additive,
        }
    }
}

impl AttackScenario {
    pub fn none() -> Self {
        Self::default()
    }

    /// Constant actuation offset over the default window.
    pub fn actuation(delta_u: f64) -> Self {
        Self { kind: AttackKind::Actuation, signal: AttackSignal::Constant(delta_u), ..Self::default() }
    }

    /// Constant sensor offset over the default window.
    pub fn sensor(delta_y: f64) -> Self {
        Self { kind: AttackKind::Sensor, signal: AttackSignal::Constant(delta_y), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AttackKind::None {
            return Ok(());
        }
        if !(self.t_start < self.t_end) {
            return Err(Error::Config(format!("attack window [{}, {}) is empty", self.t_start, self.t_end)));
        }
        if let AttackSignal::Samples(s) = &self.signal {
            if s.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::Config("attack sample times must increase".into()));
            }
        }
        Ok(())
    }
}

/// Signal value at time `t`; zero outside the half-open active window.
pub fn attack_signal(t: f64, scenario: &AttackScenario) -> f64 {
    if scenario.kind == AttackKind::None || t < scenario.t_start || t >= scenario.t_end {
        return 0.0;
    }
    match &scenario.signal {
        AttackSignal::Constant(v) => *v,
        AttackSignal::Ramp { start, end } => {
            let frac = (t - scenario.t_start) / (scenario.t_end - scenario.t_start);
            start + (end - start) * frac
        }
        AttackSignal::Samples(s) => {
            let i = s.partition_point(|&(ts, _)| ts <= t);
            if i == 0 {
                0.0
            } else {
                s[i - 1].1
            }
        }
    }
}

/// Current delivered to the plant, with a flag set when the hardware clamp
/// was hit.
pub fn apply_actuation(i_cmd: f64, t: f64, scenario: &AttackScenario, i_clamp: f64) -> (f64, bool) {
    let raw = match scenario.kind {
        AttackKind::Actuation => {
            let d = attack_signal(t, scenario);
            match scenario.actuation_mode {
                ActuationMode::Additive => i_cmd + d,
                ActuationMode::Override if t >= scenario.t_start && t < scenario.t_end => d,
                ActuationMode::Override => i_cmd,
            }
        }
        _ => i_cmd,
    };
    let applied = raw.clamp(-i_clamp, i_clamp);
    (applied, applied != raw)
}

/// Measurement reported to the controller and detector.
pub fn apply_sensor(v_t_true: f64, t: f64, scenario: &AttackScenario) -> f64 {
    match scenario.kind {
        AttackKind::Sensor => v_t_true + attack_signal(t, scenario),
        _ => v_t_true,
    }
}
