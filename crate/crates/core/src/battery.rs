//! Two-RC equivalent-circuit lithium-ion cell and its CCCV charger.
//!
//! Sign convention: a negative cell current charges the battery. The state
//! holds the two RC branch voltages and the state of charge. Branch
//! parameters are quadratic in SOC, and the capacitances carry an extra
//! temperature term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SOC above which the simulation is aborted as a runaway.
pub const SOC_ABORT: f64 = 1.2;
/// Upper end of the SOC range over which parameters must stay physical.
pub const SOC_VALID_MAX: f64 = 1.05;

/// Monotone piecewise-linear open-circuit-voltage curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OcvCurve {
    /// Knots as (soc, volts), sorted by soc.
    pub knots: Vec<(f64, f64)>,
}

impl OcvCurve {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        let curve = Self { knots };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.is_empty() {
            return Err(Error::Config("OCV curve is empty".into()));
        }
        if self.knots.iter().any(|(s, v)| !s.is_finite() || !v.is_finite()) {
            return Err(Error::Config("OCV curve has non-finite knots".into()));
        }
        for w in self.knots.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(Error::Config("OCV curve must be strictly increasing in soc and volts".into()));
            }
        }
        let (first, last) = (self.knots[0].0, self.knots[self.knots.len() - 1].0);
        if first > 0.0 || last < 1.0 {
            return Err(Error::Config("OCV curve must cover soc in [0, 1]".into()));
        }
        Ok(())
    }

    /// Interpolated voltage, extrapolating linearly past the end knots.
    pub fn eval(&self, soc: f64) -> Result<f64> {
        let k = &self.knots;
        match k.len() {
            0 => Err(Error::Config("OCV curve is empty".into())),
            1 => Ok(k[0].1),
            n => {
                let i = k.partition_point(|&(s, _)| s <= soc).clamp(1, n - 1);
                let (s0, v0) = k[i - 1];
                let (s1, v1) = k[i];
                Ok(v0 + (v1 - v0) * (soc - s0) / (s1 - s0))
            }
        }
    }
}

/// Open-circuit voltage at `soc`.
pub fn ocv(soc: f64, curve: &OcvCurve) -> Result<f64> {
    curve.eval(soc)
}

/// Cell parameters. Resistances in ohms, capacitances in farads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryParams {
    /// R1 quadratic coefficients, in the units selected by `r1_unit_scale`.
    pub r1_coeffs: [f64; 3],
    /// Multiplier converting `r1_coeffs` to ohms (1.0 reads them as ohms,
    /// 1e-6 as micro-ohms).
    pub r1_unit_scale: f64,
    pub r2_coeffs: [f64; 3],
    pub c1_coeffs: [f64; 6],
    pub c2_coeffs: [f64; 6],
    /// Capacity in ampere-hours.
    pub capacity_ah: f64,
    pub series_r: f64,
    /// Ambient temperature in kelvin.
    pub ambient_t: f64,
    pub ocv_curve: OcvCurve,
}

impl Default for BatteryParams {
    fn default() -> Self {
        Self {
            r1_coeffs: [0.0701135, -0.043865, 0.023788],
            r1_unit_scale: 1.0,
            r2_coeffs: [0.0288, -0.073, 0.0605],
            c1_coeffs: [335.4518, 3171.2, -1321.4, 53.2138, -65.4786, 244.3761],
            c2_coeffs: [31881.0, -115930.0, 104930.0, 60.3114, 10175.5, -9.5924],
            capacity_ah: 5.0,
            series_r: 0.0048,
            ambient_t: 298.0,
            ocv_curve: OcvCurve {
                knots: vec![(0.0, 3.0), (0.1, 3.45), (0.35, 3.63), (0.6, 3.78), (0.8, 3.84), (1.0, 3.88)],
            },
        }
    }
}

impl BatteryParams {
    /// Capacity in coulombs.
    pub fn capacity_c(&self) -> f64 {
        self.capacity_ah * 3600.0
    }

    /// Checks the parameter set, including positivity of every branch
    /// element over the physical SOC range.
    pub fn validate(&self) -> Result<()> {
        if !(self.capacity_ah > 0.0) {
            return Err(Error::Config("capacity must be positive".into()));
        }
        if !(self.series_r >= 0.0) {
            return Err(Error::Config("series resistance must be non-negative".into()));
        }
        if !(self.r1_unit_scale > 0.0) {
            return Err(Error::Config("R1 unit scale must be positive".into()));
        }
        self.ocv_curve.validate()?;
        let n = 105;
        for i in 0..=n {
            let soc = SOC_VALID_MAX * i as f64 / n as f64;
            rc_params(soc, self.ambient_t, self)?;
        }
        Ok(())
    }
}

/// Branch resistances and capacitances at one operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcParams {
    pub r1: f64,
    pub c1: f64,
    pub r2: f64,
    pub c2: f64,
}

fn quad(c: &[f64], x: f64) -> f64 {
    c[0] + c[1] * x + c[2] * x * x
}

fn capacitance(c: &[f64; 6], soc: f64, t: f64) -> f64 {
    quad(&c[..3], soc) + t * quad(&c[3..], soc)
}

/// Evaluates the SOC- and temperature-dependent branch parameters.
pub fn rc_params(soc: f64, t: f64, params: &BatteryParams) -> Result<RcParams> {
    if !soc.is_finite() {
        return Err(Error::Config(format!("non-finite soc {soc}")));
    }
    let p = RcParams {
        r1: params.r1_unit_scale * quad(&params.r1_coeffs, soc),
        c1: capacitance(&params.c1_coeffs, soc, t),
        r2: quad(&params.r2_coeffs, soc),
        c2: capacitance(&params.c2_coeffs, soc, t),
    };
    if !(p.r1 > 0.0 && p.c1 > 0.0 && p.r2 > 0.0 && p.c2 > 0.0) {
        return Err(Error::Config(format!("non-positive branch parameter at soc {soc}: {p:?}")));
    }
    Ok(p)
}

/// Cell state: branch voltages in volts and state of charge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    pub v1: f64,
    pub v2: f64,
    pub soc: f64,
}

impl BatteryState {
    pub fn at_soc(soc: f64) -> Self {
        Self { v1: 0.0, v2: 0.0, soc }
    }
}

/// Time derivative of the state under cell current `i_c`.
pub fn battery_deriv(state: &BatteryState, i_c: f64, params: &BatteryParams) -> Result<BatteryState> {
    let p = rc_params(state.soc, params.ambient_t, params)?;
    Ok(BatteryState {
        v1: -state.v1 / (p.r1 * p.c1) + i_c / p.c1,
        v2: -state.v2 / (p.r2 * p.c2) + i_c / p.c2,
        soc: -i_c / params.capacity_c(),
    })
}

/// Terminal voltage `OCV - i_c R_s - V1 - V2`.
pub fn terminal_voltage(state: &BatteryState, i_c: f64, params: &BatteryParams) -> Result<f64> {
    Ok(ocv(state.soc, &params.ocv_curve)? - i_c * params.series_r - state.v1 - state.v2)
}

/// Advances the cell by `dt` seconds at constant current with the branch
/// parameters frozen at the initial SOC. Each RC branch is integrated with
/// its exact exponential solution.
pub fn step(state: &BatteryState, i_c: f64, dt: f64, params: &BatteryParams) -> Result<BatteryState> {
    if !(dt > 0.0) {
        return Err(Error::Argument(format!("step dt must be positive, got {dt}")));
    }
    let p = rc_params(state.soc, params.ambient_t, params)?;
    let relax = |v: f64, r: f64, c: f64| {
        let e = (-dt / (r * c)).exp();
        v * e + r * i_c * (1.0 - e)
    };
    let next = BatteryState {
        v1: relax(state.v1, p.r1, p.c1),
        v2: relax(state.v2, p.r2, p.c2),
        soc: state.soc - i_c * dt / params.capacity_c(),
    };
    if next.soc > SOC_ABORT {
        return Err(Error::Overcharge { t: f64::NAN, soc: next.soc });
    }
    Ok(next)
}

/// Phase of the CCCV charging policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    ConstantCurrent,
    ConstantVoltage,
    Done,
}

/// Charger set points and gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChargerConfig {
    /// Constant-current magnitude in amps.
    pub i_cc: f64,
    /// CV set point in volts.
    pub v_max: f64,
    /// CV integral gain in A/(V s).
    pub k_cv: f64,
    /// Charger current limit in amps.
    pub i_limit: f64,
    pub soc_start: f64,
    pub soc_cutoff: f64,
}

impl Default for ChargerConfig {
    fn default() -> Self {
        Self { i_cc: 5.0, v_max: 4.02, k_cv: 2.0, i_limit: 25.0, soc_start: 0.35, soc_cutoff: 0.94 }
    }
}

impl ChargerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.i_cc > 0.0
            && self.i_limit >= self.i_cc
            && self.k_cv > 0.0
            && self.v_max.is_finite()
            && (0.0..=1.0).contains(&self.soc_start)
            && self.soc_cutoff > self.soc_start;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid charger settings: {self:?}")))
        }
    }
}

/// Runtime state of the charger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargerState {
    pub phase: Phase,
    /// Coulomb count of the commanded current, starting from the known
    /// initial SOC.
    pub soc_estimate: f64,
    pub i_cmd: f64,
    pub v_max: f64,
    pub soc_cutoff: f64,
    pub i_cc: f64,
    pub k_cv: f64,
    pub i_limit: f64,
    /// Capacity in coulombs used for coulomb counting.
    pub capacity_c: f64,
}

impl ChargerState {
    pub fn new(cfg: &ChargerConfig, capacity_c: f64) -> Self {
        Self {
            phase: Phase::ConstantCurrent,
            soc_estimate: cfg.soc_start,
            i_cmd: -cfg.i_cc,
            v_max: cfg.v_max,
            soc_cutoff: cfg.soc_cutoff,
            i_cc: cfg.i_cc,
            k_cv: cfg.k_cv,
            i_limit: cfg.i_limit,
            capacity_c,
        }
    }
}

/// One controller update from the measured terminal voltage. Returns the
/// commanded current held over the next `dt` seconds and advances the SOC
/// estimate by that command.
pub fn cccv_command(charger: &mut ChargerState, v_t_meas: f64, dt: f64) -> f64 {
    if charger.phase != Phase::Done && charger.soc_estimate >= charger.soc_cutoff {
        charger.phase = Phase::Done;
    }
    if charger.phase == Phase::ConstantCurrent && v_t_meas >= charger.v_max {
        charger.phase = Phase::ConstantVoltage;
    }
    charger.i_cmd = match charger.phase {
        Phase::Done => 0.0,
        Phase::ConstantCurrent => -charger.i_cc,
        Phase::ConstantVoltage => {
            (charger.i_cmd + charger.k_cv * (v_t_meas - charger.v_max) * dt).clamp(-charger.i_limit, 0.0)
        }
    };
    charger.soc_estimate -= charger.i_cmd * dt / charger.capacity_c;
    charger.i_cmd
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> BatteryParams {
        BatteryParams::default()
    }

    #[test]
    fn rc_params_match_hand_evaluation() {
        let p = params();
        let at0 = rc_params(0.0, 298.0, &p).unwrap();
        assert!((at0.r2 - 0.0288).abs() < 1e-15);
        let expected_c2 = 31881.0 + 298.0 * 60.3114;
        assert!((at0.c2 - expected_c2).abs() < 1e-9);
        assert!((at0.c2 - 49853.8).abs() < 0.05);
        let at1 = rc_params(1.0, 298.0, &p).unwrap();
        assert!((at1.r2 - 0.0163).abs() < 1e-12);
    }

    #[test]
    fn r1_unit_scale_reads_micro_ohms() {
        let mut p = params();
        p.r1_unit_scale = 1e-6;
        let at0 = rc_params(0.0, 298.0, &p).unwrap();
        assert!((at0.r1 - 0.0701135e-6).abs() < 1e-18);
        p.validate().unwrap();
    }

    #[test]
    fn non_positive_parameters_are_rejected() {
        let mut p = params();
        p.r2_coeffs = [-0.01, 0.0, 0.0];
        assert!(matches!(rc_params(0.5, 298.0, &p), Err(Error::Config(_))));
        assert!(p.validate().is_err());
    }

    #[test]
    fn default_params_validate() {
        params().validate().unwrap();
    }

    #[test]
    fn ocv_interpolates_and_anchors() {
        let reference_curve =
            OcvCurve::new(vec![(0.0, 3.0), (0.1, 3.45), (0.35, 3.63), (0.6, 3.78), (0.8, 3.95), (1.0, 4.2)]).unwrap();
        assert_eq!(ocv(0.0, &reference_curve).unwrap(), 3.0);
        assert!((ocv(1.0, &reference_curve).unwrap() - 4.2).abs() < 1e-12);
        let two = OcvCurve::new(vec![(0.0, 3.0), (1.0, 4.2)]).unwrap();
        assert!((ocv(0.5, &two).unwrap() - 3.6).abs() < 1e-12);
        assert!((ocv(1.05, &two).unwrap() - 4.26).abs() < 1e-12);
        assert!(OcvCurve::new(vec![]).is_err());
        assert!(ocv(0.5, &OcvCurve { knots: vec![] }).is_err());
        assert!(OcvCurve::new(vec![(0.0, 3.0), (0.5, 2.9), (1.0, 4.0)]).is_err());
    }

    #[test]
    fn deriv_examples() {
        let p = params();
        let d = battery_deriv(&BatteryState::at_soc(0.0), -5.0, &p).unwrap();
        assert!((d.soc - 5.0 / 18000.0).abs() < 1e-15);
        assert!((d.soc - 2.7778e-4).abs() < 1e-8);
        let c2 = 31881.0 + 298.0 * 60.3114;
        assert!((d.v2 - (-5.0 / c2)).abs() < 1e-15);
        assert!((d.v2 - (-1.0029e-4)).abs() < 1e-8);
        let z = battery_deriv(&BatteryState::at_soc(0.5), 0.0, &p).unwrap();
        assert_eq!((z.v1, z.v2, z.soc), (0.0, 0.0, 0.0));
    }

    #[test]
    fn terminal_voltage_examples() {
        let p = params();
        let s = BatteryState::at_soc(0.5);
        let o = ocv(0.5, &p.ocv_curve).unwrap();
        assert_eq!(terminal_voltage(&s, 0.0, &p).unwrap(), o);
        assert!((terminal_voltage(&s, -5.0, &p).unwrap() - (o + 0.024)).abs() < 1e-12);
        let s2 = BatteryState { v1: 0.01, v2: 0.02, soc: 0.5 };
        assert!((terminal_voltage(&s2, 0.0, &p).unwrap() - (o - 0.03)).abs() < 1e-12);
    }

    #[test]
    fn zero_current_step_decays_branches() {
        let p = params();
        let s = BatteryState { v1: 0.1, v2: -0.05, soc: 0.5 };
        let rc = rc_params(0.5, 298.0, &p).unwrap();
        let n = step(&s, 0.0, 7.0, &p).unwrap();
        assert!((n.v1 - 0.1 * (-7.0 / (rc.r1 * rc.c1)).exp()).abs() < 1e-15);
        assert!((n.v2 + 0.05 * (-7.0 / (rc.r2 * rc.c2)).exp()).abs() < 1e-15);
        assert_eq!(n.soc, 0.5);
    }

    #[test]
    fn step_rejects_bad_dt_and_overcharge() {
        let p = params();
        let s = BatteryState::at_soc(1.19);
        assert!(matches!(step(&s, -5.0, 0.0, &p), Err(Error::Argument(_))));
        assert!(matches!(step(&s, -25.0, 100.0, &p), Err(Error::Overcharge { .. })));
    }

    #[test]
    fn cccv_phases() {
        let cfg = ChargerConfig::default();
        let mut ch = ChargerState::new(&cfg, 18000.0);
        assert_eq!(cccv_command(&mut ch, 3.8, 1.0), -5.0);
        assert_eq!(ch.phase, Phase::ConstantCurrent);
        let i0 = cccv_command(&mut ch, cfg.v_max + 0.01, 1.0);
        assert_eq!(ch.phase, Phase::ConstantVoltage);
        let i1 = cccv_command(&mut ch, cfg.v_max + 0.01, 1.0);
        assert!(i0.abs() < 5.0 && i1.abs() < i0.abs());
        ch.soc_estimate = 0.94;
        assert_eq!(cccv_command(&mut ch, 3.0, 1.0), 0.0);
        assert_eq!(ch.phase, Phase::Done);
    }

    #[test]
    fn cc_phase_counts_coulombs() {
        let mut ch = ChargerState::new(&ChargerConfig::default(), 18000.0);
        cccv_command(&mut ch, 3.7, 1.0);
        assert!((ch.soc_estimate - (0.35 + 5.0 / 18000.0)).abs() < 1e-15);
    }
}
