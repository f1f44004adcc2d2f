//! Actuation versus sensor isolation from the detection residual.
//!
//! An actuation attack perturbs the eigenfunction values while the modes
//! stay fixed, so its residual over a prediction window should lie in the
//! span of the output modes evolved by powers of their eigenvalues. The
//! normalized misfit to that span is the isolation residual.

use log::warn;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::{modes, numerical_rank, pinv, KoopmanModel, ModeSet};

/// Relative cutoff for the complex least-squares solve.
const ISO_RCOND: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsolatorConfig {
    /// Isolation threshold on the normalized residual.
    pub epsilon: f64,
    /// Calibration margin over the largest residual at full actuation.
    pub margin: f64,
    /// Actuation capacity in amps used for calibration.
    pub u_max: f64,
}

impl Default for IsolatorConfig {
    fn default() -> Self {
        Self { epsilon: 0.12, margin: 1.1, u_max: 25.0 }
    }
}

impl IsolatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.margin > 0.0 && self.u_max > 0.0) {
            return Err(Error::Config(format!("invalid isolator settings: {self:?}")));
        }
        Ok(())
    }
}

/// Isolation verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IsoFlag {
    None = 0,
    Actuation = 1,
    Sensor = 2,
}

impl IsoFlag {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::None),
            1 => Some(Self::Actuation),
            2 => Some(Self::Sensor),
            _ => None,
        }
    }
}

/// Regressor from retained modes: block row `j` (1-based) is
/// `V_y diag(lambda^j)`.
pub fn regressor_from_modes(ms: &ModeSet, horizon: usize) -> DMatrix<Complex64> {
    let vy = ms.output_modes();
    let q = vy.nrows();
    let n = ms.eigenvalues.len();
    let mut g = DMatrix::zeros(q * horizon, n);
    for (i, &l) in ms.eigenvalues.iter().enumerate() {
        let mut pow = l;
        for j in 0..horizon {
            for r in 0..q {
                g[(j * q + r, i)] = vy[(r, i)] * pow;
            }
            pow *= l;
        }
    }
    g
}

/// Mode regressor over a `horizon`-sample prediction window.
pub fn build_mode_regressor(model: &KoopmanModel, horizon: usize, eig_floor: f64) -> Result<DMatrix<Complex64>> {
    let ms = modes(model, eig_floor)?;
    Ok(regressor_from_modes(&ms, horizon))
}

/// Normalized least-squares misfit of the real residual stack to the
/// column span of `g`. Returns `None` when the residual is identically zero.
pub fn isolation_residual(g: &DMatrix<Complex64>, r_stack: &DVector<f64>) -> Result<Option<f64>> {
    if g.nrows() != r_stack.len() {
        return Err(Error::Argument(format!(
            "regressor has {} rows but residual stack has {}",
            g.nrows(),
            r_stack.len()
        )));
    }
    let rn = r_stack.norm();
    if rn == 0.0 {
        return Ok(None);
    }
    if g.ncols() >= g.nrows() && numerical_rank(g, ISO_RCOND)? >= g.nrows() {
        warn!("isolation regressor has full row rank; the isolation residual is uninformative");
    }
    let rc = r_stack.map(|x| Complex64::new(x, 0.0));
    let c = pinv(g, ISO_RCOND)? * &rc;
    let misfit = (g * c - rc).norm();
    Ok(Some((misfit / rn).clamp(0.0, 1.0)))
}

/// Actuation when `r_i <= epsilon`, sensor otherwise.
pub fn classify(r_i: f64, epsilon: f64) -> IsoFlag {
    if r_i <= epsilon {
        IsoFlag::Actuation
    } else {
        IsoFlag::Sensor
    }
}

/// Threshold as `margin` times the largest isolation residual observed
/// under a maximum-capacity actuation attack.
pub fn calibrate_isolation(r_i_trace: &[f64], margin: f64) -> Result<f64> {
    if r_i_trace.is_empty() {
        return Err(Error::Calibration("no isolation residuals at full actuation (detector never fired)".into()));
    }
    if !(margin > 0.0) {
        return Err(Error::Calibration(format!("margin must be positive, got {margin}")));
    }
    let max = r_i_trace.iter().cloned().fold(0.0, f64::max);
    let eps = margin * max;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Calibration(format!("calibrated epsilon {eps} is not positive")));
    }
    Ok(eps)
}
