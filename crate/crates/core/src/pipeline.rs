//! Streaming sliding-window monitor.
//!
//! Samples arrive one at a time as (t, y_k, u_k), where `u_k` is the input
//! issued after `y_k` was measured. A new linear model is fitted every
//! `W_tilde - 1` samples on the last `m` samples and rolled forward over the
//! next `W_tilde` samples. On the sample where two prediction windows
//! overlap, the newer window's prediction is reported. Detection runs on
//! every sample after the first `W`; isolation runs once per completed
//! prediction window while the detection flag is on.

use std::collections::VecDeque;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use crate::detector::{update_flag, DetectorConfig, DetectorState, FlagEvent};
use crate::error::{Error, Result};
use crate::isolator::{classify, isolation_residual, regressor_from_modes, IsoFlag, IsolatorConfig};
use crate::koopman::{advance, embed, fit, modes, KoopmanModel, WindowConfig};

/// Monitor output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub y_pred: Option<DVector<f64>>,
    pub r_d: Option<f64>,
    pub det_flag: bool,
    /// Isolation residual of the prediction window completed at this sample.
    pub r_i: Option<f64>,
    pub iso_flag: IsoFlag,
}

#[derive(Debug)]
struct ActiveWindow {
    model: KoopmanModel,
    state: DVector<f64>,
    /// Signed residuals of this window's predictions, one per sample.
    residuals: Vec<DVector<f64>>,
    /// Whether any of this window's samples exceeded the threshold after
    /// warm-up.
    crossed: bool,
}

/// Online detection and isolation over one measurement stream.
#[derive(Debug)]
pub struct Monitor {
    window: WindowConfig,
    detector: DetectorState,
    isolator: IsolatorConfig,
    ys: VecDeque<DVector<f64>>,
    us: VecDeque<DVector<f64>>,
    count: usize,
    next_fit: usize,
    active: Vec<ActiveWindow>,
    iso_flag: IsoFlag,
}

impl Monitor {
    pub fn new(window: WindowConfig, detector: DetectorConfig, isolator: IsolatorConfig) -> Result<Self> {
        window.validate()?;
        detector.validate()?;
        isolator.validate()?;
        let m = window.m();
        Ok(Self {
            next_fit: m,
            ys: VecDeque::with_capacity(m + 1),
            us: VecDeque::with_capacity(m + 1),
            window,
            detector: DetectorState::new(detector),
            isolator,
            count: 0,
            active: Vec::new(),
            iso_flag: IsoFlag::None,
        })
    }

    /// Flag transitions so far.
    pub fn events(&self) -> &[FlagEvent] {
        &self.detector.events
    }

    pub fn detector(&self) -> &DetectorState {
        &self.detector
    }

    fn fit_window(&self) -> Result<ActiveWindow> {
        let (q, p, m) = (self.window.q, self.window.p, self.window.m());
        let mut y = DMatrix::zeros(q, m);
        let mut u = DMatrix::zeros(p, m);
        for (i, (yi, ui)) in self.ys.iter().zip(&self.us).enumerate() {
            y.set_column(i, yi);
            u.set_column(i, ui);
        }
        let d = embed(&y, &u, self.window.tau)?;
        let model = fit(&d, self.window.rcond)?;
        Ok(ActiveWindow { state: d.last_snapshot(), model, residuals: Vec::new(), crossed: false })
    }

    fn evaluate(&self, w: &ActiveWindow) -> Result<Option<f64>> {
        let ms = match modes(&w.model, self.window.eig_floor) {
            Ok(ms) => ms,
            Err(Error::IsolationUnavailable) => {
                warn!("no modes above the eigenvalue floor; window not isolated");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let g = regressor_from_modes(&ms, w.residuals.len());
        let q = self.window.q;
        let mut stack = DVector::zeros(q * w.residuals.len());
        for (j, r) in w.residuals.iter().enumerate() {
            stack.rows_mut(j * q, q).copy_from(r);
        }
        isolation_residual(&g, &stack)
    }

    /// Processes one sample.
    pub fn push(&mut self, t: f64, y: &DVector<f64>, u: &DVector<f64>) -> Result<SampleOutput> {
        let (q, p) = (self.window.q, self.window.p);
        if y.len() != q || u.len() != p {
            return Err(Error::Argument(format!(
                "sample has dimensions ({}, {}), expected ({q}, {p})",
                y.len(),
                u.len()
            )));
        }
        let k = self.count;
        if k == self.next_fit {
            let w = self.fit_window()?;
            self.active.push(w);
            self.next_fit += self.window.stride();
        }

        let warm = k >= self.window.w;
        let threshold = self.detector.cfg.threshold;
        let mut newest: Option<DVector<f64>> = None;
        if let Some(u_prev) = self.us.back().cloned() {
            for w in &mut self.active {
                let y_hat = advance(&w.model, &mut w.state, &u_prev)?;
                let r = y - &y_hat;
                if warm && r.norm() > threshold {
                    w.crossed = true;
                }
                w.residuals.push(r);
                newest = Some(y_hat);
            }
        }

        let mut out =
            SampleOutput { y_pred: None, r_d: None, det_flag: self.detector.flag, r_i: None, iso_flag: self.iso_flag };
        if warm {
            if let Some(y_hat) = newest {
                let r = (y - &y_hat).norm();
                out.det_flag = update_flag(&mut self.detector, r, t);
                out.r_d = Some(r);
                out.y_pred = Some(y_hat);
            }
        }
        if !out.det_flag {
            self.iso_flag = IsoFlag::None;
        }

        let horizon = self.window.w_tilde;
        let (finished, open): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.active).into_iter().partition(|w| w.residuals.len() >= horizon);
        self.active = open;
        for w in finished {
            if out.det_flag && w.crossed {
                if let Some(ri) = self.evaluate(&w)? {
                    self.iso_flag = classify(ri, self.isolator.epsilon);
                    out.r_i = Some(ri);
                    debug!("t = {t}: isolation residual {ri:.4} -> {:?}", self.iso_flag);
                }
            }
        }
        out.iso_flag = self.iso_flag;

        self.ys.push_back(y.clone());
        self.us.push_back(u.unscale(self.window.input_scale));
        if self.ys.len() > self.window.m() {
            self.ys.pop_front();
            self.us.pop_front();
        }
        self.count += 1;
        Ok(out)
    }
}

/// Runs a fresh monitor over a recorded scalar stream.
pub fn detect_stream(
    frames: &[(f64, f64, f64)],
    window: &WindowConfig,
    detector: &DetectorConfig,
    isolator: &IsolatorConfig,
) -> Result<(Vec<SampleOutput>, Vec<FlagEvent>)> {
    let mut mon = Monitor::new(window.clone(), detector.clone(), isolator.clone())?;
    let outs = frames
        .iter()
        .map(|&(t, y, u)| mon.push(t, &DVector::from_element(1, y), &DVector::from_element(1, u)))
        .collect::<Result<Vec<_>>>()?;
    Ok((outs, mon.events().to_vec()))
}
