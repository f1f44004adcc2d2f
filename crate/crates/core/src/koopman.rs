//! Delay-embedded linear surrogate identification.
//!
//! A window of `m` samples is stacked into snapshots
//! `D_l = [y_l u_l y_{l+1} u_{l+1} ... y_{l+tau}]`, and a linear map
//! `D_{l+1} ~ A D_l + B u_{l+tau}` is fitted by minimum-norm least squares.
//! Indices in this module are 0-based: snapshot `l` starts at sample `l`.

use nalgebra::{ComplexField, DMatrix, DVector, Schur};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvector condition number above which the eigenbasis is replaced by
/// Schur vectors.
pub const EIGVEC_COND_LIMIT: f64 = 1e12;

/// Sliding-window and identification settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Total moving window length in samples.
    pub w: usize,
    /// Prediction sub-window length in samples.
    pub w_tilde: usize,
    /// Embedding delay in samples.
    pub tau: usize,
    /// Output dimension.
    pub q: usize,
    /// Input dimension.
    pub p: usize,
    /// Relative singular-value cutoff for the pseudo-inverse.
    pub rcond: f64,
    /// Modes with |lambda| at or below this are discarded.
    pub eig_floor: f64,
    /// Inputs are divided by this before embedding so that the input and
    /// output blocks carry comparable weight in the regression.
    pub input_scale: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { w: 23, w_tilde: 8, tau: 13, q: 1, p: 1, rcond: 1e-10, eig_floor: 1e-8, input_scale: 25.0 }
    }
}

impl WindowConfig {
    /// Learning window length.
    pub fn m(&self) -> usize {
        self.w - self.w_tilde
    }

    /// Embedded dimension `(tau + 1) q + tau p`.
    pub fn k(&self) -> usize {
        embedded_dim(self.tau, self.q, self.p)
    }

    /// Number of samples the window advances after each prediction window.
    pub fn stride(&self) -> usize {
        (self.w_tilde - 1).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_tilde < 1 || self.w <= self.w_tilde {
            return Err(Error::Config(format!(
                "window sizes must satisfy W > W_tilde >= 1 (W = {}, W_tilde = {})",
                self.w, self.w_tilde
            )));
        }
        if self.m() < self.tau + 2 {
            return Err(Error::Config(format!("learning window {} too short for delay {}", self.m(), self.tau)));
        }
        if self.q < 1 || self.p < 1 {
            return Err(Error::Config("q and p must be positive".into()));
        }
        if !(self.rcond >= 0.0 && self.eig_floor >= 0.0 && self.input_scale > 0.0) {
            return Err(Error::Config("rcond, eig_floor and input_scale out of range".into()));
        }
        Ok(())
    }
}

/// Embedded dimension for delay `tau`, output size `q`, input size `p`.
pub fn embedded_dim(tau: usize, q: usize, p: usize) -> usize {
    (tau + 1) * q + tau * p
}

/// Snapshot matrices of one learning window.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayMatrices {
    pub y_b: DMatrix<f64>,
    pub y_s: DMatrix<f64>,
    pub u_b: DMatrix<f64>,
    pub tau: usize,
    pub q: usize,
    pub p: usize,
}

impl DelayMatrices {
    pub fn k(&self) -> usize {
        self.y_b.nrows()
    }

    /// Snapshot `l + 1`, the final embedding of the window.
    pub fn last_snapshot(&self) -> DVector<f64> {
        self.y_s.column(self.y_s.ncols() - 1).into_owned()
    }
}

/// Snapshot starting at sample `l`.
pub fn snapshot(y: &DMatrix<f64>, u: &DMatrix<f64>, l: usize, tau: usize) -> DVector<f64> {
    let (q, p) = (y.nrows(), u.nrows());
    let mut d = DVector::zeros(embedded_dim(tau, q, p));
    for i in 0..tau {
        let base = i * (q + p);
        d.rows_mut(base, q).copy_from(&y.column(l + i));
        d.rows_mut(base + q, p).copy_from(&u.column(l + i));
    }
    d.rows_mut(tau * (q + p), q).copy_from(&y.column(l + tau));
    d
}

/// Builds the snapshot matrices from `m` samples stored column-wise.
pub fn embed(y: &DMatrix<f64>, u: &DMatrix<f64>, tau: usize) -> Result<DelayMatrices> {
    let m = y.ncols();
    if u.ncols() != m {
        return Err(Error::Argument(format!("y has {m} samples but u has {}", u.ncols())));
    }
    if m < tau + 2 {
        return Err(Error::WindowUnderflow { needed: tau + 2, got: m });
    }
    let (q, p) = (y.nrows(), u.nrows());
    let k = embedded_dim(tau, q, p);
    let n = m - tau - 1;
    let mut y_b = DMatrix::zeros(k, n);
    let mut y_s = DMatrix::zeros(k, n);
    let mut u_b = DMatrix::zeros(p, n);
    for l in 0..n {
        y_b.set_column(l, &snapshot(y, u, l, tau));
        y_s.set_column(l, &snapshot(y, u, l + 1, tau));
        u_b.set_column(l, &u.column(l + tau));
    }
    Ok(DelayMatrices { y_b, y_s, u_b, tau, q, p })
}

/// Thin singular value decomposition `M = U diag(s) V^H` computed by faer.
///
/// nalgebra's bidiagonal SVD can return inaccurate factors on exactly
/// rank-deficient matrices, which delay-embedded regressors routinely are.
pub fn thin_svd<T>(m: &DMatrix<T>) -> Result<(DMatrix<T>, Vec<f64>, DMatrix<T>)>
where
    T: ComplexField<RealField = f64> + faer::traits::ComplexField,
{
    let (r, c) = m.shape();
    let fm = faer::Mat::<T>::from_fn(r, c, |i, j| m[(i, j)].clone());
    let svd = fm.thin_svd().map_err(|e| Error::Fit(format!("singular value decomposition did not converge: {e:?}")))?;
    let n = r.min(c);
    let (fu, fs, fv) = (svd.U(), svd.S(), svd.V());
    let u = DMatrix::from_fn(r, n, |i, k| fu[(i, k)].clone());
    let v = DMatrix::from_fn(c, n, |j, k| fv[(j, k)].clone());
    let s = (0..n).map(|k| fs[k].clone().modulus()).collect();
    Ok((u, s, v))
}

/// Moore-Penrose pseudo-inverse discarding singular values below
/// `rcond * sigma_max`. The zero matrix maps to the zero matrix.
pub fn pinv<T>(m: &DMatrix<T>, rcond: f64) -> Result<DMatrix<T>>
where
    T: ComplexField<RealField = f64> + faer::traits::ComplexField,
{
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return Ok(DMatrix::zeros(c, r));
    }
    let (u, s, v) = thin_svd(m)?;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let cut = rcond * smax;
    let mut out = DMatrix::zeros(c, r);
    for (i, &si) in s.iter().enumerate() {
        if si > cut && si > 0.0 {
            out += (v.column(i) * u.column(i).adjoint()).map(|x| x.unscale(si));
        }
    }
    Ok(out)
}

/// Number of singular values above `rcond * sigma_max`.
pub fn numerical_rank<T>(m: &DMatrix<T>, rcond: f64) -> Result<usize>
where
    T: ComplexField<RealField = f64> + faer::traits::ComplexField,
{
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(0);
    }
    let (_, s, _) = thin_svd(m)?;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    Ok(s.iter().filter(|&&x| x > rcond * smax && x > 0.0).count())
}

/// Minimum-Frobenius-norm solution `X = RHS M^+` of `min ||X M - RHS||_F`.
pub fn pinv_lstsq(m: &DMatrix<f64>, rhs: &DMatrix<f64>, rcond: f64) -> Result<DMatrix<f64>> {
    if m.ncols() != rhs.ncols() {
        return Err(Error::Argument(format!(
            "regressor has {} columns but right-hand side has {}",
            m.ncols(),
            rhs.ncols()
        )));
    }
    Ok(rhs * pinv(m, rcond)?)
}

/// Fitted linear surrogate and its eigenstructure.
#[derive(Debug, Clone)]
pub struct KoopmanModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Eigenvalues of `A` in Schur order.
    pub eigenvalues: Vec<Complex64>,
    /// Unit-norm right eigenvectors, column `i` for `eigenvalues[i]`.
    pub modes: DMatrix<Complex64>,
    /// Unitary Schur vectors of `A`, same ordering as `eigenvalues`.
    pub schur_vectors: DMatrix<Complex64>,
    /// Rows of the newest output block inside a snapshot.
    pub output_rows: std::ops::Range<usize>,
    pub fit_residual: f64,
    pub rank: usize,
    pub tau: usize,
    pub q: usize,
    pub p: usize,
}

impl KoopmanModel {
    pub fn k(&self) -> usize {
        self.a.nrows()
    }
}

/// Fits `Y_s ~ A Y_b + B U_b` and decomposes `A`.
pub fn fit(d: &DelayMatrices, rcond: f64) -> Result<KoopmanModel> {
    let k = d.k();
    let n = d.y_b.ncols();
    let finite = |m: &DMatrix<f64>| m.iter().all(|x| x.is_finite());
    if !(finite(&d.y_b) && finite(&d.y_s) && finite(&d.u_b)) {
        return Err(Error::Fit("non-finite data in learning window".into()));
    }
    let mut upsilon = DMatrix::zeros(k + d.p, n);
    upsilon.rows_mut(0, k).copy_from(&d.y_b);
    upsilon.rows_mut(k, d.p).copy_from(&d.u_b);
    let lambda = pinv_lstsq(&upsilon, &d.y_s, rcond)?;
    let fit_residual = (&d.y_s - &lambda * &upsilon).norm();
    let rank = numerical_rank(&upsilon, rcond)?;
    let a = lambda.columns(0, k).into_owned();
    let b = lambda.columns(k, d.p).into_owned();
    let (eigenvalues, modes, schur_vectors) = eigendecompose(&a)?;
    Ok(KoopmanModel {
        a,
        b,
        eigenvalues,
        modes,
        schur_vectors,
        output_rows: k - d.q..k,
        fit_residual,
        rank,
        tau: d.tau,
        q: d.q,
        p: d.p,
    })
}

/// Eigenvalues, unit-norm eigenvectors and Schur vectors.
pub type Eigen = (Vec<Complex64>, DMatrix<Complex64>, DMatrix<Complex64>);

/// Complex Schur decomposition followed by triangular back substitution for
/// the eigenvectors.
pub fn eigendecompose(a: &DMatrix<f64>) -> Result<Eigen> {
    let k = a.nrows();
    if a.iter().all(|&x| x == 0.0) {
        let id = DMatrix::identity(k, k);
        return Ok((vec![Complex64::new(0.0, 0.0); k], id.clone(), id));
    }
    let ac = a.map(|x| Complex64::new(x, 0.0));
    let schur = Schur::try_new(ac, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Fit("Schur iteration did not converge".into()))?;
    let (q, t) = schur.unpack();
    let lambdas: Vec<Complex64> = (0..k).map(|i| t[(i, i)]).collect();
    let tiny = (f64::EPSILON * t.norm()).max(f64::MIN_POSITIVE);
    let mut x = DMatrix::<Complex64>::zeros(k, k);
    for i in 0..k {
        x[(i, i)] = Complex64::new(1.0, 0.0);
        for j in (0..i).rev() {
            let mut s = Complex64::new(0.0, 0.0);
            for l in j + 1..=i {
                s += t[(j, l)] * x[(l, i)];
            }
            let mut den = t[(j, j)] - lambdas[i];
            if den.norm() < tiny {
                den = Complex64::new(tiny, 0.0);
            }
            x[(j, i)] = -s / den;
        }
    }
    let mut v = &q * x;
    for mut col in v.column_iter_mut() {
        let nrm = col.norm();
        if nrm > 0.0 && nrm.is_finite() {
            col.unscale_mut(nrm);
        }
    }
    Ok((lambdas, v, q))
}

/// Retained eigenstructure used by the isolator.
#[derive(Debug, Clone)]
pub struct ModeSet {
    pub eigenvalues: Vec<Complex64>,
    /// Unit-norm columns spanning the retained modes.
    pub vectors: DMatrix<Complex64>,
    pub output_rows: std::ops::Range<usize>,
    /// True when the eigenbasis was too ill-conditioned and Schur vectors
    /// were substituted.
    pub schur_fallback: bool,
}

impl ModeSet {
    /// Mode matrix restricted to the newest output block.
    pub fn output_modes(&self) -> DMatrix<Complex64> {
        self.vectors.rows(self.output_rows.start, self.output_rows.len()).into_owned()
    }
}

/// Modes with |lambda| above `eig_floor`.
pub fn modes(model: &KoopmanModel, eig_floor: f64) -> Result<ModeSet> {
    let keep: Vec<usize> = (0..model.eigenvalues.len()).filter(|&i| model.eigenvalues[i].norm() > eig_floor).collect();
    if keep.is_empty() {
        return Err(Error::IsolationUnavailable);
    }
    let vectors = model.modes.select_columns(&keep);
    let (_, s, _) = thin_svd(&vectors)?;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond <= EIGVEC_COND_LIMIT {
        return Ok(ModeSet {
            eigenvalues: keep.iter().map(|&i| model.eigenvalues[i]).collect(),
            vectors,
            output_rows: model.output_rows.clone(),
            schur_fallback: false,
        });
    }
    // The leading Schur vectors up to the last retained position span an
    // invariant subspace containing every retained mode.
    let last = *keep.last().expect("non-empty");
    Ok(ModeSet {
        eigenvalues: model.eigenvalues[..=last].to_vec(),
        vectors: model.schur_vectors.columns(0, last + 1).into_owned(),
        output_rows: model.output_rows.clone(),
        schur_fallback: true,
    })
}

/// Step-by-step rollout of a fitted model. Input entries inside the
/// predicted snapshot are overwritten with the known inputs after each step.
#[derive(Debug, Clone)]
pub struct Rollout<'a> {
    model: &'a KoopmanModel,
    state: DVector<f64>,
}

impl<'a> Rollout<'a> {
    pub fn new(model: &'a KoopmanModel, d_last: DVector<f64>) -> Result<Self> {
        if d_last.len() != model.k() {
            return Err(Error::Argument(format!(
                "snapshot has length {} but model dimension is {}",
                d_last.len(),
                model.k()
            )));
        }
        Ok(Self { model, state: d_last })
    }

    /// Advances one sample using the input paired with the current newest
    /// output, and returns the predicted next output.
    pub fn step(&mut self, u: &DVector<f64>) -> Result<DVector<f64>> {
        advance(self.model, &mut self.state, u)
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }
}

/// One rollout step of `model` applied to the snapshot `state` in place.
pub fn advance(model: &KoopmanModel, state: &mut DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    let m = model;
    if u.len() != m.p {
        return Err(Error::Argument(format!("input has length {}, expected {}", u.len(), m.p)));
    }
    let mut next = &m.a * &*state + &m.b * u;
    let blk = m.q + m.p;
    for i in 0..m.tau {
        let dst = i * blk + m.q;
        if i + 1 < m.tau {
            let src = (i + 1) * blk + m.q;
            next.rows_mut(dst, m.p).copy_from(&state.rows(src, m.p));
        } else {
            next.rows_mut(dst, m.p).copy_from(u);
        }
    }
    *state = next;
    Ok(state.rows(m.output_rows.start, m.q).into_owned())
}

/// Predicts `horizon` outputs after `d_last`, where `u_future[j]` is the
/// input applied at step `j`.
pub fn predict(
    model: &KoopmanModel,
    d_last: &DVector<f64>,
    u_future: &[DVector<f64>],
    horizon: usize,
) -> Result<Vec<DVector<f64>>> {
    if horizon > u_future.len() {
        return Err(Error::Argument(format!("horizon {horizon} exceeds {} available future inputs", u_future.len())));
    }
    let mut r = Rollout::new(model, d_last.clone())?;
    u_future[..horizon].iter().map(|u| r.step(u)).collect()
}
