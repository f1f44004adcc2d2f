//! Independent oracles for the numerical building blocks.

use kcad_core::battery::{step, terminal_voltage, BatteryParams, BatteryState, OcvCurve};
use kcad_core::isolator::{classify, isolation_residual, regressor_from_modes, IsoFlag};
use kcad_core::koopman::{eigendecompose, embed, fit, modes, pinv_lstsq, predict, thin_svd, KoopmanModel};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameter set with SOC-independent branches R = `r`, C = `c`.
fn constant_params(r: f64, c: f64) -> BatteryParams {
    BatteryParams {
        r1_coeffs: [r, 0.0, 0.0],
        r1_unit_scale: 1.0,
        r2_coeffs: [r, 0.0, 0.0],
        c1_coeffs: [c, 0.0, 0.0, 0.0, 0.0, 0.0],
        c2_coeffs: [c, 0.0, 0.0, 0.0, 0.0, 0.0],
        ocv_curve: OcvCurve::new(vec![(0.0, 3.0), (1.0, 4.2)]).unwrap(),
        ..BatteryParams::default()
    }
}

#[test]
fn exponential_step_matches_fine_euler() {
    // Explicit Euler's global error here is bounded by dt * t * |R i| / (2 R^2 C^2),
    // about 5e-7 V for a 0.1 V branch drop.
    let p = constant_params(1.0, 100.0);
    let i = -0.1;
    let (dt, t_end) = (1e-3, 100.0);
    let n = (t_end / dt) as usize;
    let mut v = 0.0;
    for _ in 0..n {
        v += dt * (-v / 100.0 + i / 100.0);
    }
    let mut s = BatteryState::at_soc(0.2);
    for _ in 0..100 {
        s = step(&s, i, 1.0, &p).unwrap();
    }
    assert!((s.v1 - v).abs() < 1e-6, "exp {} euler {}", s.v1, v);
    assert!((s.v2 - v).abs() < 1e-6);
}

#[test]
fn step_matches_closed_form_single_rc() {
    let (r, c, i) = (0.05, 2000.0, -5.0);
    let p = constant_params(r, c);
    let mut s = BatteryState { v1: 0.01, v2: 0.0, soc: 0.3 };
    let h = 0.1;
    for k in 1..=5000 {
        s = step(&s, i, h, &p).unwrap();
        let t = k as f64 * h;
        let closed = 0.01 * (-t / (r * c)).exp() + r * i * (1.0 - (-t / (r * c)).exp());
        assert!((s.v1 - closed).abs() < 1e-12, "t={t}: {} vs {closed}", s.v1);
    }
}

#[test]
fn terminal_voltage_uses_series_resistance() {
    let p = BatteryParams::default();
    let s = BatteryState { v1: 0.0, v2: 0.0, soc: 0.6 };
    let v0 = terminal_voltage(&s, 0.0, &p).unwrap();
    assert!((terminal_voltage(&s, -5.0, &p).unwrap() - v0 - 0.024).abs() < 1e-12);
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

#[test]
fn pinv_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let m = random_matrix(&mut rng, 5, 8);
        let x0 = random_matrix(&mut rng, 3, 5);
        let rhs = &x0 * &m;
        let x = pinv_lstsq(&m, &rhs, 1e-10).unwrap();
        let mmt = &m * m.transpose();
        let x_ne = &rhs * m.transpose() * mmt.try_inverse().unwrap();
        let res = (&x * &m - &rhs).norm();
        let res_ne = (&x_ne * &m - &rhs).norm();
        assert!((res - res_ne).abs() < 1e-10, "{res} vs {res_ne}");
        assert!((&x - &x_ne).norm() < 1e-8);
    }
}

/// Scalar-output third-order LTI system with a random stable state matrix.
fn lti_data(rng: &mut ChaCha8Rng, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let a0 = loop {
        let a = random_matrix(rng, 3, 3);
        let rho = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        if rho > 1e-3 {
            break a * (0.9 / rho);
        }
    };
    let b0 = random_matrix(rng, 3, 1);
    let c0 = random_matrix(rng, 1, 3);
    let mut x = random_matrix(rng, 3, 1);
    let mut y = DMatrix::zeros(1, n);
    let mut u = DMatrix::zeros(1, n);
    for k in 0..n {
        u[(0, k)] = rng.gen_range(-1.0..1.0);
        y[(0, k)] = (&c0 * &x)[(0, 0)];
        x = &a0 * &x + &b0 * u[(0, k)];
    }
    (y, u)
}

#[test]
fn delay_embedded_fit_reproduces_lti() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (y, u) = lti_data(&mut rng, 208);
        let tau = 3;
        let d = embed(&y.columns(0, 200).into_owned(), &u.columns(0, 200).into_owned(), tau).unwrap();
        let m = fit(&d, 1e-10).unwrap();
        assert!(m.fit_residual < 1e-9 * d.y_s.norm(), "fit residual {}", m.fit_residual);
        let u_future: Vec<DVector<f64>> = (199..207).map(|k| DVector::from_element(1, u[(0, k)])).collect();
        let pred = predict(&m, &d.last_snapshot(), &u_future, 8).unwrap();
        let truth: Vec<f64> = (200..208).map(|k| y[(0, k)]).collect();
        let scale = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = pred.iter().zip(&truth).map(|(p, t)| (p[0] - t).powi(2)).sum::<f64>().sqrt();
        assert!(err < 1e-6 * scale, "prediction error {err} vs scale {scale}");
    }
}

#[test]
fn rank_one_window_eigenvalue_matches_analytic() {
    let y = DMatrix::from_fn(1, 15, |_, j| 3.7 + 0.001 * j as f64);
    let u = DMatrix::from_fn(1, 15, |_, j| -0.2 + 0.0001 * j as f64);
    let d = embed(&y, &u, 13).unwrap();
    let m = fit(&d, 1e-10).unwrap();
    let ms = modes(&m, 1e-8).unwrap();
    assert_eq!(ms.eigenvalues.len(), 1);
    // A = Y_s x^T / |v|^2 restricted to the Y_b block, so lambda = <x, Y_b> / |v|^2.
    let yb = d.y_b.column(0);
    let v2 = yb.norm_squared() + d.u_b[(0, 0)].powi(2);
    let expected = d.y_s.column(0).dot(&yb) / v2;
    assert!((ms.eigenvalues[0].re - expected).abs() < 1e-12);
}

fn real_model_modes(rng: &mut ChaCha8Rng, k: usize) -> kcad_core::koopman::ModeSet {
    let a = random_matrix(rng, k, k);
    let (eigenvalues, modes_m, schur_vectors) = eigendecompose(&a).unwrap();
    let model = KoopmanModel {
        a,
        b: DMatrix::zeros(k, 1),
        eigenvalues,
        modes: modes_m,
        schur_vectors,
        output_rows: k - 1..k,
        fit_residual: 0.0,
        rank: k,
        tau: 0,
        q: 1,
        p: 1,
    };
    modes(&model, 1e-8).unwrap()
}

#[test]
fn representable_residuals_classify_as_actuation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let k = rng.gen_range(1..=3);
        let ms = real_model_modes(&mut rng, k);
        let g = regressor_from_modes(&ms, 8);
        let c = DVector::from_fn(g.ncols(), |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        // Modes of a real matrix come in conjugate pairs, so the real part
        // of G c stays in the column span.
        let r = (&g * c).map(|z| z.re);
        if r.norm() < 1e-9 {
            continue;
        }
        let ri = isolation_residual(&g, &r).unwrap().unwrap();
        assert!(ri <= 1e-8, "r_I = {ri}");
        assert_eq!(classify(ri, 1e-6), IsoFlag::Actuation);
    }
}

#[test]
fn orthogonal_residuals_have_unit_misfit() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let k = rng.gen_range(1..=3);
        let ms = real_model_modes(&mut rng, k);
        let g = regressor_from_modes(&ms, 8);
        let mut basis = DMatrix::zeros(8, 2 * g.ncols());
        basis.columns_mut(0, g.ncols()).copy_from(&g.map(|z| z.re));
        basis.columns_mut(g.ncols(), g.ncols()).copy_from(&g.map(|z| z.im));
        let (u, s, _) = thin_svd(&basis).unwrap();
        let smax = s.iter().cloned().fold(0.0, f64::max);
        let rank = s.iter().filter(|&&x| x > 1e-10 * smax).count();
        let qr = u.columns(0, rank).into_owned();
        let r0 = DVector::from_fn(8, |_, _| rng.gen_range(-1.0..1.0));
        let r = &r0 - &qr * (qr.transpose() * &r0);
        let ri = isolation_residual(&g, &r).unwrap().unwrap();
        assert!(ri >= 0.99, "r_I = {ri}");
    }
}
