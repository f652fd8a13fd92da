use ddpc_core::estimator::{write_trace_csv, FilterMode, FilterState};
use ddpc_core::linalg;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(x)
}

fn scalar(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

/// Scalar Riccati recursion `P⁻ = γ²P + q`, `P = P⁻σ²/(P⁻ + σ²)`, written
/// independently of the filter.
fn riccati(p0: f64, gamma: f64, q: f64, sigma2: f64, steps: usize) -> Vec<f64> {
    let mut p = p0;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let prior = gamma * gamma * p + q;
        p = prior * sigma2 / (prior + sigma2);
        out.push(p);
    }
    out
}

#[test]
fn scalar_filter_follows_riccati_recursion() {
    let (gamma, q, sigma2) = (0.8, 0.003, 0.01);
    let oracle = riccati(1.0, gamma, q, sigma2, 60);
    for mode in [FilterMode::PaperLiteral, FilterMode::FullKf] {
        let mut s = FilterState::init(1, &v(&[0.0]), &v(&[0.0]), mode).unwrap();
        for (k, expect) in oracle.iter().enumerate() {
            // The one-step predictor error covariance is γ²P + q.
            let sigma_0 = scalar(gamma * gamma * s.p[(0, 0)] + q);
            s = s.predict_step(&v(&[0.0]), &v(&[0.1 * k as f64]), &sigma_0).unwrap();
            s = s.update_step(&v(&[0.0]), sigma2).unwrap();
            assert!((s.p[(0, 0)] - expect).abs() <= 1e-10, "{} step {k}", mode.as_str());
        }
        // Converged to the positive root of γ²σ²P² + ... fixed point.
        let a = gamma * gamma;
        let fixed = {
            // P = (aP + q)σ² / (aP + q + σ²) ⇔ aP² + (q + σ² − aσ²)P − qσ² = 0.
            let b = q + sigma2 - a * sigma2;
            (-b + (b * b + 4.0 * a * q * sigma2).sqrt()) / (2.0 * a)
        };
        assert!((s.p[(0, 0)] - fixed).abs() <= 1e-10);
    }
}

#[test]
fn constant_process_noise_gives_constant_posterior() {
    let (s0, sigma2) = (0.02, 0.01);
    let mut s = FilterState::init(1, &v(&[0.0]), &v(&[0.0]), FilterMode::PaperLiteral).unwrap();
    for _ in 0..10 {
        s = s.predict_step(&v(&[0.0]), &v(&[0.0]), &scalar(s0)).unwrap();
        s = s.update_step(&v(&[0.3]), sigma2).unwrap();
        assert!((s.p[(0, 0)] - s0 * sigma2 / (s0 + sigma2)).abs() <= 1e-15);
    }
}

/// Posterior of `x ~ N(μ, Σ)` given `y = x_last + v`, `v ~ N(0, σ²)`.
fn condition_on_last(mu: &DVector<f64>, sigma: &DMatrix<f64>, y: f64, sigma2: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = mu.len();
    let c = sigma.column(n - 1).into_owned();
    let s = sigma[(n - 1, n - 1)] + sigma2;
    let mean = mu + &c * ((y - mu[n - 1]) / s);
    let cov = sigma - &c * c.transpose() / s;
    (mean, cov)
}

#[test]
fn full_kf_matches_joint_gaussian_conditioning() {
    let sigma2 = 0.01;
    let p_old = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.4]);
    let s = FilterState::init(2, &v(&[0.0, 0.0]), &v(&[1.0, -0.5]), FilterMode::FullKf)
        .unwrap()
        .with_covariance(p_old.clone())
        .unwrap();
    let gamma_0 = DMatrix::from_row_slice(1, 2, &[-0.3, 0.9]);
    let sigma_0 = scalar(0.05) + &gamma_0 * &p_old * gamma_0.transpose();
    let pred = s
        .predict_step_correlated(&v(&[0.2]), &v(&[0.7]), &sigma_0, &gamma_0)
        .unwrap();
    // Independently assembled prior: shift then append the correlated block.
    let cross = (&gamma_0 * &p_old)[(0, 1)];
    let prior_cov = DMatrix::from_row_slice(2, 2, &[0.4, cross, cross, sigma_0[(0, 0)]]);
    let prior_mean = v(&[-0.5, 0.7]);
    assert!((&pred.p - &prior_cov).amax() <= 1e-15);
    let (mean, cov) = condition_on_last(&prior_mean, &prior_cov, 1.1, sigma2);
    let post = pred.update_step(&v(&[1.1]), sigma2).unwrap();
    assert!((&post.y_hist - &mean).amax() <= 1e-10);
    assert!((&post.p - &cov).amax() <= 1e-10);

    // Paper-literal ignores the correlation and leaves the older block alone.
    let lit = FilterState::init(2, &v(&[0.0, 0.0]), &v(&[1.0, -0.5]), FilterMode::PaperLiteral)
        .unwrap()
        .with_covariance(p_old)
        .unwrap()
        .predict_step_correlated(&v(&[0.2]), &v(&[0.7]), &sigma_0, &gamma_0)
        .unwrap()
        .update_step(&v(&[1.1]), sigma2)
        .unwrap();
    assert_eq!(lit.y_hist[0], -0.5);
    assert_eq!(lit.p[(0, 0)], 0.4);
    assert_eq!(lit.p[(0, 1)], 0.0);
}

#[test]
fn modes_agree_without_cross_terms() {
    let p_old = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 0.8, 0.2, 0.1, 0.2, 0.6]);
    let run = |mode| {
        let mut s = FilterState::init(3, &v(&[0.0; 3]), &v(&[0.2, 0.1, 0.0]), mode)
            .unwrap()
            .with_covariance(p_old.clone())
            .unwrap();
        for k in 0..5 {
            s = s.predict_step(&v(&[0.0]), &v(&[0.1 * k as f64]), &scalar(0.02)).unwrap();
            s = s.update_step(&v(&[0.05 * k as f64]), 0.01).unwrap();
        }
        s
    };
    let (a, b) = (run(FilterMode::PaperLiteral), run(FilterMode::FullKf));
    assert!((&a.p - &b.p).amax() <= 1e-15);
    assert!((&a.y_hist - &b.y_hist).amax() <= 1e-15);
}

#[test]
fn perfect_predictor_drives_variance_to_zero() {
    let mut s = FilterState::init(4, &v(&[0.0; 4]), &v(&[0.0; 4]), FilterMode::PaperLiteral).unwrap();
    for _ in 0..4 {
        s = s.predict_step(&v(&[0.0]), &v(&[0.0]), &scalar(0.0)).unwrap();
        s = s.update_step(&v(&[0.1]), 0.01).unwrap();
        assert_eq!(s.p[(3, 3)], 0.0);
    }
    assert_eq!(s.p.amax(), 0.0);
}

#[test]
fn trace_csv_has_expected_columns() {
    let mut s = FilterState::init(1, &v(&[0.0]), &v(&[0.0]), FilterMode::PaperLiteral).unwrap();
    let mut rows = Vec::new();
    for k in 0..3 {
        s = s.predict_step(&v(&[0.0]), &v(&[k as f64]), &scalar(0.01)).unwrap();
        s = s.update_step(&v(&[1.0]), 0.01).unwrap();
        rows.push(s.last.clone().unwrap());
    }
    let mut buf = Vec::new();
    write_trace_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "t,prior_0,posterior_0,measurement_0,variance_0");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("1,1e0,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_stays_psd_and_below_measurement_noise(
        steps in prop::collection::vec((0.0..0.5f64, -1.0..1.0f64, -1.0..1.0f64), 1..30),
        sigma2 in 1e-4..1.0f64,
        full in any::<bool>(),
        g in prop::collection::vec(-1.0..1.0f64, 3),
    ) {
        let mode = if full { FilterMode::FullKf } else { FilterMode::PaperLiteral };
        let mut s = FilterState::init(3, &v(&[0.0; 3]), &v(&[0.0; 3]), mode).unwrap();
        let gamma_0 = DMatrix::from_row_slice(1, 3, &g);
        for (q, ybar, y) in steps {
            let sigma_0 = scalar(q) + &gamma_0 * &s.p * gamma_0.transpose();
            s = s.predict_step_correlated(&v(&[0.0]), &v(&[ybar]), &sigma_0, &gamma_0).unwrap();
            s = s.update_step(&v(&[y]), sigma2).unwrap();
            prop_assert!(linalg::min_eigenvalue(&s.p) >= -1e-12);
            prop_assert!((&s.p - s.p.transpose()).amax() == 0.0);
            prop_assert!(s.p[(2, 2)] <= sigma2 + 1e-12);
        }
    }
}
