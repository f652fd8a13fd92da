mod common;

use std::sync::Arc;

use common::*;
use ddpc_core::linalg;
use ddpc_core::lti::{self, StateSpaceModel, TrajectoryData};
use ddpc_core::predictor::{
    build_predictor, predict, predict_affine_maps, qp_reference_solve, resolve_design, PredictorParams,
    RegularizerDesign, RegularizerKind,
};
use ddpc_core::signal::{QueryCondition, SignalMatrix};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn build(sm: &Arc<SignalMatrix>, kind: RegularizerKind, sigma2: f64) -> PredictorParams {
    let probe = if kind == RegularizerKind::Smm { Some(0.05) } else { None };
    let d = resolve_design(kind, sm, sigma2, probe).unwrap();
    build_predictor(Arc::clone(sm), &d, sigma2).unwrap()
}

fn zero_cov_query(win: &TrueWindow) -> QueryCondition {
    query(win, DMatrix::zeros(4, 4), DMatrix::zeros(14, 14))
}

fn noisy_query(rng: &mut rand_chacha::ChaCha8Rng) -> (QueryCondition, DVector<f64>) {
    let p = {
        let a = DMatrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.1);
        &a * a.transpose()
    };
    let q = QueryCondition {
        u_ini: gaussian_vec(rng, 4),
        y_ini: gaussian_vec(rng, 4),
        p,
        w_bar: gaussian_vec(rng, 14) * 0.03,
        sigma_w: DMatrix::identity(14, 14) * 0.001,
    };
    (q, gaussian_vec(rng, 10))
}

#[test]
fn noise_free_designs_reproduce_true_outputs() {
    let model = StateSpaceModel::paper_sec5();
    let sm = sec5_signal(500, 0.0, 21);
    for kind in RegularizerKind::ALL {
        let p = build(&sm, kind, 0.0);
        let mut rng = test_rng(21);
        for _ in 0..100 {
            let win = true_window(&model, &mut rng);
            let r = predict(&p, &zero_cov_query(&win), &win.u_hat).unwrap();
            let e = rel_err(&r.y_bar, &win.y_future);
            assert!(e <= 1e-6, "{}: relative error {e:e}", kind.as_str());
        }
    }
}

#[test]
fn noise_free_gamma_estimate_is_exact() {
    let model = StateSpaceModel::paper_sec5();
    let gamma = lti::true_gamma(&model, L0, LP).unwrap();
    let sm = sec5_signal(500, 0.0, 22);
    for kind in RegularizerKind::ALL {
        let p = build(&sm, kind, 0.0);
        let err = (&p.gamma_hat - &gamma).norm();
        assert!(err <= 1e-6, "{}: ‖Γ̂ − Γ‖ = {err:e}", kind.as_str());
    }
}

#[test]
fn equality_constraint_holds_exactly() {
    let sm = sec5_signal(500, 0.01, 23);
    let psi = sm.psi();
    for kind in RegularizerKind::ALL {
        let p = build(&sm, kind, 0.01);
        let r = DMatrix::from_columns(
            &p.r1.column_iter().chain(p.r2.column_iter()).chain(p.r3.column_iter()).collect::<Vec<_>>(),
        );
        let mut rng = test_rng(23);
        for _ in 0..100 {
            let c = gaussian_vec(&mut rng, 28);
            let back = &psi * (&r * &c);
            assert!((&back - &c).amax() <= 1e-8 * c.amax(), "{}", kind.as_str());
        }
        let (q, u) = noisy_query(&mut rng);
        let g = predict(&p, &q, &u).unwrap().g;
        let target = linalg::vcat(&[&q.u_ini, &u, &q.w_bar]);
        assert!((&psi * g - target).amax() <= 1e-8);
    }
}

#[test]
fn designs_coincide_without_noise() {
    let model = StateSpaceModel::paper_sec5();
    let sm = sec5_signal(500, 0.0, 24);
    let params: Vec<_> = RegularizerKind::ALL.iter().map(|&k| build(&sm, k, 0.0)).collect();
    let mut rng = test_rng(24);
    for _ in 0..20 {
        let win = true_window(&model, &mut rng);
        let q = zero_cov_query(&win);
        let base = predict(&params[0], &q, &win.u_hat).unwrap().y_bar;
        for p in &params[1..] {
            let y = predict(p, &q, &win.u_hat).unwrap().y_bar;
            assert!((&y - &base).amax() <= 1e-6 * base.amax().max(1.0));
        }
    }
}

#[test]
fn closed_form_matches_kkt_oracle() {
    let sm = sec5_signal(500, 0.01, 25);
    let mut rng = test_rng(25);
    for kind in RegularizerKind::ALL {
        let p = build(&sm, kind, 0.01);
        for _ in 0..25 {
            let (q, u) = noisy_query(&mut rng);
            let local = p.specialize(&q, &u).unwrap();
            let g = predict(&p, &q, &u).unwrap().g;
            let oracle = qp_reference_solve(&sm, &local.design, &q, &u).unwrap();
            let e = rel_err(&g, &oracle);
            assert!(e <= 1e-6, "{}: relative error {e:e}", kind.as_str());
        }
    }
}

#[test]
fn kkt_oracle_limits() {
    let sm = sec5_signal(300, 0.01, 26);
    let d = resolve_design(RegularizerKind::Wasserstein, &sm, 0.01, None).unwrap();
    let zero = QueryCondition {
        u_ini: DVector::zeros(4),
        y_ini: DVector::zeros(4),
        p: DMatrix::zeros(4, 4),
        w_bar: DVector::zeros(14),
        sigma_w: DMatrix::zeros(14, 14),
    };
    assert_eq!(qp_reference_solve(&sm, &d, &zero, &DVector::zeros(10)).unwrap().amax(), 0.0);

    // Huge λ: least-norm solution of Ψ g = condition.
    let mut rng = test_rng(26);
    let (q, u) = noisy_query(&mut rng);
    let big = RegularizerDesign::custom(RegularizerKind::Wasserstein, 1e12, DMatrix::identity(4, 4)).unwrap();
    let g = qp_reference_solve(&sm, &big, &q, &u).unwrap();
    let psi = sm.psi();
    let least_norm = linalg::pinv(&psi) * linalg::vcat(&[&q.u_ini, &u, &q.w_bar]);
    assert!(rel_err(&g, &least_norm) < 1e-6);
}

#[test]
fn affine_maps_reproduce_predict() {
    let sm = sec5_signal(500, 0.01, 27);
    let mut rng = test_rng(27);
    for kind in [RegularizerKind::Subspace, RegularizerKind::Wasserstein, RegularizerKind::Mmse] {
        let p = build(&sm, kind, 0.01);
        let (q, _) = noisy_query(&mut rng);
        let maps = predict_affine_maps(&p, &q).unwrap();
        let at_zero = predict(&p, &q, &DVector::zeros(10)).unwrap();
        assert!((&at_zero.g - &maps.g_0).amax() <= 1e-12 * maps.g_0.amax().max(1.0));
        assert!((&at_zero.y_bar - &maps.y_0).amax() <= 1e-12 * maps.y_0.amax().max(1.0));
        for _ in 0..20 {
            let u = gaussian_vec(&mut rng, 10);
            let r = predict(&p, &q, &u).unwrap();
            let g = &maps.g_u * &u + &maps.g_0;
            let y = &maps.y_u * &u + &maps.y_0;
            assert!((&r.g - g).amax() <= 1e-10 * r.g.amax().max(1.0));
            assert!((&r.y_bar - y).amax() <= 1e-10 * r.y_bar.amax().max(1.0));
        }
        // The maps do not depend on û; a second query with other u_ini keeps G_u, Y_u.
        let (q2, _) = noisy_query(&mut rng);
        let maps2 = predict_affine_maps(&p, &q2).unwrap();
        assert_eq!(maps.g_u, maps2.g_u);
        assert_eq!(maps.y_u, maps2.y_u);
    }
}

#[test]
fn smm_lambda_is_query_dependent() {
    let sm = sec5_signal(500, 0.01, 28);
    let p = build(&sm, RegularizerKind::Smm, 0.01);
    let mut rng = test_rng(28);
    let (q, u) = noisy_query(&mut rng);
    let a = p.specialize(&q, &u).unwrap();
    let b = p.specialize(&q, &(&u * 3.0)).unwrap();
    assert_ne!(a.design.lambda, b.design.lambda);
    assert_eq!(a.gamma_hat, p.gamma_hat);
    let g2 = (sm.data_pinv() * sm.condition(&q.u_ini, &u, &q.w_bar, &q.y_ini).unwrap()).norm_squared();
    let expect = 14.0 * 0.01 + 10.0 * 0.01 / g2;
    assert!((a.design.lambda - expect).abs() <= 1e-12 * expect);
}

/// Scalar plant `x⁺ = 0.5 x + u + 0.3 w`, `y = x`, with L0 = 1, L′ = 2.
fn scalar_model() -> StateSpaceModel {
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    StateSpaceModel::new(m(0.5), m(1.0), m(1.0), m(0.0), m(0.3)).unwrap()
}

#[test]
fn covariance_matches_dense_formula_and_monte_carlo_band() {
    let model = scalar_model();
    let sigma2: f64 = 0.01;
    let n = 120;
    let clean = offline(&model, n, 0.0, 30);
    let query = QueryCondition {
        u_ini: DVector::from_element(1, 0.4),
        y_ini: DVector::from_element(1, 0.8),
        p: DMatrix::zeros(1, 1),
        w_bar: DVector::from_row_slice(&[0.1, -0.2, 0.05]),
        sigma_w: DMatrix::zeros(3, 3),
    };
    let u_hat = DVector::from_row_slice(&[0.3, -0.6]);
    // Noise-free future: x_ini = y_ini, then two steps.
    let x1 = 0.5 * 0.8 + 0.4 + 0.3 * 0.1;
    let y_true = DVector::from_row_slice(&[x1, 0.5 * x1 + 0.3 - 0.3 * 0.2]);

    let mut rng = test_rng(30);
    let reps = 10_000;
    let mut err_sq = DVector::zeros(2);
    let mut err_mean = DVector::zeros(2);
    let mut sigma_mean = DVector::zeros(2);
    for rep in 0..reps {
        let v = DMatrix::from_fn(1, n, |_, _| rng.sample::<f64, _>(StandardNormal) * sigma2.sqrt());
        let data = TrajectoryData::new(clean.u.clone(), clean.w.clone(), clean.y0.clone(), &clean.y0 + v).unwrap();
        let sm = Arc::new(SignalMatrix::build_hankel(&data, 1, 2).unwrap());
        let d = resolve_design(RegularizerKind::Mmse, &sm, sigma2, None).unwrap();
        let p = build_predictor(sm, &d, sigma2).unwrap();
        let r = predict(&p, &query, &u_hat).unwrap();
        if rep == 0 {
            // Dense re-evaluation of the covariance formula.
            let gam = &p.gamma_hat;
            let t = (gam * gam.transpose() + DMatrix::identity(2, 2)) * sigma2;
            let dense = gam * &query.p * gam.transpose()
                + &p.gamma_w * &query.sigma_w * p.gamma_w.transpose()
                + t * r.g.norm_squared();
            assert!((&r.sigma - &dense).amax() <= 1e-12);
        }
        let e = &r.y_bar - &y_true;
        err_mean += &e;
        err_sq += e.component_mul(&e);
        sigma_mean += r.sigma.diagonal();
    }
    let k = reps as f64;
    for i in 0..2 {
        let mean = err_mean[i] / k;
        let var = err_sq[i] / k - mean * mean;
        let model_var = sigma_mean[i] / k;
        let ratio = var / model_var;
        assert!((1.0 / 3.0..=3.0).contains(&ratio), "component {i}: empirical {var:e} vs formula {model_var:e}");
    }
}

#[test]
fn predictor_cache_round_trip() {
    let sm = sec5_signal(300, 0.01, 31);
    let p = build(&sm, RegularizerKind::Mmse, 0.01);
    let mut buf = Vec::new();
    p.write_cache(&mut buf).unwrap();
    assert_eq!(&buf[..8], b"DDPCPP01");
    let back = PredictorParams::read_cache(buf.as_slice(), Arc::clone(&sm)).unwrap();
    assert_eq!(back.r4, p.r4);
    assert_eq!(back.gamma_hat, p.gamma_hat);
    assert_eq!(back.design, p.design);
    let other = sec5_signal(300, 0.01, 32);
    assert!(PredictorParams::read_cache(buf.as_slice(), other).is_err());
    buf.truncate(buf.len() - 3);
    assert!(PredictorParams::read_cache(buf.as_slice(), sm).is_err());
}

#[test]
fn prediction_rejects_bad_dimensions_and_covariances() {
    let sm = sec5_signal(300, 0.01, 33);
    let p = build(&sm, RegularizerKind::Wasserstein, 0.01);
    let mut rng = test_rng(33);
    let (mut q, u) = noisy_query(&mut rng);
    assert!(predict(&p, &q, &DVector::zeros(9)).is_err());
    q.p[(0, 0)] = -1.0;
    assert!(predict(&p, &q, &u).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn covariance_is_monotone_in_p(seed in 0u64..1000, scale in 0.0..2.0f64) {
        let sm = sec5_signal(200, 0.01, 40);
        let p = build(&sm, RegularizerKind::Mmse, 0.01);
        let mut rng = test_rng(seed);
        let (q, u) = noisy_query(&mut rng);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
        let mut q2 = q.clone();
        q2.p = &q.p + &a * a.transpose();
        let s1 = predict(&p, &q, &u).unwrap().sigma;
        let s2 = predict(&p, &q2, &u).unwrap().sigma;
        prop_assert!(linalg::min_eigenvalue(&(s2 - s1)) >= -1e-10);
    }
}
