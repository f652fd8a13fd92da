mod common;

use common::*;
use ddpc_core::lti::{StateSpaceModel, TrajectoryData};
use ddpc_core::signal::{Construction, SignalMatrix};
use nalgebra::{DMatrix, DVector};

#[test]
fn hankel_and_page_column_counts() {
    let m = StateSpaceModel::paper_sec5();
    let d = offline(&m, 500, 0.01, 1);
    assert_eq!(SignalMatrix::build_hankel(&d, 4, 10).unwrap().m(), 487);
    assert_eq!(SignalMatrix::build_page(&d, 4, 10).unwrap().m(), 35);
    assert_eq!(SignalMatrix::build_page(&d.window(0, 28), 4, 10).unwrap().m(), 2);
}

#[test]
fn page_equals_subsampled_hankel() {
    let m = StateSpaceModel::paper_sec5();
    let d = offline(&m, 200, 0.01, 2);
    let h = SignalMatrix::build_hankel(&d, 4, 10).unwrap();
    let p = SignalMatrix::build_page(&d, 4, 10).unwrap();
    let idx: Vec<usize> = (0..p.m()).map(|i| i * 14).collect();
    assert_eq!(p.z(), h.z().select_columns(&idx));
    let c = SignalMatrix::build(&d, 4, 10, Construction::Columns).unwrap();
    assert_eq!(c.z(), p.z());
}

#[test]
fn noise_free_benchmark_data_has_the_required_rank() {
    let sm = sec5_signal(500, 0.0, 3);
    let r = sm.check_excitation(4);
    assert_eq!(r.required_rank, 32);
    assert_eq!(r.numeric_rank, 32);
    assert!(r.ok);
    assert_eq!(r.singular_values.len(), 32);
    assert!(r.singular_values.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn repeated_column_is_not_exciting() {
    let m = StateSpaceModel::paper_sec5();
    let d = offline(&m, 14, 0.0, 4);
    let sm = SignalMatrix::build_hankel(&d, 4, 10).unwrap();
    assert_eq!(sm.m(), 1);
    assert!(!sm.check_excitation(4).ok);
}

#[test]
fn noise_free_pinv_reproduces_true_trajectories() {
    let model = StateSpaceModel::paper_sec5();
    let sm = sec5_signal(500, 0.0, 5);
    let mut rng = test_rng(5);
    for _ in 0..100 {
        let win = true_window(&model, &mut rng);
        let (_, y) = sm.pinv_predict(&win.u_ini, &win.u_hat, &win.w, &win.y_ini).unwrap();
        assert!(rel_err(&y, &win.y_future) <= 1e-8);
    }
}

#[test]
fn data_column_query_reproduces_its_future() {
    let sm = sec5_signal(300, 0.0, 6);
    let j = 17;
    let col = sm.data_block().column(j).into_owned();
    let (nu0, nup, nw) = (4, 10, 14);
    let (_, y) = sm
        .pinv_predict(
            &col.rows(0, nu0).into_owned(),
            &col.rows(nu0, nup).into_owned(),
            &col.rows(nu0 + nup, nw).into_owned(),
            &col.rows(nu0 + nup + nw, 4).into_owned(),
        )
        .unwrap();
    let truth = sm.yf().column(j).into_owned();
    assert!(rel_err(&y, &truth) <= 1e-8);
}

#[test]
fn scalar_plant_pinv_prediction() {
    // y_{t+1} = 0.5 y_t + u_t with rich inputs.
    let mut rng = test_rng(7);
    let n = 200;
    let u: Vec<f64> = (0..n).map(|_| common::gaussian_vec(&mut rng, 1)[0]).collect();
    let mut y = vec![0.0];
    for k in 0..n - 1 {
        y.push(0.5 * y[k] + u[k]);
    }
    let d = TrajectoryData::new(
        DMatrix::from_row_slice(1, n, &u),
        DMatrix::zeros(0, n),
        DMatrix::from_row_slice(1, n, &y),
        DMatrix::from_row_slice(1, n, &y),
    )
    .unwrap();
    let sm = SignalMatrix::build_hankel(&d, 1, 1).unwrap();
    let one = |v: f64| DVector::from_element(1, v);
    let (_, yh) = sm.pinv_predict(&one(0.0), &one(0.0), &DVector::zeros(0), &one(1.0)).unwrap();
    assert!((yh[0] - 0.5).abs() < 1e-10);
}

#[test]
fn pinv_solution_has_least_norm() {
    let model = StateSpaceModel::paper_sec5();
    let sm = sec5_signal(300, 0.01, 8);
    let mut rng = test_rng(8);
    let win = true_window(&model, &mut rng);
    let (g, _) = sm.pinv_predict(&win.u_ini, &win.u_hat, &win.w, &win.y_ini).unwrap();
    let cond = sm.condition(&win.u_ini, &win.u_hat, &win.w, &win.y_ini).unwrap();
    let a = sm.data_block();
    // Any other solution g + n with n in the null space is longer.
    for _ in 0..10 {
        let z = gaussian_vec(&mut rng, sm.m());
        let n = &z - sm.data_pinv() * (&a * &z);
        let other = &g + &n;
        assert!((&a * &other - &cond).norm() <= 1e-8 * cond.norm());
        assert!(g.norm() <= other.norm());
    }
    // Ridge-regularized solve converges to the same point.
    let k = a.nrows();
    let ridge = (&a * a.transpose() + DMatrix::identity(k, k) * 1e-10).cholesky().unwrap().solve(&cond);
    let g_ridge = a.transpose() * ridge;
    assert!(rel_err(&g_ridge, &g) < 1e-5);
}

#[test]
fn page_and_hankel_agree_noise_free() {
    let model = StateSpaceModel::paper_sec5();
    let d = offline(&model, 1200, 0.0, 9);
    let h = SignalMatrix::build_hankel(&d, 4, 10).unwrap();
    let p = SignalMatrix::build_page(&d, 4, 10).unwrap();
    assert!(p.check_excitation(4).ok);
    let mut rng = test_rng(9);
    for _ in 0..20 {
        let win = true_window(&model, &mut rng);
        let (_, yh) = h.pinv_predict(&win.u_ini, &win.u_hat, &win.w, &win.y_ini).unwrap();
        let (_, yp) = p.pinv_predict(&win.u_ini, &win.u_hat, &win.w, &win.y_ini).unwrap();
        assert!(rel_err(&yp, &yh) <= 1e-8);
    }
}

#[test]
fn csv_import_and_cache_round_trip() {
    let model = StateSpaceModel::paper_sec5();
    let d = offline(&model, 100, 0.01, 10);
    let mut csv = Vec::new();
    d.write_csv(&mut csv).unwrap();
    let header = std::str::from_utf8(&csv).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "t,u_0,w_0,y0_0,y_0");
    let sm = SignalMatrix::from_csv(csv.as_slice(), 4, 10, Construction::Hankel).unwrap();
    assert_eq!(sm, SignalMatrix::build_hankel(&d, 4, 10).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.bin");
    sm.write_cache(std::fs::File::create(&path).unwrap()).unwrap();
    let back = SignalMatrix::read_cache(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back, sm);
    assert_eq!(back.digest(), sm.digest());
}
