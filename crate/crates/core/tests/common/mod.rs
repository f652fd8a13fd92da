#![allow(dead_code)]

use std::sync::Arc;

use ddpc_core::lti::{self, Distribution, Excitation, StateSpaceModel, TrajectoryData};
use ddpc_core::rng::{self, Purpose};
use ddpc_core::signal::{QueryCondition, SignalMatrix};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const L0: usize = 4;
pub const LP: usize = 10;

pub fn offline(model: &StateSpaceModel, n: usize, sigma2: f64, seed: u64) -> TrajectoryData {
    let exc = Excitation {
        length: n,
        input_variance: 1.0,
        disturbance_variance: 1.0,
        sigma2,
        distribution: Distribution::Gaussian,
    };
    lti::collect_offline(model, &exc, seed).unwrap()
}

pub fn sec5_signal(n: usize, sigma2: f64, seed: u64) -> Arc<SignalMatrix> {
    let m = StateSpaceModel::paper_sec5();
    Arc::new(SignalMatrix::build_hankel(&offline(&m, n, sigma2, seed), L0, LP).unwrap())
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// A noise-free length-L trajectory of the model from a random state.
pub struct TrueWindow {
    pub u_ini: DVector<f64>,
    pub u_hat: DVector<f64>,
    pub w: DVector<f64>,
    pub y_ini: DVector<f64>,
    pub y_future: DVector<f64>,
}

pub fn true_window(model: &StateSpaceModel, rng: &mut ChaCha8Rng) -> TrueWindow {
    let l = L0 + LP;
    let x0 = gaussian_vec(rng, model.n_x());
    let u = DMatrix::from_fn(model.n_u(), l, |_, _| rng.sample(StandardNormal));
    let w = DMatrix::from_fn(model.n_w(), l, |_, _| rng.sample(StandardNormal));
    let t = lti::simulate(model, &x0, &u, &w, &DMatrix::zeros(model.n_y(), l)).unwrap();
    let flat = |m: &DMatrix<f64>, from: usize, len: usize| DVector::from_iterator(m.nrows() * len, m.columns(from, len).iter().copied());
    TrueWindow {
        u_ini: flat(&u, 0, L0),
        u_hat: flat(&u, L0, LP),
        w: flat(&w, 0, l),
        y_ini: flat(&t.y0, 0, L0),
        y_future: flat(&t.y0, L0, LP),
    }
}

pub fn query(win: &TrueWindow, p: DMatrix<f64>, sigma_w: DMatrix<f64>) -> QueryCondition {
    QueryCondition {
        u_ini: win.u_ini.clone(),
        y_ini: win.y_ini.clone(),
        p,
        w_bar: win.w.clone(),
        sigma_w,
    }
}

pub fn test_rng(seed: u64) -> ChaCha8Rng {
    rng::stream(seed, 0, Purpose::Test)
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
