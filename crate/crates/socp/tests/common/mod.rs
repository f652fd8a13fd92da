#![allow(dead_code)]

use ddpc_socp::{ConeProgram, SocConstraint};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller keeps the test free of extra distribution crates.
    let u1: f64 = rng.random_range(1e-12..1.0);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| gauss(rng))
}

fn randv(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| gauss(rng))
}

/// Random program that is feasible (strictly, around a random point) and bounded.
pub fn random_program(seed: u64, max_cone_dim: usize) -> ConeProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=50usize);
    let x0 = randv(&mut rng, n);

    let linear_only = rng.random_bool(0.2);
    let (p, f) = if linear_only {
        (DMatrix::zeros(n, n), randv(&mut rng, n))
    } else {
        let rank = rng.random_range(1..=n);
        let b = randn(&mut rng, rank, n);
        (b.tr_mul(&b) + DMatrix::identity(n, n) * 0.1, randv(&mut rng, n))
    };
    let mut prog = ConeProgram::new(p, f);

    let me = rng.random_range(0..=n.min(5) / 2);
    if me > 0 {
        let aeq = randn(&mut rng, me, n);
        let beq = &aeq * &x0;
        prog = prog.with_equalities(aeq, beq);
    }

    let mut g_rows = Vec::new();
    let mut h_vals = Vec::new();
    let mi = rng.random_range(0..=10usize);
    for _ in 0..mi {
        let row = randv(&mut rng, n);
        h_vals.push(row.dot(&x0) + rng.random_range(0.01..1.0));
        g_rows.push(row.transpose());
    }
    if linear_only {
        // Box around x0 keeps linear objectives bounded.
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            h_vals.push(x0[i] + 10.0);
            g_rows.push(e.transpose());
            h_vals.push(-x0[i] + 10.0);
            g_rows.push((-e).transpose());
        }
    }
    if !g_rows.is_empty() {
        let g = DMatrix::from_rows(&g_rows);
        prog = prog.with_inequalities(g, DVector::from_vec(h_vals));
    }

    let cones = rng.random_range(0..=3usize);
    for _ in 0..cones {
        let k = rng.random_range(1..max_cone_dim);
        let c = randn(&mut rng, k, n) / (n as f64).sqrt();
        let d = randv(&mut rng, k);
        let a = randv(&mut rng, n) * 0.1;
        let b = (&c * &x0 + &d).norm() - a.dot(&x0) + rng.random_range(0.1..2.0);
        prog = prog.with_soc(SocConstraint::new(c, d, a, b));
    }
    prog
}
