//! Primal-dual interior-point method on the homogeneous self-dual embedding.
//!
//! The program is mapped to the conic standard form
//!
//! ```text
//! min ½ xᵀPx + qᵀx   s.t.   A x + s = b,   s ∈ K = {0}ᵐᵉ × ℝ₊ᵐⁱ × Q₁ × … × Qₖ
//! ```
//!
//! and the embedding variables `(x, s, z, τ, κ)` are driven to
//!
//! ```text
//! P x + Aᵀz + q τ = 0
//! A x + s − b τ   = 0
//! qᵀx + bᵀz + xᵀPx/τ + κ = 0
//! ```
//!
//! with Mehrotra predictor-corrector steps under Nesterov–Todd scaling. A cone
//! constraint `‖C z + d‖ ≤ aᵀz + b` occupies the rows `[−aᵀ; −C]` of `A` with
//! right-hand side `[b; d]`.

use nalgebra::{DMatrix, DVector};

use crate::cones::{ConeLayout, Scaling};
use crate::kkt::{Border, KktCache, KktSystem, Rhs};
use crate::program::{ConeProgram, ProgramError};

const POLISH_ITERS: usize = 3;
const POLISH_FACTOR: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
    Numerical,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Optimal => "optimal",
            Status::Infeasible => "infeasible",
            Status::Unbounded => "unbounded",
            Status::MaxIter => "max_iter",
            Status::Numerical => "numerical",
        }
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Relative residuals used by the termination test.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

/// Multipliers in the user's constraint layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Duals {
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    /// One `(u₀, u₁)` vector per cone, dual to `(aᵀz + b, C z + d)`.
    pub soc: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub z: DVector<f64>,
    pub duals: Duals,
    pub status: Status,
    pub objective: f64,
    pub iterations: usize,
    pub residuals: Residuals,
}

/// Optional primal/dual starting point, shifted into the cone interior before use.
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub z: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub tol: f64,
    pub max_iter: usize,
    pub warm_start: Option<WarmStart>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            warm_start: None,
        }
    }
}

pub fn solve(prog: &ConeProgram, tol: f64, max_iter: usize) -> Result<Solution, ProgramError> {
    solve_with(
        prog,
        &Settings {
            tol,
            max_iter,
            warm_start: None,
        },
    )
}

struct StandardForm {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    layout: ConeLayout,
    /// The cost is divided by this factor; duals are multiplied back.
    cost_scale: f64,
}

impl StandardForm {
    fn from_program(prog: &ConeProgram) -> Self {
        let n = prog.num_vars();
        let me = prog.aeq.nrows();
        let mi = prog.g.nrows();
        let dims: Vec<usize> = prog.socs.iter().map(|s| s.dim()).collect();
        let layout = ConeLayout::new(me, mi, &dims);
        let mut a = DMatrix::zeros(layout.m, n);
        let mut b = DVector::zeros(layout.m);
        a.view_mut((0, 0), (me, n)).copy_from(&prog.aeq);
        b.rows_mut(0, me).copy_from(&prog.beq);
        a.view_mut((me, 0), (mi, n)).copy_from(&prog.g);
        b.rows_mut(me, mi).copy_from(&prog.h);
        for (soc, &(o, d)) in prog.socs.iter().zip(&layout.socs) {
            a.row_mut(o).copy_from(&(-soc.a.transpose()));
            b[o] = soc.b;
            a.view_mut((o + 1, 0), (d - 1, n)).copy_from(&(-&soc.c));
            b.rows_mut(o + 1, d - 1).copy_from(&soc.d);
        }
        // Normalizing the cost makes iterates invariant to positive cost scaling.
        let cost_scale = prog.p.amax().max(prog.f.amax());
        let cost_scale = if cost_scale > 0.0 && cost_scale.is_finite() { cost_scale } else { 1.0 };
        let p = (&prog.p + prog.p.transpose()) * (0.5 / cost_scale);
        Self {
            p,
            q: &prog.f / cost_scale,
            a,
            b,
            layout,
            cost_scale,
        }
    }
}

#[derive(Clone)]
struct Iterate {
    x: DVector<f64>,
    s: DVector<f64>,
    z: DVector<f64>,
    tau: f64,
    kappa: f64,
}

struct Direction {
    x: DVector<f64>,
    s: DVector<f64>,
    z: DVector<f64>,
    tau: f64,
    kappa: f64,
}

struct Terms<'a> {
    dx: &'a DVector<f64>,
    dz: &'a DVector<f64>,
    dtau: f64,
    ds: &'a DVector<f64>,
    dkappa: f64,
}

pub fn solve_with(prog: &ConeProgram, settings: &Settings) -> Result<Solution, ProgramError> {
    prog.validate()?;
    let sf = StandardForm::from_program(prog);
    let layout = &sf.layout;
    let cache = KktCache::new(&sf.a, layout);
    let tol = settings.tol;

    let Some(mut it) = initial_point(&sf, &cache, settings.warm_start.as_ref()) else {
        return Ok(package(prog, &sf, None, Status::Numerical, 0, Residuals::default()));
    };

    let b_norm = sf.b.amax();
    let q_norm = sf.q.amax();
    let degree = layout.degree() as f64;
    let mut residuals = Residuals::default();
    let mut status = Status::MaxIter;
    let mut iterations = 0;
    let mut stalls = 0;
    // First iterate that met the relative criterion, kept while polishing.
    let mut converged: Option<(Iterate, Residuals, usize)> = None;

    for iter in 0..=settings.max_iter {
        iterations = iter;
        let px = &sf.p * &it.x;
        let atz = sf.a.tr_mul(&it.z);
        let ax = &sf.a * &it.x;
        let xpx = it.x.dot(&px);
        let rx = &px + &atz + &sf.q * it.tau;
        let rz = &ax + &it.s - &sf.b * it.tau;
        let rtau = sf.q.dot(&it.x) + sf.b.dot(&it.z) + xpx / it.tau + it.kappa;

        if rx.iter().chain(rz.iter()).any(|v| !v.is_finite()) || !rtau.is_finite() {
            status = Status::Numerical;
            break;
        }

        residuals = termination_residuals(&sf, &it, &px, &atz, &ax, xpx, b_norm, q_norm);
        if residuals.primal <= tol && residuals.dual <= tol && residuals.gap <= tol {
            // Polish until complementarity also holds in absolute terms. It is
            // measured on the normalized cost so the stopping iteration does
            // not depend on a positive rescaling of the objective.
            let complementarity = layout.dot(&it.s, &it.z) / (it.tau * it.tau);
            let polished = converged.as_ref().map_or(0, |c| iter - c.2);
            if complementarity <= POLISH_FACTOR * tol || polished >= POLISH_ITERS {
                status = Status::Optimal;
                break;
            }
            if converged.is_none() {
                converged = Some((it.clone(), residuals, iter));
            }
        }
        if iter >= 5 {
            if let Some(cert) = infeasibility(&sf, &it, &px, &atz, &ax, tol) {
                status = cert;
                break;
            }
        }
        if iter == settings.max_iter {
            break;
        }

        let Some(scaling) = Scaling::nesterov_todd(layout, &it.s, &it.z) else {
            status = Status::Numerical;
            break;
        };
        let lambda = scaling.apply_w(layout, &it.z);
        let border = Border {
            xi: &it.x / it.tau,
            kappa_over_tau: it.kappa / it.tau,
        };
        let Some(kkt) = KktSystem::factor(&sf.p, &sf.a, &sf.q, &sf.b, layout, &scaling, &cache, Some(border)) else {
            status = Status::Numerical;
            break;
        };
        let mu = (layout.dot(&it.s, &it.z) + it.tau * it.kappa) / (degree + 1.0);

        // Predictor.
        let lam_sq = layout.jordan_prod(&lambda, &lambda);
        let aff = newton(
            &sf,
            &it,
            &scaling,
            &kkt,
            &lambda,
            &Terms {
                dx: &rx,
                dz: &rz,
                dtau: rtau,
                ds: &lam_sq,
                dkappa: it.tau * it.kappa,
            },
        );
        let Some(aff) = aff else {
            status = Status::Numerical;
            break;
        };
        let alpha_aff = step_length(layout, &it, &aff).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3);

        // Corrector with the second-order term.
        let ws_aff = scaling.apply_w_inv(layout, &aff.s);
        let wz_aff = scaling.apply_w(layout, &aff.z);
        let mut ds = &lam_sq + layout.jordan_prod(&ws_aff, &wz_aff);
        layout.add_identity(&mut ds, -sigma * mu);
        let dkappa = it.tau * it.kappa + aff.tau * aff.kappa - sigma * mu;
        let scale = 1.0 - sigma;
        let rx_c = &rx * scale;
        let rz_c = &rz * scale;
        let dir = newton(
            &sf,
            &it,
            &scaling,
            &kkt,
            &lambda,
            &Terms {
                dx: &rx_c,
                dz: &rz_c,
                dtau: rtau * scale,
                ds: &ds,
                dkappa,
            },
        );
        let Some(dir) = dir else {
            status = Status::Numerical;
            break;
        };
        let alpha = (0.99 * step_length(layout, &it, &dir)).min(1.0);
        if !(alpha > 1e-12) {
            stalls += 1;
            if stalls > 3 {
                status = Status::Numerical;
                break;
            }
            continue;
        }
        it.x += &dir.x * alpha;
        it.s += &dir.s * alpha;
        it.z += &dir.z * alpha;
        it.tau += dir.tau * alpha;
        it.kappa += dir.kappa * alpha;
        for i in 0..layout.n_zero {
            it.s[i] = 0.0;
        }
        if !(it.tau > 0.0) {
            status = Status::Numerical;
            break;
        }
    }

    if status != Status::Optimal {
        if let Some((saved, res, at)) = converged {
            it = saved;
            residuals = res;
            iterations = at;
            status = Status::Optimal;
        }
    }
    Ok(package(prog, &sf, Some(&it), status, iterations, residuals))
}

fn newton(
    sf: &StandardForm,
    it: &Iterate,
    scaling: &Scaling,
    kkt: &KktSystem<'_>,
    lambda: &DVector<f64>,
    t: &Terms<'_>,
) -> Option<Direction> {
    let layout = &sf.layout;
    let ws = scaling.apply_w(layout, &layout.jordan_div(lambda, t.ds));
    let r1 = -t.dx;
    let r2 = -t.dz + &ws;
    let (dx, dz, dtau) = kkt.solve(&Rhs {
        r1: &r1,
        r2: &r2,
        r3: -t.dtau + t.dkappa / it.tau,
    })?;
    let mut ds = -(&ws + scaling.apply_h(layout, &dz));
    for i in 0..layout.n_zero {
        ds[i] = 0.0;
    }
    let dkappa = (-t.dkappa - it.kappa * dtau) / it.tau;
    Some(Direction {
        x: dx,
        s: ds,
        z: dz,
        tau: dtau,
        kappa: dkappa,
    })
}

fn step_length(layout: &ConeLayout, it: &Iterate, d: &Direction) -> f64 {
    let mut alpha = layout.max_step(&it.s, &d.s).min(layout.max_step(&it.z, &d.z));
    if d.tau < 0.0 {
        alpha = alpha.min(-it.tau / d.tau);
    }
    if d.kappa < 0.0 {
        alpha = alpha.min(-it.kappa / d.kappa);
    }
    alpha
}

fn initial_point(sf: &StandardForm, cache: &KktCache, warm: Option<&WarmStart>) -> Option<Iterate> {
    let layout = &sf.layout;
    let scaling = Scaling::identity(layout);
    let kkt = KktSystem::factor(&sf.p, &sf.a, &sf.q, &sf.b, layout, &scaling, cache, None)?;
    // Primal start minimizes ½xᵀPx + ½‖Ax − b‖²; dual start minimizes
    // ½‖z‖² subject to (approximate) stationarity.
    let zeros_n = DVector::zeros(sf.q.len());
    let zeros_m = DVector::zeros(layout.m);
    let (mut x, z_primal, _) = kkt.solve(&Rhs {
        r1: &zeros_n,
        r2: &sf.b,
        r3: 0.0,
    })?;
    let neg_q = -&sf.q;
    let (_, mut z, _) = kkt.solve(&Rhs {
        r1: &neg_q,
        r2: &zeros_m,
        r3: 0.0,
    })?;
    if let Some(w) = warm {
        if w.z.len() == x.len() && w.z.iter().all(|v| v.is_finite()) {
            x = w.z.clone();
        }
    }
    let mut s = if warm.is_some() {
        &sf.b - &sf.a * &x
    } else {
        -&z_primal
    };
    for i in 0..layout.n_zero {
        s[i] = 0.0;
    }
    shift_interior(layout, &mut s);
    shift_interior(layout, &mut z);
    Some(Iterate {
        x,
        s,
        z,
        tau: 1.0,
        kappa: 1.0,
    })
}

fn shift_interior(layout: &ConeLayout, v: &mut DVector<f64>) {
    if layout.degree() == 0 {
        return;
    }
    let t = -layout.min_eig(v);
    let nrm = v.rows(layout.n_zero, layout.m - layout.n_zero).norm();
    if t >= -1e-8 * nrm.max(1.0) {
        layout.add_identity(v, 1.0 + t);
    }
}

#[allow(clippy::too_many_arguments)]
fn termination_residuals(
    sf: &StandardForm,
    it: &Iterate,
    px: &DVector<f64>,
    atz: &DVector<f64>,
    ax: &DVector<f64>,
    xpx: f64,
    b_norm: f64,
    q_norm: f64,
) -> Residuals {
    let tau = it.tau;
    let pres = (ax + &it.s - &sf.b * tau).amax() / tau;
    let pscale = b_norm.max(ax.amax() / tau).max(it.s.amax() / tau).max(1.0);
    let dres = (px + atz + &sf.q * tau).amax() / tau;
    let dscale = q_norm.max(px.amax() / tau).max(atz.amax() / tau).max(1.0);
    let quad = xpx / (tau * tau);
    let pobj = 0.5 * quad + sf.q.dot(&it.x) / tau;
    let dobj = -0.5 * quad - sf.b.dot(&it.z) / tau;
    let gap_abs = (pobj - dobj).abs();
    let gap_rel = gap_abs / pobj.abs().max(dobj.abs()).max(1e-300);
    Residuals {
        primal: pres / pscale,
        dual: dres / dscale,
        gap: gap_abs.min(gap_rel),
    }
}

fn infeasibility(
    sf: &StandardForm,
    it: &Iterate,
    px: &DVector<f64>,
    atz: &DVector<f64>,
    ax: &DVector<f64>,
    tol: f64,
) -> Option<Status> {
    let btz = sf.b.dot(&it.z);
    if btz < 0.0 {
        let z_scale = it.z.amax().max(1.0);
        if atz.amax() <= tol * (-btz) && -btz > tol * z_scale && it.tau < it.kappa {
            return Some(Status::Infeasible);
        }
    }
    let qtx = sf.q.dot(&it.x);
    if qtx < 0.0 {
        let res = px.amax().max((ax + &it.s).amax());
        let x_scale = it.x.amax().max(1.0);
        if res <= tol * (-qtx) && -qtx > tol * x_scale && it.tau < it.kappa {
            return Some(Status::Unbounded);
        }
    }
    None
}

fn package(
    prog: &ConeProgram,
    sf: &StandardForm,
    it: Option<&Iterate>,
    status: Status,
    iterations: usize,
    residuals: Residuals,
) -> Solution {
    let n = prog.num_vars();
    let layout = &sf.layout;
    let (x, zd) = match it {
        Some(it) => {
            // Certificates are reported unnormalized; solutions divide out τ.
            let scale = match status {
                Status::Infeasible | Status::Unbounded => 1.0,
                _ => 1.0 / it.tau,
            };
            (&it.x * scale, &it.z * (scale * sf.cost_scale))
        }
        None => (DVector::zeros(n), DVector::zeros(layout.m)),
    };
    let duals = Duals {
        eq: zd.rows(0, layout.n_zero).clone_owned(),
        ineq: zd.rows(layout.n_zero, layout.n_nonneg).clone_owned(),
        soc: layout
            .socs
            .iter()
            .map(|&(o, d)| zd.rows(o, d).clone_owned())
            .collect(),
    };
    let objective = match status {
        Status::Infeasible => f64::INFINITY,
        Status::Unbounded => f64::NEG_INFINITY,
        _ => prog.objective(&x),
    };
    Solution {
        z: x,
        duals,
        status,
        objective,
        iterations,
        residuals,
    }
}
