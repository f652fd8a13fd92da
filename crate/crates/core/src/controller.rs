//! Receding-horizon stochastic DDPC.
//!
//! Each step minimizes the expected quadratic cost of the predicted output
//! distribution subject to input constraints and second-order cone
//! tightenings of the output chance constraints, applies the first input and
//! feeds the measurement to the non-minimal-state filter. The three
//! [`Variant`]s switch off the expected-cost terms, the tightening and the
//! filter one by one.

use std::io::Write;
use std::str::FromStr;

use ddpc_socp::{ConeProgram, Settings, SocConstraint, Status};
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{check_len, DdpcError, Result};
use crate::estimator::{FilterMode, FilterState, TraceEntry};
use crate::linalg;
use crate::lti::{self, NoiseSpec, StateSpaceModel};
use crate::predictor::{self, AffineMaps, PredictorParams, RegularizerKind};
use crate::rng::{self, Purpose};
use crate::signal::{hex, QueryCondition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Nominal cost, raw initial condition, untightened constraints.
    NDdpc,
    /// [`Variant::NDdpc`] with the filtered initial condition.
    KfDdpc,
    /// Expected cost, filtered initial condition and SOC tightening.
    SDdpc,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::NDdpc, Variant::KfDdpc, Variant::SDdpc];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NDdpc => "n_ddpc",
            Variant::KfDdpc => "kf_ddpc",
            Variant::SDdpc => "s_ddpc",
        }
    }

    pub fn filtered(self) -> bool {
        self != Variant::NDdpc
    }

    pub fn stochastic(self) -> bool {
        self == Variant::SDdpc
    }
}

impl FromStr for Variant {
    type Err = DdpcError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| DdpcError::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Tightening {
    #[default]
    Elementwise,
    Setwise,
}

impl Tightening {
    pub fn as_str(self) -> &'static str {
        match self {
            Tightening::Elementwise => "elementwise",
            Tightening::Setwise => "setwise",
        }
    }
}

impl FromStr for Tightening {
    type Err = DdpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elementwise" => Ok(Tightening::Elementwise),
            "setwise" => Ok(Tightening::Setwise),
            _ => Err(DdpcError::InvalidArgument(format!("unknown tightening {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistributionMode {
    #[default]
    Chebyshev,
    Gaussian,
}

impl DistributionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DistributionMode::Chebyshev => "chebyshev",
            DistributionMode::Gaussian => "gaussian",
        }
    }
}

impl FromStr for DistributionMode {
    type Err = DdpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chebyshev" => Ok(DistributionMode::Chebyshev),
            "gaussian" => Ok(DistributionMode::Gaussian),
            _ => Err(DdpcError::InvalidArgument(format!("unknown distribution mode {s:?}"))),
        }
    }
}

/// Controller settings. The expected-cost regularizer weight is `tr(Q̄T)` and
/// is deliberately not configurable.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlConfig {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub l0: usize,
    pub lp: usize,
    pub p: f64,
    pub tightening: Tightening,
    pub distribution_mode: DistributionMode,
    pub variant: Variant,
    pub filter_mode: FilterMode,
    pub solver_tol: f64,
    pub max_iter: usize,
    /// Consecutive failed steps tolerated before a run is aborted.
    pub retry_budget: usize,
}

impl ControlConfig {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, l0: usize, lp: usize, variant: Variant) -> Self {
        Self {
            q,
            r,
            l0,
            lp,
            p: 0.95,
            tightening: Tightening::Elementwise,
            distribution_mode: DistributionMode::Chebyshev,
            variant,
            filter_mode: FilterMode::PaperLiteral,
            solver_tol: 1e-8,
            max_iter: 200,
            retry_budget: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(DdpcError::InvalidArgument(format!("p must lie in (0, 1), got {}", self.p)));
        }
        if self.l0 == 0 || self.lp == 0 {
            return Err(DdpcError::InvalidArgument("L0 and Lp must be positive".into()));
        }
        check_len("Q", self.q.nrows(), self.q.ncols())?;
        check_len("R", self.r.nrows(), self.r.ncols())?;
        linalg::check_psd("Q", &self.q, 1e-12)?;
        linalg::check_psd("R", &self.r, 1e-12)
    }

    pub fn q_bar(&self) -> DMatrix<f64> {
        linalg::kron_identity(self.lp, &self.q)
    }

    pub fn r_bar(&self) -> DMatrix<f64> {
        linalg::kron_identity(self.lp, &self.r)
    }

    pub fn mu(&self, n_y: usize) -> Result<f64> {
        mu_factor(self.p, n_y, self.tightening, self.distribution_mode)
    }
}

/// Back-off factor turning a standard deviation into a chance-constraint margin.
pub fn mu_factor(p: f64, n_y: usize, tightening: Tightening, mode: DistributionMode) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(DdpcError::InvalidArgument(format!("p must lie in (0, 1), got {p}")));
    }
    let n = n_y as f64;
    Ok(match (mode, tightening) {
        (DistributionMode::Chebyshev, Tightening::Elementwise) => (1.0 / (1.0 - p) - 1.0).sqrt(),
        (DistributionMode::Chebyshev, Tightening::Setwise) => (n / (1.0 - p)).sqrt(),
        (DistributionMode::Gaussian, Tightening::Elementwise) => Normal::standard().inverse_cdf(p),
        (DistributionMode::Gaussian, Tightening::Setwise) => {
            let chi = ChiSquared::new(n).map_err(|e| DdpcError::InvalidArgument(e.to_string()))?;
            chi.inverse_cdf(p).sqrt()
        }
    })
}

/// `{x : H x ≤ q}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub h: DMatrix<f64>,
    pub q: DVector<f64>,
}

impl Polytope {
    pub fn new(h: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        check_len("polytope rows", h.nrows(), q.len())?;
        Ok(Self { h, q })
    }

    /// Coordinate bounds; infinite sides produce no row.
    pub fn from_box(lo: &DVector<f64>, hi: &DVector<f64>) -> Result<Self> {
        check_len("box bounds", lo.len(), hi.len())?;
        let n = lo.len();
        let mut rows: Vec<(usize, f64, f64)> = Vec::new();
        for i in 0..n {
            if lo[i] > hi[i] {
                return Err(DdpcError::InvalidArgument(format!("empty box in coordinate {i}")));
            }
            if hi[i].is_finite() {
                rows.push((i, 1.0, hi[i]));
            }
            if lo[i].is_finite() {
                rows.push((i, -1.0, -lo[i]));
            }
        }
        let mut h = DMatrix::zeros(rows.len(), n);
        let mut q = DVector::zeros(rows.len());
        for (k, &(i, s, b)) in rows.iter().enumerate() {
            h[(k, i)] = s;
            q[k] = b;
        }
        Ok(Self { h, q })
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    /// `Σᵢ max(hᵢᵀx − qᵢ, 0)`.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        (&self.h * x - &self.q).iter().map(|v| v.max(0.0)).sum()
    }
}

/// Per-step polytopes, held at the last entry beyond the listed horizon.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Constraints {
    #[default]
    Unconstrained,
    Constant(Polytope),
    TimeVarying(Vec<Polytope>),
}

pub type OutputConstraints = Constraints;
pub type InputConstraints = Constraints;

impl Constraints {
    pub fn at(&self, t: usize) -> Option<&Polytope> {
        match self {
            Constraints::Unconstrained => None,
            Constraints::Constant(p) => Some(p),
            Constraints::TimeVarying(v) => v.get(t).or(v.last()),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let all: Vec<&Polytope> = match self {
            Constraints::Unconstrained => vec![],
            Constraints::Constant(p) => vec![p],
            Constraints::TimeVarying(v) => v.iter().collect(),
        };
        for p in all {
            check_len("constraint columns", dim, p.dim())?;
            check_len("constraint rows", p.h.nrows(), p.q.len())?;
        }
        Ok(())
    }

    /// Block-diagonal `H̄` and stacked `q̄` for steps `t … t+lp−1`, or `None`
    /// when unconstrained.
    pub fn stacked(&self, t: usize, lp: usize) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let blocks: Vec<&Polytope> = (0..lp).map(|k| self.at(t + k)).collect::<Option<_>>()?;
        let rows: usize = blocks.iter().map(|p| p.h.nrows()).sum();
        let dim = blocks[0].dim();
        let mut h = DMatrix::zeros(rows, dim * lp);
        let mut q = DVector::zeros(rows);
        let mut r0 = 0;
        for (k, p) in blocks.iter().enumerate() {
            let n = p.h.nrows();
            h.view_mut((r0, k * dim), (n, dim)).copy_from(&p.h);
            q.rows_mut(r0, n).copy_from(&p.q);
            r0 += n;
        }
        Some((h, q))
    }

    pub fn violation(&self, t: usize, x: &DVector<f64>) -> f64 {
        self.at(t).map_or(0.0, |p| p.violation(x))
    }
}

/// Output reference, held at its last sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    samples: Vec<DVector<f64>>,
}

impl Reference {
    pub fn new(samples: Vec<DVector<f64>>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(DdpcError::InvalidArgument("reference needs at least one sample".into()));
        };
        let n = first.len();
        for s in &samples {
            check_len("reference sample", n, s.len())?;
        }
        Ok(Self { samples })
    }

    pub fn constant(r: DVector<f64>) -> Self {
        Self { samples: vec![r] }
    }

    pub fn n_y(&self) -> usize {
        self.samples[0].len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn at(&self, t: usize) -> &DVector<f64> {
        &self.samples[t.min(self.samples.len() - 1)]
    }

    /// `col(r_t, …, r_{t+lp−1})`.
    pub fn window(&self, t: usize, lp: usize) -> DVector<f64> {
        let parts: Vec<&DVector<f64>> = (0..lp).map(|k| self.at(t + k)).collect();
        linalg::vcat(&parts)
    }
}

/// `J(û) = ½ ûᵀPû + fᵀû + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadCost {
    pub p: DMatrix<f64>,
    pub f: DVector<f64>,
    pub constant: f64,
    /// `tr(Q̄T)`, zero for the nominal variants.
    pub weight: f64,
}

impl QuadCost {
    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.p * u)) + self.f.dot(u) + self.constant
    }
}

/// `‖û‖²_R̄ + ‖Y_u û + y_0 − r‖²_Q̄`, plus `tr(Q̄T)‖G_u û + g_0‖² +
/// tr(Q̄(Γ̂PΓ̂ᵀ + Γ_wΣ_wΓ_wᵀ))` for [`Variant::SDdpc`].
pub fn assemble_cost(
    params: &PredictorParams,
    maps: &AffineMaps,
    r: &DVector<f64>,
    q: &QueryCondition,
    cfg: &ControlConfig,
) -> Result<QuadCost> {
    check_len("reference window", maps.y_0.len(), r.len())?;
    check_len("Q̄", maps.y_0.len(), cfg.q.nrows() * cfg.lp)?;
    check_len("R̄", maps.y_u.ncols(), cfg.r.nrows() * cfg.lp)?;
    let q_bar = cfg.q_bar();
    let e0 = &maps.y_0 - r;
    let qy = &q_bar * &maps.y_u;
    let mut p = (cfg.r_bar() + maps.y_u.transpose() * &qy) * 2.0;
    let mut f = qy.transpose() * &e0 * 2.0;
    let mut constant = e0.dot(&(&q_bar * &e0));
    let mut weight = 0.0;
    if cfg.variant.stochastic() {
        weight = (&q_bar * &params.t).trace();
        p += maps.g_u.transpose() * &maps.g_u * (2.0 * weight);
        f += maps.g_u.transpose() * &maps.g_0 * (2.0 * weight);
        constant += weight * maps.g_0.norm_squared() + (&q_bar * params.base_covariance(q)).trace();
    }
    Ok(QuadCost {
        p: linalg::symmetrize(&p),
        f,
        constant,
        weight,
    })
}

/// Rowwise `q̄ − H̄(Y_u û + y_0) ≥ μ(c₁ + c₂‖G_u û + g_0‖)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TighteningSet {
    pub h_bar: DMatrix<f64>,
    pub q_bar: DVector<f64>,
    pub mu: f64,
    pub c1: DVector<f64>,
    pub c2: DVector<f64>,
    /// Negative diagonal entries clipped before the square root.
    pub floored: usize,
}

impl TighteningSet {
    pub fn rows(&self) -> usize {
        self.q_bar.len()
    }

    /// Whether the norm term is present, so the program needs a cone.
    pub fn has_cone(&self) -> bool {
        self.mu > 0.0 && self.c2.iter().any(|&c| c > 0.0)
    }

    /// Slack of every row at `û`; nonnegative when feasible.
    pub fn margin(&self, maps: &AffineMaps, u: &DVector<f64>) -> DVector<f64> {
        let y = &maps.y_u * u + &maps.y_0;
        let g = (&maps.g_u * u + &maps.g_0).norm();
        &self.q_bar - &self.h_bar * y - (&self.c1 + &self.c2 * g) * self.mu
    }

    /// `c₁ + c₂‖g‖`, the convex upper bound on the row standard deviations.
    pub fn spread(&self, g_norm: f64) -> DVector<f64> {
        &self.c1 + &self.c2 * g_norm
    }

    /// `√diag(H̄ΣH̄ᵀ)`, the exact row standard deviations.
    pub fn exact_spread(&self, sigma: &DMatrix<f64>) -> DVector<f64> {
        let d = (&self.h_bar * sigma * self.h_bar.transpose()).diagonal();
        d.map(|v| v.max(0.0).sqrt())
    }
}

/// Tightened output constraints for the window starting at `t`; `μ = 0`
/// yields the nominal polytope on `ȳ`.
pub fn assemble_tightening(
    params: &PredictorParams,
    maps: &AffineMaps,
    oc: &OutputConstraints,
    t: usize,
    q: &QueryCondition,
    mu: f64,
) -> Result<Option<TighteningSet>> {
    let ny = params.gamma_hat.nrows() / params.signal_matrix().lp();
    oc.validate(ny)?;
    let Some((h_bar, q_bar)) = oc.stacked(t, params.signal_matrix().lp()) else {
        return Ok(None);
    };
    check_len("H̄ columns", maps.y_0.len(), h_bar.ncols())?;
    let rows = q_bar.len();
    let mut floored = 0;
    let mut root = |m: DMatrix<f64>| {
        let d = (&h_bar * m * h_bar.transpose()).diagonal();
        d.map(|v| {
            if v < 0.0 {
                floored += 1;
                0.0
            } else {
                v.sqrt()
            }
        })
    };
    let (c1, c2) = if mu > 0.0 {
        (root(params.base_covariance(q)), root(params.t.clone()))
    } else {
        (DVector::zeros(rows), DVector::zeros(rows))
    };
    if floored > 0 {
        log::warn!("{floored} negative variance entries floored in the constraint tightening");
    }
    Ok(Some(TighteningSet {
        h_bar,
        q_bar,
        mu,
        c1,
        c2,
        floored,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Optimal,
    /// Solved only after softening the output constraints.
    Softened,
}

impl StepStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StepStatus::Optimal => "optimal",
            StepStatus::Softened => "softened",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub u_hat: DVector<f64>,
    pub u_applied: DVector<f64>,
    pub g: DVector<f64>,
    pub y_bar: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// Variant objective at `û`, without any slack penalty.
    pub expected_cost: f64,
    /// `‖û‖²_R̄ + ‖ȳ − r‖²_Q̄`.
    pub nominal_cost: f64,
    pub status: StepStatus,
    pub solver_status: Status,
    pub slack: f64,
    pub iterations: usize,
    pub tightening: Option<TighteningSet>,
}

/// Everything a step needs besides the predictor.
#[derive(Debug, Clone)]
pub struct StepContext<'a> {
    pub query: &'a QueryCondition,
    pub oc: &'a OutputConstraints,
    pub ic: &'a InputConstraints,
    /// Stacked reference window.
    pub reference: &'a DVector<f64>,
    /// Closed-loop time of the first predicted sample.
    pub t: usize,
    /// Input sequence at which smm resolves its weight.
    pub guess: Option<&'a DVector<f64>>,
}

fn input_rows(ic: &InputConstraints, t: usize, n_u: usize, lp: usize) -> Result<Option<(DMatrix<f64>, DVector<f64>)>> {
    ic.validate(n_u)?;
    Ok(ic.stacked(t, lp))
}

/// Program in `z = col(û, τ, s)`: `τ` bounds `‖G_u û + g_0‖` when the
/// tightening has a norm term and `s ≥ 0` softens the output rows.
fn build_program(
    cost: &QuadCost,
    maps: &AffineMaps,
    tight: Option<&TighteningSet>,
    inputs: Option<&(DMatrix<f64>, DVector<f64>)>,
    penalty: Option<f64>,
) -> (ConeProgram, usize, usize) {
    let nu = cost.f.len();
    let cone = tight.is_some_and(|t| t.has_cone());
    let n_tau = usize::from(cone);
    let n_rows = tight.map_or(0, |t| t.rows());
    let n_s = if penalty.is_some() { n_rows } else { 0 };
    let n = nu + n_tau + n_s;
    let mut p = DMatrix::zeros(n, n);
    p.view_mut((0, 0), (nu, nu)).copy_from(&cost.p);
    let mut f = DVector::zeros(n);
    f.rows_mut(0, nu).copy_from(&cost.f);
    if let Some(rho) = penalty {
        f.rows_mut(nu + n_tau, n_s).fill(rho);
    }
    let n_in = inputs.map_or(0, |(h, _)| h.nrows());
    let m = n_rows + n_s + n_in;
    let mut g = DMatrix::zeros(m, n);
    let mut h = DVector::zeros(m);
    if let Some(tg) = tight {
        let hy = &tg.h_bar * &maps.y_u;
        g.view_mut((0, 0), (n_rows, nu)).copy_from(&hy);
        h.rows_mut(0, n_rows)
            .copy_from(&(&tg.q_bar - &tg.h_bar * &maps.y_0 - &tg.c1 * tg.mu));
        if cone {
            g.view_mut((0, nu), (n_rows, 1)).copy_from(&(&tg.c2 * tg.mu));
        }
        for i in 0..n_s {
            g[(i, nu + n_tau + i)] = -1.0;
            g[(n_rows + i, nu + n_tau + i)] = -1.0;
        }
    }
    if let Some((hu, qu)) = inputs {
        let r0 = n_rows + n_s;
        g.view_mut((r0, 0), (n_in, nu)).copy_from(hu);
        h.rows_mut(r0, n_in).copy_from(qu);
    }
    let mut prog = ConeProgram::new(p, f);
    if m > 0 {
        prog = prog.with_inequalities(g, h);
    }
    if cone {
        let mut c = DMatrix::zeros(maps.g_u.nrows(), n);
        c.view_mut((0, 0), (maps.g_u.nrows(), nu)).copy_from(&maps.g_u);
        let mut a = DVector::zeros(n);
        a[nu] = 1.0;
        prog = prog.with_soc(SocConstraint::new(c, maps.g_0.clone(), a, 0.0));
    }
    (prog, nu, n_s)
}

/// Solves at the configured tolerance, then once more with a looser
/// tolerance and doubled iteration budget if the first attempt stalls.
fn solve_program(prog: &ConeProgram, cfg: &ControlConfig) -> Result<ddpc_socp::Solution> {
    let strict = Settings {
        tol: cfg.solver_tol,
        max_iter: cfg.max_iter,
        warm_start: None,
    };
    let sol = ddpc_socp::solve_with(prog, &strict).map_err(|e| DdpcError::InvalidArgument(e.to_string()))?;
    if matches!(sol.status, Status::MaxIter | Status::Numerical) {
        let loose = Settings {
            tol: cfg.solver_tol.max(1e-6),
            max_iter: 2 * cfg.max_iter,
            warm_start: None,
        };
        return ddpc_socp::solve_with(prog, &loose).map_err(|e| DdpcError::InvalidArgument(e.to_string()));
    }
    Ok(sol)
}

/// One receding-horizon optimization. Infeasible output constraints are
/// retried with slack penalized at `10⁶·max(Q)` per unit.
pub fn solve_step(params: &PredictorParams, ctx: &StepContext<'_>, cfg: &ControlConfig) -> Result<StepResult> {
    let sm = params.signal_matrix();
    let (nu, ny, lp) = (sm.n_u(), sm.n_y(), sm.lp());
    check_len("L0", sm.l0(), cfg.l0)?;
    check_len("Lp", lp, cfg.lp)?;
    let local;
    let params = if params.design.kind == RegularizerKind::Smm {
        let zero = DVector::zeros(nu * lp);
        local = params.specialize(ctx.query, ctx.guess.unwrap_or(&zero))?;
        &local
    } else {
        params
    };
    let maps = predictor::predict_affine_maps(params, ctx.query)?;
    let cost = assemble_cost(params, &maps, ctx.reference, ctx.query, cfg)?;
    let mu = if cfg.variant.stochastic() { cfg.mu(ny)? } else { 0.0 };
    let tight = assemble_tightening(params, &maps, ctx.oc, ctx.t, ctx.query, mu)?;
    let inputs = input_rows(ctx.ic, ctx.t, nu, lp)?;

    let (prog, n_u_total, _) = build_program(&cost, &maps, tight.as_ref(), inputs.as_ref(), None);
    let mut sol = solve_program(&prog, cfg)?;
    let mut status = StepStatus::Optimal;
    let mut slack = 0.0;
    if sol.status == Status::Infeasible && tight.is_some() {
        let rho = 1e6 * cfg.q.amax().max(f64::MIN_POSITIVE);
        let (soft, _, n_s) = build_program(&cost, &maps, tight.as_ref(), inputs.as_ref(), Some(rho));
        sol = solve_program(&soft, cfg)?;
        let off = sol.z.len() - n_s;
        slack = sol.z.rows(off, n_s).iter().map(|s| s.max(0.0)).sum();
        status = StepStatus::Softened;
    }
    if sol.status != Status::Optimal {
        return Err(DdpcError::Solver(sol.status));
    }
    let u_hat = sol.z.rows(0, n_u_total).into_owned();
    let mut result = evaluate_plan(params, &maps, &cost, ctx, cfg, u_hat)?;
    result.status = status;
    result.solver_status = sol.status;
    result.slack = slack;
    result.iterations = sol.iterations;
    result.tightening = tight;
    Ok(result)
}

/// Prediction and costs of a given plan, without optimizing.
fn evaluate_plan(
    params: &PredictorParams,
    maps: &AffineMaps,
    cost: &QuadCost,
    ctx: &StepContext<'_>,
    cfg: &ControlConfig,
    u_hat: DVector<f64>,
) -> Result<StepResult> {
    let nu = params.signal_matrix().n_u();
    let g = &maps.g_u * &u_hat + &maps.g_0;
    let y_bar = &maps.y_u * &u_hat + &maps.y_0;
    let sigma = linalg::psd_floor(&(params.base_covariance(ctx.query) + &params.t * g.norm_squared()));
    let e = &y_bar - ctx.reference;
    let nominal_cost = u_hat.dot(&(cfg.r_bar() * &u_hat)) + e.dot(&(cfg.q_bar() * &e));
    Ok(StepResult {
        u_applied: u_hat.rows(0, nu).into_owned(),
        expected_cost: cost.eval(&u_hat),
        nominal_cost,
        u_hat,
        g,
        y_bar,
        sigma,
        status: StepStatus::Optimal,
        solver_status: Status::Optimal,
        slack: 0.0,
        iterations: 0,
        tightening: None,
    })
}

/// Pre-drawn online output noise and disturbances, one column per plant step.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineStreams {
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl OnlineStreams {
    /// `v_t ~ (0, σ²I)` and `w_t ~ (w̄₀, Σ_w,00)` from the run's sub-streams.
    pub fn draw(noise: &NoiseSpec, n_y: usize, n_w: usize, len: usize, run: u64) -> Result<Self> {
        noise.validate()?;
        let mut rv = rng::stream(noise.seed, run, Purpose::OnlineNoise);
        let mut rw = rng::stream(noise.seed, run, Purpose::OnlineDisturbance);
        let v = lti::draw_noise_with(noise, len, n_y, &mut rv)?;
        let mut w = lti::sample_iid(&noise.step_disturbance_cov(n_w), len, noise.distribution, &mut rw)?;
        if noise.w_bar.len() >= n_w {
            let mean = noise.w_bar.rows(0, n_w);
            for mut c in w.column_iter_mut() {
                c += mean;
            }
        }
        Ok(Self { v, w })
    }

    pub fn len(&self) -> usize {
        self.v.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.v.ncols() == 0
    }

    /// Hex SHA-256 of both streams' little-endian bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for x in self.v.iter().chain(self.w.iter()) {
            h.update(x.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

/// One closed-loop step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: usize,
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub y0: DVector<f64>,
    pub y_bar0: DVector<f64>,
    pub r: DVector<f64>,
    /// Filtered estimate of `y_t`, absent for unfiltered variants.
    pub filtered: Option<DVector<f64>>,
    pub cost: f64,
    pub violation: f64,
    pub slack: f64,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopLog {
    pub variant: Variant,
    pub rows: Vec<LogRow>,
    pub trace: Vec<TraceEntry>,
    /// Set when the retry budget ran out; `rows` then hold the partial run.
    pub aborted: Option<String>,
    pub stream_digest: String,
    pub floored: usize,
}

impl ClosedLoopLog {
    /// `t,u,y,y0,ybar0,cost,violation,slack,status`; vector signals get
    /// `_i` suffixes when wider than one.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let Some(first) = self.rows.first() else {
            w.write_record(["t", "u", "y", "y0", "ybar0", "cost", "violation", "slack", "status"])?;
            w.flush()?;
            return Ok(());
        };
        let names = |name: &str, n: usize| -> Vec<String> {
            if n == 1 {
                vec![name.to_string()]
            } else {
                (0..n).map(|i| format!("{name}_{i}")).collect()
            }
        };
        let (nu, ny) = (first.u.len(), first.y.len());
        let mut header = vec!["t".to_string()];
        for (name, n) in [("u", nu), ("y", ny), ("y0", ny), ("ybar0", ny)] {
            header.extend(names(name, n));
        }
        header.extend(["cost", "violation", "slack", "status"].map(String::from));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.t.to_string()];
            for v in [&row.u, &row.y, &row.y0, &row.y_bar0] {
                rec.extend(v.iter().map(|x| format!("{x:e}")));
            }
            rec.extend([row.cost, row.violation, row.slack].map(|x| format!("{x:e}")));
            rec.push(row.status.clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything a closed-loop run shares across seeds.
#[derive(Debug, Clone)]
pub struct ClosedLoop<'a> {
    pub model: &'a StateSpaceModel,
    pub params: &'a PredictorParams,
    pub cfg: &'a ControlConfig,
    pub oc: &'a OutputConstraints,
    pub ic: &'a InputConstraints,
    pub reference: &'a Reference,
    pub noise: &'a NoiseSpec,
}

/// Draws the run's streams and executes `steps` controller steps after an
/// `L0`-step zero-input warm-up from the origin.
pub fn run_closed_loop(setup: &ClosedLoop<'_>, steps: usize, run: u64) -> Result<ClosedLoopLog> {
    let m = setup.model;
    let streams = OnlineStreams::draw(setup.noise, m.n_y(), m.n_w(), setup.cfg.l0 + steps, run)?;
    run_closed_loop_with(setup, &streams, steps)
}

fn shift_in(hist: &mut DVector<f64>, block: &DVector<f64>) {
    let (n, k) = (hist.len(), block.len());
    let tail = hist.rows(k, n - k).into_owned();
    hist.rows_mut(0, n - k).copy_from(&tail);
    hist.rows_mut(n - k, k).copy_from(block);
}

/// [`run_closed_loop`] on given streams, so that variants can replay them.
pub fn run_closed_loop_with(setup: &ClosedLoop<'_>, streams: &OnlineStreams, steps: usize) -> Result<ClosedLoopLog> {
    run_closed_loop_observed(setup, streams, steps, |_, _| {})
}

/// [`run_closed_loop_with`], handing every step's result to `observe`
/// before its input is applied.
pub fn run_closed_loop_observed<F>(
    setup: &ClosedLoop<'_>,
    streams: &OnlineStreams,
    steps: usize,
    mut observe: F,
) -> Result<ClosedLoopLog>
where
    F: FnMut(usize, &StepResult),
{
    let ClosedLoop {
        model,
        params,
        cfg,
        oc,
        ic,
        reference,
        noise,
    } = *setup;
    cfg.validate()?;
    let (nu, ny, nw) = (model.n_u(), model.n_y(), model.n_w());
    let (l0, lp) = (cfg.l0, cfg.lp);
    check_len("Q", ny, cfg.q.nrows())?;
    check_len("R", nu, cfg.r.nrows())?;
    check_len("reference", ny, reference.n_y())?;
    check_len("online streams", l0 + steps, streams.len())?;
    check_len("disturbance stream", nw, streams.w.nrows())?;
    oc.validate(ny)?;
    ic.validate(nu)?;

    let mut x = DVector::zeros(model.n_x());
    let plant = |x: &mut DVector<f64>, u: &DVector<f64>, k: usize| {
        let y0 = model.output(x, u);
        let y = &y0 + streams.v.column(k);
        *x = model.step(x, u, &streams.w.column(k).into_owned());
        (y0, y)
    };

    let mut u_hist = DVector::zeros(nu * l0);
    let mut y_hist = DVector::zeros(ny * l0);
    let zero_u = DVector::zeros(nu);
    for k in 0..l0 {
        let (_, y) = plant(&mut x, &zero_u, k);
        shift_in(&mut u_hist, &zero_u);
        shift_in(&mut y_hist, &y);
    }
    let mut filter = if cfg.variant.filtered() {
        Some(FilterState::init(l0, &u_hist, &y_hist, cfg.filter_mode)?)
    } else {
        None
    };
    let gamma_0 = params.gamma_hat.rows(0, ny).into_owned();

    let mut log = ClosedLoopLog {
        variant: cfg.variant,
        rows: Vec::with_capacity(steps),
        trace: Vec::new(),
        aborted: None,
        stream_digest: streams.digest(),
        floored: 0,
    };
    let mut plan: Option<DVector<f64>> = None;
    let mut failures = 0;
    for t in 0..steps {
        let (u_ini, y_ini, p) = match &filter {
            Some(f) => f.extract_initial_condition(),
            None => (
                u_hist.clone(),
                y_hist.clone(),
                DMatrix::identity(ny * l0, ny * l0) * noise.sigma2,
            ),
        };
        let query = QueryCondition {
            u_ini,
            y_ini,
            p,
            w_bar: noise.w_bar.clone(),
            sigma_w: noise.sigma_w.clone(),
        };
        let r = reference.window(t, lp);
        // Previous plan shifted by one step, last input repeated.
        let shifted = plan.as_ref().map(|u| {
            let mut s = u.clone();
            let last = u.rows(u.len() - nu, nu).into_owned();
            shift_in(&mut s, &last);
            s
        });
        let ctx = StepContext {
            query: &query,
            oc,
            ic,
            reference: &r,
            t,
            guess: shifted.as_ref(),
        };
        let (step, status) = match solve_step(params, &ctx, cfg) {
            Ok(s) => {
                failures = 0;
                let st = s.status.as_str().to_string();
                (s, st)
            }
            Err(DdpcError::Solver(st)) => {
                failures += 1;
                if failures > cfg.retry_budget {
                    log.aborted = Some(format!(
                        "solver failed ({}) on {failures} consecutive steps at t = {t}",
                        st.as_str()
                    ));
                    break;
                }
                let fallback = shifted.clone().unwrap_or_else(|| DVector::zeros(nu * lp));
                (fallback_step(params, &ctx, cfg, fallback)?, st.as_str().to_string())
            }
            Err(e) => return Err(e),
        };
        observe(t, &step);
        if let Some(tg) = &step.tightening {
            log.floored += tg.floored;
        }
        let u = step.u_applied.clone();
        let (y0, y) = plant(&mut x, &u, l0 + t);
        let y_bar0 = step.y_bar.rows(0, ny).into_owned();
        let sigma0 = step.sigma.view((0, 0), (ny, ny)).into_owned();
        let mut filtered = None;
        if let Some(f) = filter.take() {
            let pred = match cfg.filter_mode {
                FilterMode::PaperLiteral => f.predict_step(&u, &y_bar0, &sigma0)?,
                FilterMode::FullKf => f.predict_step_correlated(&u, &y_bar0, &sigma0, &gamma_0)?,
            };
            let post = pred.update_step(&y, noise.sigma2)?;
            if let Some(e) = &post.last {
                filtered = Some(e.posterior.clone());
                log.trace.push(TraceEntry { t, ..e.clone() });
            }
            filter = Some(post);
        }
        shift_in(&mut u_hist, &u);
        shift_in(&mut y_hist, &y);
        log.rows.push(LogRow {
            t,
            violation: oc.violation(t, &y0),
            u,
            y,
            y0,
            y_bar0,
            r: reference.at(t).clone(),
            filtered,
            cost: step.expected_cost,
            slack: step.slack,
            status,
        });
        plan = Some(step.u_hat);
    }
    Ok(log)
}

fn fallback_step(
    params: &PredictorParams,
    ctx: &StepContext<'_>,
    cfg: &ControlConfig,
    u_hat: DVector<f64>,
) -> Result<StepResult> {
    let local;
    let params = if params.design.kind == RegularizerKind::Smm {
        local = params.specialize(ctx.query, &u_hat)?;
        &local
    } else {
        params
    };
    let maps = predictor::predict_affine_maps(params, ctx.query)?;
    let cost = assemble_cost(params, &maps, ctx.reference, ctx.query, cfg)?;
    evaluate_plan(params, &maps, &cost, ctx, cfg, u_hat)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub true_total_cost: f64,
    pub total_violation: f64,
    /// Fraction of steps with any violated output row.
    pub per_step_violation_freq: f64,
    /// `None` for unfiltered runs.
    pub filter_rmse: Option<f64>,
    pub measured_rmse: f64,
}

fn rmse<'a>(pairs: impl Iterator<Item = (&'a DVector<f64>, &'a DVector<f64>)>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for (a, b) in pairs {
        s += (a - b).norm_squared();
        n += a.len();
    }
    (n > 0).then(|| (s / n as f64).sqrt())
}

/// Realized performance of a run, recomputed from the logged signals.
pub fn metrics(log: &ClosedLoopLog, oc: &OutputConstraints, cfg: &ControlConfig) -> Metrics {
    let mut cost = 0.0;
    let mut violation = 0.0;
    let mut violating = 0usize;
    for row in &log.rows {
        let e = &row.y0 - &row.r;
        cost += row.u.dot(&(&cfg.r * &row.u)) + e.dot(&(&cfg.q * &e));
        let v = oc.violation(row.t, &row.y0);
        violation += v;
        violating += usize::from(v > 0.0);
    }
    let steps = log.rows.len();
    Metrics {
        true_total_cost: cost,
        total_violation: violation,
        per_step_violation_freq: if steps == 0 { 0.0 } else { violating as f64 / steps as f64 },
        filter_rmse: rmse(log.rows.iter().filter_map(|r| r.filtered.as_ref().map(|f| (f, &r.y0)))),
        measured_rmse: rmse(log.rows.iter().map(|r| (&r.y, &r.y0))).unwrap_or(0.0),
    }
}
