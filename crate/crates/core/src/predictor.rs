//! Regularized stochastic predictor.
//!
//! The inner problem
//!
//! ```text
//! min_g ‖Yp g − ȳ_ini‖²_S + λ‖g‖²   s.t.   Ψ g = col(u_ini, û, w̄)
//! ```
//!
//! has the closed form `g = R1 u_ini + R2 û + R3 w̄ + R4 ȳ_ini` with
//! `F = λI + YpᵀSYp`, `[R1 R2 R3] = F⁻¹Ψᵀ(ΨF⁻¹Ψᵀ)⁻¹` and
//! `R4 = (F⁻¹ − F⁻¹Ψᵀ(ΨF⁻¹Ψᵀ)⁻¹ΨF⁻¹)YpᵀS`.
//!
//! `F` is never formed. With `S = CᵀC` and the thin SVD `C Yp = U diag(s) Vᵀ`,
//! `λF⁻¹ = I − V diag(s²/(λ+s²)) Vᵀ`, and `λ` cancels from `[R1 R2 R3]`.
//! Every product is then `O(M)` in the number of data columns, so building
//! costs `O(M k²)` for `k` data rows. The smm design rebuilds `R1`–`R4` per
//! query from the same factorization.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{check_len, DdpcError, Result};
use crate::linalg;
use crate::signal::{QueryCondition, SignalMatrix};

const MAGIC: &[u8; 8] = b"DDPCPP01";
const EPS_REG_FACTOR: f64 = 1e-8;
const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerKind {
    Subspace,
    Wasserstein,
    Smm,
    Mmse,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 4] = [Self::Subspace, Self::Wasserstein, Self::Smm, Self::Mmse];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Subspace => "subspace",
            Self::Wasserstein => "wasserstein",
            Self::Smm => "smm",
            Self::Mmse => "mmse",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }

    fn from_code(c: u64) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl std::str::FromStr for RegularizerKind {
    type Err = DdpcError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DdpcError::InvalidArgument(format!("unknown predictor design `{s}`")))
    }
}

/// Resolved `(λ, S)` pair. `S` is kept in factored form `S = CᵀC`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerDesign {
    pub kind: RegularizerKind,
    pub lambda: f64,
    s: DMatrix<f64>,
    c: DMatrix<f64>,
}

impl RegularizerDesign {
    /// Design with an explicit PSD weight.
    pub fn custom(kind: RegularizerKind, lambda: f64, s: DMatrix<f64>) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(DdpcError::InvalidArgument(format!("lambda must be nonnegative, got {lambda}")));
        }
        linalg::check_psd("S", &s, PSD_TOL)?;
        let c = linalg::psd_factor(&s).transpose();
        Ok(Self { kind, lambda, s, c })
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    /// Factor `C` with `CᵀC = S`.
    pub fn s_factor(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Design from a factor `C`, with `S = CᵀC`.
    pub fn from_factor(kind: RegularizerKind, lambda: f64, c: DMatrix<f64>) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() || c.iter().any(|v| !v.is_finite()) {
            return Err(DdpcError::InvalidArgument(format!("invalid design weight, lambda {lambda}")));
        }
        let s = c.transpose() * &c;
        Ok(Self { kind, lambda, s, c })
    }

    fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }
}

/// Resolves `(λ, S)` for a design. `g_pinv_norm2` is `‖g_pinv‖²` of the
/// current query and is required only by smm.
pub fn resolve_design(
    kind: RegularizerKind,
    sm: &SignalMatrix,
    sigma2: f64,
    g_pinv_norm2: Option<f64>,
) -> Result<RegularizerDesign> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(DdpcError::InvalidArgument(format!("sigma2 must be nonnegative, got {sigma2}")));
    }
    let ny = sm.n_y() as f64;
    let kp = sm.yp().nrows();
    let identity = || DMatrix::identity(kp, kp);
    let (lambda, c) = match kind {
        RegularizerKind::Subspace => (eps_reg(sm.yp(), &identity()), identity()),
        RegularizerKind::Wasserstein => (ny * sm.l0() as f64 * sigma2, identity()),
        RegularizerKind::Smm => {
            let g2 = g_pinv_norm2.ok_or(DdpcError::MissingDependency("smm design needs ‖g_pinv‖²"))?;
            (smm_lambda(sm, sigma2, g2), identity())
        }
        RegularizerKind::Mmse => {
            let gamma_bar = mmse_gamma_bar(sm);
            let tr_s = gamma_bar.norm_squared();
            (ny * sm.lp() as f64 * sigma2 + tr_s * sigma2, gamma_bar)
        }
    };
    RegularizerDesign::from_factor(kind, lambda, c)
}

/// `Γ̄`: the last `n_y L0` columns of `Yf · col(Ψ, Yp)^†`.
pub fn mmse_gamma_bar(sm: &SignalMatrix) -> DMatrix<f64> {
    let kp = sm.yp().nrows();
    let full = sm.yf() * sm.data_pinv();
    let k = full.ncols();
    full.columns(k - kp, kp).into_owned()
}

fn smm_lambda(sm: &SignalMatrix, sigma2: f64, g_pinv_norm2: f64) -> f64 {
    let ny = sm.n_y() as f64;
    if g_pinv_norm2 > 0.0 {
        ny * (sm.l() as f64 * sigma2 + sm.lp() as f64 * sigma2 / g_pinv_norm2)
    } else {
        // The per-query term is unbounded; fall back to the data-only part.
        ny * sm.l() as f64 * sigma2
    }
}

/// Stand-in for `λ → 0⁺`: `1e-8 · tr(YpᵀSYp) / M`.
fn eps_reg(yp: &DMatrix<f64>, c: &DMatrix<f64>) -> f64 {
    let m = yp.ncols().max(1) as f64;
    let v = EPS_REG_FACTOR * (c * yp).norm_squared() / m;
    if v > 0.0 {
        v
    } else {
        EPS_REG_FACTOR
    }
}

/// Data-dependent factors shared by every `λ`.
#[derive(Debug)]
struct Factors {
    psi: DMatrix<f64>,
    /// Right singular vectors of `C Yp` (M × r).
    v: DMatrix<f64>,
    s: DVector<f64>,
    /// `Uᵀ C` (r × n_y L0).
    ut_c: DMatrix<f64>,
}

impl Factors {
    fn new(sm: &SignalMatrix, c: &DMatrix<f64>) -> Self {
        let b = c * sm.yp();
        let svd = b.svd(true, true);
        let smax = svd.singular_values.max();
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&k| svd.singular_values[k] > linalg::PINV_RTOL * smax && svd.singular_values[k] > 0.0)
            .collect();
        let u = svd.u.expect("requested U");
        let vt = svd.v_t.expect("requested Vᵀ");
        let m = sm.m();
        let mut v = DMatrix::zeros(m, keep.len());
        let mut ut = DMatrix::zeros(keep.len(), u.nrows());
        for (j, &k) in keep.iter().enumerate() {
            v.set_column(j, &vt.row(k).transpose());
            ut.set_row(j, &u.column(k).transpose());
        }
        let s = DVector::from_iterator(keep.len(), keep.iter().map(|&k| svd.singular_values[k]));
        Self {
            psi: sm.psi(),
            v,
            s,
            ut_c: ut * c,
        }
    }

    /// `λF⁻¹ X`.
    fn scaled_solve(&self, lambda: f64, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut proj = self.v.transpose() * x;
        for (k, &s) in self.s.iter().enumerate() {
            let d = s * s / (lambda + s * s);
            proj.row_mut(k).scale_mut(d);
        }
        x - &self.v * proj
    }

    /// `F⁻¹ YpᵀS = V diag(s/(λ+s²)) UᵀC`.
    fn x(&self, lambda: f64) -> DMatrix<f64> {
        let mut d = self.ut_c.clone();
        for (k, &s) in self.s.iter().enumerate() {
            d.row_mut(k).scale_mut(s / (lambda + s * s));
        }
        &self.v * d
    }

    /// `([R1 R2 R3], R4)` for a given `λ`.
    fn closed_form(&self, lambda: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let psi_t = self.psi.transpose();
        let ft_psi = self.scaled_solve(lambda, &psi_t);
        let gram = linalg::symmetrize(&(&self.psi * &ft_psi));
        let chol = gram.clone().cholesky().ok_or_else(|| DdpcError::IllConditioned {
            what: "Ψ F⁻¹ Ψᵀ",
            cond: linalg::cond(&gram),
        })?;
        // R = F̃Ψᵀ G⁻¹ with G symmetric: solve G Rᵀ = (F̃Ψᵀ)ᵀ.
        let r = chol.solve(&ft_psi.transpose()).transpose();
        let x = self.x(lambda);
        let r4 = &x - &r * (&self.psi * &x);
        Ok((r, r4))
    }
}

/// Precomputed predictor.
#[derive(Debug, Clone)]
pub struct PredictorParams {
    pub r1: DMatrix<f64>,
    pub r2: DMatrix<f64>,
    pub r3: DMatrix<f64>,
    pub r4: DMatrix<f64>,
    pub gamma_hat: DMatrix<f64>,
    pub gamma_w: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub design: RegularizerDesign,
    pub sigma2: f64,
    /// `Yf − Γ̂ Yp`.
    y_bar_map: DMatrix<f64>,
    sm: Arc<SignalMatrix>,
    factors: Arc<Factors>,
}

/// Output of [`predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub g: DVector<f64>,
    pub y_bar: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Affine dependence of `g` and `ȳ` on `û`: `g = G_u û + g_0`, `ȳ = Y_u û + y_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMaps {
    pub g_u: DMatrix<f64>,
    pub g_0: DVector<f64>,
    pub y_u: DMatrix<f64>,
    pub y_0: DVector<f64>,
}

/// Builds `R1`–`R4`, `Γ̂`, `Γ_w` and `T`. A zero `λ` is raised to the
/// subspace stand-in so that `F` stays invertible.
pub fn build_predictor(sm: Arc<SignalMatrix>, design: &RegularizerDesign, sigma2: f64) -> Result<PredictorParams> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(DdpcError::InvalidArgument(format!("sigma2 must be nonnegative, got {sigma2}")));
    }
    check_len("S", sm.yp().nrows(), design.s.nrows())?;
    let mut design = design.clone();
    if design.lambda <= 0.0 {
        design.lambda = eps_reg(sm.yp(), &design.c);
    }
    let factors = Arc::new(Factors::new(&sm, &design.c));
    let smm_probe = match design.kind {
        // Γ̂ is query independent; build it at the average leverage
        // ‖g_pinv‖² = rank / M of a data column.
        RegularizerKind::Smm if sigma2 > 0.0 => {
            let rank = linalg::rank(&sm.data_block()) as f64;
            Some(smm_lambda(&sm, sigma2, rank / sm.m() as f64))
        }
        _ => None,
    };
    let lambda_gamma = smm_probe.unwrap_or(design.lambda);
    let (_, r4_gamma) = factors.closed_form(lambda_gamma)?;
    let gamma_hat = estimate_gamma(&sm, &r4_gamma)?;
    assemble(sm, factors, design, sigma2, gamma_hat)
}

/// `Γ̂ = Yf R4 (Yp R4)⁻¹`.
fn estimate_gamma(sm: &SignalMatrix, r4: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let yp_r4 = sm.yp() * r4;
    let cond = linalg::cond(&yp_r4);
    if !cond.is_finite() || cond > 1e14 {
        return Err(DdpcError::IllConditioned { what: "Yp R4", cond });
    }
    let yf_r4 = sm.yf() * r4;
    // Γ̂ (Yp R4) = Yf R4  ⇔  (Yp R4)ᵀ Γ̂ᵀ = (Yf R4)ᵀ.
    let lu = yp_r4.transpose().lu();
    let gt = lu
        .solve(&yf_r4.transpose())
        .ok_or(DdpcError::IllConditioned { what: "Yp R4", cond })?;
    Ok(gt.transpose())
}

fn assemble(
    sm: Arc<SignalMatrix>,
    factors: Arc<Factors>,
    design: RegularizerDesign,
    sigma2: f64,
    gamma_hat: DMatrix<f64>,
) -> Result<PredictorParams> {
    let (r, r4) = factors.closed_form(design.lambda)?;
    let (nu0, nup, nwl) = (sm.n_u() * sm.l0(), sm.n_u() * sm.lp(), sm.n_w() * sm.l());
    let r1 = r.columns(0, nu0).into_owned();
    let r2 = r.columns(nu0, nup).into_owned();
    let r3 = r.columns(nu0 + nup, nwl).into_owned();
    let y_bar_map = sm.yf() - &gamma_hat * sm.yp();
    let gamma_w = &y_bar_map * &r3;
    let kf = gamma_hat.nrows();
    let t = (&gamma_hat * gamma_hat.transpose() + DMatrix::identity(kf, kf)) * sigma2;
    Ok(PredictorParams {
        r1,
        r2,
        r3,
        r4,
        gamma_hat,
        gamma_w,
        t: linalg::symmetrize(&t),
        design,
        sigma2,
        y_bar_map,
        sm,
        factors,
    })
}

impl PredictorParams {
    pub fn signal_matrix(&self) -> &Arc<SignalMatrix> {
        &self.sm
    }

    /// `Yf − Γ̂ Yp`, the map from `g` to `ȳ` at fixed `ȳ_ini`.
    pub fn y_bar_map(&self) -> &DMatrix<f64> {
        &self.y_bar_map
    }

    fn check_query(&self, q: &QueryCondition) -> Result<()> {
        let sm = &self.sm;
        check_len("u_ini", sm.n_u() * sm.l0(), q.u_ini.len())?;
        check_len("y_ini", sm.n_y() * sm.l0(), q.y_ini.len())?;
        check_len("P", sm.n_y() * sm.l0(), q.p.nrows())?;
        check_len("w_bar", sm.n_w() * sm.l(), q.w_bar.len())?;
        check_len("Sigma_w", sm.n_w() * sm.l(), q.sigma_w.nrows())?;
        linalg::check_psd("P", &q.p, PSD_TOL)?;
        linalg::check_psd("Sigma_w", &q.sigma_w, PSD_TOL)
    }

    /// Params with the smm weight resolved for this query. `Γ̂` and `T` are
    /// kept; other designs are returned unchanged.
    pub fn specialize(&self, q: &QueryCondition, u_hat: &DVector<f64>) -> Result<PredictorParams> {
        if self.design.kind != RegularizerKind::Smm {
            return Ok(self.clone());
        }
        let cond = self.sm.condition(&q.u_ini, u_hat, &q.w_bar, &q.y_ini)?;
        let g2 = (self.sm.data_pinv() * cond).norm_squared();
        let lambda = if self.sigma2 > 0.0 {
            smm_lambda(&self.sm, self.sigma2, g2)
        } else {
            self.design.lambda
        };
        assemble(
            Arc::clone(&self.sm),
            Arc::clone(&self.factors),
            self.design.with_lambda(lambda),
            self.sigma2,
            self.gamma_hat.clone(),
        )
    }

    /// `Γ̂ P Γ̂ᵀ + Γ_w Σ_w Γ_wᵀ`, the part of `Σ` independent of `g`.
    pub fn base_covariance(&self, q: &QueryCondition) -> DMatrix<f64> {
        &self.gamma_hat * &q.p * self.gamma_hat.transpose() + &self.gamma_w * &q.sigma_w * self.gamma_w.transpose()
    }

    /// `g_0 = R1 u_ini + R3 w̄ + R4 ȳ_ini`.
    fn intercept(&self, q: &QueryCondition) -> DVector<f64> {
        &self.r1 * &q.u_ini + &self.r3 * &q.w_bar + &self.r4 * &q.y_ini
    }

    fn covariance(&self, q: &QueryCondition, g: &DVector<f64>) -> DMatrix<f64> {
        linalg::psd_floor(&(self.base_covariance(q) + &self.t * g.norm_squared()))
    }

    /// Binary cache: magic, design code, `λ`, `σ²`, the SHA-256 of the signal
    /// matrix, then `C, R1, R2, R3, R4, Γ̂, Γ_w, T` (with `S = CᵀC`) each as `(rows, cols)` and
    /// column-major `f64`, all little endian.
    pub fn write_cache<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.design.kind.code().to_le_bytes());
        buf.extend_from_slice(&self.design.lambda.to_le_bytes());
        buf.extend_from_slice(&self.sigma2.to_le_bytes());
        buf.extend_from_slice(&Sha256::digest(self.sm_bytes()));
        for m in self.cached_matrices() {
            buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    fn sm_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        self.sm.write_cache(&mut b).expect("writing to memory");
        b
    }

    fn cached_matrices(&self) -> [&DMatrix<f64>; 8] {
        [
            &self.design.c,
            &self.r1,
            &self.r2,
            &self.r3,
            &self.r4,
            &self.gamma_hat,
            &self.gamma_w,
            &self.t,
        ]
    }

    /// Loads a cache written for `sm`; fails if the data differ.
    pub fn read_cache<R: Read>(mut input: R, sm: Arc<SignalMatrix>) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let bad = |msg: &str| DdpcError::Format(msg.to_string());
        if bytes.len() < 64 || &bytes[..8] != MAGIC {
            return Err(bad("not a predictor cache"));
        }
        let word = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let kind = RegularizerKind::from_code(word(8)).ok_or_else(|| bad("unknown design code"))?;
        let lambda = f64::from_bits(word(16));
        let sigma2 = f64::from_bits(word(24));
        let mut probe = Vec::new();
        sm.write_cache(&mut probe)?;
        if bytes[32..64] != Sha256::digest(&probe)[..] {
            return Err(bad("predictor cache was built from a different signal matrix"));
        }
        let mut o = 64;
        let mut mats = Vec::with_capacity(8);
        for _ in 0..8 {
            if bytes.len() < o + 16 {
                return Err(bad("truncated predictor cache"));
            }
            let (r, c) = (word(o) as usize, word(o + 8) as usize);
            o += 16;
            let end = r
                .checked_mul(c)
                .and_then(|n| n.checked_mul(8))
                .and_then(|n| n.checked_add(o))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad("truncated predictor cache"))?;
            let vals: Vec<f64> = bytes[o..end]
                .chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
                .collect();
            mats.push(DMatrix::from_column_slice(r, c, &vals));
            o = end;
        }
        if o != bytes.len() {
            return Err(bad("trailing bytes in predictor cache"));
        }
        let [c, r1, r2, r3, r4, gamma_hat, gamma_w, t]: [DMatrix<f64>; 8] =
            mats.try_into().expect("eight matrices");
        check_len("S factor columns", sm.yp().nrows(), c.ncols())?;
        let design = RegularizerDesign::from_factor(kind, lambda, c)?;
        let (nu0, nup, nwl) = (sm.n_u() * sm.l0(), sm.n_u() * sm.lp(), sm.n_w() * sm.l());
        let (m, kp, kf) = (sm.m(), sm.yp().nrows(), sm.yf().nrows());
        for (what, mat, shape) in [
            ("R1", &r1, (m, nu0)),
            ("R2", &r2, (m, nup)),
            ("R3", &r3, (m, nwl)),
            ("R4", &r4, (m, kp)),
            ("Gamma_hat", &gamma_hat, (kf, kp)),
            ("Gamma_w", &gamma_w, (kf, nwl)),
            ("T", &t, (kf, kf)),
        ] {
            if mat.shape() != shape {
                return Err(DdpcError::Format(format!("{what} has shape {:?}, expected {shape:?}", mat.shape())));
            }
        }
        let factors = Arc::new(Factors::new(&sm, &design.c));
        let y_bar_map = sm.yf() - &gamma_hat * sm.yp();
        Ok(Self {
            r1,
            r2,
            r3,
            r4,
            gamma_hat,
            gamma_w,
            t,
            design,
            sigma2,
            y_bar_map,
            sm,
            factors,
        })
    }
}

/// Mean and covariance of the output sequence for input `û`.
pub fn predict(params: &PredictorParams, q: &QueryCondition, u_hat: &DVector<f64>) -> Result<PredictionResult> {
    params.check_query(q)?;
    check_len("u_hat", params.r2.ncols(), u_hat.len())?;
    let local;
    let p = if params.design.kind == RegularizerKind::Smm {
        local = params.specialize(q, u_hat)?;
        &local
    } else {
        params
    };
    let g = p.intercept(q) + &p.r2 * u_hat;
    let y_bar = &p.y_bar_map * &g + &p.gamma_hat * &q.y_ini;
    let sigma = p.covariance(q, &g);
    Ok(PredictionResult { g, y_bar, sigma })
}

/// `G_u = R2`, `Y_u = (Yf − Γ̂Yp) R2` and the intercepts at `û = 0`. Uses the
/// params' own `λ`; smm callers pass [`PredictorParams::specialize`]d params.
pub fn predict_affine_maps(params: &PredictorParams, q: &QueryCondition) -> Result<AffineMaps> {
    params.check_query(q)?;
    let g_0 = params.intercept(q);
    let y_0 = &params.y_bar_map * &g_0 + &params.gamma_hat * &q.y_ini;
    Ok(AffineMaps {
        g_u: params.r2.clone(),
        y_u: &params.y_bar_map * &params.r2,
        g_0,
        y_0,
    })
}

/// Solves the inner problem through its dense KKT system
/// `[2F Ψᵀ; Ψ 0] [g; ν] = [2YpᵀS ȳ_ini; col(u_ini, û, w̄)]`. Test oracle only.
pub fn qp_reference_solve(
    sm: &SignalMatrix,
    design: &RegularizerDesign,
    q: &QueryCondition,
    u_hat: &DVector<f64>,
) -> Result<DVector<f64>> {
    let cond = sm.condition(&q.u_ini, u_hat, &q.w_bar, &q.y_ini)?;
    check_len("S", sm.yp().nrows(), design.s.nrows())?;
    let lambda = if design.lambda > 0.0 {
        design.lambda
    } else {
        eps_reg(sm.yp(), &design.c)
    };
    let m = sm.m();
    let psi = sm.psi();
    let k = psi.nrows();
    let f = sm.yp().transpose() * &design.s * sm.yp() + DMatrix::identity(m, m) * lambda;
    let mut kkt = DMatrix::zeros(m + k, m + k);
    kkt.view_mut((0, 0), (m, m)).copy_from(&(f * 2.0));
    kkt.view_mut((0, m), (m, k)).copy_from(&psi.transpose());
    kkt.view_mut((m, 0), (k, m)).copy_from(&psi);
    let mut rhs = DVector::zeros(m + k);
    rhs.rows_mut(0, m)
        .copy_from(&(sm.yp().transpose() * (&design.s * &q.y_ini) * 2.0));
    rhs.rows_mut(m, k).copy_from(&cond.rows(0, k));
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs).ok_or(DdpcError::IllConditioned {
        what: "inner KKT system",
        cond: f64::INFINITY,
    })?;
    // The system is as ill-conditioned as s²/λ. Refinement with doubled-precision
    // residuals recovers working accuracy in the solution.
    for _ in 0..REFINE_ROUNDS {
        let res = residual_dot2(&kkt, &sol, &rhs);
        match lu.solve(&res) {
            Some(d) => sol += d,
            None => break,
        }
    }
    Ok(sol.rows(0, m).into_owned())
}

const REFINE_ROUNDS: usize = 6;

/// `b − A x` accumulated with error-free transformations (Dot2).
fn residual_dot2(a: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(a.nrows(), |i, _| {
        let (mut s, mut c) = (b[i], 0.0f64);
        for j in 0..a.ncols() {
            let p = -a[(i, j)] * x[j];
            let pe = (-a[(i, j)]).mul_add(x[j], -p);
            let t = s + p;
            let z = t - s;
            let se = (s - (t - z)) + (p - z);
            s = t;
            c += se + pe;
        }
        s + c
    })
}
