//! Kalman filter over the non-minimal data-driven state
//! `x̄ = col(u_{t−L0}, …, u_{t−1}, y⁰_{t−L0}, …, y⁰_{t−1})`.
//!
//! Inputs are known exactly, so only the output history carries covariance.
//! A step shifts both histories by one sample, appends the applied input and
//! the one-step prediction `ȳ_0` with its error covariance `Σ_0`, and then
//! corrects the newest output block with the measurement `y_t = y⁰_t + v_t`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, DdpcError, Result};
use crate::linalg;

const PSD_TOL: f64 = 1e-10;

/// Covariance bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterMode {
    /// Gain `K = Σ_0(Σ_0 + σ²I)⁻¹` on the newest block only; older blocks are
    /// left untouched.
    #[default]
    PaperLiteral,
    /// Full covariance with cross terms and gain `L = PHᵀ(HPHᵀ + σ²I)⁻¹`.
    FullKf,
}

impl FilterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterMode::PaperLiteral => "paper-literal",
            FilterMode::FullKf => "full-kf",
        }
    }
}

impl std::str::FromStr for FilterMode {
    type Err = DdpcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(FilterMode::PaperLiteral),
            "full-kf" => Ok(FilterMode::FullKf),
            other => Err(DdpcError::InvalidArgument(format!("unknown filter mode `{other}`"))),
        }
    }
}

/// One filter correction, for plotting filtered against measured outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub t: usize,
    pub prior: DVector<f64>,
    pub posterior: DVector<f64>,
    pub measurement: DVector<f64>,
    /// Diagonal of the newest block of `P` after the correction.
    pub variance: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub u_hist: DVector<f64>,
    pub y_hist: DVector<f64>,
    pub p: DMatrix<f64>,
    pub t: usize,
    pub mode: FilterMode,
    n_u: usize,
    n_y: usize,
    l0: usize,
    /// Newest-block prior mean after the last prediction.
    prior: Option<DVector<f64>>,
    pub last: Option<TraceEntry>,
}

impl FilterState {
    /// Starts from raw measurements with `P = I`.
    pub fn init(l0: usize, u_init: &DVector<f64>, y_init: &DVector<f64>, mode: FilterMode) -> Result<Self> {
        if l0 == 0 || !u_init.len().is_multiple_of(l0) || !y_init.len().is_multiple_of(l0) || y_init.is_empty() {
            return Err(DdpcError::InvalidArgument(format!(
                "histories of length {} and {} do not split into L0 = {l0} samples",
                u_init.len(),
                y_init.len()
            )));
        }
        let k = y_init.len();
        Ok(Self {
            u_hist: u_init.clone(),
            y_hist: y_init.clone(),
            p: DMatrix::identity(k, k),
            t: 0,
            mode,
            n_u: u_init.len() / l0,
            n_y: k / l0,
            l0,
            prior: None,
            last: None,
        })
    }

    /// Replaces the covariance, for example to start from a correlated prior.
    pub fn with_covariance(mut self, p: DMatrix<f64>) -> Result<Self> {
        check_len("P", self.y_hist.len(), p.nrows())?;
        linalg::check_psd("P", &p, PSD_TOL)?;
        self.p = linalg::symmetrize(&p);
        Ok(self)
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn l0(&self) -> usize {
        self.l0
    }

    /// `(u_ini, ȳ_ini, P_t)`.
    pub fn extract_initial_condition(&self) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
        (self.u_hist.clone(), self.y_hist.clone(), self.p.clone())
    }

    fn newest(&self) -> usize {
        self.n_y * (self.l0 - 1)
    }

    /// Time update. The new block enters with covariance `Σ_0` and no
    /// correlation with the retained history.
    pub fn predict_step(&self, u_applied: &DVector<f64>, y_bar_0: &DVector<f64>, sigma_0: &DMatrix<f64>) -> Result<Self> {
        self.predict_inner(u_applied, y_bar_0, sigma_0, None)
    }

    /// Time update for full-kf mode when the prediction is `ȳ_0 = Γ_0 ȳ_ini + …`.
    /// The new error then correlates with the history error as `Γ_0 P`.
    pub fn predict_step_correlated(
        &self,
        u_applied: &DVector<f64>,
        y_bar_0: &DVector<f64>,
        sigma_0: &DMatrix<f64>,
        gamma_0: &DMatrix<f64>,
    ) -> Result<Self> {
        check_len("Gamma_0 rows", self.n_y, gamma_0.nrows())?;
        check_len("Gamma_0 columns", self.y_hist.len(), gamma_0.ncols())?;
        self.predict_inner(u_applied, y_bar_0, sigma_0, Some(gamma_0))
    }

    fn predict_inner(
        &self,
        u_applied: &DVector<f64>,
        y_bar_0: &DVector<f64>,
        sigma_0: &DMatrix<f64>,
        gamma_0: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        check_len("u_applied", self.n_u, u_applied.len())?;
        check_len("y_bar_0", self.n_y, y_bar_0.len())?;
        check_len("Sigma_0", self.n_y, sigma_0.nrows())?;
        linalg::check_psd("Sigma_0", sigma_0, PSD_TOL)?;
        let (nu, ny) = (self.n_u, self.n_y);
        let ku = self.u_hist.len();
        let ky = self.y_hist.len();

        let mut u_hist = DVector::zeros(ku);
        u_hist.rows_mut(0, ku - nu).copy_from(&self.u_hist.rows(nu, ku - nu));
        u_hist.rows_mut(ku - nu, nu).copy_from(u_applied);
        let mut y_hist = DVector::zeros(ky);
        y_hist.rows_mut(0, ky - ny).copy_from(&self.y_hist.rows(ny, ky - ny));
        y_hist.rows_mut(ky - ny, ny).copy_from(y_bar_0);

        // Λ P Λᵀ drops the oldest block; the new block goes in the last slot.
        let keep = ky - ny;
        let mut p = DMatrix::zeros(ky, ky);
        p.view_mut((0, 0), (keep, keep))
            .copy_from(&self.p.view((ny, ny), (keep, keep)));
        p.view_mut((keep, keep), (ny, ny)).copy_from(sigma_0);
        if let (FilterMode::FullKf, Some(g0)) = (self.mode, gamma_0) {
            let cross = (g0 * &self.p).columns(ny, keep).into_owned();
            p.view_mut((keep, 0), (ny, keep)).copy_from(&cross);
            p.view_mut((0, keep), (keep, ny)).copy_from(&cross.transpose());
        }
        Ok(Self {
            u_hist,
            y_hist,
            p: floor_checked(p)?,
            t: self.t,
            prior: Some(y_bar_0.clone()),
            last: None,
            ..self.clone()
        })
    }

    /// Measurement update of the newest output block.
    pub fn update_step(&self, y_measured: &DVector<f64>, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0) || sigma2.is_nan() {
            return Err(DdpcError::InvalidArgument(format!("sigma2 must be nonnegative, got {sigma2}")));
        }
        check_len("y_measured", self.n_y, y_measured.len())?;
        let ny = self.n_y;
        let ky = self.y_hist.len();
        let at = self.newest();
        let prior = self.y_hist.rows(at, ny).into_owned();
        let innovation = y_measured - &prior;
        let r = DMatrix::identity(ny, ny) * sigma2;

        let mut next = self.clone();
        match self.mode {
            FilterMode::PaperLiteral => {
                let s0 = self.p.view((at, at), (ny, ny)).into_owned();
                let k = &s0 * linalg::pinv(&(&s0 + &r));
                next.y_hist.rows_mut(at, ny).copy_from(&(&prior + &k * &innovation));
                let i_k = DMatrix::identity(ny, ny) - &k;
                // Rows and columns of the newest block scale by (I − K).
                let rows = &i_k * self.p.rows(at, ny);
                next.p.rows_mut(at, ny).copy_from(&rows);
                let cols = next.p.columns(at, ny) * i_k.transpose();
                next.p.columns_mut(at, ny).copy_from(&cols);
                next.p.view_mut((at, at), (ny, ny)).copy_from(&(&i_k * &s0));
            }
            FilterMode::FullKf => {
                let mut h = DMatrix::zeros(ny, ky);
                h.view_mut((0, at), (ny, ny)).fill_with_identity();
                let ph = &self.p * h.transpose();
                let s = &h * &ph + &r;
                let gain = &ph * linalg::pinv(&s);
                next.y_hist += &gain * &innovation;
                next.p = &self.p - &gain * ph.transpose();
            }
        }
        next.p = floor_checked(next.p)?;
        next.t = self.t + 1;
        let posterior = next.y_hist.rows(at, ny).into_owned();
        let variance = next.p.view((at, at), (ny, ny)).diagonal();
        next.last = Some(TraceEntry {
            t: self.t,
            prior: self.prior.clone().unwrap_or_else(|| prior.clone()),
            posterior,
            measurement: y_measured.clone(),
            variance,
        });
        next.prior = None;
        Ok(next)
    }
}

/// Symmetrizes, rejects eigenvalues below `−1e-10 · max(1, ‖P‖_max)` and clips the rest at zero.
fn floor_checked(p: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = linalg::symmetrize(&p);
    if linalg::min_eigenvalue(&p) < -PSD_TOL * p.amax().max(1.0) {
        return Err(DdpcError::NotPsd("filter covariance"));
    }
    Ok(linalg::psd_floor(&p))
}

/// Writes filter corrections as CSV with header
/// `t,prior_i..,posterior_i..,measurement_i..,variance_i..`.
pub fn write_trace_csv<W: Write>(entries: &[TraceEntry], out: W) -> Result<()> {
    let ny = entries.first().map_or(1, |e| e.prior.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    for name in ["prior", "posterior", "measurement", "variance"] {
        header.extend((0..ny).map(|i| format!("{name}_{i}")));
    }
    w.write_record(&header)?;
    for e in entries {
        let mut rec = vec![e.t.to_string()];
        for v in [&e.prior, &e.posterior, &e.measurement, &e.variance] {
            rec.extend(v.iter().map(|x| format!("{x:e}")));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
