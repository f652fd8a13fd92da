//! Ground-truth LTI plant, stochastic signals and model-based oracles.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, DdpcError, Result};
use crate::linalg;
use crate::rng::{self, Purpose};

/// `x⁺ = A x + B u + E w`, `y⁰ = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    e: DMatrix<f64>,
}

/// Slack on the unit circle accepted by [`StateSpaceModel::new_marginal`].
const MARGINAL_TOL: f64 = 1e-9;

impl StateSpaceModel {
    /// Validated asymptotically stable model (spectral radius below 1).
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
    ) -> Result<Self> {
        let m = Self::new_marginal(a, b, c, d, e)?;
        let rho = spectral_radius(&m.a);
        if !(rho < 1.0 - MARGINAL_TOL) {
            return Err(DdpcError::Unstable(rho));
        }
        Ok(m)
    }

    /// Like [`new`](Self::new) but also accepts eigenvalues on the unit
    /// circle, as in plants with an integrating mode.
    pub fn new_marginal(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        e: DMatrix<f64>,
    ) -> Result<Self> {
        let nx = a.nrows();
        check_len("A columns", nx, a.ncols())?;
        check_len("B rows", nx, b.nrows())?;
        check_len("C columns", nx, c.ncols())?;
        check_len("D rows", c.nrows(), d.nrows())?;
        check_len("D columns", b.ncols(), d.ncols())?;
        check_len("E rows", nx, e.nrows())?;
        if [&a, &b, &c, &d, &e].iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(DdpcError::InvalidArgument("model matrices must be finite".into()));
        }
        let rho = spectral_radius(&a);
        if !(rho <= 1.0 + MARGINAL_TOL) {
            return Err(DdpcError::Unstable(rho));
        }
        Ok(Self { a, b, c, d, e })
    }

    /// Fourth-order benchmark plant with one input, one disturbance and one
    /// output. `A [1 1 0 0]ᵀ = [1 1 0 0]ᵀ`, so the plant is only marginally stable.
    pub fn paper_sec5() -> Self {
        #[rustfmt::skip]
        let a = DMatrix::from_row_slice(4, 4, &[
             0.36,  0.64, 0.07,  0.02,
             0.42,  0.58, 0.02,  0.07,
            -9.34,  9.34, 0.23,  0.58,
             5.88, -5.88, 0.39, -0.39,
        ]);
        let b = DMatrix::from_column_slice(4, 1, &[0.29, 0.03, 4.90, 1.07]);
        let e = DMatrix::from_column_slice(4, 1, &[0.03, 0.20, 1.07, 3.48]);
        let c = DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]);
        let d = DMatrix::zeros(1, 1);
        Self::new_marginal(a, b, c, d, e).expect("benchmark plant is marginally stable")
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }
    pub fn e(&self) -> &DMatrix<f64> {
        &self.e
    }
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }
    pub fn n_w(&self) -> usize {
        self.e.ncols()
    }

    /// Noise-free output at state `x` under input `u`.
    pub fn output(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.c * x + &self.d * u
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.e * w
    }
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Sampled signals, one column per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryData {
    pub u: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub y0: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl TrajectoryData {
    pub fn new(u: DMatrix<f64>, w: DMatrix<f64>, y0: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        let n = u.ncols();
        check_len("w length", n, w.ncols())?;
        check_len("y0 length", n, y0.ncols())?;
        check_len("y length", n, y.ncols())?;
        check_len("y rows", y0.nrows(), y.nrows())?;
        Ok(Self { u, w, y0, y })
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_u(&self) -> usize {
        self.u.nrows()
    }
    pub fn n_w(&self) -> usize {
        self.w.nrows()
    }
    pub fn n_y(&self) -> usize {
        self.y.nrows()
    }

    /// Samples `start..start+len`.
    pub fn window(&self, start: usize, len: usize) -> TrajectoryData {
        TrajectoryData {
            u: self.u.columns(start, len).into_owned(),
            w: self.w.columns(start, len).into_owned(),
            y0: self.y0.columns(start, len).into_owned(),
            y: self.y.columns(start, len).into_owned(),
        }
    }

    /// Writes the trajectory as CSV with header `t,u_0..,w_0..,y0_0..,y_0..`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        for (prefix, m) in [("u", &self.u), ("w", &self.w), ("y0", &self.y0), ("y", &self.y)] {
            header.extend((0..m.nrows()).map(|i| format!("{prefix}_{i}")));
        }
        wtr.write_record(&header)?;
        for t in 0..self.len() {
            let mut row = vec![t.to_string()];
            for m in [&self.u, &self.w, &self.y0, &self.y] {
                row.extend(m.column(t).iter().map(|v| format!("{v:e}")));
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the CSV layout produced by [`TrajectoryData::write_csv`]; the
    /// signal dimensions are taken from the header.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let mut kinds = Vec::new();
        for (col, name) in header.iter().enumerate() {
            let kind = if col == 0 {
                if name != "t" {
                    return Err(DdpcError::Format(format!("first column must be t, found {name:?}")));
                }
                continue;
            } else if name.starts_with("y0_") {
                2
            } else if name.starts_with("u_") {
                0
            } else if name.starts_with("w_") {
                1
            } else if name.starts_with("y_") {
                3
            } else {
                return Err(DdpcError::Format(format!("unknown column {name:?}")));
            };
            if kinds.last().is_some_and(|&k| k > kind) {
                return Err(DdpcError::Format("columns must be ordered u, w, y0, y".into()));
            }
            kinds.push(kind);
        }
        let counts: Vec<usize> = (0..4).map(|k| kinds.iter().filter(|&&x| x == k).count()).collect();
        let mut cols: [Vec<f64>; 4] = Default::default();
        let mut n = 0;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(DdpcError::Format(format!("line {}: expected {} fields", line + 2, header.len())));
            }
            for (field, &kind) in rec.iter().skip(1).zip(&kinds) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| DdpcError::Format(format!("line {}: bad number {field:?}", line + 2)))?;
                cols[kind].push(v);
            }
            n += 1;
        }
        let mat = |k: usize| DMatrix::from_column_slice(counts[k], n, &cols[k]);
        TrajectoryData::new(mat(0), mat(1), mat(2), mat(3))
    }
}

/// Simulates the plant from `x0`; `u`, `w`, `v` hold one column per step.
pub fn simulate(
    model: &StateSpaceModel,
    x0: &DVector<f64>,
    u: &DMatrix<f64>,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<TrajectoryData> {
    let n = u.ncols();
    check_len("x0", model.n_x(), x0.len())?;
    check_len("u rows", model.n_u(), u.nrows())?;
    check_len("w rows", model.n_w(), w.nrows())?;
    check_len("v rows", model.n_y(), v.nrows())?;
    check_len("w length", n, w.ncols())?;
    check_len("v length", n, v.ncols())?;
    let mut x = x0.clone();
    let mut y0 = DMatrix::zeros(model.n_y(), n);
    for t in 0..n {
        let ut = u.column(t).into_owned();
        y0.set_column(t, &model.output(&x, &ut));
        x = model.step(&x, &ut, &w.column(t).into_owned());
    }
    let y = &y0 + v;
    TrajectoryData::new(u.clone(), w.clone(), y0, y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Distribution {
    #[default]
    Gaussian,
    /// Uniform on `[−√3, √3]` per coordinate, scaled to the requested covariance.
    UniformScaled,
}

/// Output noise and online disturbance statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub sigma2: f64,
    /// Covariance of the stacked disturbance window (`n_w L` square).
    pub sigma_w: DMatrix<f64>,
    pub w_bar: DVector<f64>,
    pub distribution: Distribution,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return Err(DdpcError::NotPsd("sigma2"));
        }
        check_len("w_bar", self.sigma_w.nrows(), self.w_bar.len())?;
        linalg::check_psd("Sigma_w", &self.sigma_w, 1e-12)
    }

    /// Per-step disturbance covariance: the leading `n_w × n_w` block of `Σ_w`.
    pub fn step_disturbance_cov(&self, n_w: usize) -> DMatrix<f64> {
        if self.sigma_w.nrows() < n_w {
            return DMatrix::zeros(n_w, n_w);
        }
        self.sigma_w.view((0, 0), (n_w, n_w)).into_owned()
    }
}

fn unit_sample(rng: &mut ChaCha8Rng, dist: Distribution) -> f64 {
    match dist {
        Distribution::Gaussian => rng.sample(StandardNormal),
        Distribution::UniformScaled => rng.random_range(-(3f64.sqrt())..3f64.sqrt()),
    }
}

/// `count` i.i.d. zero-mean samples with covariance `cov`, one per column.
pub fn sample_iid(
    cov: &DMatrix<f64>,
    count: usize,
    dist: Distribution,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    linalg::check_psd("noise covariance", cov, 1e-12)?;
    let factor = linalg::psd_factor(cov);
    let dim = cov.nrows();
    let mut out = DMatrix::zeros(dim, count);
    let mut z = DVector::zeros(dim);
    for t in 0..count {
        for v in z.iter_mut() {
            *v = unit_sample(rng, dist);
        }
        out.set_column(t, &(&factor * &z));
    }
    Ok(out)
}

/// Output noise `v_t ~ (0, σ² I_dim)` drawn from `spec.seed`.
pub fn draw_noise(spec: &NoiseSpec, count: usize, dim: usize) -> Result<DMatrix<f64>> {
    draw_noise_with(spec, count, dim, &mut rng::stream(spec.seed, 0, Purpose::OnlineNoise))
}

/// Output noise `v_t ~ (0, σ² I_dim)` from an explicit stream.
pub fn draw_noise_with(spec: &NoiseSpec, count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    if count == 0 {
        return Err(DdpcError::InvalidArgument("noise count must be positive".into()));
    }
    if !(spec.sigma2 >= 0.0) {
        return Err(DdpcError::NotPsd("sigma2"));
    }
    sample_iid(&(DMatrix::identity(dim, dim) * spec.sigma2), count, spec.distribution, rng)
}

/// `Γ = col(CA^{L0},…,CA^{L−1}) · col(C,…,CA^{L0−1})^†`.
pub fn true_gamma(model: &StateSpaceModel, l0: usize, lp: usize) -> Result<DMatrix<f64>> {
    let ny = model.n_y();
    let nx = model.n_x();
    let mut blocks = Vec::with_capacity(l0 + lp);
    let mut cak = model.c().clone();
    for _ in 0..l0 + lp {
        blocks.push(cak.clone());
        cak = &cak * model.a();
    }
    let mut op = DMatrix::zeros(ny * l0, nx);
    let mut of = DMatrix::zeros(ny * lp, nx);
    for (k, blk) in blocks.iter().enumerate() {
        if k < l0 {
            op.view_mut((k * ny, 0), (ny, nx)).copy_from(blk);
        } else {
            of.view_mut(((k - l0) * ny, 0), (ny, nx)).copy_from(blk);
        }
    }
    if linalg::rank(&op) < nx {
        return Err(DdpcError::SingularOracle("observability stack is rank deficient"));
    }
    Ok(of * linalg::pinv(&op))
}

/// Offline experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Excitation {
    pub length: usize,
    pub input_variance: f64,
    pub disturbance_variance: f64,
    pub sigma2: f64,
    pub distribution: Distribution,
}

/// Open-loop experiment from `x0 = 0` with i.i.d. inputs and disturbances.
pub fn collect_offline(model: &StateSpaceModel, exc: &Excitation, seed: u64) -> Result<TrajectoryData> {
    let n = exc.length;
    let cov = |dim: usize, var: f64| DMatrix::identity(dim, dim) * var;
    let u = sample_iid(
        &cov(model.n_u(), exc.input_variance),
        n,
        Distribution::Gaussian,
        &mut rng::stream(seed, 0, Purpose::OfflineInput),
    )?;
    let w = sample_iid(
        &cov(model.n_w(), exc.disturbance_variance),
        n,
        Distribution::Gaussian,
        &mut rng::stream(seed, 0, Purpose::OfflineDisturbance),
    )?;
    let v = sample_iid(
        &cov(model.n_y(), exc.sigma2),
        n,
        exc.distribution,
        &mut rng::stream(seed, 0, Purpose::OfflineNoise),
    )?;
    simulate(model, &DVector::zeros(model.n_x()), &u, &w, &v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64) -> StateSpaceModel {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        StateSpaceModel::new(m(a), m(1.0), m(1.0), m(0.0), m(0.0)).unwrap()
    }

    #[test]
    fn scalar_recursion() {
        let t = simulate(
            &scalar(0.5),
            &DVector::zeros(1),
            &DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            &DMatrix::zeros(1, 2),
            &DMatrix::zeros(1, 2),
        )
        .unwrap();
        assert_eq!(t.y0.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_unstable_and_mismatched_models() {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        assert!(matches!(
            StateSpaceModel::new(m(1.2), m(1.0), m(1.0), m(0.0), m(0.0)),
            Err(DdpcError::Unstable(_))
        ));
        assert!(matches!(
            StateSpaceModel::new(m(0.2), DMatrix::zeros(2, 1), m(1.0), m(0.0), m(0.0)),
            Err(DdpcError::Dimension { .. })
        ));
    }

    #[test]
    fn simulate_rejects_wrong_lengths() {
        let r = simulate(
            &scalar(0.5),
            &DVector::zeros(1),
            &DMatrix::zeros(1, 3),
            &DMatrix::zeros(1, 2),
            &DMatrix::zeros(1, 3),
        );
        assert!(matches!(r, Err(DdpcError::Dimension { .. })));
    }

    #[test]
    fn scalar_gamma_is_powers_of_a() {
        let m = scalar(0.5);
        assert!((true_gamma(&m, 1, 1).unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
        let g = true_gamma(&m, 1, 2).unwrap();
        assert!((g[(0, 0)] - 0.5).abs() < 1e-15 && (g[(1, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn unobservable_model_is_a_singular_oracle() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.2]));
        let m = StateSpaceModel::new(
            a,
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        assert!(matches!(true_gamma(&m, 2, 1), Err(DdpcError::SingularOracle(_))));
    }

    #[test]
    fn negative_variance_is_rejected() {
        let spec = NoiseSpec {
            sigma2: -1.0,
            sigma_w: DMatrix::zeros(0, 0),
            w_bar: DVector::zeros(0),
            distribution: Distribution::Gaussian,
            seed: 0,
        };
        assert!(draw_noise(&spec, 3, 1).is_err());
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(sample_iid(&cov, 3, Distribution::Gaussian, &mut rng::stream(0, 0, Purpose::Test)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = StateSpaceModel::paper_sec5();
        let exc = Excitation {
            length: 20,
            input_variance: 1.0,
            disturbance_variance: 1.0,
            sigma2: 0.01,
            distribution: Distribution::Gaussian,
        };
        let t = collect_offline(&m, &exc, 3).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,u_0,w_0,y0_0,y_0\n"));
        let back = TrajectoryData::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }
}
