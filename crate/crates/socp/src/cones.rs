//! Cone bookkeeping for the product cone `{0}ᵐᵉ × ℝ₊ᵐⁱ × Q₁ × … × Qₖ`.
//!
//! Vectors handed to these routines span all constraint rows; the leading
//! zero-cone rows are skipped by every cone operation.

use nalgebra::DVector;

#[derive(Debug, Clone)]
pub(crate) struct ConeLayout {
    pub n_zero: usize,
    pub n_nonneg: usize,
    /// (offset, dim) of each second-order cone block.
    pub socs: Vec<(usize, usize)>,
    pub m: usize,
}

impl ConeLayout {
    pub fn new(n_zero: usize, n_nonneg: usize, soc_dims: &[usize]) -> Self {
        let mut offset = n_zero + n_nonneg;
        let mut socs = Vec::with_capacity(soc_dims.len());
        for &d in soc_dims {
            socs.push((offset, d));
            offset += d;
        }
        Self {
            n_zero,
            n_nonneg,
            socs,
            m: offset,
        }
    }

    pub fn nonneg(&self) -> std::ops::Range<usize> {
        self.n_zero..self.n_zero + self.n_nonneg
    }

    pub fn degree(&self) -> usize {
        self.n_nonneg + self.socs.len()
    }

    /// Smallest spectral value of `x` over all non-zero cones.
    pub fn min_eig(&self, x: &DVector<f64>) -> f64 {
        let mut m = f64::INFINITY;
        for i in self.nonneg() {
            m = m.min(x[i]);
        }
        for &(o, d) in &self.socs {
            let tail = x.rows(o + 1, d - 1).norm();
            m = m.min(x[o] - tail);
        }
        m
    }

    /// `x += alpha * e` on every non-zero cone.
    pub fn add_identity(&self, x: &mut DVector<f64>, alpha: f64) {
        for i in self.nonneg() {
            x[i] += alpha;
        }
        for &(o, _) in &self.socs {
            x[o] += alpha;
        }
    }

    pub fn dot(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let start = self.n_zero;
        x.rows(start, self.m - start).dot(&y.rows(start, self.m - start))
    }

    /// Jordan product `x ∘ y`; zero rows are left at zero.
    pub fn jordan_prod(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for i in self.nonneg() {
            out[i] = x[i] * y[i];
        }
        for &(o, d) in &self.socs {
            let xs = x.rows(o, d);
            let ys = y.rows(o, d);
            out[o] = xs.dot(&ys);
            for j in 1..d {
                out[o + j] = xs[0] * ys[j] + ys[0] * xs[j];
            }
        }
        out
    }

    /// Solves `lambda ∘ u = d` for `u`.
    pub fn jordan_div(&self, lambda: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m);
        for i in self.nonneg() {
            out[i] = d[i] / lambda[i];
        }
        for &(o, k) in &self.socs {
            let l0 = lambda[o];
            let l1 = lambda.rows(o + 1, k - 1);
            let d1 = d.rows(o + 1, k - 1);
            let det = l0 * l0 - l1.norm_squared();
            let u0 = (l0 * d[o] - l1.dot(&d1)) / det;
            out[o] = u0;
            for j in 1..k {
                out[o + j] = (d[o + j] - lambda[o + j] * u0) / l0;
            }
        }
        out
    }

    /// Largest `alpha` with `x + alpha * dx` in the cone (may be infinite).
    pub fn max_step(&self, x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
        let mut alpha = f64::INFINITY;
        for i in self.nonneg() {
            if dx[i] < 0.0 {
                alpha = alpha.min(-x[i] / dx[i]);
            }
        }
        for &(o, d) in &self.socs {
            alpha = alpha.min(soc_step(x.rows(o, d).as_slice(), dx.rows(o, d).as_slice()));
        }
        alpha
    }
}

fn soc_step(x: &[f64], dx: &[f64]) -> f64 {
    // Roots of (x0 + a dx0)² − ‖x1 + a dx1‖² = 0 together with x0 + a dx0 ≥ 0.
    let qa = dx[0] * dx[0] - dx[1..].iter().map(|v| v * v).sum::<f64>();
    let qb = 2.0
        * (x[0] * dx[0]
            - x[1..]
                .iter()
                .zip(&dx[1..])
                .map(|(a, b)| a * b)
                .sum::<f64>());
    let qc = (x[0] * x[0] - x[1..].iter().map(|v| v * v).sum::<f64>()).max(0.0);

    let mut alpha = f64::INFINITY;
    if dx[0] < 0.0 {
        alpha = -x[0] / dx[0];
    }
    let root = smallest_positive_root(qa, qb, qc);
    alpha.min(root)
}

fn smallest_positive_root(a: f64, b: f64, c: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return f64::INFINITY;
    }
    if a.abs() <= 1e-14 * scale {
        return if b < 0.0 { -c / b } else { f64::INFINITY };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    let sq = disc.sqrt();
    // Numerically stable pair of roots.
    let q = -0.5 * (b + b.signum() * sq);
    let mut best = f64::INFINITY;
    for r in [q / a, if q != 0.0 { c / q } else { f64::INFINITY }] {
        if r >= 0.0 && r < best {
            best = r;
        }
    }
    best
}

/// Nesterov–Todd scaling point for the current iterate.
#[derive(Debug, Clone)]
pub(crate) struct Scaling {
    /// `sqrt(s / z)` per nonnegative row.
    nonneg: Vec<f64>,
    /// `(eta, wbar)` per second-order cone, with `wbarᵀ J wbar = 1`.
    socs: Vec<(f64, DVector<f64>)>,
}

impl Scaling {
    /// Identity scaling, used to compute the starting point.
    pub fn identity(layout: &ConeLayout) -> Self {
        Self {
            nonneg: vec![1.0; layout.n_nonneg],
            socs: layout
                .socs
                .iter()
                .map(|&(_, d)| {
                    let mut e = DVector::zeros(d);
                    e[0] = 1.0;
                    (1.0, e)
                })
                .collect(),
        }
    }

    /// Returns `None` when `s` or `z` has left the cone interior.
    pub fn nesterov_todd(layout: &ConeLayout, s: &DVector<f64>, z: &DVector<f64>) -> Option<Self> {
        let mut nonneg = Vec::with_capacity(layout.n_nonneg);
        for i in layout.nonneg() {
            if !(s[i] > 0.0 && z[i] > 0.0) {
                return None;
            }
            nonneg.push((s[i] / z[i]).sqrt());
        }
        let mut socs = Vec::with_capacity(layout.socs.len());
        for &(o, d) in &layout.socs {
            let sv = s.rows(o, d);
            let zv = z.rows(o, d);
            let s_det = sv[0] * sv[0] - sv.rows(1, d - 1).norm_squared();
            let z_det = zv[0] * zv[0] - zv.rows(1, d - 1).norm_squared();
            if !(s_det > 0.0 && z_det > 0.0 && sv[0] > 0.0 && zv[0] > 0.0) {
                return None;
            }
            let s_nrm = s_det.sqrt();
            let z_nrm = z_det.sqrt();
            let sbar = sv / s_nrm;
            let zbar = zv / z_nrm;
            let gamma = ((1.0 + sbar.dot(&zbar)) / 2.0).sqrt();
            let mut w = DVector::zeros(d);
            w[0] = (sbar[0] + zbar[0]) / (2.0 * gamma);
            for j in 1..d {
                w[j] = (sbar[j] - zbar[j]) / (2.0 * gamma);
            }
            // Renormalize so that wᵀJw = 1 exactly.
            let w_det = w[0] * w[0] - w.rows(1, d - 1).norm_squared();
            if !(w_det > 0.0) {
                return None;
            }
            w /= w_det.sqrt();
            let eta = (s_nrm / z_nrm).sqrt();
            socs.push((eta, w));
        }
        Some(Self { nonneg, socs })
    }

    /// `W v` on cone rows.
    pub fn apply_w(&self, layout: &ConeLayout, v: &DVector<f64>) -> DVector<f64> {
        self.apply(layout, v, false)
    }

    /// `W⁻¹ v` on cone rows.
    pub fn apply_w_inv(&self, layout: &ConeLayout, v: &DVector<f64>) -> DVector<f64> {
        self.apply(layout, v, true)
    }

    fn apply(&self, layout: &ConeLayout, v: &DVector<f64>, inverse: bool) -> DVector<f64> {
        let mut out = DVector::zeros(layout.m);
        for (k, i) in layout.nonneg().enumerate() {
            out[i] = if inverse {
                v[i] / self.nonneg[k]
            } else {
                v[i] * self.nonneg[k]
            };
        }
        for (&(o, d), (eta, w)) in layout.socs.iter().zip(&self.socs) {
            let sign = if inverse { -1.0 } else { 1.0 };
            let scale = if inverse { 1.0 / eta } else { *eta };
            let v0 = v[o];
            let w1v1: f64 = (1..d).map(|j| w[j] * v[o + j]).sum();
            out[o] = scale * (w[0] * v0 + sign * w1v1);
            let coef = sign * v0 + w1v1 / (1.0 + w[0]);
            for j in 1..d {
                out[o + j] = scale * (v[o + j] + coef * w[j]);
            }
        }
        out
    }

    /// `H v = W² v` on cone rows (zero rows map to zero).
    pub fn apply_h(&self, layout: &ConeLayout, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(layout.m);
        for (k, i) in layout.nonneg().enumerate() {
            out[i] = v[i] * self.nonneg[k] * self.nonneg[k];
        }
        for (&(o, d), (eta, w)) in layout.socs.iter().zip(&self.socs) {
            // η²(2wwᵀ − J) v
            let wv = w.dot(&v.rows(o, d));
            let e2 = eta * eta;
            out[o] = e2 * (2.0 * w[0] * wv - v[o]);
            for j in 1..d {
                out[o + j] = e2 * (2.0 * w[j] * wv + v[o + j]);
            }
        }
        out
    }

    /// `H⁻¹ v` on cone rows (zero rows map to zero).
    pub fn apply_h_inv(&self, layout: &ConeLayout, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(layout.m);
        for (k, i) in layout.nonneg().enumerate() {
            out[i] = v[i] / (self.nonneg[k] * self.nonneg[k]);
        }
        for (&(o, d), (eta, w)) in layout.socs.iter().zip(&self.socs) {
            // η⁻²(2(Jw)(Jw)ᵀ − J) v
            let jwv = w[0] * v[o] - (1..d).map(|j| w[j] * v[o + j]).sum::<f64>();
            let e2 = 1.0 / (eta * eta);
            out[o] = e2 * (2.0 * w[0] * jwv - v[o]);
            for j in 1..d {
                out[o + j] = e2 * (-2.0 * w[j] * jwv + v[o + j]);
            }
        }
        out
    }

    pub fn nonneg_weights(&self) -> &[f64] {
        &self.nonneg
    }

    pub fn soc_blocks(&self) -> &[(f64, DVector<f64>)] {
        &self.socs
    }
}
