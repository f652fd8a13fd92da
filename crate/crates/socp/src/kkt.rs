//! Linear solves with the scaled, bordered KKT matrix
//!
//! ```text
//! [ P   Aᵀ   q ] [dx]   [r1]
//! [ A  −H   −b ] [dz] = [r2]
//! [ hᵀ  bᵀ  −c ] [dτ]   [r3]
//! ```
//!
//! where `H` is the Nesterov–Todd block `W²` on cone rows and zero on
//! equality rows, `h = 2Pξ + q` and `c = ξᵀPξ + κ/τ`. The border (last row
//! and column) is optional; without it the system is the plain `2×2` block
//! `K` used for the starting point.
//!
//! Cone rows are eliminated (`dz = H⁻¹(A dx − b dτ − r2)`), leaving a dense
//! system of size `n + m_eq` that is LU-factorized once per iteration. The
//! border is handled by a Schur complement on `dτ` whose denominator
//! `−(‖x₁ − ξ‖²_P + z₁ᵀHz₁ + κ/τ)` is formed without cancellation. When `K`
//! is singular (free directions in unbounded problems) that route loses
//! accuracy, so the bordered matrix is also factorized and the better of the
//! two refined solutions is returned. A static diagonal regularization keeps
//! both factorizations nonsingular and iterative refinement against the
//! unregularized operator removes its bias.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::cones::{ConeLayout, Scaling};

pub(crate) const STATIC_REG: f64 = 1e-9;
const REFINE_STEPS: usize = 8;

/// Data defining the last row/column of the bordered system.
pub(crate) struct Border {
    pub xi: DVector<f64>,
    pub kappa_over_tau: f64,
}

struct BorderData {
    h: DVector<f64>,
    c: f64,
    /// Solution of `K [x₁; z₁] = [−q; b]`.
    x1: DVector<f64>,
    z1: DVector<f64>,
    den: f64,
    lu: Option<LU<f64, Dyn, Dyn>>,
}

pub(crate) struct KktSystem<'a> {
    p: &'a DMatrix<f64>,
    a: &'a DMatrix<f64>,
    q: &'a DVector<f64>,
    b: &'a DVector<f64>,
    layout: &'a ConeLayout,
    scaling: &'a Scaling,
    lu: LU<f64, Dyn, Dyn>,
    border: Option<BorderData>,
}

/// Per-problem data reused across iterations.
pub(crate) struct KktCache {
    /// `A₁ᵀA₁` for the tail rows of each second-order cone block.
    soc_tail_gram: Vec<DMatrix<f64>>,
}

impl KktCache {
    pub fn new(a: &DMatrix<f64>, layout: &ConeLayout) -> Self {
        let soc_tail_gram = layout
            .socs
            .iter()
            .map(|&(o, d)| {
                let tail = a.rows(o + 1, d - 1);
                tail.tr_mul(&tail)
            })
            .collect();
        Self { soc_tail_gram }
    }
}

pub(crate) struct Rhs<'r> {
    pub r1: &'r DVector<f64>,
    pub r2: &'r DVector<f64>,
    pub r3: f64,
}

type Step = (DVector<f64>, DVector<f64>, f64);

fn max_abs(e1: &DVector<f64>, e2: &DVector<f64>, e3: f64) -> f64 {
    e1.amax().max(e2.amax()).max(e3.abs())
}

impl<'a> KktSystem<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn factor(
        p: &'a DMatrix<f64>,
        a: &'a DMatrix<f64>,
        q: &'a DVector<f64>,
        b: &'a DVector<f64>,
        layout: &'a ConeLayout,
        scaling: &'a Scaling,
        cache: &KktCache,
        border: Option<Border>,
    ) -> Option<Self> {
        let n = p.nrows();
        let me = layout.n_zero;
        let mut reduced = p.clone();
        for i in 0..n {
            reduced[(i, i)] += STATIC_REG;
        }

        // Nonnegative rows: Aᵀ diag(1/w²) A.
        let weights = scaling.nonneg_weights();
        if layout.n_nonneg > 0 {
            let mut scaled = a.rows(layout.n_zero, layout.n_nonneg).clone_owned();
            for (k, mut row) in scaled.row_iter_mut().enumerate() {
                row /= weights[k];
            }
            reduced += scaled.tr_mul(&scaled);
        }

        // Second-order cones: η⁻²(2 uuᵀ + A₁ᵀA₁ − a₀a₀ᵀ) with u = Aᵀ(J w).
        for ((&(o, d), (eta, w)), gram) in layout
            .socs
            .iter()
            .zip(scaling.soc_blocks())
            .zip(&cache.soc_tail_gram)
        {
            let block = a.rows(o, d);
            let mut jw = w.clone();
            for j in 1..d {
                jw[j] = -jw[j];
            }
            let u = block.tr_mul(&jw);
            let a0 = block.row(0).transpose();
            let inv_e2 = 1.0 / (eta * eta);
            reduced += (&u * u.transpose() * 2.0 + gram - &a0 * a0.transpose()) * inv_e2;
        }

        let mut k = DMatrix::zeros(n + me, n + me);
        k.view_mut((0, 0), (n, n)).copy_from(&reduced);
        if me > 0 {
            let aeq = a.rows(0, me);
            k.view_mut((n, 0), (me, n)).copy_from(&aeq);
            k.view_mut((0, n), (n, me)).copy_from(&aeq.transpose());
            for i in 0..me {
                k[(n + i, n + i)] = -STATIC_REG;
            }
        }
        if k.iter().any(|v| !v.is_finite()) {
            return None;
        }

        let bordered = border.as_ref().map(|border| {
            let pxi = p * &border.xi;
            let h = &pxi * 2.0 + q;
            let c = border.xi.dot(&pxi) + border.kappa_over_tau;
            let hinv_b = scaling.apply_h_inv(layout, b);
            let at_hinv_b = a.tr_mul(&hinv_b);
            let col = q - &at_hinv_b;
            let row = &h + &at_hinv_b;
            let t = n + me;
            let mut full = k.clone().insert_row(t, 0.0).insert_column(t, 0.0);
            for i in 0..n {
                full[(i, t)] = col[i];
                full[(t, i)] = row[i];
            }
            for i in 0..me {
                full[(n + i, t)] = -b[i];
                full[(t, n + i)] = b[i];
            }
            full[(t, t)] = -(c + b.dot(&hinv_b));
            (h, c, full)
        });

        let lu = k.lu();
        let k_ok = lu.is_invertible();
        let mut sys = Self {
            p,
            a,
            q,
            b,
            layout,
            scaling,
            lu,
            border: None,
        };

        let Some((border, (h, c, full))) = border.zip(bordered) else {
            return k_ok.then_some(sys);
        };
        let full_lu = Some(full)
            .filter(|m| m.iter().all(|v| v.is_finite()))
            .map(|m| m.lu())
            .filter(|lu| lu.is_invertible());
        let mut x1 = DVector::zeros(n);
        let mut z1 = DVector::zeros(layout.m);
        let mut den = f64::NAN;
        if k_ok {
            let neg_q = -q;
            let first = sys.refine(
                &Rhs {
                    r1: &neg_q,
                    r2: b,
                    r3: 0.0,
                },
                false,
                Self::solve_k_step,
            );
            if let Some((x, z, _)) = first {
                let d = &x - &border.xi;
                let hz = scaling.apply_h(layout, &z);
                den = -(d.dot(&(p * &d)) + z.dot(&hz) + border.kappa_over_tau);
                x1 = x;
                z1 = z;
            }
        }
        if !den.is_finite() && full_lu.is_none() {
            return None;
        }
        sys.border = Some(BorderData {
            h,
            c,
            x1,
            z1,
            den,
            lu: full_lu,
        });
        Some(sys)
    }

    /// Regularized solve with `K` only.
    fn solve_k_step(&self, rhs: &Rhs<'_>) -> Option<Step> {
        if !self.lu.is_invertible() {
            return None;
        }
        let n = self.p.nrows();
        let me = self.layout.n_zero;
        let hinv_r2 = self.scaling.apply_h_inv(self.layout, rhs.r2);
        let mut v = DVector::zeros(n + me);
        v.rows_mut(0, n).copy_from(&(rhs.r1 + self.a.tr_mul(&hinv_r2)));
        if me > 0 {
            v.rows_mut(n, me).copy_from(&rhs.r2.rows(0, me));
        }
        let sol = self.lu.solve(&v)?;
        let dx = sol.rows(0, n).clone_owned();
        let mut dz = self.scaling.apply_h_inv(self.layout, &(self.a * &dx)) - hinv_r2;
        if me > 0 {
            dz.rows_mut(0, me).copy_from(&sol.rows(n, me));
        }
        Some((dx, dz, 0.0))
    }

    /// Bordered solve through the Schur complement on `dτ`.
    fn solve_schur(&self, rhs: &Rhs<'_>) -> Option<Step> {
        let bd = self.border.as_ref()?;
        if !bd.den.is_finite() || bd.den == 0.0 {
            return None;
        }
        let (x2, z2, _) = self.solve_k_step(rhs)?;
        let dtau = (rhs.r3 - bd.h.dot(&x2) - self.b.dot(&z2)) / bd.den;
        Some((x2 + &bd.x1 * dtau, z2 + &bd.z1 * dtau, dtau))
    }

    /// Bordered solve through the LU of the full bordered matrix.
    fn solve_bordered_lu(&self, rhs: &Rhs<'_>) -> Option<Step> {
        let bd = self.border.as_ref()?;
        let lu = bd.lu.as_ref()?;
        let n = self.p.nrows();
        let me = self.layout.n_zero;
        let hinv_r2 = self.scaling.apply_h_inv(self.layout, rhs.r2);
        let mut v = DVector::zeros(n + me + 1);
        v.rows_mut(0, n).copy_from(&(rhs.r1 + self.a.tr_mul(&hinv_r2)));
        if me > 0 {
            v.rows_mut(n, me).copy_from(&rhs.r2.rows(0, me));
        }
        v[n + me] = rhs.r3 + self.b.dot(&hinv_r2);
        let sol = lu.solve(&v)?;
        let dx = sol.rows(0, n).clone_owned();
        let dtau = sol[n + me];
        let cone_rhs = self.a * &dx - self.b * dtau;
        let mut dz = self.scaling.apply_h_inv(self.layout, &cone_rhs) - hinv_r2;
        if me > 0 {
            dz.rows_mut(0, me).copy_from(&sol.rows(n, me));
        }
        Some((dx, dz, dtau))
    }

    fn residual(&self, rhs: &Rhs<'_>, with_border: bool, x: &Step) -> (DVector<f64>, DVector<f64>, f64) {
        let (dx, dz, dtau) = x;
        let mut e1 = rhs.r1 - (self.p * dx + self.a.tr_mul(dz));
        let mut e2 = rhs.r2 - (self.a * dx - self.scaling.apply_h(self.layout, dz));
        let mut e3 = 0.0;
        if with_border {
            if let Some(bd) = &self.border {
                e1 -= self.q * *dtau;
                e2 += self.b * *dtau;
                e3 = rhs.r3 - (bd.h.dot(dx) + self.b.dot(dz) - bd.c * dtau);
            }
        }
        (e1, e2, e3)
    }

    fn refine<F>(&self, rhs: &Rhs<'_>, with_border: bool, inner: F) -> Option<Step>
    where
        F: Fn(&Self, &Rhs<'_>) -> Option<Step>,
    {
        self.refine_with_error(rhs, with_border, inner).map(|(x, _)| x)
    }

    /// Iterative refinement of `inner` against the unregularized operator;
    /// also returns the final residual relative to the right-hand side.
    fn refine_with_error<F>(&self, rhs: &Rhs<'_>, with_border: bool, inner: F) -> Option<(Step, f64)>
    where
        F: Fn(&Self, &Rhs<'_>) -> Option<Step>,
    {
        let mut x = inner(self, rhs)?;
        let scale = 1.0 + max_abs(rhs.r1, rhs.r2, rhs.r3);
        let (mut e1, mut e2, mut e3) = self.residual(rhs, with_border, &x);
        let mut err = max_abs(&e1, &e2, e3);
        for _ in 0..REFINE_STEPS {
            if !(err > 1e-14 * scale) {
                break;
            }
            let Some(c) = inner(
                self,
                &Rhs {
                    r1: &e1,
                    r2: &e2,
                    r3: e3,
                },
            ) else {
                break;
            };
            let next = (&x.0 + c.0, &x.1 + c.1, x.2 + c.2);
            let (n1, n2, n3) = self.residual(rhs, with_border, &next);
            let nerr = max_abs(&n1, &n2, n3);
            if !(nerr < err) {
                break;
            }
            x = next;
            (e1, e2, e3) = (n1, n2, n3);
            err = nerr;
        }
        if x.0.iter().chain(x.1.iter()).any(|v| !v.is_finite()) || !x.2.is_finite() || !err.is_finite() {
            return None;
        }
        Some((x, err / scale))
    }

    /// Solves the unregularized system with iterative refinement.
    pub fn solve(&self, rhs: &Rhs<'_>) -> Option<Step> {
        if self.border.is_none() {
            return self.refine(rhs, false, Self::solve_k_step);
        }
        let schur = self.refine_with_error(rhs, true, Self::solve_schur);
        if let Some((x, err)) = &schur {
            if *err <= 1e-12 {
                return Some(x.clone());
            }
        }
        let lu = self.refine_with_error(rhs, true, Self::solve_bordered_lu);
        match (schur, lu) {
            (Some(a), Some(b)) => Some(if a.1 <= b.1 { a.0 } else { b.0 }),
            (a, b) => a.or(b).map(|x| x.0),
        }
    }
}
