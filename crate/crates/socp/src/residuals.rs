use nalgebra::DVector;

use crate::program::{ConeProgram, ProgramError};
use crate::solver::Duals;

/// Absolute KKT residuals in the infinity norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// Worst constraint violation.
    pub primal: f64,
    /// Stationarity error, or dual cone violation if larger.
    pub dual: f64,
    /// Worst complementarity product.
    pub gap: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

/// Certificate check for a candidate primal/dual pair, independent of the solver.
///
/// Stationarity is `P z + f + Aeqᵀ y + Gᵀ λ − Σⱼ (u₀ⱼ aⱼ + Cⱼᵀ u₁ⱼ) = 0`.
pub fn kkt_residuals(prog: &ConeProgram, z: &DVector<f64>, duals: &Duals) -> Result<KktResiduals, ProgramError> {
    let n = prog.num_vars();
    let check = |what, expected: usize, got: usize| {
        if expected == got {
            Ok(())
        } else {
            Err(ProgramError::Dimension { what, expected, got })
        }
    };
    check("z", n, z.len())?;
    check("equality duals", prog.aeq.nrows(), duals.eq.len())?;
    check("inequality duals", prog.g.nrows(), duals.ineq.len())?;
    check("cone duals", prog.socs.len(), duals.soc.len())?;
    for (soc, u) in prog.socs.iter().zip(&duals.soc) {
        check("cone dual dimension", soc.dim(), u.len())?;
    }

    let mut primal: f64 = 0.0;
    let mut dual_cone: f64 = 0.0;
    let mut gap: f64 = 0.0;

    if prog.aeq.nrows() > 0 {
        primal = primal.max((&prog.aeq * z - &prog.beq).amax());
    }
    let mut stationarity = &prog.p * z + &prog.f;
    if prog.aeq.nrows() > 0 {
        stationarity += prog.aeq.tr_mul(&duals.eq);
    }
    if prog.g.nrows() > 0 {
        let slack = &prog.h - &prog.g * z;
        for i in 0..slack.len() {
            primal = primal.max(-slack[i]);
            dual_cone = dual_cone.max(-duals.ineq[i]);
            gap = gap.max((duals.ineq[i] * slack[i]).abs());
        }
        stationarity += prog.g.tr_mul(&duals.ineq);
    }
    for (soc, u) in prog.socs.iter().zip(&duals.soc) {
        let k = soc.c.nrows();
        let s0 = soc.a.dot(z) + soc.b;
        let s1 = &soc.c * z + &soc.d;
        primal = primal.max(s1.norm() - s0);
        let u1 = u.rows(1, k);
        dual_cone = dual_cone.max(u1.norm() - u[0]);
        gap = gap.max((u[0] * s0 + u1.dot(&s1)).abs());
        stationarity -= &soc.a * u[0] + soc.c.tr_mul(&u1.clone_owned());
    }
    let dual = stationarity.amax().max(dual_cone);
    Ok(KktResiduals {
        primal: primal.max(0.0),
        dual,
        gap,
    })
}
