use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProgramError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("quadratic cost matrix is not symmetric positive semidefinite")]
    NotPsd,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("malformed program dump at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// `‖C z + d‖₂ ≤ aᵀz + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocConstraint {
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub a: DVector<f64>,
    pub b: f64,
}

impl SocConstraint {
    pub fn new(c: DMatrix<f64>, d: DVector<f64>, a: DVector<f64>, b: f64) -> Self {
        Self { c, d, a, b }
    }

    /// Cone dimension, counting the scalar bound.
    pub fn dim(&self) -> usize {
        self.c.nrows() + 1
    }

    /// `‖C z + d‖ − (aᵀz + b)`, positive when violated.
    pub fn violation(&self, z: &DVector<f64>) -> f64 {
        (&self.c * z + &self.d).norm() - (self.a.dot(z) + self.b)
    }
}

/// Minimize `½ zᵀPz + fᵀz` subject to `Aeq z = beq`, `G z ≤ h` and a list of
/// second-order cone constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeProgram {
    pub p: DMatrix<f64>,
    pub f: DVector<f64>,
    pub aeq: DMatrix<f64>,
    pub beq: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub socs: Vec<SocConstraint>,
}

impl ConeProgram {
    pub fn new(p: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        Self {
            p,
            f,
            aeq: DMatrix::zeros(0, n),
            beq: DVector::zeros(0),
            g: DMatrix::zeros(0, n),
            h: DVector::zeros(0),
            socs: Vec::new(),
        }
    }

    /// Linear objective only.
    pub fn linear(f: DVector<f64>) -> Self {
        let n = f.len();
        Self::new(DMatrix::zeros(n, n), f)
    }

    pub fn with_equalities(mut self, aeq: DMatrix<f64>, beq: DVector<f64>) -> Self {
        self.aeq = aeq;
        self.beq = beq;
        self
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        self.g = g;
        self.h = h;
        self
    }

    pub fn with_soc(mut self, soc: SocConstraint) -> Self {
        self.socs.push(soc);
        self
    }

    pub fn num_vars(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + self.f.dot(z)
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        let n = self.num_vars();
        let dim = |what, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(ProgramError::Dimension { what, expected, got })
            }
        };
        dim("P rows", n, self.p.nrows())?;
        dim("P columns", n, self.p.ncols())?;
        dim("Aeq columns", n, self.aeq.ncols())?;
        dim("beq", self.aeq.nrows(), self.beq.len())?;
        dim("G columns", n, self.g.ncols())?;
        dim("h", self.g.nrows(), self.h.len())?;
        for soc in &self.socs {
            dim("cone C columns", n, soc.c.ncols())?;
            dim("cone d", soc.c.nrows(), soc.d.len())?;
            dim("cone a", n, soc.a.len())?;
        }

        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        let finite_v = |v: &DVector<f64>| v.iter().all(|x| x.is_finite());
        if !finite(&self.p) || !finite_v(&self.f) {
            return Err(ProgramError::NonFinite("objective"));
        }
        if !finite(&self.aeq) || !finite_v(&self.beq) || !finite(&self.g) || !finite_v(&self.h) {
            return Err(ProgramError::NonFinite("linear constraints"));
        }
        if self
            .socs
            .iter()
            .any(|s| !finite(&s.c) || !finite_v(&s.d) || !finite_v(&s.a) || !s.b.is_finite())
        {
            return Err(ProgramError::NonFinite("cone constraints"));
        }

        if n > 0 {
            let scale = self.p.amax().max(1.0);
            let asym = (&self.p - self.p.transpose()).amax();
            if asym > 1e-9 * scale {
                return Err(ProgramError::NotPsd);
            }
            let shifted = &self.p + DMatrix::identity(n, n) * (1e-12 * scale);
            if shifted.cholesky().is_none() {
                return Err(ProgramError::NotPsd);
            }
        }
        Ok(())
    }
}
