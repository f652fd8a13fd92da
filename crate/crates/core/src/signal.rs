//! Partitioned signal matrix `Z = col(U, W, Yp, Yf)` and the pseudoinverse predictor.
//!
//! Each column stacks one length-`L` window sample by sample (oldest first):
//! all inputs, then all disturbances, then all measured outputs. The output
//! rows are split into the first `L0` samples (`Yp`) and the last `L′` (`Yf`).

use std::io::{Read, Write};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{check_len, DdpcError, Result};
use crate::linalg;
use crate::lti::TrajectoryData;

const MAGIC: &[u8; 8] = b"DDPCSM01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Construction {
    Hankel,
    Page,
    Columns,
}

impl Construction {
    fn code(self) -> u64 {
        match self {
            Construction::Hankel => 0,
            Construction::Page => 1,
            Construction::Columns => 2,
        }
    }

    fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(Construction::Hankel),
            1 => Some(Construction::Page),
            2 => Some(Construction::Columns),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub struct SignalMatrix {
    u: DMatrix<f64>,
    w: DMatrix<f64>,
    yp: DMatrix<f64>,
    yf: DMatrix<f64>,
    n_u: usize,
    n_w: usize,
    n_y: usize,
    l0: usize,
    lp: usize,
    construction: Construction,
    data_pinv: OnceLock<DMatrix<f64>>,
}

impl Clone for SignalMatrix {
    fn clone(&self) -> Self {
        Self {
            u: self.u.clone(),
            w: self.w.clone(),
            yp: self.yp.clone(),
            yf: self.yf.clone(),
            data_pinv: OnceLock::new(),
            ..*self
        }
    }
}

impl PartialEq for SignalMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.construction == other.construction
            && (self.n_u, self.n_w, self.n_y, self.l0, self.lp) == (other.n_u, other.n_w, other.n_y, other.l0, other.lp)
            && self.u == other.u
            && self.w == other.w
            && self.yp == other.yp
            && self.yf == other.yf
    }
}

/// Statistics of the online prediction condition.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryCondition {
    pub u_ini: DVector<f64>,
    pub y_ini: DVector<f64>,
    /// Covariance of `y_ini`.
    pub p: DMatrix<f64>,
    pub w_bar: DVector<f64>,
    pub sigma_w: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationReport {
    pub numeric_rank: usize,
    pub required_rank: usize,
    /// Singular values of `col(Ψ, Yp)`, descending.
    pub singular_values: Vec<f64>,
    pub ok: bool,
}

impl SignalMatrix {
    fn from_windows(data: &TrajectoryData, starts: &[usize], l0: usize, lp: usize, construction: Construction) -> Self {
        let l = l0 + lp;
        let (n_u, n_w, n_y) = (data.n_u(), data.n_w(), data.n_y());
        let m = starts.len();
        let mut u = DMatrix::zeros(n_u * l, m);
        let mut w = DMatrix::zeros(n_w * l, m);
        let mut yp = DMatrix::zeros(n_y * l0, m);
        let mut yf = DMatrix::zeros(n_y * lp, m);
        for (j, &s) in starts.iter().enumerate() {
            // Column-major flattening of a (dim × L) block stacks samples in time order.
            let flat = |sig: &DMatrix<f64>, from: usize, len: usize| -> Vec<f64> {
                sig.columns(s + from, len).iter().copied().collect()
            };
            u.column_mut(j).copy_from_slice(&flat(&data.u, 0, l));
            w.column_mut(j).copy_from_slice(&flat(&data.w, 0, l));
            yp.column_mut(j).copy_from_slice(&flat(&data.y, 0, l0));
            yf.column_mut(j).copy_from_slice(&flat(&data.y, l0, lp));
        }
        Self {
            u,
            w,
            yp,
            yf,
            n_u,
            n_w,
            n_y,
            l0,
            lp,
            construction,
            data_pinv: OnceLock::new(),
        }
    }

    fn check_window(n: usize, l0: usize, lp: usize) -> Result<()> {
        if l0 == 0 || lp == 0 {
            return Err(DdpcError::InvalidArgument("L0 and L′ must be positive".into()));
        }
        if n < l0 + lp {
            return Err(DdpcError::InsufficientData { needed: l0 + lp, got: n });
        }
        Ok(())
    }

    /// Overlapping windows shifted by one sample: `M = N − L + 1`.
    pub fn build_hankel(data: &TrajectoryData, l0: usize, lp: usize) -> Result<Self> {
        Self::check_window(data.len(), l0, lp)?;
        let starts: Vec<usize> = (0..=data.len() - (l0 + lp)).collect();
        Ok(Self::from_windows(data, &starts, l0, lp, Construction::Hankel))
    }

    /// Non-overlapping windows: `M = ⌊N / L⌋`.
    pub fn build_page(data: &TrajectoryData, l0: usize, lp: usize) -> Result<Self> {
        Self::check_window(data.len(), l0, lp)?;
        let l = l0 + lp;
        let starts: Vec<usize> = (0..data.len() / l).map(|i| i * l).collect();
        Ok(Self::from_windows(data, &starts, l0, lp, Construction::Page))
    }

    /// One column per independent trajectory; each must have exactly `L` samples.
    pub fn columns(trajectories: &[TrajectoryData], l0: usize, lp: usize) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or(DdpcError::InsufficientData { needed: 1, got: 0 })?;
        let l = l0 + lp;
        Self::check_window(first.len(), l0, lp)?;
        let mut parts = Vec::with_capacity(trajectories.len());
        for t in trajectories {
            check_len("trajectory length", l, t.len())?;
            check_len("trajectory inputs", first.n_u(), t.n_u())?;
            check_len("trajectory disturbances", first.n_w(), t.n_w())?;
            check_len("trajectory outputs", first.n_y(), t.n_y())?;
            parts.push(Self::from_windows(t, &[0], l0, lp, Construction::Columns));
        }
        let cat = |f: fn(&SignalMatrix) -> &DMatrix<f64>| {
            let rows = f(&parts[0]).nrows();
            let mut out = DMatrix::zeros(rows, parts.len());
            for (j, p) in parts.iter().enumerate() {
                out.set_column(j, &f(p).column(0));
            }
            out
        };
        Ok(Self {
            u: cat(|s| &s.u),
            w: cat(|s| &s.w),
            yp: cat(|s| &s.yp),
            yf: cat(|s| &s.yf),
            n_u: first.n_u(),
            n_w: first.n_w(),
            n_y: first.n_y(),
            l0,
            lp,
            construction: Construction::Columns,
            data_pinv: OnceLock::new(),
        })
    }

    /// Builds with the named construction from one long trajectory.
    pub fn build(data: &TrajectoryData, l0: usize, lp: usize, construction: Construction) -> Result<Self> {
        match construction {
            Construction::Hankel => Self::build_hankel(data, l0, lp),
            Construction::Page => Self::build_page(data, l0, lp),
            Construction::Columns => {
                let l = l0 + lp;
                Self::check_window(data.len(), l0, lp)?;
                let pieces: Vec<TrajectoryData> = (0..data.len() / l).map(|i| data.window(i * l, l)).collect();
                Self::columns(&pieces, l0, lp)
            }
        }
    }

    /// Reads a trajectory CSV and builds the signal matrix from it.
    pub fn from_csv<R: Read>(input: R, l0: usize, lp: usize, construction: Construction) -> Result<Self> {
        Self::build(&TrajectoryData::read_csv(input)?, l0, lp, construction)
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }
    pub fn yp(&self) -> &DMatrix<f64> {
        &self.yp
    }
    pub fn yf(&self) -> &DMatrix<f64> {
        &self.yf
    }
    pub fn l0(&self) -> usize {
        self.l0
    }
    pub fn lp(&self) -> usize {
        self.lp
    }
    pub fn l(&self) -> usize {
        self.l0 + self.lp
    }
    pub fn m(&self) -> usize {
        self.u.ncols()
    }
    pub fn n_u(&self) -> usize {
        self.n_u
    }
    pub fn n_w(&self) -> usize {
        self.n_w
    }
    pub fn n_y(&self) -> usize {
        self.n_y
    }
    pub fn construction(&self) -> Construction {
        self.construction
    }

    /// `Ψ = col(U, W)`.
    pub fn psi(&self) -> DMatrix<f64> {
        linalg::vstack(&[&self.u, &self.w])
    }

    /// `col(Ψ, Yp)`.
    pub fn data_block(&self) -> DMatrix<f64> {
        linalg::vstack(&[&self.u, &self.w, &self.yp])
    }

    /// Full `Z = col(U, W, Yp, Yf)`.
    pub fn z(&self) -> DMatrix<f64> {
        linalg::vstack(&[&self.u, &self.w, &self.yp, &self.yf])
    }

    /// `col(Ψ, Yp)^†`, computed once.
    pub fn data_pinv(&self) -> &DMatrix<f64> {
        self.data_pinv.get_or_init(|| linalg::pinv(&self.data_block()))
    }

    /// Rank test of the fundamental lemma: `rank Z ≥ (n_u + n_w) L + n_x`.
    pub fn check_excitation(&self, n_x: usize) -> ExcitationReport {
        let required_rank = required_rank(self.n_u, self.n_w, self.l(), n_x);
        let numeric_rank = linalg::rank(&self.z());
        ExcitationReport {
            numeric_rank,
            required_rank,
            singular_values: linalg::singular_values(&self.data_block()),
            ok: numeric_rank >= required_rank,
        }
    }

    /// Stacked condition `col(u_ini, u_hat, w, y_ini)` after dimension checks.
    pub fn condition(
        &self,
        u_ini: &DVector<f64>,
        u_hat: &DVector<f64>,
        w: &DVector<f64>,
        y_ini: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_len("u_ini", self.n_u * self.l0, u_ini.len())?;
        check_len("u_hat", self.n_u * self.lp, u_hat.len())?;
        check_len("w", self.n_w * self.l(), w.len())?;
        check_len("y_ini", self.n_y * self.l0, y_ini.len())?;
        Ok(linalg::vcat(&[u_ini, u_hat, w, y_ini]))
    }

    /// Least-norm `g` with `col(Ψ, Yp) g = col(u_ini, u_hat, w, y_ini)` and `ŷ = Yf g`.
    pub fn pinv_predict(
        &self,
        u_ini: &DVector<f64>,
        u_hat: &DVector<f64>,
        w: &DVector<f64>,
        y_ini: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let cond = self.condition(u_ini, u_hat, w, y_ini)?;
        let g = self.data_pinv() * cond;
        let y = &self.yf * &g;
        Ok((g, y))
    }

    /// Binary cache: magic, seven little-endian `u64` header fields
    /// (`n_u, n_w, n_y, L0, L′, M, construction`), then `Z` column-major as `f64`.
    pub fn write_cache<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&self.cache_bytes())?;
        Ok(())
    }

    fn cache_bytes(&self) -> Vec<u8> {
        let z = self.z();
        let mut buf = Vec::with_capacity(8 + 7 * 8 + z.len() * 8);
        buf.extend_from_slice(MAGIC);
        for v in [
            self.n_u,
            self.n_w,
            self.n_y,
            self.l0,
            self.lp,
            self.m(),
        ] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.extend_from_slice(&self.construction.code().to_le_bytes());
        for v in z.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn read_cache<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < 64 || &bytes[..8] != MAGIC {
            return Err(DdpcError::Format("not a signal matrix cache".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let [n_u, n_w, n_y, l0, lp, m] = [0, 1, 2, 3, 4, 5].map(|i| word(i) as usize);
        let construction =
            Construction::from_code(word(6)).ok_or_else(|| DdpcError::Format("unknown construction code".into()))?;
        let l = l0 + lp;
        let rows = (n_u + n_w) * l + n_y * l;
        let expected = 64 + rows * m * 8;
        if bytes.len() != expected || l0 == 0 || lp == 0 {
            return Err(DdpcError::Format(format!(
                "cache size {} does not match header (expected {expected})",
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes[64..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let z = DMatrix::from_column_slice(rows, m, &vals);
        let mut o = 0;
        let mut take = |r: usize| {
            let blk = z.rows(o, r).into_owned();
            o += r;
            blk
        };
        Ok(Self {
            u: take(n_u * l),
            w: take(n_w * l),
            yp: take(n_y * l0),
            yf: take(n_y * lp),
            n_u,
            n_w,
            n_y,
            l0,
            lp,
            construction,
            data_pinv: OnceLock::new(),
        })
    }

    /// SHA-256 of the cache encoding, hex encoded.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.cache_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn required_rank(n_u: usize, n_w: usize, l: usize, n_x: usize) -> usize {
    (n_u + n_w) * l + n_x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_data() -> TrajectoryData {
        TrajectoryData::new(
            DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]),
            DMatrix::zeros(0, 3),
            DMatrix::from_row_slice(1, 3, &[4.0, 5.0, 6.0]),
            DMatrix::from_row_slice(1, 3, &[4.0, 5.0, 6.0]),
        )
        .unwrap()
    }

    #[test]
    fn hand_enumerated_hankel() {
        let sm = SignalMatrix::build_hankel(&scalar_data(), 1, 1).unwrap();
        assert_eq!(sm.u(), &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]));
        assert_eq!(sm.yp(), &DMatrix::from_row_slice(1, 2, &[4.0, 5.0]));
        assert_eq!(sm.yf(), &DMatrix::from_row_slice(1, 2, &[5.0, 6.0]));
        assert_eq!(sm.w().nrows(), 0);
        assert_eq!(sm.psi().nrows(), 2);
    }

    #[test]
    fn too_short_data_is_rejected() {
        let r = SignalMatrix::build_hankel(&scalar_data(), 2, 2);
        assert!(matches!(r, Err(DdpcError::InsufficientData { needed: 4, got: 3 })));
        assert!(SignalMatrix::build_page(&scalar_data(), 2, 2).is_err());
    }

    #[test]
    fn degenerate_single_window() {
        let sm = SignalMatrix::build_hankel(&scalar_data(), 2, 1).unwrap();
        assert_eq!(sm.m(), 1);
        assert_eq!(sm.z().column(0).as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let report = sm.check_excitation(1);
        assert_eq!(report.required_rank, 4);
        assert!(!report.ok);
    }

    #[test]
    fn required_rank_formula() {
        assert_eq!(required_rank(1, 1, 14, 4), 32);
    }

    #[test]
    fn zero_query_gives_zero_prediction() {
        let sm = SignalMatrix::build_hankel(&scalar_data(), 1, 1).unwrap();
        let z = |n| DVector::zeros(n);
        let (g, y) = sm.pinv_predict(&z(1), &z(1), &z(0), &z(1)).unwrap();
        assert_eq!(g.amax(), 0.0);
        assert_eq!(y.amax(), 0.0);
        assert!(matches!(
            sm.pinv_predict(&z(2), &z(1), &z(0), &z(1)),
            Err(DdpcError::Dimension { .. })
        ));
    }

    #[test]
    fn cache_round_trip_and_rejects_garbage() {
        let sm = SignalMatrix::build_hankel(&scalar_data(), 1, 1).unwrap();
        let mut buf = Vec::new();
        sm.write_cache(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"DDPCSM01");
        assert_eq!(SignalMatrix::read_cache(buf.as_slice()).unwrap(), sm);
        buf.pop();
        assert!(matches!(SignalMatrix::read_cache(buf.as_slice()), Err(DdpcError::Format(_))));
        assert!(SignalMatrix::read_cache(&b"DDPCPP01"[..]).is_err());
    }
}
