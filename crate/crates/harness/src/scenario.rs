//! Validated scenario and the offline pipeline from data to predictor.

use std::sync::Arc;

use ddpc_core::controller::{
    self, ClosedLoop, ClosedLoopLog, Constraints, ControlConfig, InputConstraints, OnlineStreams, OutputConstraints,
    Polytope, Reference, Variant,
};
use ddpc_core::lti::{self, Excitation, NoiseSpec, StateSpaceModel, TrajectoryData};
use ddpc_core::predictor::{self, PredictorParams, RegularizerKind};
use ddpc_core::signal::{Construction, SignalMatrix};
use ddpc_core::DdpcError;
use nalgebra::{DMatrix, DVector};

use crate::config::{BuiltinModel, ConstraintSpec, CovarianceSpec, ModelSpec, ReferenceSpec, ScenarioConfig};
use crate::error::{HarnessError, Result};

/// A configuration resolved into library types. Construction performs all
/// validation, so later failures are runtime errors.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub model: StateSpaceModel,
    pub excitation: Excitation,
    pub construction: Construction,
    pub design: RegularizerKind,
    pub control: ControlConfig,
    pub oc: OutputConstraints,
    pub ic: InputConstraints,
    pub reference: Reference,
    pub noise: NoiseSpec,
    pub steps: usize,
    pub runs: usize,
    pub seed: u64,
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Invalid(DdpcError::InvalidArgument(msg.into()))
}

fn constraints(spec: &ConstraintSpec, dim: usize, what: &str) -> Result<Constraints> {
    let c = match spec {
        ConstraintSpec::None => Constraints::Unconstrained,
        ConstraintSpec::Box { lower, upper } => {
            let side = |v: &[Option<f64>], inf: f64| DVector::from_iterator(v.len(), v.iter().map(|x| x.unwrap_or(inf)));
            Constraints::Constant(
                Polytope::from_box(&side(lower, f64::NEG_INFINITY), &side(upper, f64::INFINITY))
                    .map_err(HarnessError::Invalid)?,
            )
        }
        ConstraintSpec::Polytope { h, q } => {
            Constraints::Constant(Polytope::new(h.0.clone(), DVector::from_vec(q.clone())).map_err(HarnessError::Invalid)?)
        }
    };
    c.validate(dim).map_err(|e| invalid(format!("{what} constraints: {e}")))?;
    Ok(c)
}

fn reference(spec: &ReferenceSpec, len: usize) -> Result<Reference> {
    let v = |x: &[f64]| DVector::from_row_slice(x);
    let r = match spec {
        ReferenceSpec::Square { low, high, period } => {
            if *period == 0 {
                return Err(invalid("reference period must be positive"));
            }
            Reference::new((0..len).map(|t| if (t / period) % 2 == 0 { v(low) } else { v(high) }).collect())
        }
        ReferenceSpec::Constant { value } => Ok(Reference::constant(v(value))),
        ReferenceSpec::Table { values } => Reference::new(values.iter().map(|s| v(s)).collect()),
    };
    r.map_err(HarnessError::Invalid)
}

impl Scenario {
    pub fn from_config(config: ScenarioConfig) -> Result<Self> {
        let model = match &config.model {
            ModelSpec::Builtin(BuiltinModel::PaperSec5) => StateSpaceModel::paper_sec5(),
            ModelSpec::Matrices(m) => {
                let (a, b, c, d, e) = (m.a.0.clone(), m.b.0.clone(), m.c.0.clone(), m.d.0.clone(), m.e.0.clone());
                if m.marginal {
                    StateSpaceModel::new_marginal(a, b, c, d, e)
                } else {
                    StateSpaceModel::new(a, b, c, d, e)
                }
                .map_err(HarnessError::Invalid)?
            }
        };
        let (nu, ny, nw) = (model.n_u(), model.n_y(), model.n_w());
        let p = &config.predictor;
        let l = p.l0 + p.lp;
        let c = &config.control;
        let mut control = ControlConfig::new(c.q.0.clone(), c.r.0.clone(), p.l0, p.lp, c.variant);
        control.p = c.p;
        control.tightening = c.tightening;
        control.distribution_mode = c.distribution_mode;
        control.filter_mode = c.filter_mode;
        control.solver_tol = c.solver_tol;
        control.max_iter = c.max_iter;
        control.retry_budget = c.retry_budget;
        control.validate().map_err(HarnessError::Invalid)?;
        for (what, m, n) in [("Q", &control.q, ny), ("R", &control.r, nu)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(invalid(format!("{what} must be {n} x {n}, got {} x {}", m.nrows(), m.ncols())));
            }
        }

        let nc = &config.noise;
        let sigma_w = match &nc.sigma_w {
            CovarianceSpec::Scale(s) => DMatrix::identity(nw * l, nw * l) * *s,
            CovarianceSpec::Full(m) => m.0.clone(),
        };
        if sigma_w.nrows() != nw * l || sigma_w.ncols() != nw * l {
            return Err(invalid(format!("sigma_w must be {0} x {0} (n_w L)", nw * l)));
        }
        let w_bar = nc.w_bar.as_ref().map_or_else(|| DVector::zeros(nw * l), |w| DVector::from_row_slice(w));
        let seed = config.monte_carlo.base_seed;
        let noise = NoiseSpec {
            sigma2: nc.sigma2,
            sigma_w,
            w_bar,
            distribution: nc.distribution,
            seed,
        };
        noise.validate().map_err(HarnessError::Invalid)?;

        let d = &config.data;
        if d.length < l {
            return Err(invalid(format!("data length {} is shorter than L0 + Lp = {l}", d.length)));
        }
        if !(d.input_variance > 0.0) || !(d.disturbance_variance >= 0.0) {
            return Err(invalid("data variances must be positive"));
        }
        let excitation = Excitation {
            length: d.length,
            input_variance: d.input_variance,
            disturbance_variance: d.disturbance_variance,
            sigma2: nc.sigma2,
            distribution: nc.distribution,
        };

        let steps = c.steps;
        let oc = constraints(&config.constraints.output, ny, "output")?;
        let ic = constraints(&config.constraints.input, nu, "input")?;
        let reference = reference(&config.reference, steps + p.lp)?;
        if reference.n_y() != ny {
            return Err(invalid(format!("reference has {} outputs, model has {ny}", reference.n_y())));
        }
        Ok(Self {
            excitation,
            construction: d.construction,
            design: p.design,
            control,
            oc,
            ic,
            reference,
            noise,
            steps,
            runs: config.monte_carlo.runs,
            seed,
            model,
            config,
        })
    }

    pub fn offline_data(&self) -> Result<TrajectoryData> {
        Ok(lti::collect_offline(&self.model, &self.excitation, self.seed)?)
    }

    pub fn signal_matrix(&self, data: &TrajectoryData) -> Result<SignalMatrix> {
        Ok(SignalMatrix::build(data, self.control.l0, self.control.lp, self.construction)?)
    }

    pub fn predictor(&self, sm: Arc<SignalMatrix>) -> Result<PredictorParams> {
        let design = predictor::resolve_design(self.design, &sm, self.noise.sigma2, None)?;
        Ok(predictor::build_predictor(sm, &design, self.noise.sigma2)?)
    }

    /// Collects data and builds the predictor shared by every run.
    pub fn prepare(&self) -> Result<Prepared<'_>> {
        let data = self.offline_data()?;
        let sm = Arc::new(self.signal_matrix(&data)?);
        let params = self.predictor(sm)?;
        Ok(Prepared {
            scenario: self,
            data,
            params,
        })
    }

    pub fn control_for(&self, variant: Variant) -> ControlConfig {
        ControlConfig {
            variant,
            ..self.control.clone()
        }
    }
}

/// A scenario with its predictor built.
#[derive(Debug)]
pub struct Prepared<'a> {
    pub scenario: &'a Scenario,
    pub data: TrajectoryData,
    pub params: PredictorParams,
}

impl Prepared<'_> {
    /// Online noise and disturbance for Monte Carlo run `run`.
    pub fn streams(&self, run: u64) -> Result<OnlineStreams> {
        let s = self.scenario;
        Ok(OnlineStreams::draw(
            &s.noise,
            s.model.n_y(),
            s.model.n_w(),
            s.control.l0 + s.steps,
            run,
        )?)
    }

    pub fn run(&self, variant: Variant, streams: &OnlineStreams) -> Result<ClosedLoopLog> {
        let s = self.scenario;
        let cfg = s.control_for(variant);
        let setup = ClosedLoop {
            model: &s.model,
            params: &self.params,
            cfg: &cfg,
            oc: &s.oc,
            ic: &s.ic,
            reference: &s.reference,
            noise: &s.noise,
        };
        Ok(controller::run_closed_loop_with(&setup, streams, s.steps)?)
    }
}
