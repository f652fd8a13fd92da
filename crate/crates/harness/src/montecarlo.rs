//! Parallel Monte Carlo campaigns and their aggregate tables.

use ddpc_core::controller::{self, ClosedLoopLog, Metrics, OutputConstraints, Variant};
use rayon::prelude::*;

use crate::error::Result;
use crate::scenario::Prepared;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "DDPC_THREADS";

#[derive(Debug, Clone)]
pub enum Outcome {
    Completed { log: ClosedLoopLog, metrics: Metrics },
    /// The retry budget ran out; the log holds the steps before the abort.
    Aborted { log: ClosedLoopLog, metrics: Metrics, reason: String },
    Failed(String),
}

impl Outcome {
    pub fn status(&self) -> &'static str {
        match self {
            Outcome::Completed { .. } => "completed",
            Outcome::Aborted { .. } => "aborted",
            Outcome::Failed(_) => "failed",
        }
    }

    pub fn log(&self) -> Option<&ClosedLoopLog> {
        match self {
            Outcome::Completed { log, .. } | Outcome::Aborted { log, .. } => Some(log),
            Outcome::Failed(_) => None,
        }
    }

    pub fn metrics(&self) -> Option<&Metrics> {
        match self {
            Outcome::Completed { metrics, .. } | Outcome::Aborted { metrics, .. } => Some(metrics),
            Outcome::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub variant: Variant,
    pub run: usize,
    pub outcome: Outcome,
}

/// All records, ordered by variant and then by run.
#[derive(Debug, Clone)]
pub struct MonteCarlo {
    pub variants: Vec<Variant>,
    pub runs: usize,
    pub records: Vec<RunRecord>,
}

/// Runs `f` on a pool capped by [`THREADS_ENV`], or on the global pool.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let cap = std::env::var(THREADS_ENV).ok().and_then(|s| s.trim().parse::<usize>().ok()).filter(|&n| n > 0);
    match cap {
        Some(n) => Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f)),
        None => Ok(f()),
    }
}

/// Every variant consumes the same online streams within a run.
pub fn run_montecarlo(prep: &Prepared<'_>, variants: &[Variant], runs: usize) -> Result<MonteCarlo> {
    let scenario = prep.scenario;
    let per_run: Vec<Vec<RunRecord>> = with_pool(|| {
        (0..runs)
            .into_par_iter()
            .map(|run| {
                let streams = prep.streams(run as u64);
                variants
                    .iter()
                    .map(|&variant| {
                        let outcome = match streams.as_ref() {
                            Err(e) => Outcome::Failed(e.to_string()),
                            Ok(s) => match prep.run(variant, s) {
                                Err(e) => Outcome::Failed(e.to_string()),
                                Ok(log) => {
                                    let metrics = controller::metrics(&log, &scenario.oc, &scenario.control_for(variant));
                                    match log.aborted.clone() {
                                        Some(reason) => Outcome::Aborted { log, metrics, reason },
                                        None => Outcome::Completed { log, metrics },
                                    }
                                }
                            },
                        };
                        RunRecord { variant, run, outcome }
                    })
                    .collect()
            })
            .collect()
    })?;
    let mut records = Vec::with_capacity(runs * variants.len());
    for k in 0..variants.len() {
        records.extend(per_run.iter().map(|r| r[k].clone()));
    }
    for r in records.iter().filter(|r| !matches!(r.outcome, Outcome::Completed { .. })) {
        let why = match &r.outcome {
            Outcome::Aborted { reason, .. } => reason.as_str(),
            Outcome::Failed(e) => e.as_str(),
            Outcome::Completed { .. } => unreachable!(),
        };
        log::warn!("{} run {} {}: {why}; excluded from aggregates", r.variant.as_str(), r.run, r.outcome.status());
    }
    Ok(MonteCarlo {
        variants: variants.to_vec(),
        runs,
        records,
    })
}

/// Median with the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(v[n / 2]),
        _ => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

/// For each step, the fraction of logs whose true output violates `oc`.
pub fn step_violation_freq<'a>(logs: impl IntoIterator<Item = &'a ClosedLoopLog>, oc: &OutputConstraints) -> Vec<f64> {
    let mut counts: Vec<usize> = Vec::new();
    let mut n = 0usize;
    for log in logs {
        n += 1;
        if counts.len() < log.rows.len() {
            counts.resize(log.rows.len(), 0);
        }
        for (k, row) in log.rows.iter().enumerate() {
            counts[k] += usize::from(oc.violation(row.t, &row.y0) > 0.0);
        }
    }
    counts.into_iter().map(|c| c as f64 / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub completed: usize,
    pub excluded: usize,
    pub median_cost: Option<f64>,
    pub median_violation: Option<f64>,
    /// Largest cross-run violation frequency at a single step.
    pub max_step_violation_freq: Option<f64>,
    /// Mean of the per-run fractions of violating steps.
    pub pooled_violation_freq: Option<f64>,
    pub median_filter_rmse: Option<f64>,
    pub median_measured_rmse: Option<f64>,
    pub softened_steps: usize,
}

pub fn summarize(mc: &MonteCarlo, oc: &OutputConstraints) -> Vec<VariantSummary> {
    mc.variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&RunRecord> = mc.records.iter().filter(|r| r.variant == variant).collect();
            let done: Vec<(&ClosedLoopLog, &Metrics)> = mine
                .iter()
                .filter_map(|r| match &r.outcome {
                    Outcome::Completed { log, metrics } => Some((log, metrics)),
                    _ => None,
                })
                .collect();
            let col = |f: &dyn Fn(&Metrics) -> Option<f64>| -> Vec<f64> { done.iter().filter_map(|(_, m)| f(m)).collect() };
            let pooled = col(&|m| Some(m.per_step_violation_freq));
            let freq = step_violation_freq(done.iter().map(|(l, _)| *l), oc);
            VariantSummary {
                variant,
                completed: done.len(),
                excluded: mine.len() - done.len(),
                median_cost: median(&col(&|m| Some(m.true_total_cost))),
                median_violation: median(&col(&|m| Some(m.total_violation))),
                max_step_violation_freq: freq.into_iter().reduce(f64::max),
                pooled_violation_freq: (!pooled.is_empty()).then(|| pooled.iter().sum::<f64>() / pooled.len() as f64),
                median_filter_rmse: median(&col(&|m| m.filter_rmse)),
                median_measured_rmse: median(&col(&|m| Some(m.measured_rmse))),
                softened_steps: done
                    .iter()
                    .map(|(l, _)| l.rows.iter().filter(|r| r.status == "softened").count())
                    .sum(),
            }
        })
        .collect()
}
