//! On-disk artifacts of a campaign and the plot-data report built from them.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.json                       effective configuration
//! runs/<variant>/run_NNNN.csv       closed-loop log of a completed run
//! runs/<variant>/run_NNNN_filter.csv  filter trace (filtered variants)
//! runs/<variant>/run_NNNN_aborted.csv partial log of an aborted run
//! metrics.csv                       one row per variant and run
//! aggregate.csv                     long format: variant,run,metric,value
//! summary.csv                       per-variant medians and frequencies
//! report/{trajectory,filtering,boxplot}.csv
//! ```
//!
//! Floats use Rust's shortest round-trip `{:e}` form, so logs read back
//! bit-exactly and aggregates can be recomputed from them.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ddpc_core::controller::{self, ClosedLoopLog, LogRow, Metrics, Variant};
use ddpc_core::estimator;
use nalgebra::DVector;
use serde_json::json;

use crate::config::{ConstraintSpec, ScenarioConfig};
use crate::error::{HarnessError, Result};
use crate::montecarlo::{self, MonteCarlo, Outcome};
use crate::scenario::Scenario;

pub fn fmt(x: f64) -> String {
    format!("{x:e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_default()
}

/// `name` for scalars, `name_0 .. name_{n-1}` otherwise.
pub fn column_names(name: &str, n: usize) -> Vec<String> {
    if n == 1 {
        vec![name.to_string()]
    } else {
        (0..n).map(|i| format!("{name}_{i}")).collect()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn run_dir(dir: &Path, variant: Variant) -> PathBuf {
    dir.join("runs").join(variant.as_str())
}

pub fn write_config(dir: &Path, cfg: &ScenarioConfig) -> Result<()> {
    create(&dir.join("config.json"))?.write_all(cfg.to_json().as_bytes())?;
    Ok(())
}

/// Log, filter trace and a JSON metric summary for a single run.
pub fn write_single_run(dir: &Path, log: &ClosedLoopLog, metrics: &Metrics) -> Result<()> {
    let name = log.variant.as_str();
    log.write_csv(create(&dir.join(format!("{name}.csv")))?)?;
    if log.variant.filtered() {
        estimator::write_trace_csv(&log.trace, create(&dir.join(format!("{name}_filter.csv")))?)?;
    }
    let summary = json!({
        "variant": name,
        "steps": log.rows.len(),
        "aborted": log.aborted,
        "stream_digest": log.stream_digest,
        "softened_steps": log.rows.iter().filter(|r| r.status == "softened").count(),
        "floored_rows": log.floored,
        "true_total_cost": metrics.true_total_cost,
        "total_violation": metrics.total_violation,
        "per_step_violation_freq": metrics.per_step_violation_freq,
        "filter_rmse": metrics.filter_rmse,
        "measured_rmse": metrics.measured_rmse,
    });
    let mut w = create(&dir.join(format!("{name}.json")))?;
    serde_json::to_writer_pretty(&mut w, &summary)?;
    writeln!(w)?;
    Ok(())
}

pub fn write_montecarlo(dir: &Path, scenario: &Scenario, mc: &MonteCarlo) -> Result<()> {
    write_config(dir, &scenario.config)?;
    for &v in &mc.variants {
        fs::create_dir_all(run_dir(dir, v))?;
    }
    for r in &mc.records {
        let base = run_dir(dir, r.variant);
        match &r.outcome {
            Outcome::Completed { log, .. } => {
                log.write_csv(create(&base.join(format!("run_{:04}.csv", r.run)))?)?;
                if r.variant.filtered() {
                    estimator::write_trace_csv(&log.trace, create(&base.join(format!("run_{:04}_filter.csv", r.run)))?)?;
                }
            }
            Outcome::Aborted { log, .. } => log.write_csv(create(&base.join(format!("run_{:04}_aborted.csv", r.run)))?)?,
            Outcome::Failed(_) => {}
        }
    }

    let mut w = csv::Writer::from_writer(create(&dir.join("metrics.csv"))?);
    w.write_record([
        "variant",
        "run",
        "status",
        "true_total_cost",
        "total_violation",
        "per_step_violation_freq",
        "filter_rmse",
        "measured_rmse",
        "softened_steps",
        "stream_digest",
    ])?;
    for r in &mc.records {
        let m = r.outcome.metrics();
        let log = r.outcome.log();
        w.write_record([
            r.variant.as_str().to_string(),
            r.run.to_string(),
            r.outcome.status().to_string(),
            fmt_opt(m.map(|m| m.true_total_cost)),
            fmt_opt(m.map(|m| m.total_violation)),
            fmt_opt(m.map(|m| m.per_step_violation_freq)),
            fmt_opt(m.and_then(|m| m.filter_rmse)),
            fmt_opt(m.map(|m| m.measured_rmse)),
            log.map(|l| l.rows.iter().filter(|r| r.status == "softened").count().to_string())
                .unwrap_or_default(),
            log.map(|l| l.stream_digest.clone()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&dir.join("aggregate.csv"))?);
    w.write_record(["variant", "run", "metric", "value"])?;
    for r in &mc.records {
        if let Outcome::Completed { metrics, .. } = &r.outcome {
            for (name, value) in [("cost", metrics.true_total_cost), ("violation", metrics.total_violation)] {
                w.write_record([r.variant.as_str(), &r.run.to_string(), name, &fmt(value)])?;
            }
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&dir.join("summary.csv"))?);
    w.write_record([
        "variant",
        "completed",
        "excluded",
        "median_cost",
        "median_violation",
        "max_step_violation_freq",
        "pooled_violation_freq",
        "median_filter_rmse",
        "median_measured_rmse",
        "softened_steps",
    ])?;
    for s in montecarlo::summarize(mc, &scenario.oc) {
        w.write_record([
            s.variant.as_str().to_string(),
            s.completed.to_string(),
            s.excluded.to_string(),
            fmt_opt(s.median_cost),
            fmt_opt(s.median_violation),
            fmt_opt(s.max_step_violation_freq),
            fmt_opt(s.pooled_violation_freq),
            fmt_opt(s.median_filter_rmse),
            fmt_opt(s.median_measured_rmse),
            s.softened_steps.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn parse(field: &str, path: &Path) -> Result<f64> {
    field
        .parse()
        .map_err(|_| HarnessError::Runtime(ddpc_core::DdpcError::Format(format!("{}: bad number `{field}`", path.display()))))
}

fn malformed(path: &Path, what: &str) -> HarnessError {
    HarnessError::Runtime(ddpc_core::DdpcError::Format(format!("{}: {what}", path.display())))
}

/// Reads a log written by [`ClosedLoopLog::write_csv`]. The reference comes
/// from the scenario and the filtered outputs from the optional trace.
pub fn read_log(path: &Path, trace: Option<&Path>, variant: Variant, scenario: &Scenario) -> Result<ClosedLoopLog> {
    let (nu, ny) = (scenario.model.n_u(), scenario.model.n_y());
    let mut expected = vec!["t".to_string()];
    for (name, n) in [("u", nu), ("y", ny), ("y0", ny), ("ybar0", ny)] {
        expected.extend(column_names(name, n));
    }
    expected.extend(["cost", "violation", "slack", "status"].map(String::from));

    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().ne(expected.iter().map(String::as_str)) {
        return Err(malformed(path, "unexpected header"));
    }
    let filtered = match trace {
        Some(tp) => read_posteriors(tp, ny)?,
        None => Vec::new(),
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let t: usize = rec[0].parse().map_err(|_| malformed(path, "bad step index"))?;
        let block = |from: usize, n: usize| -> Result<DVector<f64>> {
            let v: Result<Vec<f64>> = (from..from + n).map(|i| parse(&rec[i], path)).collect();
            Ok(DVector::from_vec(v?))
        };
        let k = 1 + nu + 3 * ny;
        rows.push(LogRow {
            t,
            u: block(1, nu)?,
            y: block(1 + nu, ny)?,
            y0: block(1 + nu + ny, ny)?,
            y_bar0: block(1 + nu + 2 * ny, ny)?,
            r: scenario.reference.at(t).clone(),
            filtered: filtered.iter().find(|(s, _)| *s == t).map(|(_, f)| f.clone()),
            cost: parse(&rec[k], path)?,
            violation: parse(&rec[k + 1], path)?,
            slack: parse(&rec[k + 2], path)?,
            status: rec[k + 3].to_string(),
        });
    }
    Ok(ClosedLoopLog {
        variant,
        rows,
        trace: Vec::new(),
        aborted: None,
        stream_digest: String::new(),
        floored: 0,
    })
}

fn read_posteriors(path: &Path, ny: usize) -> Result<Vec<(usize, DVector<f64>)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let t: usize = rec[0].parse().map_err(|_| malformed(path, "bad step index"))?;
        let v: Result<Vec<f64>> = (1 + ny..1 + 2 * ny).map(|i| parse(&rec[i], path)).collect();
        out.push((t, DVector::from_vec(v?)));
    }
    Ok(out)
}

/// Completed-run logs of one variant, by run index.
fn completed_runs(dir: &Path, variant: Variant) -> Result<Vec<(usize, PathBuf)>> {
    let base = run_dir(dir, variant);
    if !base.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&base)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        let Some(idx) = name.strip_prefix("run_").and_then(|s| s.strip_suffix(".csv")) else {
            continue;
        };
        if let Ok(run) = idx.parse::<usize>() {
            out.push((run, base.join(&name)));
        }
    }
    out.sort();
    Ok(out)
}

fn filter_path(log: &Path) -> PathBuf {
    let stem = log.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    log.with_file_name(format!("{stem}_filter.csv"))
}

/// Writes the plot-data surrogates from the artifacts in `dir`.
///
/// `trajectory.csv` and `filtering.csv` take each variant's lowest-numbered
/// run; `boxplot.csv` recomputes cost and violation for every completed run.
pub fn report(dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg_path = dir.join("config.json");
    if !cfg_path.is_file() {
        return Err(HarnessError::MissingArtifact(cfg_path.display().to_string()));
    }
    if !dir.join("runs").is_dir() {
        return Err(HarnessError::MissingArtifact(dir.join("runs").display().to_string()));
    }
    let text = fs::read_to_string(&cfg_path)?;
    let scenario = Scenario::from_config(ScenarioConfig::parse(&text)?)?;
    let (nu, ny) = (scenario.model.n_u(), scenario.model.n_y());
    let (lower, upper) = match &scenario.config.constraints.output {
        ConstraintSpec::Box { lower, upper } => (lower.clone(), upper.clone()),
        _ => (vec![None; ny], vec![None; ny]),
    };

    let out = dir.join("report");
    let paths = ["trajectory.csv", "filtering.csv", "boxplot.csv"].map(|f| out.join(f));
    let mut traj = csv::Writer::from_writer(create(&paths[0])?);
    let mut head = vec!["variant".to_string(), "run".into(), "t".into()];
    for (name, n) in [("u", nu), ("r", ny), ("y0", ny), ("y", ny), ("lower", ny), ("upper", ny)] {
        head.extend(column_names(name, n));
    }
    traj.write_record(&head)?;
    let mut filt = csv::Writer::from_writer(create(&paths[1])?);
    let mut head = vec!["variant".to_string(), "run".into(), "t".into()];
    for name in ["measured", "filtered", "true"] {
        head.extend(column_names(name, ny));
    }
    filt.write_record(&head)?;
    let mut boxp = csv::Writer::from_writer(create(&paths[2])?);
    boxp.write_record(["variant", "run", "metric", "value"])?;

    for variant in Variant::ALL {
        let cfg = scenario.control_for(variant);
        for (k, (run, path)) in completed_runs(dir, variant)?.into_iter().enumerate() {
            let trace = variant.filtered().then(|| filter_path(&path));
            let log = read_log(&path, trace.as_deref(), variant, &scenario)?;
            let m = controller::metrics(&log, &scenario.oc, &cfg);
            for (name, value) in [("cost", m.true_total_cost), ("violation", m.total_violation)] {
                boxp.write_record([variant.as_str(), &run.to_string(), name, &fmt(value)])?;
            }
            if k > 0 {
                continue;
            }
            for row in &log.rows {
                let mut rec = vec![variant.as_str().to_string(), run.to_string(), row.t.to_string()];
                for v in [&row.u, &row.r, &row.y0, &row.y] {
                    rec.extend(v.iter().map(|&x| fmt(x)));
                }
                for side in [&lower, &upper] {
                    rec.extend(side.iter().map(|b| fmt_opt(*b)));
                }
                traj.write_record(&rec)?;
                if let Some(f) = &row.filtered {
                    let mut rec = vec![variant.as_str().to_string(), run.to_string(), row.t.to_string()];
                    for v in [&row.y, f, &row.y0] {
                        rec.extend(v.iter().map(|&x| fmt(x)));
                    }
                    filt.write_record(&rec)?;
                }
            }
        }
    }
    traj.flush()?;
    filt.flush()?;
    boxp.flush()?;
    Ok(paths.to_vec())
}

