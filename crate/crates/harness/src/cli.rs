//! Command-line front end. Exit codes: 0 success, 1 invalid input, 2 runtime failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use ddpc_core::controller::{self, Variant};
use ddpc_core::lti;
use ddpc_core::predictor;
use ddpc_core::rng::{self, Purpose};
use ddpc_core::signal::QueryCondition;
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::artifacts::{self, column_names, fmt};
use crate::config::{Overrides, ScenarioConfig, BUILTIN};
use crate::error::{HarnessError, Result};
use crate::montecarlo;
use crate::scenario::Scenario;

#[derive(Debug, Parser)]
#[command(name = "ddpc", version, about = "Stochastic data-driven predictive control experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON scenario file, or `paper-sec5` for the builtin benchmark.
    #[arg(long, global = true, default_value = BUILTIN)]
    pub config: String,
    /// Overrides `monte_carlo.base_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// n_ddpc, kf_ddpc or s_ddpc.
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    /// Prediction horizon L′.
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    /// Output directory, overriding `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect the offline trajectory and write it as CSV.
    Simulate,
    /// Build the signal matrix and predictor caches and report excitation.
    Build,
    /// Predict one random window of the plant and compare with the truth.
    Predict,
    /// One closed-loop run of a single variant.
    Run,
    /// Monte Carlo campaign over all variants, or only `--variant`.
    Montecarlo,
    /// Plot-data CSVs from the artifacts of a campaign in the output directory.
    Report,
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            variant: self.variant,
            runs: self.runs,
            horizon: self.horizon,
            out: self.out.clone(),
        }
    }
}

/// Parses `args` (program name first), executes, and returns the exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let mut cfg = ScenarioConfig::load(&cli.config)?;
    cfg.apply(&cli.overrides());
    let dir = cfg.output.dir.clone();
    if let Command::Report = cli.command {
        let paths = artifacts::report(&dir)?;
        for p in paths {
            writeln!(out, "wrote {}", p.display())?;
        }
        return Ok(());
    }
    let scenario = Scenario::from_config(cfg)?;
    fs::create_dir_all(&dir)?;
    match cli.command {
        Command::Simulate => simulate(&scenario, &dir, out),
        Command::Build => build(&scenario, &dir, out),
        Command::Predict => predict(&scenario, &dir, out),
        Command::Run => run(&scenario, &dir, out),
        Command::Montecarlo => campaign(&scenario, cli.variant, &dir, out),
        Command::Report => unreachable!(),
    }
}

fn simulate(s: &Scenario, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let data = s.offline_data()?;
    let path = dir.join("data.csv");
    data.write_csv(BufWriter::new(File::create(&path)?))?;
    writeln!(out, "wrote {} samples to {}", data.len(), path.display())?;
    Ok(())
}

fn build(s: &Scenario, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let data = s.offline_data()?;
    let sm = Arc::new(s.signal_matrix(&data)?);
    let report = sm.check_excitation(s.model.n_x());
    if !report.ok {
        log::warn!(
            "signal matrix rank {} is below the required {}",
            report.numeric_rank,
            report.required_rank
        );
    }
    sm.write_cache(BufWriter::new(File::create(dir.join("signal.bin"))?))?;
    let params = s.predictor(Arc::clone(&sm))?;
    params.write_cache(BufWriter::new(File::create(dir.join("predictor.bin"))?))?;
    let summary = json!({
        "columns": sm.m(),
        "numeric_rank": report.numeric_rank,
        "required_rank": report.required_rank,
        "ok": report.ok,
        "singular_values": report.singular_values,
        "design": s.design.as_str(),
        "lambda": params.design.lambda,
        "signal_digest": sm.digest(),
    });
    let mut w = BufWriter::new(File::create(dir.join("excitation.json"))?);
    serde_json::to_writer_pretty(&mut w, &summary)?;
    writeln!(w)?;
    writeln!(
        out,
        "M = {}, rank {} (required {}), design {} with lambda = {:e}",
        sm.m(),
        report.numeric_rank,
        report.required_rank,
        s.design.as_str(),
        params.design.lambda
    )?;
    Ok(())
}

/// A random length-`L` window of the plant from a random state, with
/// disturbances drawn around `w̄` and measurement noise on the outputs.
fn random_window(s: &Scenario) -> Result<lti::TrajectoryData> {
    let model = &s.model;
    let l = s.control.l0 + s.control.lp;
    let mut rng = rng::stream(s.seed, 0, Purpose::Query);
    let eye = |n: usize, var: f64| DMatrix::identity(n, n) * var;
    let dist = s.noise.distribution;
    let x0 = lti::sample_iid(&eye(model.n_x(), 1.0), 1, dist, &mut rng)?.column(0).into_owned();
    let u = lti::sample_iid(&eye(model.n_u(), s.excitation.input_variance), l, dist, &mut rng)?;
    let w_window = lti::sample_iid(&s.noise.sigma_w, 1, dist, &mut rng)?.column(0) + &s.noise.w_bar;
    let w = DMatrix::from_column_slice(model.n_w(), l, w_window.as_slice());
    let v = lti::sample_iid(&eye(model.n_y(), s.noise.sigma2), l, dist, &mut rng)?;
    Ok(lti::simulate(model, &x0, &u, &w, &v)?)
}

fn predict(s: &Scenario, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let prep = s.prepare()?;
    let (l0, lp) = (s.control.l0, s.control.lp);
    let (nu, ny) = (s.model.n_u(), s.model.n_y());
    let win = random_window(s)?;
    let flat = |m: &DMatrix<f64>, from: usize, len: usize| {
        DVector::from_iterator(m.nrows() * len, m.columns(from, len).iter().copied())
    };
    let q = QueryCondition {
        u_ini: flat(&win.u, 0, l0),
        y_ini: flat(&win.y, 0, l0),
        p: DMatrix::identity(ny * l0, ny * l0) * s.noise.sigma2,
        w_bar: s.noise.w_bar.clone(),
        sigma_w: s.noise.sigma_w.clone(),
    };
    let u_hat = flat(&win.u, l0, lp);
    let pred = predictor::predict(&prep.params, &q, &u_hat)?;
    let truth = flat(&win.y0, l0, lp);

    let path = dir.join("predict.csv");
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&path)?));
    let mut head = vec!["k".to_string()];
    for (name, n) in [("u", nu), ("y_bar", ny), ("sigma", ny), ("y0", ny)] {
        head.extend(column_names(name, n));
    }
    w.write_record(&head)?;
    for k in 0..lp {
        let mut rec = vec![k.to_string()];
        rec.extend(u_hat.rows(k * nu, nu).iter().map(|&x| fmt(x)));
        rec.extend(pred.y_bar.rows(k * ny, ny).iter().map(|&x| fmt(x)));
        rec.extend((0..ny).map(|i| fmt(pred.sigma[(k * ny + i, k * ny + i)])));
        rec.extend(truth.rows(k * ny, ny).iter().map(|&x| fmt(x)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    writeln!(
        out,
        "max |y_bar - y0| = {:e} over {lp} steps; wrote {}",
        (&pred.y_bar - &truth).amax(),
        path.display()
    )?;
    Ok(())
}

fn run(s: &Scenario, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let prep = s.prepare()?;
    let variant = s.control.variant;
    let streams = prep.streams(0)?;
    let log = prep.run(variant, &streams)?;
    let m = controller::metrics(&log, &s.oc, &s.control);
    let run_dir = dir.join("run");
    artifacts::write_config(&run_dir, &s.config)?;
    artifacts::write_single_run(&run_dir, &log, &m)?;
    writeln!(
        out,
        "{}: {} steps, cost {:.4}, violation {:.4}{}",
        variant.as_str(),
        log.rows.len(),
        m.true_total_cost,
        m.total_violation,
        log.aborted.as_deref().map(|r| format!(" (aborted: {r})")).unwrap_or_default()
    )?;
    if let Some(reason) = log.aborted {
        return Err(HarnessError::Aborted(reason));
    }
    Ok(())
}

fn campaign(s: &Scenario, only: Option<Variant>, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let variants: Vec<Variant> = match only {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let prep = s.prepare()?;
    let mc = montecarlo::run_montecarlo(&prep, &variants, s.runs)?;
    artifacts::write_montecarlo(dir, s, &mc)?;
    writeln!(out, "{:<8} {:>5} {:>12} {:>12} {:>10} {:>10}", "variant", "runs", "cost", "violation", "max freq", "rmse f/m")?;
    for v in montecarlo::summarize(&mc, &s.oc) {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{x:.4}"));
        writeln!(
            out,
            "{:<8} {:>5} {:>12} {:>12} {:>10} {:>10}",
            v.variant.as_str(),
            v.completed,
            opt(v.median_cost),
            opt(v.median_violation),
            opt(v.max_step_violation_freq),
            format!("{}/{}", opt(v.median_filter_rmse), opt(v.median_measured_rmse)),
        )?;
    }
    writeln!(out, "wrote {}", dir.display())?;
    Ok(())
}
