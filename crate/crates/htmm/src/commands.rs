//! Command implementations. Each one validates every input before anything is
//! written, stages its outputs in memory, commits them atomically and then
//! writes the run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use htmm_core::estimator::{calibrate_camera, fit, EstimatorError, FitOptions, FitResult, Nu0Mode};
use htmm_core::inner::CameraModel;
use htmm_core::moments::moment_set;
use htmm_core::oracles::EnumerationBudget;
use htmm_core::simulator::{simulate_trace, SimulationConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{load_json, to_json, MomentsParams};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, matrix_csv, read_columns, read_traces, to_csv, traces_csv, Staged, TraceRecord};
use crate::manifest::RunManifest;
use crate::verify::{all_passed, MomentsFn, Status, VerifySuite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NO_CONVERGENCE: i32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub manifest: PathBuf,
    /// Human-readable summary for the terminal.
    pub report: String,
    pub exit_code: i32,
}

/// Worker pool capped by `HTMM_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("HTMM_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Invalid(format!("HTMM_THREADS must be a positive integer, found `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

fn finish(
    command: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    staged: Staged,
    report: String,
    exit_code: i32,
) -> Result<Outcome> {
    let outputs = staged.commit()?;
    let manifest = RunManifest::new(command, config, seed, outputs.clone()).write(out)?;
    Ok(Outcome { outputs, manifest, report, exit_code })
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
}

/// Simulated traces, plus a per-frame summary against the closed forms when
/// more than one replicate is drawn.
pub fn simulate(args: &SimulateArgs) -> Result<Outcome> {
    let mut cfg: SimulationConfig = load_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.replicates {
        cfg.replicates = n;
    }
    cfg.validate()?;

    let pool = thread_pool()?;
    let traces: Vec<TraceRecord> = pool.install(|| {
        (0..cfg.replicates as u64)
            .into_par_iter()
            .map(|rep| simulate_trace(&cfg, rep).map(|t| TraceRecord { replicate: rep, y: t.y }))
            .collect::<std::result::Result<_, _>>()
    })?;

    let mut staged = Staged::default();
    staged.add(args.out.join("traces.csv"), traces_csv(&traces));
    let mut report = format!("simulated {} trace(s) of {} frames, m = {}\n", traces.len(), cfg.t_len, cfg.m);
    if traces.len() > 1 {
        let gamma = cfg.second_order_params()?;
        let closed = moment_set(&gamma, &cfg.camera, cfg.t_len)?;
        let n = traces.len() as f64;
        let rows = (0..cfg.t_len).map(|t| {
            let mean = traces.iter().map(|tr| tr.y[t]).sum::<f64>() / n;
            let var = traces.iter().map(|tr| (tr.y[t] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            vec![(t + 1).to_string(), fmt_f64(mean), fmt_f64(var), fmt_f64(closed.mu[t]), fmt_f64(closed.sigma[(t, t)])]
        });
        staged.add(args.out.join("summary.csv"), to_csv(&["t", "mu_hat", "var_hat", "mu", "var"], rows));
        report.push_str("per-frame summary written to summary.csv\n");
    }
    finish("simulate", Some(&args.config), Some(cfg.seed), &args.out, staged, report, EXIT_OK)
}

#[derive(Debug, Clone)]
pub struct MomentsArgs {
    pub config: PathBuf,
    pub t_len: usize,
    pub out: PathBuf,
}

/// Closed-form mean (`mu.csv`) and covariance (`sigma.csv`).
pub fn moments(args: &MomentsArgs) -> Result<Outcome> {
    let params: MomentsParams = load_json(&args.config)?;
    let set = moment_set(&params.gamma, &params.camera, args.t_len)?;
    let mut staged = Staged::default();
    let rows = set.mu.iter().enumerate().map(|(t, &v)| vec![(t + 1).to_string(), fmt_f64(v)]);
    staged.add(args.out.join("mu.csv"), to_csv(&["t", "mu"], rows));
    staged.add(args.out.join("sigma.csv"), matrix_csv(&set.sigma));
    let report = format!("moments for T = {} written\n", args.t_len);
    finish("moments", Some(&args.config), None, &args.out, staged, report, EXIT_OK)
}

#[derive(Debug, Clone)]
pub struct EstimateArgs {
    pub trace: PathBuf,
    pub camera: PathBuf,
    pub out: PathBuf,
    /// Base options from JSON; the flags below override it.
    pub config: Option<PathBuf>,
    pub m_grid: Option<Vec<usize>>,
    pub r: Option<usize>,
    pub nu0: Option<Nu0Mode>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateFit {
    pub replicate: u64,
    pub converged: bool,
    pub result: FitResult,
}

fn profile_table(fit: &FitResult) -> String {
    let mut s = format!("m_hat = {}\n{:>4}  {:>16}  converged\n", fit.m_hat, "m", "loglik");
    for p in &fit.profile {
        let _ = writeln!(s, "{:>4}  {:>16.6}  {}", p.m, p.loglik, p.converged);
    }
    s
}

/// Profile pseudo-likelihood fit of every trace in the file.
pub fn estimate(args: &EstimateArgs) -> Result<Outcome> {
    let traces = read_traces(&args.trace)?;
    let camera: CameraModel = load_json(&args.camera)?;
    camera.validate().map_err(|e| Error::Invalid(format!("{}: {e}", args.camera.display())))?;
    let mut options: FitOptions = match &args.config {
        Some(p) => load_json(p)?,
        None => FitOptions::default(),
    };
    if let Some(g) = &args.m_grid {
        options.m_grid = g.clone();
    }
    if let Some(r) = args.r {
        options.r = r;
    }
    if let Some(nu0) = args.nu0 {
        options.nu0_mode = nu0;
    }
    if let Some(seed) = args.seed {
        options.seed = seed;
    }
    options.validate()?;

    let pool = thread_pool()?;
    let fits: Vec<ReplicateFit> = pool.install(|| {
        traces
            .par_iter()
            .map(|tr| match fit(&tr.y, &camera, &options) {
                Ok(result) => Ok(ReplicateFit { replicate: tr.replicate, converged: true, result }),
                Err(EstimatorError::NoConvergence(result)) => {
                    Ok(ReplicateFit { replicate: tr.replicate, converged: false, result: *result })
                }
                Err(e) => Err(Error::Invalid(format!("replicate {}: {e}", tr.replicate))),
            })
            .collect::<Result<_>>()
    })?;

    let mut staged = Staged::default();
    let mut report = String::new();
    if let [single] = fits.as_slice() {
        staged.add(args.out.join("fit.json"), to_json(&single.result));
        report.push_str(&profile_table(&single.result));
        if !single.converged {
            report.push_str("warning: the optimizer did not converge at m_hat\n");
        }
    } else {
        staged.add(args.out.join("fits.json"), to_json(&fits));
        let max_m = fits.iter().map(|f| f.result.m_hat).max().unwrap_or(0);
        let counts: Vec<usize> = (0..=max_m).map(|m| fits.iter().filter(|f| f.result.m_hat == m).count()).collect();
        let rows = counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(m, &c)| vec![m.to_string(), c.to_string()]);
        staged.add(args.out.join("m_hat.csv"), to_csv(&["m", "count"], rows));
        let _ = writeln!(report, "{} traces\n{:>4}  count", fits.len(), "m");
        for (m, &c) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
            let _ = writeln!(report, "{m:>4}  {c}");
        }
        let unconverged = fits.iter().filter(|f| !f.converged).count();
        if unconverged > 0 {
            let _ = writeln!(report, "warning: {unconverged} fit(s) did not converge");
        }
    }
    let code = if fits.iter().all(|f| f.converged) { EXIT_OK } else { EXIT_NO_CONVERGENCE };
    finish("estimate", Some(&args.trace), Some(options.seed), &args.out, staged, report, code)
}

#[derive(Debug, Clone)]
pub struct CalibrateArgs {
    /// CSV with `mean` and `var` columns, one row per pixel.
    pub stats: PathBuf,
    pub f2: f64,
    pub out: PathBuf,
}

pub fn calibrate(args: &CalibrateArgs) -> Result<Outcome> {
    let cols = read_columns(&args.stats, &["mean", "var"])?;
    let pairs: Vec<(f64, f64)> = cols[0].iter().copied().zip(cols[1].iter().copied()).collect();
    let cal = calibrate_camera(&pairs, args.f2)?;
    let mut staged = Staged::default();
    staged.add(args.out.join("calibration.json"), to_json(&cal));
    let report = format!("a = {}\nslope = {}\nintercept = {}\n", cal.a, cal.slope, cal.intercept);
    finish("calibrate", Some(&args.stats), None, &args.out, staged, report, EXIT_OK)
}

#[derive(Debug, Clone)]
pub struct VerifyArgs {
    pub budget: Option<u64>,
    pub seed: u64,
    pub out: PathBuf,
}

/// Runs the oracle suite against `moments`; exit code 1 when any check fails.
pub fn verify(args: &VerifyArgs, moments: MomentsFn) -> Result<Outcome> {
    let budget = args.budget.map_or_else(EnumerationBudget::default, |max_paths| EnumerationBudget { max_paths });
    let suite = VerifySuite { budget, moments, seed: args.seed };
    let results = suite.run();
    let rows = results.iter().map(|c| vec![c.name.to_string(), c.status.to_string(), c.detail.clone()]);
    let mut staged = Staged::default();
    staged.add(args.out.join("verify.csv"), to_csv(&["check", "status", "detail"], rows));

    let width = results.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut report = String::new();
    for c in &results {
        let _ = writeln!(report, "{:<width$}  {:<4}  {}", c.name, c.status.to_string(), c.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|c| matches!(c.status, Status::Fail(_))).map(|c| c.name).collect();
    if !failed.is_empty() {
        let _ = writeln!(report, "failed: {}", failed.join(", "));
    }
    let code = if all_passed(&results) { EXIT_OK } else { EXIT_FAILURE };
    finish("verify", None, Some(args.seed), &args.out, staged, report, code)
}

/// `"1-20"`, `"3"` or `"1,2,5-8"`; the result is sorted and deduplicated.
pub fn parse_m_grid(s: &str) -> std::result::Result<Vec<usize>, String> {
    let mut grid = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid m `{v}`"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(format!("empty range `{part}`"));
                }
                grid.extend(a..=b);
            }
            None => grid.push(parse(part)?),
        }
    }
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() || grid[0] == 0 {
        return Err("m grid must contain positive values".into());
    }
    Ok(grid)
}

/// `"free"` or a fixed probability.
pub fn parse_nu0(s: &str) -> std::result::Result<Nu0Mode, String> {
    if s.eq_ignore_ascii_case("free") {
        return Ok(Nu0Mode::Free);
    }
    let v: f64 = s.parse().map_err(|_| format!("expected `free` or a number in [0, 1], found `{s}`"))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("nu0 = {v} is outside [0, 1]"));
    }
    Ok(Nu0Mode::Fixed(v))
}
