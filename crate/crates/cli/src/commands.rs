//! `run`, `verify` and `constants`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use appsag_core::augmented::{
    check_equivalence, product_contraction, rate_constants, replay, tracking_residual, tracking_residuals_against_trace,
    EventMatrices, MatrixStream, RateConstants, Side,
};
use appsag_core::graph::{generate_topology, DirectedGraph};
use appsag_core::logscale::LogPos;
use appsag_core::mspbe::{solve_saddle, spectral_constants, ProblemSpec, SaddleVec, SpectralConstants};
use appsag_core::setup::{build_problem, ProblemConfig};
use appsag_core::simulator::{
    estimate_rate, metrics, sync_simulator, verify_assumption1b, write_metrics_file, ActivationSchedule, AsyncSimulator,
    DelayModel, EventTrace, RunConfig, ScheduleKind, StopRule, SyncOptions,
};
use appsag_core::Error;

use crate::config::{ExperimentConfig, ScheduleChoice};
use crate::CliError;

/// Tolerances of the verification checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;
pub const REPLAY_TOL: f64 = 1e-9;
pub const TRACKING_TOL: f64 = 1e-9;
/// Longest product checked against the mixing bound.
pub const MIXING_HORIZON: usize = 200;

/// Everything one node count needs before simulating.
pub struct Prepared {
    pub n: usize,
    pub problem: ProblemSpec,
    pub graph: DirectedGraph,
    pub z_star: SaddleVec,
    pub spectral: SpectralConstants,
    pub eta1: f64,
    pub eta2: f64,
    pub warnings: Vec<String>,
}

impl Prepared {
    /// Selector window size 2 max m_i - 1.
    pub fn k_sel(&self) -> usize {
        2 * (0..self.n).map(|i| self.problem.m_i(i)).max().unwrap_or(1) - 1
    }
}

pub fn prepare(cfg: &ExperimentConfig, run: usize) -> Result<Prepared, CliError> {
    let n = cfg.problem.nodes[run];
    let pc = ProblemConfig {
        n_states: cfg.problem.n_states,
        n_actions: cfg.problem.n_actions,
        n_nodes: n,
        d: cfg.problem.d,
        samples_per_node: cfg.samples_for(n),
        gamma: cfg.problem.gamma,
        rho: cfg.problem.rho,
        mode: cfg.problem.mode,
        seed: cfg.problem.seed,
    };
    let built = build_problem(&pc)?;
    let graph = generate_topology(&cfg.topology, n)?;
    let z_star = solve_saddle(&built.problem.aggregate(), built.problem.rho)?;
    let spectral = spectral_constants(&built.problem, cfg.algorithm.zeta)?;
    let mut warnings = built.warnings;
    if !spectral.valid {
        warnings.push(format!(
            "zeta = {} does not exceed zeta_min = {} (or G has complex eigenvalues); the linear-rate guarantee does not apply",
            spectral.zeta, spectral.zeta_min
        ));
    }
    for w in &warnings {
        log::warn!("n = {n}: {w}");
    }
    let eta1 = cfg.eta1_for(run);
    Ok(Prepared { n, problem: built.problem, graph, z_star, spectral, eta1, eta2: eta1 * cfg.algorithm.zeta, warnings })
}

fn run_config(cfg: &ExperimentConfig, p: &Prepared) -> RunConfig {
    let mut rc = RunConfig::new(p.eta1, p.eta2, cfg.schedule.seed);
    rc.batch_size = cfg.algorithm.batch_size;
    rc.b_max = cfg.schedule.b_max;
    rc
}

/// Simulator for the configured schedule.
pub fn simulator(cfg: &ExperimentConfig, p: &Prepared, rc: &RunConfig) -> Result<AsyncSimulator, CliError> {
    let seed = cfg.schedule.seed;
    let kind = match &cfg.schedule.kind {
        ScheduleChoice::Sync { straggler } => {
            return Ok(sync_simulator(&p.problem, &p.graph, rc, SyncOptions { straggler: *straggler })?);
        }
        ScheduleChoice::UniformRandom => ScheduleKind::UniformRandom,
        ScheduleChoice::RoundRobin => ScheduleKind::RoundRobin,
        ScheduleChoice::Straggler { target, slowdown } => ScheduleKind::Straggler { target: *target, slowdown: *slowdown },
    };
    let delays = match cfg.schedule.d_max {
        0 => DelayModel::Zero,
        max => DelayModel::Uniform { max, seed },
    };
    let sched = ActivationSchedule::new(kind, seed, p.n);
    Ok(AsyncSimulator::new(&p.problem, &p.graph, &sched, &delays, rc)?)
}

fn stop_rule(cfg: &ExperimentConfig, max_k: u64) -> StopRule {
    match cfg.algorithm.epsilon {
        Some(eps) => StopRule::Epsilon { eps, max_k },
        None => StopRule::MaxK(max_k),
    }
}

fn output_path(dir: &Path, name: &Path, suffix: Option<usize>) -> PathBuf {
    let path = dir.join(name);
    match suffix {
        None => path,
        Some(n) => {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let file = match path.extension() {
                Some(ext) => format!("{stem}_n{n}.{}", ext.to_string_lossy()),
                None => format!("{stem}_n{n}"),
            };
            path.with_file_name(file)
        }
    }
}

fn spectral_report(s: &mut String, p: &Prepared) {
    let sc = &p.spectral;
    let _ = writeln!(s, "alpha = {:e}", sc.alpha);
    let _ = writeln!(s, "lambda_max_g = {:e}", sc.lambda_max_g);
    let _ = writeln!(s, "beta = {:e}", sc.beta);
    let _ = writeln!(s, "psi = {:e}", sc.psi);
    let _ = writeln!(s, "zeta = {:e}", sc.zeta);
    let _ = writeln!(s, "zeta_min = {:e}", sc.zeta_min);
    let _ = writeln!(s, "zeta_valid = {}", sc.valid);
    let _ = writeln!(s, "beta_exceeds_zeta_psi_over_2m = {}", sc.bound_psi_holds());
    let _ = writeln!(s, "eta2_range = (0, {:e})", sc.eta2_max(p.eta1));
}

fn rate_block(s: &mut String, title: &str, rc: &RateConstants) {
    let _ = writeln!(s, "[{title}]");
    s.push_str(&rc.report());
}

/// Certified b of `trace`, or the reason it is unavailable.
fn certified_b(trace: &EventTrace) -> Result<usize, String> {
    verify_assumption1b(trace).map(|b| b as usize).map_err(|e| e.to_string())
}

fn rate_at(p: &Prepared, b: usize, eta: LogPos) -> Result<RateConstants, CliError> {
    // A single node has diameter 0; one hop is the smallest meaningful value.
    let d_g = p.graph.diameter()?.max(1);
    Ok(rate_constants(p.n, b, p.k_sel(), d_g, &p.spectral, eta)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub n: usize,
    pub metrics: PathBuf,
    pub rows: usize,
    pub report: PathBuf,
    pub final_err: f64,
}

/// Runs every configured node count; writes per-event metrics and a constants report.
pub fn cmd_run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<RunOutcome>, CliError> {
    std::fs::create_dir_all(out_dir)?;
    let sweep = cfg.problem.nodes.len() > 1;
    let mut outcomes = Vec::new();
    for run in 0..cfg.problem.nodes.len() {
        let p = prepare(cfg, run)?;
        let suffix = sweep.then_some(p.n);
        log::info!("n = {}: running up to {} events", p.n, cfg.algorithm.max_k);
        let rc = run_config(cfg, &p);
        let trace = simulator(cfg, &p, &rc)?.run(stop_rule(cfg, cfg.algorithm.max_k))?;
        let rows = metrics(&trace, &p.z_star);
        let metrics_path = output_path(out_dir, &cfg.outputs.metrics, suffix);
        write_metrics_file(&metrics_path, &rows)?;
        if let Some(t) = &cfg.outputs.trace {
            std::fs::write(output_path(out_dir, t, suffix), trace.to_text())?;
        }

        let mut report = String::new();
        let _ = writeln!(report, "[run]");
        let _ = writeln!(report, "n = {}", p.n);
        let _ = writeln!(report, "m = {}", p.problem.m());
        let _ = writeln!(report, "eta1 = {:e}", p.eta1);
        let _ = writeln!(report, "eta2 = {:e}", p.eta2);
        let _ = writeln!(report, "events = {}", trace.num_activations());
        let last = rows.last().expect("init row");
        let _ = writeln!(report, "err_max_initial = {:e}", rows[0].err_max);
        let _ = writeln!(report, "err_max_final = {:e}", last.err_max);
        let _ = writeln!(report, "wall_time = {:e}", trace.activations().last().map_or(0.0, |a| a.wall_time));
        let series: Vec<f64> = rows.iter().map(|r| r.err_max).collect();
        match estimate_rate(&series) {
            Ok(fit) => {
                let _ = writeln!(report, "c_hat = {:.9}", fit.c_hat);
                let _ = writeln!(report, "r_squared = {:.6}", fit.r_squared);
            }
            Err(e) => {
                let _ = writeln!(report, "c_hat = unavailable ({e})");
            }
        }
        for w in &p.warnings {
            let _ = writeln!(report, "warning = {w}");
        }
        let _ = writeln!(report, "[spectral]");
        spectral_report(&mut report, &p);
        match certified_b(&trace) {
            Ok(b) => rate_block(&mut report, "rate", &rate_at(&p, b, LogPos::new(p.eta1))?),
            Err(e) => {
                let _ = writeln!(report, "[rate]\nunavailable = {e}");
            }
        }

        if let Some(sync_name) = &cfg.outputs.sync_metrics {
            let straggler = match cfg.schedule.kind {
                ScheduleChoice::Straggler { target, slowdown } => Some((target, slowdown)),
                ScheduleChoice::Sync { straggler } => straggler,
                _ => None,
            };
            let mut src = rc.clone();
            if let Some(e) = cfg.algorithm.sync_eta1 {
                src.eta1 = e;
                src.eta2 = e * cfg.algorithm.zeta;
            }
            let sync = sync_simulator(&p.problem, &p.graph, &src, SyncOptions { straggler })?.run(stop_rule(cfg, cfg.algorithm.max_k))?;
            let sync_rows = metrics(&sync, &p.z_star);
            write_metrics_file(&output_path(out_dir, sync_name, suffix), &sync_rows)?;
            let _ = writeln!(report, "[sync]");
            let _ = writeln!(report, "eta1 = {:e}", src.eta1);
            let _ = writeln!(report, "events = {}", sync.num_activations());
            let _ = writeln!(report, "err_max_final = {:e}", sync_rows.last().expect("init row").err_max);
            let _ = writeln!(report, "wall_time = {:e}", sync.activations().last().map_or(0.0, |a| a.wall_time));
        }

        let report_path = output_path(out_dir, &cfg.outputs.report, suffix);
        std::fs::write(&report_path, &report)?;
        log::info!("n = {}: err_max {:e} -> {:e}, wrote {}", p.n, rows[0].err_max, last.err_max, metrics_path.display());
        outcomes.push(RunOutcome { n: p.n, metrics: metrics_path, rows: rows.len(), report: report_path, final_err: last.err_max });
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Largest observed defect (a ratio to the bound for the mixing check).
    pub worst: f64,
    /// First event (or product length) at which the check failed.
    pub first_failure: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub n: usize,
    pub b: usize,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn text(&self) -> String {
        let mut s = format!("n = {}, certified b = {}\n", self.n, self.b);
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            let at = c.first_failure.map_or(String::new(), |k| format!(" (first failure at k = {k})"));
            let _ = writeln!(s, "[{status}] {}: {}{at}", c.name, c.detail);
        }
        s
    }
}

fn first_above(values: impl IntoIterator<Item = f64>, tol: f64) -> (f64, Option<usize>) {
    let mut worst: f64 = 0.0;
    let mut first = None;
    for (k, v) in values.into_iter().enumerate() {
        if !(v <= tol) && first.is_none() {
            first = Some(k);
        }
        worst = worst.max(if v.is_nan() { f64::INFINITY } else { v });
    }
    (worst, first)
}

fn check(name: &'static str, worst: f64, first: Option<usize>, detail: String) -> CheckResult {
    CheckResult { name, passed: first.is_none() && worst.is_finite(), worst, first_failure: first, detail }
}

/// Records a short trace per node count and runs the structural checks on it.
pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<Vec<VerifyReport>, CliError> {
    let mut reports = Vec::new();
    for run in 0..cfg.problem.nodes.len() {
        let p = prepare(cfg, run)?;
        let rc = run_config(cfg, &p);
        let trace = simulator(cfg, &p, &rc)?.run(StopRule::MaxK(cfg.verify_events))?;
        let b = verify_assumption1b(&trace)? as usize;
        if let Some(b_max) = cfg.schedule.b_max {
            if b as u64 > b_max {
                return Err(Error::Assumption {
                    assumption: "1(b)",
                    detail: format!("certified b = {b} (window or message age) exceeds b_max = {b_max}"),
                }
                .into());
            }
        }
        let stream = MatrixStream::new(&trace, b);
        let mats: Vec<EventMatrices> = (0..stream.len()).map(|k| stream.build(k)).collect::<Result<_, _>>()?;
        let mut checks = Vec::new();

        let defects = mats.iter().map(|m| m.row_defect().max(m.col_defect()));
        let (worst, first) = first_above(defects, STOCHASTIC_TOL);
        checks.push(check("stochasticity", worst, first, format!("max |sum - 1| = {worst:.2e} over {} matrices (tol {STOCHASTIC_TOL:e})", mats.len())));

        let rep = replay(&trace, &p.problem, p.eta1, cfg.algorithm.zeta, b)?;
        let eq = check_equivalence(&trace, &rep);
        let dev = eq.max_deviation();
        let first = (!(dev <= REPLAY_TOL)).then_some(eq.worst_k as usize);
        checks.push(check("replay equivalence", dev, first, format!("max deviation = {dev:.2e} (tol {REPLAY_TOL:e})")));

        let own = (0..rep.states.len()).map(|k| tracking_residual(&rep, k));
        let sim = tracking_residuals_against_trace(&rep, &trace, &p.problem);
        let (w1, f1) = first_above(own, TRACKING_TOL);
        let (w2, f2) = first_above(sim, TRACKING_TOL);
        let first = match (f1, f2) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        checks.push(check("tracking identity", w1.max(w2), first, format!("max residual = {:.2e} (tol {TRACKING_TOL:e})", w1.max(w2))));

        let rc_const = rate_at(&p, b, LogPos::new(p.eta1))?;
        let horizon = mats.len().min(MIXING_HORIZON);
        let mut worst_ratio: f64 = 0.0;
        let mut first = None;
        let mut holds_from = 0;
        for side in [Side::Row, Side::Col] {
            let rep = product_contraction(&mats[..horizon], side);
            for (t, d) in rep.distance.iter().enumerate() {
                let bound = rc_const.mixing_bound(t as u64);
                worst_ratio = worst_ratio.max(d / bound);
                if *d > bound {
                    first = Some(first.map_or(t, |f: usize| f.min(t)));
                    holds_from = holds_from.max(t + 1);
                }
            }
        }
        checks.push(check(
            "mixing bound",
            worst_ratio,
            first,
            format!(
                "rank-one distance vs 2 delta^t for t <= {horizon}, delta = {}; max ratio {worst_ratio:.3}, holds for t >= {holds_from}",
                rc_const.delta_text()
            ),
        ));
        reports.push(VerifyReport { n: p.n, b, checks });
    }
    Ok(reports)
}

/// Spectral and rate constants. b is certified on a `verify.events` trace.
pub fn cmd_constants(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let mut s = String::new();
    for run in 0..cfg.problem.nodes.len() {
        let p = prepare(cfg, run)?;
        let rc = run_config(cfg, &p);
        let trace = simulator(cfg, &p, &rc)?.run(StopRule::MaxK(cfg.verify_events))?;
        let b = verify_assumption1b(&trace)? as usize;
        let _ = writeln!(s, "[problem]\nn = {}\nm = {}\nK = {}", p.n, p.problem.m(), p.k_sel());
        for w in &p.warnings {
            let _ = writeln!(s, "warning = {w}");
        }
        let _ = writeln!(s, "[spectral]");
        spectral_report(&mut s, &p);
        let at_eta = rate_at(&p, b, LogPos::new(p.eta1))?;
        rate_block(&mut s, "rate at configured eta1", &at_eta);
        let half = LogPos::from_ln(at_eta.eta_max_theory.ln - 2f64.ln());
        rate_block(&mut s, "rate at eta_max_theory / 2", &rate_at(&p, b, half)?);
    }
    Ok(s)
}
