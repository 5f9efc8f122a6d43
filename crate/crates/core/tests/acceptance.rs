//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use appsag_core::augmented::{
    check_equivalence, evolve_weights, product_contraction, rate_constants, replay, tracking_residual,
    tracking_residuals_against_trace, EventMatrices, MatrixStream, Side,
};
use appsag_core::baselines::{centralized_gd, centralized_sag, CentralOptions};
use appsag_core::graph::DirectedGraph;
use appsag_core::logscale::LogPos;
use appsag_core::mdp::PartitionMode;
use appsag_core::mspbe::{objective, saddle_gradient, solve_saddle, spectral_constants, ProblemSpec, SaddleVec};
use appsag_core::rng;
use appsag_core::setup::{build_problem, ProblemConfig};
use appsag_core::simulator::{
    estimate_rate, run_async, run_to_error, sync_simulator, verify_assumption1b, ActivationSchedule, AsyncSimulator,
    DelayModel, EventTrace, RunConfig, ScheduleKind, StopRule, SyncOptions,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn problem(n: usize, d: usize, m_i: usize, mode: PartitionMode, seed: u64) -> ProblemSpec {
    let cfg = ProblemConfig {
        n_states: 20,
        n_actions: 3,
        n_nodes: n,
        d,
        samples_per_node: vec![m_i; n],
        gamma: 0.9,
        rho: 0.1,
        mode,
        seed,
    };
    build_problem(&cfg).expect("problem").problem
}

fn quickstart() -> ProblemSpec {
    problem(6, 5, 50, PartitionMode::Parallel, 1)
}

const QUICKSTART_ETA: (f64, f64) = (0.07, 1.6);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> (bool, String) {
    let el = start.elapsed();
    (el < limit, format!("{:.2}s (limit {}s)", el.as_secs_f64(), limit.as_secs()))
}

fn c1_gradient_oracle() -> Outcome {
    let start = Instant::now();
    let p = quickstart();
    let samples: Vec<_> = p.samples().collect();
    let mut r = rng::stream(11, 0);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let st = samples[r.random_range(0..samples.len())];
        let z = SaddleVec::from_fn(2 * p.d, |_, _| r.random_range(-2.0..2.0));
        let g = saddle_gradient(&z, st, p.rho);
        let fd = SaddleVec::from_fn(2 * p.d, |k, _| {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[k] += h;
            zm[k] -= h;
            let deriv = (objective(&zp, st, p.rho) - objective(&zm, st, p.rho)) / (2.0 * h);
            // The omega block of the stacked gradient is the negated partial.
            if k < p.d {
                deriv
            } else {
                -deriv
            }
        });
        worst = worst.max((&g - &fd).norm() / g.norm());
    }
    let (fast, t) = within(Duration::from_secs(1), start);
    check(worst <= 1e-6 && fast, format!("max relative error {worst:.2e} (tol 1e-6), {t}"))
}

fn c2_saddle_and_gd() -> Outcome {
    let start = Instant::now();
    let mut worst_grad: f64 = 0.0;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut violations = 0usize;
    let mut steps = 0usize;
    let mut worst_final: f64 = 0.0;
    for seed in 0..10 {
        let p = problem(1, 6, 200, PartitionMode::Parallel, 100 + seed);
        let z_star = solve_saddle(&p.aggregate(), p.rho).map_err(|e| e.to_string())?;
        worst_grad = worst_grad.max(p.full_gradient_by_sum(&z_star).norm());
        let zeta = 1.5 * spectral_constants(&p, 1.0).map_err(|e| e.to_string())?.zeta_min;
        let sc = spectral_constants(&p, zeta).map_err(|e| e.to_string())?;
        if !sc.valid {
            return Err(format!("seed {seed}: zeta = {zeta} not valid"));
        }
        let eta = 0.5 / sc.lambda_max_g;
        let iters = ((30.0 / (sc.alpha * eta)).ceil() as usize).min(400_000);
        let tr = centralized_gd(&p, eta, zeta, iters, None).map_err(|e| e.to_string())?;
        let bound = 1.0 - sc.alpha * eta + 1e-10;
        for &r in &tr.ratios {
            steps += 1;
            worst_excess = worst_excess.max(r - bound);
            if r > bound {
                violations += 1;
            }
        }
        worst_final = worst_final.max(*tr.err.last().unwrap() / tr.err[0]);
    }
    let (fast, t) = within(Duration::from_secs(5), start);
    let ok = worst_grad <= 1e-10 && violations == 0 && worst_final <= 1e-8 && fast;
    check(
        ok,
        format!(
            "max ||grad(z*)|| {worst_grad:.2e} (tol 1e-10); per-step ratio above 1 - alpha eta + 1e-10 at {violations}/{steps} steps \
             (worst excess {worst_excess:.3e}); worst final relative error {worst_final:.2e}; {t}"
        ),
    )
}

fn random_trace(n: usize, k: u64, dmax: u64, seed: u64) -> (ProblemSpec, EventTrace) {
    let p = problem(n, 3, 8, PartitionMode::Parallel, 40 + seed);
    let g = DirectedGraph::exponential(n).expect("graph");
    let s = ActivationSchedule::new(ScheduleKind::UniformRandom, seed, n);
    let mut cfg = RunConfig::new(0.05, 0.5, seed);
    cfg.z0 = Some(SaddleVec::from_element(6, 0.5));
    let t = run_async(&p, &g, &s, &DelayModel::Uniform { max: dmax, seed }, StopRule::MaxK(k), &cfg).expect("run");
    (p, t)
}

fn c3_stochasticity() -> Outcome {
    let (_, t) = random_trace(5, 500, 2, 3);
    let b = verify_assumption1b(&t).map_err(|e| e.to_string())? as usize;
    let s = MatrixStream::new(&t, b);
    let (mut row, mut col) = (0.0f64, 0.0f64);
    for k in 0..s.len() {
        let m = s.build(k).map_err(|e| e.to_string())?;
        row = row.max(m.row_defect());
        col = col.max(m.col_defect());
    }
    check(
        row <= 1e-12 && col <= 1e-12,
        format!("{} transitions, b = {b}: max |row sum - 1| {row:.1e}, max |col sum - 1| {col:.1e} (tol 1e-12)", s.len()),
    )
}

fn replay_traces() -> Vec<(ProblemSpec, EventTrace)> {
    vec![random_trace(3, 200, 2, 1), random_trace(4, 200, 2, 2), random_trace(5, 200, 2, 3)]
}

fn c4_replay_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut bs = Vec::new();
    for (p, t) in replay_traces() {
        let b = verify_assumption1b(&t).map_err(|e| e.to_string())? as usize;
        let rep = replay(&t, &p, t.eta1, t.eta2 / t.eta1, b).map_err(|e| e.to_string())?;
        worst = worst.max(check_equivalence(&t, &rep).max_deviation());
        bs.push(b);
    }
    let (fast, t) = within(Duration::from_secs(10), start);
    check(worst <= 1e-9 && fast, format!("3 traces of 200 events (n = 3, 4, 5; certified b = {bs:?}): max deviation {worst:.2e} (tol 1e-9), {t}"))
}

fn c5_tracking_identity() -> Outcome {
    let (mut own, mut sim): (f64, f64) = (0.0, 0.0);
    for (p, t) in replay_traces() {
        let b = verify_assumption1b(&t).map_err(|e| e.to_string())? as usize;
        let rep = replay(&t, &p, t.eta1, t.eta2 / t.eta1, b).map_err(|e| e.to_string())?;
        for k in 0..rep.states.len() {
            own = own.max(tracking_residual(&rep, k));
        }
        for r in tracking_residuals_against_trace(&rep, &t, &p) {
            sim = sim.max(r);
        }
    }
    check(
        own <= 1e-9 && sim <= 1e-9,
        format!("max ||1'Y - 1'D|| {own:.2e}; against simulator gradients {sim:.2e} (tol 1e-9)"),
    )
}

fn c6_sag_reduction() -> Outcome {
    let p = quickstart().merged();
    let g = DirectedGraph::ring(1).expect("graph");
    let s = ActivationSchedule::new(ScheduleKind::UniformRandom, 5, 1);
    let (e1, e2) = (0.01, 0.2);
    let t = run_async(&p, &g, &s, &DelayModel::Zero, StopRule::MaxK(1000), &RunConfig::new(e1, e2, 21)).map_err(|e| e.to_string())?;
    let c = centralized_sag(&p, e1, e2, 1000, 21, &CentralOptions::default()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut same_picks = true;
    for (i, a) in t.activations().enumerate() {
        worst = worst.max((&a.payload.z_tilde - &c.z[i + 1]).amax());
        same_picks &= a.picks == [c.picks[i]];
    }
    check(worst <= 1e-12 && same_picks, format!("1000 steps: max deviation {worst:.1e} (tol 1e-12), identical sample sequence {same_picks}"))
}

fn c7_mixing_bound() -> Outcome {
    let p = problem(3, 3, 8, PartitionMode::Parallel, 70);
    let g = DirectedGraph::ring(3).expect("graph");
    let s = ActivationSchedule::new(ScheduleKind::UniformRandom, 7, 3);
    let t = run_async(&p, &g, &s, &DelayModel::Uniform { max: 1, seed: 7 }, StopRule::MaxK(260), &RunConfig::new(0.05, 0.5, 7))
        .map_err(|e| e.to_string())?;
    let b = verify_assumption1b(&t).map_err(|e| e.to_string())? as usize;
    let d_g = g.diameter().map_err(|e| e.to_string())?;
    let sc = spectral_constants(&p, 10.0).map_err(|e| e.to_string())?;
    let rc = rate_constants(3, b, 15, d_g, &sc, LogPos::new(0.05)).map_err(|e| e.to_string())?;
    let stream = MatrixStream::new(&t, b);
    let mats: Vec<EventMatrices> = (0..200).map(|k| stream.build(k)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let mut lines = vec![format!("b = {b}, d_g = {d_g}, ntilde = {}, delta = {}", rc.ntilde, rc.delta_text())];
    let mut ok = true;
    for side in [Side::Row, Side::Col] {
        let rep = product_contraction(&mats, side);
        let bad: Vec<usize> = (0..=200).filter(|&t| rep.distance[t] > rc.mixing_bound(t as u64)).collect();
        ok &= bad.is_empty();
        let from = bad.last().map_or(0, |&t| t + 1);
        lines.push(format!(
            "{side:?}: distance(0) = {:.3}, distance(200) = {:.2e}, bound exceeded at {} of 201 t, holds for all t >= {from}, empirical decay {:.4}",
            rep.distance[0],
            rep.distance[200],
            bad.len(),
            rep.empirical_decay
        ));
    }
    let v = evolve_weights(&mats, 3);
    let mass = v.iter().map(|w| (w.sum() - 3.0).abs()).fold(0.0, f64::max);
    let min_real = v.iter().skip(1).flat_map(|w| w.rows(0, 3).iter().copied().collect::<Vec<_>>()).fold(f64::INFINITY, f64::min);
    let kappa_n = LogPos::from_ln(rc.kappa.ln + 3f64.ln());
    let weights_ok = mass <= 1e-12 && min_real.ln() >= kappa_n.ln;
    lines.push(format!("weights: max |1'v - n| {mass:.1e}, min real entry {min_real:.3e} vs n kappa = {kappa_n}"));
    check(ok && weights_ok, lines.join("; "))
}

/// Events until err_max <= target (absolute), or None.
#[allow(clippy::too_many_arguments)]
fn events_to(
    p: &ProblemSpec,
    g: &DirectedGraph,
    kind: ScheduleKind,
    dmax: u64,
    eta: (f64, f64),
    z_star: &SaddleVec,
    target: f64,
    seed: u64,
    max_k: u64,
) -> Option<u64> {
    let mut rc = RunConfig::new(eta.0, eta.1, seed);
    rc.record = false;
    let s = ActivationSchedule::new(kind, seed, p.n());
    let mut sim = AsyncSimulator::new(p, g, &s, &DelayModel::Uniform { max: dmax, seed }, &rc).ok()?;
    run_to_error(&mut sim, z_star, target, max_k, |_| {}).ok()?.k_hit
}

fn c8_quickstart_linear() -> Outcome {
    let start = Instant::now();
    let p = quickstart();
    let z_star = solve_saddle(&p.aggregate(), p.rho).map_err(|e| e.to_string())?;
    let (e1, e2) = QUICKSTART_ETA;
    let sc = spectral_constants(&p, e2 / e1).map_err(|e| e.to_string())?;
    let g = DirectedGraph::ring(6).expect("graph");
    let s = ActivationSchedule::new(ScheduleKind::UniformRandom, 1, 6);
    let mut rc = RunConfig::new(e1, e2, 1);
    rc.record = false;
    let mut sim = AsyncSimulator::new(&p, &g, &s, &DelayModel::Uniform { max: 2, seed: 1 }, &rc).map_err(|e| e.to_string())?;
    let err0 = (&sim.nodes()[0].z - &z_star).norm();
    let mut series = Vec::new();
    let pr = run_to_error(&mut sim, &z_star, 1e-6 * err0, 2_000_000, |r| series.push(r.err_max)).map_err(|e| e.to_string())?;
    let fit = estimate_rate(&series).map_err(|e| e.to_string())?;
    let (fast, t) = within(Duration::from_secs(60), start);
    let ok = sc.valid && pr.k_hit.is_some() && fit.c_hat < 1.0 && fit.r_squared >= 0.95 && fast;
    check(
        ok,
        format!(
            "zeta = {:.2} (zeta_min {:.2}); reached 1e-6 err_max(0) at k = {:?}; c_hat = {:.6}, R^2 = {:.4}; {t}",
            e2 / e1,
            sc.zeta_min,
            pr.k_hit,
            fit.c_hat,
            fit.r_squared
        ),
    )
}

/// Stepsize multipliers of 1/lambda_max(G) tried when tuning.
const TUNE_GRID: [f64; 9] = [0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0];

fn c9_straggler() -> Outcome {
    let p = problem(9, 5, 20, PartitionMode::Marl, 2);
    let z_star = solve_saddle(&p.aggregate(), p.rho).map_err(|e| e.to_string())?;
    let zeta = 1.5 * spectral_constants(&p, 1.0).map_err(|e| e.to_string())?.zeta_min;
    let lmax = spectral_constants(&p, zeta).map_err(|e| e.to_string())?.lambda_max_g;
    let g = DirectedGraph::grid(9).expect("graph");
    let target = 1e-4;
    let slow = ScheduleKind::Straggler { target: 4, slowdown: 10.0 };
    let seeds = [0u64, 1];
    let mean_events = |kind: &ScheduleKind, eta: f64, cap: u64| -> Option<f64> {
        let mut s = 0.0;
        for &seed in &seeds {
            s += events_to(&p, &g, kind.clone(), 2, (eta, eta * zeta), &z_star, target, seed, cap)? as f64;
        }
        Some(s / seeds.len() as f64)
    };

    // Tune eta on the unslowed run, then reuse it with the straggler.
    let mut best: Option<(f64, f64)> = None;
    for f in TUNE_GRID {
        let eta = f / lmax;
        let cap = best.map_or(3_000_000, |(e, _)| (2.0 * e) as u64);
        if let Some(e) = mean_events(&ScheduleKind::UniformRandom, eta, cap) {
            if best.is_none_or(|(b, _)| e < b) {
                best = Some((e, eta));
            }
        }
    }
    let (base, eta) = best.ok_or("no stepsize on the grid converged")?;
    let slowed = mean_events(&slow, eta, 10_000_000).ok_or("straggler run did not converge")?;
    let async_ratio = slowed / base;

    let sync_wall = |eta_s: f64, opts: SyncOptions| -> Option<f64> {
        let mut rc = RunConfig::new(eta_s, eta_s * zeta, 0);
        rc.record = false;
        let mut sim = sync_simulator(&p, &g, &rc, opts).ok()?;
        run_to_error(&mut sim, &z_star, target, 10_000_000, |_| {}).ok()?.wall_hit
    };
    // The synchronous run gets its own stepsize, tuned the same way.
    let mut sync_best: Option<(f64, f64)> = None;
    for f in [0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0] {
        if let Some(w) = sync_wall(f / lmax, SyncOptions::default()) {
            if sync_best.is_none_or(|(b, _)| w < b) {
                sync_best = Some((w, f / lmax));
            }
        }
    }
    let (w0, eta_s) = sync_best.ok_or("no sync stepsize on the grid converged")?;
    let w1 = sync_wall(eta_s, SyncOptions { straggler: Some((4, 10.0)) }).ok_or("sync straggler did not converge")?;
    let sync_ratio = w1 / w0;
    check(
        async_ratio < 1.5 && sync_ratio >= 5.0,
        format!(
            "eta1 = {eta:.3e} tuned on the unslowed run; async events {base:.0} -> {slowed:.0} (x{async_ratio:.3}, need < 1.5); \
             sync (eta1 = {eta_s:.3e}) wall time {w0:.0} -> {w1:.0} (x{sync_ratio:.2}, need >= 5)"
        ),
    )
}

fn c10_speedup() -> Outcome {
    let m = 240;
    let mut per_node = Vec::new();
    let mut lines = Vec::new();
    for n in [1usize, 4, 8] {
        let p = problem(n, 5, m / n, PartitionMode::Parallel, 3);
        let z_star = solve_saddle(&p.aggregate(), p.rho).map_err(|e| e.to_string())?;
        let zeta = 1.5 * spectral_constants(&p, 1.0).map_err(|e| e.to_string())?.zeta_min;
        let lmax = spectral_constants(&p, zeta).map_err(|e| e.to_string())?.lambda_max_g;
        let g = DirectedGraph::exponential(n).expect("graph");
        let err0 = z_star.norm();
        let mut best: Option<(u64, f64)> = None;
        for j in 0..14 {
            let eta = 0.005 * 1.5f64.powi(j) / lmax;
            let cap = best.map_or(2_000_000, |(e, _)| 2 * e);
            let runs: Option<Vec<u64>> = (0..2)
                .map(|seed| events_to(&p, &g, ScheduleKind::UniformRandom, 1, (eta, eta * zeta), &z_star, 1e-6 * err0, seed, cap))
                .collect();
            if let Some(r) = runs {
                let worst = *r.iter().max().unwrap();
                if best.is_none_or(|(b, _)| worst < b) {
                    best = Some((worst, eta));
                }
            }
        }
        let (events, eta) = best.ok_or(format!("n = {n}: no stepsize converged"))?;
        let evals = events as f64 / n as f64;
        lines.push(format!("n = {n}: {evals:.0} gradient evaluations per node (eta1 = {eta:.2e})"));
        per_node.push(evals);
    }
    let monotone = per_node.windows(2).all(|w| w[1] < w[0]);
    check(monotone, lines.join("; "))
}

fn c11_constants() -> Outcome {
    let p = quickstart();
    let (e1, e2) = QUICKSTART_ETA;
    let zeta = e2 / e1;
    let sc = spectral_constants(&p, zeta).map_err(|e| e.to_string())?;
    let g = DirectedGraph::ring(6).expect("graph");
    let s = ActivationSchedule::new(ScheduleKind::UniformRandom, 1, 6);
    let t = run_async(&p, &g, &s, &DelayModel::Uniform { max: 2, seed: 1 }, StopRule::MaxK(2000), &RunConfig::new(e1, e2, 1))
        .map_err(|e| e.to_string())?;
    let b = verify_assumption1b(&t).map_err(|e| e.to_string())? as usize;
    let k_sel = 2 * (0..6).map(|i| p.m_i(i)).max().unwrap() - 1;
    let d_g = g.diameter().map_err(|e| e.to_string())?;
    let probe = rate_constants(6, b, k_sel, d_g, &sc, LogPos::new(e1)).map_err(|e| e.to_string())?;
    let half = LogPos::from_ln(probe.eta_max_theory.ln - 2f64.ln());
    let rc = rate_constants(6, b, k_sel, d_g, &sc, half).map_err(|e| e.to_string())?;
    let finite = [sc.alpha, sc.beta, sc.psi, sc.zeta_min].iter().all(|x| x.is_finite())
        && rc.kappa.is_finite()
        && rc.neg_ln_delta.is_finite()
        && rc.ttilde.is_finite()
        && rc.mu.is_finite();
    let ok = finite && rc.kappa_inv_mu_n < 0.5 && sc.bound_psi_holds() && rc.c_in_unit_interval();
    check(
        ok,
        format!(
            "alpha {:.4} beta {:.4} psi {:.4} zeta_min {:.3} kappa {} delta {} ttilde {} mu {} c {} \
             kappa^-1 mu n = {} beta > zeta psi/2m: {} (eta = eta_max_theory/2 = {})",
            sc.alpha,
            sc.beta,
            sc.psi,
            sc.zeta_min,
            rc.kappa,
            rc.delta_text(),
            rc.ttilde,
            rc.mu,
            rc.c_text(),
            rc.kappa_inv_mu_n,
            sc.bound_psi_holds(),
            rc.eta
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient oracle", c1_gradient_oracle),
        ("saddle correctness", c2_saddle_and_gd),
        ("stochasticity", c3_stochasticity),
        ("replay equivalence", c4_replay_equivalence),
        ("tracking identity", c5_tracking_identity),
        ("SAG reduction", c6_sag_reduction),
        ("mixing contraction bound", c7_mixing_bound),
        ("linear convergence", c8_quickstart_linear),
        ("straggler robustness", c9_straggler),
        ("speedup trend", c10_speedup),
        ("constants report", c11_constants),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(d) => println!("[PASS] C{} {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("[FAIL] C{} {name}: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
