//! Centralized reference iterations on the same saddle problem.

use nalgebra::DVector;

use crate::error::Result;
use crate::mspbe::{saddle_gradient_into, scale_state, scaled_gradient, solve_saddle, unscale_state, ProblemSpec, SaddleVec};
use crate::protocol::SampleSelector;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CentralTrace {
    /// z[k] is the iterate after k updates; z[0] is the start point.
    pub z: Vec<SaddleVec>,
    /// Sample chosen at update k + 1 (empty for gradient descent).
    pub picks: Vec<usize>,
    /// ||z[k] - z*||, unscaled.
    pub err: Vec<f64>,
    /// Per-step ||z[k+1] - z*|| / ||z[k] - z*|| in scaled coordinates (descent only).
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CentralOptions {
    pub z0: Option<SaddleVec>,
    /// Recompute every table entry at every step.
    pub refresh_all: bool,
}

/// SAG over all m samples, with block stepsizes diag(eta1 I, eta2 I).
///
/// Sample order comes from the node-0 selector stream of `seed`, so a
/// single-node simulator run with the same seed picks the same samples.
pub fn centralized_sag(
    problem: &ProblemSpec,
    eta1: f64,
    eta2: f64,
    iters: usize,
    seed: u64,
    opts: &CentralOptions,
) -> Result<CentralTrace> {
    let merged = problem.merged();
    let samples = &merged.per_node[0];
    let m = samples.len();
    let d = problem.d;
    let z_star = solve_saddle(&problem.aggregate(), problem.rho)?;
    let mut z = opts.z0.clone().unwrap_or_else(|| DVector::zeros(2 * d));
    let mut scratch = vec![0.0; 2 * d];

    let mut table: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut h = DVector::zeros(2 * d);
    for s in samples {
        saddle_gradient_into(z.as_slice(), s, problem.rho, &mut scratch);
        let g = DVector::from_column_slice(&scratch);
        h += &g;
        table.push(g);
    }
    h /= m as f64;

    let inv_m = 1.0 / m as f64;
    let mut sel = SampleSelector::new(m, rng::selector_stream(seed, 0));
    let mut out = CentralTrace {
        z: vec![z.clone()],
        picks: Vec::with_capacity(iters),
        err: vec![(&z - &z_star).norm()],
        ratios: Vec::new(),
    };
    for _ in 0..iters {
        let p = sel.next();
        let refresh: Vec<usize> = if opts.refresh_all { (0..m).collect() } else { vec![p] };
        for q in refresh {
            saddle_gradient_into(z.as_slice(), &samples[q], problem.rho, &mut scratch);
            let g = DVector::from_column_slice(&scratch);
            h += (&g - &table[q]) * inv_m;
            table[q] = g;
        }
        for r in 0..d {
            z[r] -= eta1 * h[r];
            z[d + r] -= eta2 * h[d + r];
        }
        out.picks.push(p);
        out.err.push((&z - &z_star).norm());
        out.z.push(z.clone());
    }
    Ok(out)
}

/// Deterministic z <- z - eta grad j(z) in scaled coordinates.
pub fn centralized_gd(
    problem: &ProblemSpec,
    eta: f64,
    zeta: f64,
    iters: usize,
    z0: Option<&SaddleVec>,
) -> Result<CentralTrace> {
    let d = problem.d;
    let agg = problem.aggregate();
    let z_star = solve_saddle(&agg, problem.rho)?;
    let zs_star = scale_state(&z_star, zeta);
    let z = z0.cloned().unwrap_or_else(|| DVector::zeros(2 * d));
    let mut zs = scale_state(&z, zeta);
    let mut out = CentralTrace {
        z: vec![z.clone()],
        picks: Vec::new(),
        err: vec![(&z - &z_star).norm()],
        ratios: Vec::with_capacity(iters),
    };
    let mut prev = (&zs - &zs_star).norm();
    for _ in 0..iters {
        zs -= scaled_gradient(&zs, &agg, problem.rho, zeta) * eta;
        let cur = (&zs - &zs_star).norm();
        out.ratios.push(if prev > 0.0 { cur / prev } else { 0.0 });
        prev = cur;
        let z = unscale_state(&zs, zeta);
        out.err.push((&z - &z_star).norm());
        out.z.push(z);
    }
    Ok(out)
}
