//! Delay-augmented matrix form of a simulator run.
//!
//! Node v gets b + 1 slots; slot u of node v sits at index n u + v, slot 0
//! being the real node. Transition k -> k + 1 is
//!
//! ```text
//! Z^{k+1} = H_R^k (Z^k - eta I_a^k Y^k)
//! Y^{k+1} = H_C^k Y^k + D^{k+1} - D^k
//! ```
//!
//! where I_a^k marks the node that updated at event k (none at k = 0), H_R^k
//! gives the node updating at k + 1 the average of the slots holding its
//! buffered z-messages, and H_C^k routes each y-message of the node that
//! updated at k into the slot from which it reaches the receiver exactly when
//! the receiver may consume it. A real row holds z_i right after node i
//! updates and its last sent z~_i otherwise. Rows are in scaled coordinates:
//! Z rows are Lambda^{-1} z, Y and D rows are Lambda y.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::logscale::LogPos;
use crate::mspbe::{saddle_gradient, scale_state, scale_tracker, unscale_state, ProblemSpec, SaddleVec, SpectralConstants};
use crate::simulator::{ActivationRecord, EventTrace, MessageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub b: usize,
}

impl Layout {
    pub fn ntilde(&self) -> usize {
        self.n * (self.b + 1)
    }

    pub fn index(&self, node: usize, age: usize) -> usize {
        self.n * age + node
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventMatrices {
    pub h_r: DMatrix<f64>,
    pub h_c: DMatrix<f64>,
    /// Real index carrying the single 1 of I_a, if any.
    pub active: Option<usize>,
}

impl EventMatrices {
    pub fn i_a(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.h_r.nrows(), self.h_r.ncols());
        if let Some(i) = self.active {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// max_i |row sum of H_R - 1|.
    pub fn row_defect(&self) -> f64 {
        self.h_r.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// max_j |column sum of H_C - 1|.
    pub fn col_defect(&self) -> f64 {
        self.h_c.column_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max)
    }
}

fn too_old(what: &str, age: u64, b: usize, k: u64) -> Error {
    Error::Assumption {
        assumption: "1(b)",
        detail: format!("{what} aged {age} exceeds b = {b} at transition k = {k}"),
    }
}

/// Builds the matrices of every transition k = 0 .. K-1 lazily.
pub struct MatrixStream<'a> {
    trace: &'a EventTrace,
    acts: Vec<&'a ActivationRecord>,
    layout: Layout,
}

impl<'a> MatrixStream<'a> {
    pub fn new(trace: &'a EventTrace, b: usize) -> Self {
        Self { trace, acts: trace.activations().collect(), layout: Layout { n: trace.n, b } }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.acts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acts.is_empty()
    }

    pub fn build(&self, k: usize) -> Result<EventMatrices> {
        let Layout { n, b } = self.layout;
        let lay = self.layout;
        let nt = lay.ntilde();
        let next = self.acts.get(k).ok_or_else(|| {
            Error::InvalidArgument(format!("transition {k} is past the end of a {}-event trace", self.acts.len()))
        })?;
        let emitters: Vec<(usize, &[MessageRecord])> = if k == 0 {
            self.trace.init.iter().enumerate().map(|(i, r)| (i, r.emitted.as_slice())).collect()
        } else {
            let a = self.acts[k - 1];
            vec![(a.node, a.emitted.as_slice())]
        };
        let kk = k as u64;

        let mut h_r = DMatrix::zeros(nt, nt);
        for v in 0..n {
            if v != next.node {
                h_r[(v, v)] = 1.0;
            }
        }
        let w = 1.0 / next.consumed.len() as f64;
        for &(from, sent_at) in &next.consumed {
            let age = kk - sent_at;
            if age > b as u64 {
                return Err(too_old("z-message", age, b, kk));
            }
            h_r[(next.node, lay.index(from, age as usize))] += w;
        }

        let mut h_c = DMatrix::zeros(nt, nt);
        let mut emitting = vec![false; n];
        for (e, msgs) in &emitters {
            emitting[*e] = true;
            let w = 1.0 / self.trace.out_degree[*e] as f64;
            for msg in msgs.iter().filter(|m| !m.dropped) {
                let age = msg.available_at() - kk - 1;
                if age > b as u64 {
                    return Err(too_old("y-message", age, b, kk));
                }
                h_c[(lay.index(msg.to, age as usize), *e)] += w;
            }
        }
        for v in 0..n {
            if !emitting[v] {
                h_c[(v, v)] = 1.0;
            }
        }

        for u in 1..=b {
            for v in 0..n {
                h_r[(lay.index(v, u), lay.index(v, u - 1))] = 1.0;
                h_c[(lay.index(v, u - 1), lay.index(v, u))] = 1.0;
            }
        }
        let active = if k == 0 { None } else { Some(self.acts[k - 1].node) };
        Ok(EventMatrices { h_r, h_c, active })
    }
}

pub fn build_event_matrices(trace: &EventTrace, k: usize, b: usize) -> Result<EventMatrices> {
    MatrixStream::new(trace, b).build(k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub k: u64,
    pub z: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub partial: DMatrix<f64>,
    /// tau[i][p]: event at which node i last selected sample p.
    pub tau: Vec<Vec<u64>>,
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub layout: Layout,
    pub eta: f64,
    pub zeta: f64,
    pub d: usize,
    pub states: Vec<AugmentedState>,
}

fn row(v: &DVector<f64>) -> nalgebra::RowDVector<f64> {
    v.transpose()
}

fn partial_row(problem: &ProblemSpec, table: &[SaddleVec], zeta: f64) -> DVector<f64> {
    let mut s = DVector::zeros(2 * problem.d);
    for g in table {
        s += g;
    }
    scale_tracker(&(s / problem.m() as f64), zeta)
}

/// Runs the matrix recursion over every transition of `trace`.
pub fn replay(trace: &EventTrace, problem: &ProblemSpec, eta: f64, zeta: f64, b: usize) -> Result<Replay> {
    let n = trace.n;
    if problem.n() != n || problem.d != trace.d {
        return Err(Error::DimensionMismatch { expected: n, got: problem.n() });
    }
    let stream = MatrixStream::new(trace, b);
    let lay = stream.layout();
    let nt = lay.ntilde();
    let dim = 2 * problem.d;

    let mut tables: Vec<Vec<SaddleVec>> = Vec::with_capacity(n);
    let mut z = DMatrix::zeros(nt, dim);
    let mut y = DMatrix::zeros(nt, dim);
    let mut partial = DMatrix::zeros(nt, dim);
    for (i, rec) in trace.init.iter().enumerate() {
        if rec.z.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: rec.z.len() });
        }
        let table: Vec<SaddleVec> = problem.per_node[i].iter().map(|s| saddle_gradient(&rec.z, s, problem.rho)).collect();
        let pr = partial_row(problem, &table, zeta);
        z.set_row(i, &row(&scale_state(&rec.z, zeta)));
        y.set_row(i, &row(&pr));
        partial.set_row(i, &row(&pr));
        tables.push(table);
    }
    let mut tau: Vec<Vec<u64>> = (0..n).map(|i| vec![0; problem.m_i(i)]).collect();
    let mut states = Vec::with_capacity(stream.len() + 1);
    states.push(AugmentedState { k: 0, z: z.clone(), y: y.clone(), partial: partial.clone(), tau: tau.clone() });

    for k in 0..stream.len() {
        let mats = stream.build(k)?;
        let mut zt = z;
        if let Some(e) = mats.active {
            let step = y.row(e) * eta;
            let mut r = zt.row_mut(e);
            r -= step;
        }
        z = &mats.h_r * zt;

        let act = stream.acts[k];
        let a = act.node;
        let z_a = unscale_state(&z.row(a).transpose(), zeta);
        for &p in &act.picks {
            tables[a][p] = saddle_gradient(&z_a, &problem.per_node[a][p], problem.rho);
            tau[a][p] = act.k;
        }
        let mut next_partial = partial.clone();
        next_partial.set_row(a, &row(&partial_row(problem, &tables[a], zeta)));
        y = &mats.h_c * y + &next_partial - &partial;
        partial = next_partial;
        states.push(AugmentedState { k: act.k, z: z.clone(), y: y.clone(), partial: partial.clone(), tau: tau.clone() });
    }
    Ok(Replay { layout: lay, eta, zeta, d: problem.d, states })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Equivalence {
    /// Updating node's real Z row against the simulator's z.
    pub z: f64,
    /// Updating node's real Y row against the simulator's y.
    pub y: f64,
    /// Idle real Z rows against the node's last sent z~.
    pub z_tilde: f64,
    /// Event with the largest deviation.
    pub worst_k: u64,
}

impl Equivalence {
    pub fn max_deviation(&self) -> f64 {
        self.z.max(self.y).max(self.z_tilde)
    }
}

/// Largest unscaled deviation between replayed real rows and the trace.
pub fn check_equivalence(trace: &EventTrace, rep: &Replay) -> Equivalence {
    let n = trace.n;
    let zeta = rep.zeta;
    let mut last_tilde: Vec<SaddleVec> = trace.init.iter().map(|r| r.payload.z_tilde.clone()).collect();
    let mut out = Equivalence::default();
    let mut worst = 0.0;
    let mut note = |out: &mut Equivalence, dev: f64, k: u64| {
        if dev > worst {
            worst = dev;
            out.worst_k = k;
        }
    };
    for i in 0..n {
        let dev = (unscale_state(&rep.states[0].z.row(i).transpose(), zeta) - &trace.init[i].z).amax();
        out.z = out.z.max(dev);
        note(&mut out, dev, 0);
    }
    for (a, st) in trace.activations().zip(&rep.states[1..]) {
        let zr = unscale_state(&st.z.row(a.node).transpose(), zeta);
        let dz = (zr - &a.z).amax();
        let yr = scale_tracker(&st.y.row(a.node).transpose(), 1.0 / zeta);
        let dy = (yr - &a.y).amax();
        out.z = out.z.max(dz);
        out.y = out.y.max(dy);
        note(&mut out, dz.max(dy), a.k);
        for (i, tilde) in last_tilde.iter().enumerate() {
            if i != a.node {
                let dt = (unscale_state(&st.z.row(i).transpose(), zeta) - tilde).amax();
                out.z_tilde = out.z_tilde.max(dt);
                note(&mut out, dt, a.k);
            }
        }
        last_tilde[a.node] = a.payload.z_tilde.clone();
    }
    out
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

/// ||1' Y^k - 1' D^k|| for the replayed state at index k.
pub fn tracking_residual(rep: &Replay, k: usize) -> f64 {
    let st = &rep.states[k];
    (column_sums(&st.y) - column_sums(&st.partial)).norm()
}

/// ||1' Y^k - Lambda (1/m) sum_{i,p} grad J_{i,p}(z_i at tau_{i,p})|| for every k,
/// with z taken from the simulator's records rather than the replay.
pub fn tracking_residuals_against_trace(rep: &Replay, trace: &EventTrace, problem: &ProblemSpec) -> Vec<f64> {
    let zeta = rep.zeta;
    let mut tables: Vec<Vec<SaddleVec>> = trace
        .init
        .iter()
        .enumerate()
        .map(|(i, r)| problem.per_node[i].iter().map(|s| saddle_gradient(&r.z, s, problem.rho)).collect())
        .collect();
    let mut total = DVector::zeros(2 * problem.d);
    for t in &tables {
        for g in t {
            total += g;
        }
    }
    let m = problem.m() as f64;
    let residual = |st: &AugmentedState, total: &DVector<f64>| (column_sums(&st.y) - scale_tracker(&(total / m), zeta)).norm();
    let mut out = vec![residual(&rep.states[0], &total)];
    for (a, st) in trace.activations().zip(&rep.states[1..]) {
        for &p in &a.picks {
            let g = saddle_gradient(&a.z, &problem.per_node[a.node][p], problem.rho);
            total += &g - &tables[a.node][p];
            tables[a.node][p] = g;
        }
        out.push(residual(st, &total));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Row,
    Col,
}

/// Frobenius distance of M to its best rank-one approximation.
pub fn rank_one_distance(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.iter().skip(1).map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    /// distance[t] for Phi^{0:t}, t = 0 ..= len.
    pub distance: Vec<f64>,
    /// Least-squares per-step decay of log(distance) over the second half.
    pub empirical_decay: f64,
}

/// Rank-one distances of the products H^{t-1} ... H^0 of the chosen side.
pub fn product_contraction(seq: &[EventMatrices], side: Side) -> ContractionReport {
    let nt = seq.first().map_or(0, |m| m.h_r.nrows());
    let mut phi = DMatrix::identity(nt, nt);
    let mut distance = vec![rank_one_distance(&phi)];
    for m in seq {
        let h = match side {
            Side::Row => &m.h_r,
            Side::Col => &m.h_c,
        };
        phi = h * phi;
        distance.push(rank_one_distance(&phi));
    }
    let tail: Vec<(f64, f64)> = distance
        .iter()
        .enumerate()
        .skip(distance.len() / 2)
        .filter(|(_, d)| **d > 0.0)
        .map(|(t, d)| (t as f64, d.ln()))
        .collect();
    let empirical_decay = if tail.len() < 2 {
        0.0
    } else {
        let k = tail.len() as f64;
        let xm = tail.iter().map(|p| p.0).sum::<f64>() / k;
        let ym = tail.iter().map(|p| p.1).sum::<f64>() / k;
        let sxy: f64 = tail.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
        let sxx: f64 = tail.iter().map(|p| (p.0 - xm).powi(2)).sum();
        (sxy / sxx).exp()
    };
    ContractionReport { distance, empirical_decay }
}

/// v^{k+1} = H_C^k v^k from v^0 = [1_n; 0].
pub fn evolve_weights(seq: &[EventMatrices], n: usize) -> Vec<DVector<f64>> {
    let nt = seq.first().map_or(n, |m| m.h_c.nrows());
    let mut v = DVector::zeros(nt);
    v.rows_mut(0, n).fill(1.0);
    let mut out = vec![v.clone()];
    for m in seq {
        v = &m.h_c * v;
        out.push(v.clone());
    }
    out
}

/// ln(-ln(1 - x)) given ln x, for x in (0, 1).
fn ln_neg_ln_one_minus(ln_x: f64) -> f64 {
    if ln_x < -30.0 {
        // -ln(1 - x) = x (1 + x/2 + ...)
        ln_x + 0.5 * ln_x.exp()
    } else {
        (-(-ln_x.exp()).ln_1p()).ln()
    }
}

/// Network and rate constants; everything that can underflow is in log form.
#[derive(Debug, Clone, PartialEq)]
pub struct RateConstants {
    pub n: usize,
    pub b: usize,
    pub k_sel: usize,
    pub d_g: usize,
    pub ntilde: usize,
    pub kappa: LogPos,
    /// -ln delta.
    pub neg_ln_delta: LogPos,
    pub mu: LogPos,
    pub ttilde: LogPos,
    /// t~ as an integer when it fits.
    pub ttilde_exact: Option<u64>,
    /// kappa^{-1} mu n.
    pub kappa_inv_mu_n: f64,
    /// -ln of the two terms of c and of c itself; `None` if c2 is undefined.
    pub neg_ln_c1: LogPos,
    pub neg_ln_c2: Option<LogPos>,
    pub neg_ln_c: Option<LogPos>,
    pub eta: LogPos,
    pub eta_max_theory: LogPos,
    pub eta_valid: bool,
    pub alpha: f64,
    pub beta: f64,
}

pub fn rate_constants(n: usize, b: usize, k_sel: usize, d_g: usize, spectral: &SpectralConstants, eta: LogPos) -> Result<RateConstants> {
    if n == 0 || b == 0 || k_sel == 0 || d_g == 0 {
        return Err(Error::InvalidArgument(format!("need n, b, K, d_g >= 1 (got {n}, {b}, {k_sel}, {d_g})")));
    }
    let ntilde = n * (b + 1);
    let db = (d_g * b) as f64;
    let kappa = LogPos::from_ln(-db * (ntilde as f64).ln());
    let neg_ln_delta = LogPos::from_ln(ln_neg_ln_one_minus(kappa.ln) - db.ln());
    let mu = LogPos::from_ln(kappa.ln - (4.0 * n as f64).ln());
    let target = -(mu.ln - 2f64.ln());
    let ttilde_ratio = LogPos::from_ln(target.ln() - neg_ln_delta.ln);
    let ttilde_exact = if ttilde_ratio.ln < 45.0 {
        let nld = neg_ln_delta.value();
        let fits = |t: u64| -(t as f64) * nld <= -target;
        let mut t = ttilde_ratio.value().ceil() as u64;
        while !fits(t) {
            t += 1;
        }
        while t > 0 && fits(t - 1) {
            t -= 1;
        }
        Some(t)
    } else {
        None
    };
    let ttilde = ttilde_exact.map_or(ttilde_ratio, |t| LogPos::new(t as f64));
    let kappa_inv_mu_n = (mu.ln - kappa.ln + (n as f64).ln()).exp();

    let ln_t1 = ttilde.ln + (-ttilde.ln).exp().ln_1p();
    let neg_ln_c1 = LogPos::from_ln((4.0f64 / 3.0).ln().ln() - ln_t1);
    let ln_x = if eta.ln.is_finite() && spectral.alpha > 0.0 {
        eta.ln + spectral.alpha.ln() + kappa.ln + (n as f64).ln() - 2f64.ln()
    } else {
        f64::NAN
    };
    let neg_ln_c2 = (ln_x < 0.0).then(|| LogPos::from_ln(ln_neg_ln_one_minus(ln_x) - ((b + 1) as f64).ln()));
    let neg_ln_c = neg_ln_c2.map(|c2| if c2.ln < neg_ln_c1.ln { c2 } else { neg_ln_c1 });
    let eta_max_theory = spectral.eta_max_theory(n, b, k_sel, kappa, ttilde);
    Ok(RateConstants {
        n,
        b,
        k_sel,
        d_g,
        ntilde,
        kappa,
        neg_ln_delta,
        mu,
        ttilde,
        ttilde_exact,
        kappa_inv_mu_n,
        neg_ln_c1,
        neg_ln_c2,
        neg_ln_c,
        eta,
        eta_max_theory,
        eta_valid: eta.ln.is_finite() && eta.ln <= eta_max_theory.ln,
        alpha: spectral.alpha,
        beta: spectral.beta,
    })
}

fn one_minus_text(neg_ln: LogPos) -> String {
    if neg_ln.ln > -25.0 {
        format!("{:.12e}", (-neg_ln.value()).exp())
    } else {
        format!("1 - {neg_ln}")
    }
}

impl RateConstants {
    pub fn delta_text(&self) -> String {
        one_minus_text(self.neg_ln_delta)
    }

    pub fn c_text(&self) -> String {
        self.neg_ln_c.map_or_else(|| "undefined".to_string(), one_minus_text)
    }

    /// c in (0, 1), decided in log form.
    pub fn c_in_unit_interval(&self) -> bool {
        self.neg_ln_c.is_some_and(|c| c.ln.is_finite())
    }

    /// 2 delta^t.
    pub fn mixing_bound(&self, t: u64) -> f64 {
        2.0 * (-(t as f64) * self.neg_ln_delta.value()).exp()
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "b = {}", self.b);
        let _ = writeln!(s, "K = {}", self.k_sel);
        let _ = writeln!(s, "d_g = {}", self.d_g);
        let _ = writeln!(s, "ntilde = {}", self.ntilde);
        let _ = writeln!(s, "kappa = {}", self.kappa);
        let _ = writeln!(s, "delta = {}", self.delta_text());
        let _ = writeln!(s, "mu = {}", self.mu);
        let _ = writeln!(s, "ttilde = {}", self.ttilde_exact.map_or_else(|| self.ttilde.to_string(), |t| t.to_string()));
        let _ = writeln!(s, "kappa_inv_mu_n = {}", self.kappa_inv_mu_n);
        let _ = writeln!(s, "c = {}", self.c_text());
        let _ = writeln!(s, "c_in_unit_interval = {}", self.c_in_unit_interval());
        let _ = writeln!(s, "eta = {}", self.eta);
        let _ = writeln!(s, "eta_max_theory = {}", self.eta_max_theory);
        let _ = writeln!(s, "eta_valid = {}", self.eta_valid);
        s
    }
}
