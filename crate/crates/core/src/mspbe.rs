//! The saddle-point form of the MSPBE objective.
//!
//! J_{i,p}(theta, omega) = omega'(A theta - b) - omega'C omega / 2 + rho |theta|^2 / 2,
//! minimized over theta and maximized over omega. Vectors are stacked as
//! z = [theta; omega] of length 2d.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::logscale::{ln_one_minus, LogPos};
use crate::mdp::{Partition, TdSample};

pub type SaddleVec = DVector<f64>;

pub const DEFAULT_RHO: f64 = 0.1;
/// Tolerance on imaginary parts when deciding that G has a real spectrum.
pub const EIG_IMAG_TOL: f64 = 1e-9;

pub fn stack(theta: &DVector<f64>, omega: &DVector<f64>) -> SaddleVec {
    let d = theta.len();
    DVector::from_fn(2 * d, |k, _| if k < d { theta[k] } else { omega[k - d] })
}

pub fn theta(z: &SaddleVec) -> DVector<f64> {
    z.rows(0, z.len() / 2).into_owned()
}

pub fn omega(z: &SaddleVec) -> DVector<f64> {
    let d = z.len() / 2;
    z.rows(d, d).into_owned()
}

/// Lambda^{-1} z = [theta; omega / sqrt(zeta)].
pub fn scale_state(z: &SaddleVec, zeta: f64) -> SaddleVec {
    let d = z.len() / 2;
    let s = zeta.sqrt();
    DVector::from_fn(2 * d, |k, _| if k < d { z[k] } else { z[k] / s })
}

/// Lambda z = [theta; sqrt(zeta) omega].
pub fn unscale_state(z: &SaddleVec, zeta: f64) -> SaddleVec {
    scale_tracker(z, zeta)
}

/// Lambda y = [y_theta; sqrt(zeta) y_omega].
pub fn scale_tracker(y: &SaddleVec, zeta: f64) -> SaddleVec {
    let d = y.len() / 2;
    let s = zeta.sqrt();
    DVector::from_fn(2 * d, |k, _| if k < d { y[k] } else { y[k] * s })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DVector<f64>,
    pub c_hat: DMatrix<f64>,
}

impl SampleStats {
    pub fn dim(&self) -> usize {
        self.b_hat.len()
    }
}

/// A = phi_t (phi_t - gamma phi_{t+1})', b = phi_t r, C = phi_t phi_t'.
pub fn per_sample_stats(sample: &TdSample, gamma: f64) -> Result<SampleStats> {
    let d = sample.phi_t.len();
    if sample.phi_tp1.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: sample.phi_tp1.len() });
    }
    let phi = &sample.phi_t;
    let td = phi - &sample.phi_tp1 * gamma;
    Ok(SampleStats {
        a_hat: phi * td.transpose(),
        b_hat: phi * sample.reward,
        c_hat: phi * phi.transpose(),
    })
}

/// J_{i,p}(z).
pub fn objective(z: &SaddleVec, stats: &SampleStats, rho: f64) -> f64 {
    let th = theta(z);
    let om = omega(z);
    om.dot(&(&stats.a_hat * &th - &stats.b_hat)) - 0.5 * om.dot(&(&stats.c_hat * &om))
        + 0.5 * rho * th.norm_squared()
}

/// [A'omega + rho theta; -(A theta - C omega - b)].
pub fn saddle_gradient(z: &SaddleVec, stats: &SampleStats, rho: f64) -> SaddleVec {
    let d = stats.dim();
    let mut out = DVector::zeros(2 * d);
    saddle_gradient_into(z.as_slice(), stats, rho, out.as_mut_slice());
    out
}

/// Allocation-free form of [`saddle_gradient`].
pub fn saddle_gradient_into(z: &[f64], stats: &SampleStats, rho: f64, out: &mut [f64]) {
    let d = stats.dim();
    let (th, om) = z.split_at(d);
    let a = &stats.a_hat;
    let c = &stats.c_hat;
    for r in 0..d {
        let mut at_om = 0.0;
        let mut a_th = 0.0;
        let mut c_om = 0.0;
        for k in 0..d {
            at_om += a[(k, r)] * om[k];
            a_th += a[(r, k)] * th[k];
            c_om += c[(r, k)] * om[k];
        }
        out[r] = at_om + rho * th[r];
        out[d + r] = -(a_th - c_om - stats.b_hat[r]);
    }
}

/// Global averages of the per-sample statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DVector<f64>,
    pub c_hat: DMatrix<f64>,
}

impl Aggregate {
    pub fn from_stats<'a>(d: usize, stats: impl IntoIterator<Item = &'a SampleStats>) -> Self {
        let mut a = DMatrix::zeros(d, d);
        let mut b = DVector::zeros(d);
        let mut c = DMatrix::zeros(d, d);
        let mut m = 0usize;
        for s in stats {
            a += &s.a_hat;
            b += &s.b_hat;
            c += &s.c_hat;
            m += 1;
        }
        let inv = 1.0 / m.max(1) as f64;
        Self { a_hat: a * inv, b_hat: b * inv, c_hat: c * inv }
    }

    /// Full gradient of J at z (unscaled).
    pub fn gradient(&self, z: &SaddleVec, rho: f64) -> SaddleVec {
        let stats = SampleStats {
            a_hat: self.a_hat.clone(),
            b_hat: self.b_hat.clone(),
            c_hat: self.c_hat.clone(),
        };
        saddle_gradient(z, &stats, rho)
    }
}

/// The distributed problem: every node's sample statistics plus rho.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub per_node: Vec<Vec<SampleStats>>,
    pub rho: f64,
    pub gamma: f64,
    pub d: usize,
}

impl ProblemSpec {
    pub fn new(per_node: Vec<Vec<SampleStats>>, rho: f64, gamma: f64) -> Result<Self> {
        if per_node.is_empty() || per_node.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("every node needs at least one sample".into()));
        }
        if !(rho > 0.0) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
        }
        let d = per_node[0][0].dim();
        for s in per_node.iter().flatten() {
            if s.dim() != d || s.a_hat.shape() != (d, d) || s.c_hat.shape() != (d, d) {
                return Err(Error::DimensionMismatch { expected: d, got: s.dim() });
            }
        }
        Ok(Self { per_node, rho, gamma, d })
    }

    pub fn from_partition(part: &Partition, gamma: f64, rho: f64) -> Result<Self> {
        let per_node = part
            .per_node
            .iter()
            .map(|node| node.iter().map(|s| per_sample_stats(s, gamma)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Self::new(per_node, rho, gamma)
    }

    pub fn n(&self) -> usize {
        self.per_node.len()
    }

    pub fn m(&self) -> usize {
        self.per_node.iter().map(Vec::len).sum()
    }

    pub fn m_i(&self, i: usize) -> usize {
        self.per_node[i].len()
    }

    pub fn samples(&self) -> impl Iterator<Item = &SampleStats> {
        self.per_node.iter().flatten()
    }

    pub fn aggregate(&self) -> Aggregate {
        Aggregate::from_stats(self.d, self.samples())
    }

    /// Full gradient (1/m) sum_{i,p} grad J_{i,p}(z), by direct summation.
    pub fn full_gradient_by_sum(&self, z: &SaddleVec) -> SaddleVec {
        let mut g = DVector::zeros(2 * self.d);
        for s in self.samples() {
            g += saddle_gradient(z, s, self.rho);
        }
        g / self.m() as f64
    }

    /// Problem with every sample on a single node, in node order.
    pub fn merged(&self) -> Self {
        Self {
            per_node: vec![self.samples().cloned().collect()],
            rho: self.rho,
            gamma: self.gamma,
            d: self.d,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "appsag-problem 1");
        let _ = writeln!(out, "d {} rho {:e} gamma {:e} nodes {}", self.d, self.rho, self.gamma, self.n());
        let row = |out: &mut String, tag: &str, vals: &mut dyn Iterator<Item = f64>| {
            out.push_str(tag);
            for v in vals {
                let _ = write!(out, " {v:e}");
            }
            out.push('\n');
        };
        for (i, node) in self.per_node.iter().enumerate() {
            let _ = writeln!(out, "node {i} {}", node.len());
            for s in node {
                row(&mut out, "A", &mut s.a_hat.transpose().iter().copied());
                row(&mut out, "b", &mut s.b_hat.iter().copied());
                row(&mut out, "C", &mut s.c_hat.transpose().iter().copied());
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let bad = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        let (l, header) = lines.next().ok_or_else(|| bad(1, "empty problem file"))?;
        if header != "appsag-problem 1" {
            return Err(bad(l, "missing 'appsag-problem 1' header"));
        }
        let (l, dims) = lines.next().ok_or_else(|| bad(l, "missing dimension line"))?;
        let f: Vec<&str> = dims.split_whitespace().collect();
        if f.len() != 8 || f[0] != "d" || f[2] != "rho" || f[4] != "gamma" || f[6] != "nodes" {
            return Err(bad(l, "expected 'd <d> rho <rho> gamma <gamma> nodes <n>'"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l, "bad number"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(l, "bad integer"));
        let (d, rho, gamma, n) = (int(f[1])?, num(f[3])?, num(f[5])?, int(f[7])?);
        let mut read_row = |tag: &str, len: usize| -> Result<Vec<f64>> {
            let (l, line) = lines.next().ok_or_else(|| bad(0, "unexpected end of file"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(tag) {
                return Err(bad(l, &format!("expected '{tag}' row")));
            }
            let vals: Vec<f64> = parts.map(|p| p.parse::<f64>().map_err(|_| bad(l, "bad number"))).collect::<Result<_>>()?;
            if vals.len() != len {
                return Err(bad(l, &format!("expected {len} values, found {}", vals.len())));
            }
            Ok(vals)
        };
        let mut per_node = Vec::with_capacity(n);
        for i in 0..n {
            let node_line = read_row("node", 2)?;
            if node_line[0] as usize != i {
                return Err(bad(0, &format!("expected node {i}")));
            }
            let count = node_line[1] as usize;
            let mut samples = Vec::with_capacity(count);
            for _ in 0..count {
                let a = DMatrix::from_row_slice(d, d, &read_row("A", d * d)?);
                let b = DVector::from_vec(read_row("b", d)?);
                let c = DMatrix::from_row_slice(d, d, &read_row("C", d * d)?);
                samples.push(SampleStats { a_hat: a, b_hat: b, c_hat: c });
            }
            per_node.push(samples);
        }
        Self::new(per_node, rho, gamma)
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub fn aggregate(problem: &ProblemSpec) -> Aggregate {
    problem.aggregate()
}

/// Unique stationary point of the aggregate saddle problem, via one KKT solve.
pub fn solve_saddle(agg: &Aggregate, rho: f64) -> Result<SaddleVec> {
    let d = agg.b_hat.len();
    // [rho I, A'; A, -C] [theta; omega] = [0; b]
    let mut kkt = DMatrix::zeros(2 * d, 2 * d);
    kkt.view_mut((0, 0), (d, d)).fill_with_identity();
    kkt.view_mut((0, 0), (d, d)).scale_mut(rho);
    kkt.view_mut((0, d), (d, d)).copy_from(&agg.a_hat.transpose());
    kkt.view_mut((d, 0), (d, d)).copy_from(&agg.a_hat);
    kkt.view_mut((d, d), (d, d)).copy_from(&(-&agg.c_hat));
    let mut rhs = DVector::zeros(2 * d);
    rhs.rows_mut(d, d).copy_from(&agg.b_hat);
    let z = kkt.clone().lu().solve(&rhs).ok_or(Error::SingularKkt)?;
    let residual = (&kkt * &z - &rhs).amax();
    if !residual.is_finite() || residual > 1e-10 {
        return Err(Error::SingularKkt);
    }
    Ok(z)
}

/// Operator of the scaled gradient: grad j(z) = G z + [0; sqrt(zeta) b] in
/// coordinates z = [theta; omega / sqrt(zeta)].
///
/// G = [rho I, sqrt(zeta) A'; -sqrt(zeta) A, zeta C]. Flipping the sign of the
/// second block, diag(I, -I) G diag(I, -I), gives the same spectrum with the
/// off-diagonal signs exchanged.
pub fn g_operator(a_hat: &DMatrix<f64>, c_hat: &DMatrix<f64>, rho: f64, zeta: f64) -> DMatrix<f64> {
    let d = a_hat.nrows();
    let s = zeta.sqrt();
    let mut g = DMatrix::zeros(2 * d, 2 * d);
    for r in 0..d {
        g[(r, r)] = rho;
        for c in 0..d {
            g[(r, d + c)] = s * a_hat[(c, r)];
            g[(d + r, c)] = -s * a_hat[(r, c)];
            g[(d + r, d + c)] = zeta * c_hat[(r, c)];
        }
    }
    g
}

/// Full gradient in scaled coordinates.
pub fn scaled_gradient(z_scaled: &SaddleVec, agg: &Aggregate, rho: f64, zeta: f64) -> SaddleVec {
    let z = unscale_state(z_scaled, zeta);
    scale_tracker(&agg.gradient(&z, rho), zeta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConstants {
    /// Smallest real part among the eigenvalues of G.
    pub alpha: f64,
    /// Largest real part among the eigenvalues of G.
    pub lambda_max_g: f64,
    /// max_{i,p} of the Lipschitz constant of the scaled per-sample gradient.
    pub beta: f64,
    /// lambda_max(C).
    pub psi: f64,
    pub zeta: f64,
    pub zeta_min: f64,
    pub g_eigs_real: bool,
    /// zeta > zeta_min and the spectrum of G is real and positive.
    pub valid: bool,
    pub m: usize,
}

fn sym_eigs(m: &DMatrix<f64>) -> DVector<f64> {
    m.clone().symmetric_eigen().eigenvalues
}

/// Spectral constants of the scaled saddle operator for a given zeta.
pub fn spectral_constants(problem: &ProblemSpec, zeta: f64) -> Result<SpectralConstants> {
    if !(zeta > 0.0) {
        return Err(Error::InvalidArgument(format!("zeta must be positive, got {zeta}")));
    }
    let agg = problem.aggregate();
    let d = problem.d;
    let m = problem.m();
    let rho = problem.rho;

    let a_sv = agg.a_hat.clone().svd(false, false).singular_values;
    if a_sv.min() <= 1e-12 * a_sv.max().max(1e-300) {
        return Err(Error::Assumption {
            assumption: "2(a)",
            detail: "aggregate A is rank deficient; use more samples".into(),
        });
    }
    let chol = agg.c_hat.clone().cholesky().ok_or_else(|| Error::Assumption {
        assumption: "2(a)",
        detail: "aggregate C is not positive definite; use more samples".into(),
    })?;
    let c_eigs = sym_eigs(&agg.c_hat);
    let psi = c_eigs.max();
    let c_inv_a = chol.solve(&agg.a_hat);
    let mut actca = agg.a_hat.transpose() * c_inv_a;
    actca = (&actca + actca.transpose()) * 0.5;
    let lam_actca = sym_eigs(&actca).max();
    // Denominator is lambda_min(C); with lambda_min(C^{-1}) = 1/lambda_max(C)
    // instead, G still has complex eigenvalues above the threshold.
    let zeta_min = (4.0 * rho + 4.0 * lam_actca) / c_eigs.min();

    let g = g_operator(&agg.a_hat, &agg.c_hat, rho, zeta);
    let eigs = g.complex_eigenvalues();
    let g_eigs_real = eigs.iter().all(|e| e.im.abs() <= EIG_IMAG_TOL && e.re > 0.0);
    let alpha = eigs.iter().map(|e| e.re).fold(f64::INFINITY, f64::min);
    let lambda_max_g = eigs.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);

    let mut beta: f64 = 0.0;
    for s in problem.samples() {
        let gp = g_operator(&s.a_hat, &s.c_hat, rho, zeta) / m as f64;
        beta = beta.max(gp.svd(false, false).singular_values.max());
    }
    debug_assert_eq!(g.nrows(), 2 * d);

    Ok(SpectralConstants {
        alpha,
        lambda_max_g,
        beta,
        psi,
        zeta,
        zeta_min,
        g_eigs_real,
        valid: zeta > zeta_min && g_eigs_real,
        m,
    })
}

impl SpectralConstants {
    /// True when beta > zeta psi / (2m).
    pub fn bound_psi_holds(&self) -> bool {
        self.beta > self.zeta * self.psi / (2.0 * self.m as f64)
    }

    /// Upper end of the admissible eta_2 = eta zeta range for a given eta.
    pub fn eta2_max(&self, eta: f64) -> f64 {
        2.0 * self.m as f64 * self.beta / self.psi * eta
    }

    /// alpha kappa^4 (1-kappa)^2 / (72 beta^3 n^3 b^6 K^3 ttilde^2), in log form.
    pub fn eta_max_theory(&self, n: usize, b: usize, k_sel: usize, kappa: LogPos, ttilde: LogPos) -> LogPos {
        let ln = self.alpha.ln() + 4.0 * kappa.ln + 2.0 * ln_one_minus(kappa.value())
            - 72f64.ln()
            - 3.0 * self.beta.ln()
            - 3.0 * (n as f64).ln()
            - 6.0 * (b as f64).ln()
            - 3.0 * (k_sel as f64).ln()
            - 2.0 * ttilde.ln;
        LogPos::from_ln(ln)
    }
}

/// ||z - eta grad j(z) - z*|| / ||z - z*|| in scaled coordinates, for unscaled `z`.
pub fn check_contraction(z: &SaddleVec, eta: f64, problem: &ProblemSpec, zeta: f64) -> Result<f64> {
    let agg = problem.aggregate();
    let z_star = solve_saddle(&agg, problem.rho)?;
    contraction_ratio(z, &z_star, eta, &agg, problem.rho, zeta)
}

pub fn contraction_ratio(
    z: &SaddleVec,
    z_star: &SaddleVec,
    eta: f64,
    agg: &Aggregate,
    rho: f64,
    zeta: f64,
) -> Result<f64> {
    let zs = scale_state(z, zeta);
    let zs_star = scale_state(z_star, zeta);
    let denom = (&zs - &zs_star).norm();
    if denom == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    let next = &zs - scaled_gradient(&zs, agg, rho, zeta) * eta;
    Ok((next - zs_star).norm() / denom)
}
