//! Finite MDPs, fixed-policy rollouts, feature maps and per-node sample sets.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;

/// Finite MDP with one reward table per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// P(s'|s,a) at `[(s * A + a) * S + s']`.
    pub transitions: Vec<f64>,
    /// R_i(s,a,s') at `rewards[i][(s * A + a) * S + s']`.
    pub rewards: Vec<Vec<f64>>,
    pub gamma: f64,
}

impl Mdp {
    fn idx(&self, s: usize, a: usize, s2: usize) -> usize {
        (s * self.n_actions + a) * self.n_states + s2
    }

    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transitions[self.idx(s, a, s2)]
    }

    pub fn reward(&self, node: usize, s: usize, a: usize, s2: usize) -> f64 {
        self.rewards[node][self.idx(s, a, s2)]
    }

    pub fn n_agents(&self) -> usize {
        self.rewards.len()
    }

    fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.idx(s, a, 0);
        &self.transitions[start..start + self.n_states]
    }

    /// Builds an MDP from explicit tables, checking the stochasticity invariants.
    pub fn from_tables(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<Vec<f64>>,
        gamma: f64,
    ) -> Result<Self> {
        let len = n_states * n_states * n_actions;
        if transitions.len() != len {
            return Err(Error::DimensionMismatch { expected: len, got: transitions.len() });
        }
        if let Some(r) = rewards.iter().find(|r| r.len() != len) {
            return Err(Error::DimensionMismatch { expected: len, got: r.len() });
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!("gamma must lie in (0,1), got {gamma}")));
        }
        let mdp = Self { n_states, n_actions, transitions, rewards, gamma };
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = mdp.row(s, a);
                if row.iter().any(|&p| p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "P(.|{s},{a}) is not a probability vector"
                    )));
                }
            }
        }
        Ok(mdp)
    }

    /// [P^pi]_{s,s'} = sum_a pi(a|s) P(s'|s,a).
    pub fn policy_matrix(&self, pi: &Policy) -> DMatrix<f64> {
        let s_n = self.n_states;
        DMatrix::from_fn(s_n, s_n, |s, s2| {
            (0..self.n_actions).map(|a| pi.prob(s, a) * self.p(s, a, s2)).sum()
        })
    }
}

/// Fixed stochastic policy pi(a|s).
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub n_states: usize,
    pub n_actions: usize,
    /// pi(a|s) at `[s * A + a]`.
    pub probs: Vec<f64>,
}

impl Policy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    pub fn random(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::STREAM_POLICY);
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            probs.extend(normalized_positive(&mut rng, n_actions));
        }
        Self { n_states, n_actions, probs }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }
}

fn normalized_positive<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    // Strictly positive draws keep every row fully supported.
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let drift = 1.0 - row.iter().sum::<f64>();
    row[len - 1] += drift;
    row
}

pub fn build_random_mdp(
    n_states: usize,
    n_actions: usize,
    n_agents: usize,
    gamma: f64,
    seed: u64,
) -> Result<Mdp> {
    if n_states < 2 || n_actions < 1 || n_agents < 1 {
        return Err(Error::InvalidArgument(format!(
            "need S >= 2, A >= 1, n >= 1 (got S={n_states}, A={n_actions}, n={n_agents})"
        )));
    }
    let mut rng = rng::stream(seed, rng::STREAM_MDP);
    let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        transitions.extend(normalized_positive(&mut rng, n_states));
    }
    let len = transitions.len();
    let rewards = (0..n_agents)
        .map(|_| (0..len).map(|_| rng.random::<f64>()).collect())
        .collect();
    Mdp::from_tables(n_states, n_actions, transitions, rewards, gamma)
}

fn reach(adj: &DMatrix<f64>, src: usize, forward: bool) -> Vec<bool> {
    let n = adj.nrows();
    let mut seen = vec![false; n];
    seen[src] = true;
    let mut stack = vec![src];
    while let Some(u) = stack.pop() {
        for v in 0..n {
            let w = if forward { adj[(u, v)] } else { adj[(v, u)] };
            if w > 0.0 && !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen
}

/// Stationary distribution of P^pi.
pub fn stationary_distribution(mdp: &Mdp, pi: &Policy) -> Result<DVector<f64>> {
    stationary_of_matrix(&mdp.policy_matrix(pi))
}

/// Stationary distribution of an irreducible row-stochastic matrix.
pub fn stationary_of_matrix(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p.nrows();
    let fwd = reach(p, 0, true);
    let bwd = reach(p, 0, false);
    let unreachable: Vec<usize> = (0..n).filter(|&s| !(fwd[s] && bwd[s])).collect();
    if !unreachable.is_empty() {
        return Err(Error::ReducibleChain { unreachable });
    }
    // (P^T - I) mu = 0 with the last equation replaced by sum(mu) = 1.
    let mut m = p.transpose() - DMatrix::identity(n, n);
    m.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let mu = m.lu().solve(&rhs).ok_or(Error::ReducibleChain { unreachable: vec![] })?;
    let residual = (p.transpose() * &mu - &mu).amax().max((mu.sum() - 1.0).abs());
    if residual > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "stationary solve residual {residual:e} exceeds 1e-10"
        )));
    }
    Ok(mu)
}

/// One step (s, a, s') with every agent's reward.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub rewards: Vec<f64>,
}

/// Rollout visiting `length` states (so `length - 1` transitions), starting from mu.
pub fn sample_trajectory(mdp: &Mdp, pi: &Policy, length: usize, seed: u64) -> Result<Vec<Transition>> {
    if length < 2 {
        return Err(Error::InvalidArgument("trajectory length must be at least 2".into()));
    }
    let mu = stationary_distribution(mdp, pi)?;
    let mut rng = rng::stream(seed, rng::STREAM_TRAJECTORY);
    let weighted = |w: &[f64]| {
        WeightedIndex::new(w.iter().map(|&x| x.max(0.0)))
            .map_err(|e| Error::InvalidArgument(format!("bad distribution: {e}")))
    };
    let start = weighted(mu.as_slice())?;
    let actions: Vec<_> = (0..mdp.n_states)
        .map(|s| weighted(&pi.probs[s * pi.n_actions..(s + 1) * pi.n_actions]))
        .collect::<Result<_>>()?;
    let next: Vec<_> = (0..mdp.n_states * mdp.n_actions)
        .map(|sa| weighted(mdp.row(sa / mdp.n_actions, sa % mdp.n_actions)))
        .collect::<Result<_>>()?;

    let mut s = start.sample(&mut rng);
    let mut out = Vec::with_capacity(length - 1);
    for _ in 1..length {
        let a = actions[s].sample(&mut rng);
        let s_next = next[s * mdp.n_actions + a].sample(&mut rng);
        let rewards = (0..mdp.n_agents()).map(|i| mdp.reward(i, s, a, s_next)).collect();
        out.push(Transition { s, a, s_next, rewards });
        s = s_next;
    }
    Ok(out)
}

pub fn write_trajectory_csv(path: &Path, traj: &[Transition]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n = traj.first().map_or(0, |t| t.rewards.len());
    let mut header = vec!["s".to_string(), "a".into(), "s_next".into()];
    header.extend((1..=n).map(|i| format!("r_{i}")));
    w.write_record(&header)?;
    for t in traj {
        let mut rec = vec![t.s.to_string(), t.a.to_string(), t.s_next.to_string()];
        rec.extend(t.rewards.iter().map(|r| format!("{r:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<Transition>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (idx, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = idx + 2;
        let field = |j: usize| -> Result<&str> {
            rec.get(j).ok_or_else(|| Error::Parse { line, msg: format!("missing column {j}") })
        };
        let int = |j: usize| -> Result<usize> {
            field(j)?.parse().map_err(|_| Error::Parse { line, msg: format!("bad integer in column {j}") })
        };
        let rewards = (3..rec.len())
            .map(|j| {
                field(j)?
                    .parse::<f64>()
                    .map_err(|_| Error::Parse { line, msg: format!("bad reward in column {j}") })
            })
            .collect::<Result<_>>()?;
        out.push(Transition { s: int(0)?, a: int(1)?, s_next: int(2)?, rewards });
    }
    Ok(out)
}

/// State features phi(s), one unit-norm row per state.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub d: usize,
    pub phi: DMatrix<f64>,
}

impl FeatureMap {
    pub fn features(&self, s: usize) -> DVector<f64> {
        self.phi.row(s).transpose()
    }
}

pub fn make_feature_map(n_states: usize, d: usize, seed: u64) -> Result<FeatureMap> {
    if d == 0 || d > n_states {
        return Err(Error::InvalidArgument(format!("need 1 <= d <= S (got d={d}, S={n_states})")));
    }
    let mut rng = rng::stream(seed, rng::STREAM_FEATURES);
    const ATTEMPTS: usize = 10;
    for _ in 0..ATTEMPTS {
        let mut phi = DMatrix::from_fn(n_states, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut zero_row = false;
        for mut row in phi.row_iter_mut() {
            let norm = row.norm();
            if norm < 1e-12 {
                zero_row = true;
            } else {
                row /= norm;
            }
        }
        if zero_row {
            continue;
        }
        let sv = phi.clone().svd(false, false).singular_values;
        let tol = 1e-10 * sv.max().max(1.0);
        if sv.iter().filter(|&&x| x > tol).count() == d {
            return Ok(FeatureMap { d, phi });
        }
    }
    Err(Error::RankDeficient { attempts: ATTEMPTS })
}

/// One feature-space transition sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TdSample {
    pub phi_t: DVector<f64>,
    pub phi_tp1: DVector<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    /// Disjoint contiguous slices sized by the given proportions.
    Parallel,
    /// Shared state stream, node-local rewards.
    Marl,
}

impl std::str::FromStr for PartitionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "parallel" => Ok(Self::Parallel),
            "marl" => Ok(Self::Marl),
            other => Err(Error::InvalidArgument(format!("unknown partition mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub per_node: Vec<Vec<TdSample>>,
    pub warnings: Vec<String>,
}

/// Largest-remainder split of `m` into parts proportional to `weights`.
pub fn proportional_sizes(m: usize, weights: &[f64]) -> Result<Vec<usize>> {
    if weights.is_empty() || weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument("proportions must be positive and finite".into()));
    }
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| m as f64 * w / total).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut leftover = m - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        sizes[i] += 1;
        leftover -= 1;
    }
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::InvalidArgument(format!("node {i} would receive no samples")));
    }
    Ok(sizes)
}

pub fn partition_samples(
    traj: &[Transition],
    features: &FeatureMap,
    mode: PartitionMode,
    n: usize,
    proportions: &[f64],
) -> Result<Partition> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one node".into()));
    }
    if let Some(t) = traj.iter().find(|t| t.rewards.len() < n) {
        return Err(Error::DimensionMismatch { expected: n, got: t.rewards.len() });
    }
    let sample = |t: &Transition, node: usize| TdSample {
        phi_t: features.features(t.s),
        phi_tp1: features.features(t.s_next),
        reward: t.rewards[node],
    };
    let m = traj.len();
    let mut warnings = Vec::new();
    let per_node = match mode {
        PartitionMode::Parallel => {
            if proportions.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: proportions.len() });
            }
            let sizes = proportional_sizes(m, proportions)?;
            let mut start = 0;
            sizes
                .iter()
                .enumerate()
                .map(|(i, &len)| {
                    let slice = &traj[start..start + len];
                    start += len;
                    slice.iter().map(|t| sample(t, i)).collect()
                })
                .collect()
        }
        PartitionMode::Marl => {
            let per = m / n;
            if per == 0 {
                return Err(Error::InvalidArgument(format!("{m} samples cannot cover {n} nodes")));
            }
            if m % n != 0 {
                let msg = format!("marl partition truncated {m} samples to {}", per * n);
                log::warn!("{msg}");
                warnings.push(msg);
            }
            (0..n).map(|i| traj[..per].iter().map(|t| sample(t, i)).collect()).collect()
        }
    };
    Ok(Partition { per_node, warnings })
}
