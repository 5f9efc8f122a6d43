//! End-to-end problem construction: MDP, policy, rollout, features, split.

use crate::error::{Error, Result};
use crate::mdp::{
    build_random_mdp, make_feature_map, partition_samples, sample_trajectory, FeatureMap, Mdp, PartitionMode, Policy,
};
use crate::mspbe::ProblemSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_nodes: usize,
    pub d: usize,
    /// m_i for every node.
    pub samples_per_node: Vec<usize>,
    pub gamma: f64,
    pub rho: f64,
    pub mode: PartitionMode,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BuiltProblem {
    pub mdp: Mdp,
    pub policy: Policy,
    pub features: FeatureMap,
    pub problem: ProblemSpec,
    pub warnings: Vec<String>,
}

pub fn build_problem(cfg: &ProblemConfig) -> Result<BuiltProblem> {
    let n = cfg.n_nodes;
    if cfg.samples_per_node.len() != n || cfg.samples_per_node.contains(&0) {
        return Err(Error::InvalidArgument(format!("need one positive sample count per node ({n} nodes)")));
    }
    let mdp = build_random_mdp(cfg.n_states, cfg.n_actions, n, cfg.gamma, cfg.seed)?;
    let policy = Policy::random(cfg.n_states, cfg.n_actions, cfg.seed);
    let features = make_feature_map(cfg.n_states, cfg.d, cfg.seed)?;
    let (transitions, proportions) = match cfg.mode {
        PartitionMode::Parallel => {
            let m: usize = cfg.samples_per_node.iter().sum();
            (m, cfg.samples_per_node.iter().map(|&x| x as f64).collect::<Vec<_>>())
        }
        PartitionMode::Marl => {
            let m_i = cfg.samples_per_node[0];
            if cfg.samples_per_node.iter().any(|&x| x != m_i) {
                return Err(Error::InvalidArgument("marl mode shares one sample stream; all m_i must be equal".into()));
            }
            (m_i * n, vec![1.0; n])
        }
    };
    let traj = sample_trajectory(&mdp, &policy, transitions + 1, cfg.seed)?;
    let part = partition_samples(&traj, &features, cfg.mode, n, &proportions)?;
    let problem = ProblemSpec::from_partition(&part, cfg.gamma, cfg.rho)?;
    Ok(BuiltProblem { mdp, policy, features, problem, warnings: part.warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: PartitionMode) -> ProblemConfig {
        ProblemConfig {
            n_states: 20,
            n_actions: 3,
            n_nodes: 4,
            d: 5,
            samples_per_node: vec![30, 10, 20, 40],
            gamma: 0.9,
            rho: 0.1,
            mode,
            seed: 3,
        }
    }

    #[test]
    fn parallel_split_sizes() {
        let b = build_problem(&cfg(PartitionMode::Parallel)).unwrap();
        let sizes: Vec<usize> = (0..4).map(|i| b.problem.m_i(i)).collect();
        assert_eq!(sizes, vec![30, 10, 20, 40]);
        assert_eq!(b.problem.d, 5);
    }

    #[test]
    fn marl_shares_features_but_not_rewards() {
        let mut c = cfg(PartitionMode::Marl);
        c.samples_per_node = vec![25; 4];
        let b = build_problem(&c).unwrap();
        let p = &b.problem;
        for i in 1..4 {
            assert_eq!(p.per_node[i][7].a_hat, p.per_node[0][7].a_hat);
            assert_ne!(p.per_node[i][7].b_hat, p.per_node[0][7].b_hat);
        }
        c.samples_per_node = vec![25, 25, 25, 24];
        assert!(build_problem(&c).is_err());
    }

    #[test]
    fn deterministic() {
        let a = build_problem(&cfg(PartitionMode::Parallel)).unwrap().problem;
        let b = build_problem(&cfg(PartitionMode::Parallel)).unwrap().problem;
        assert_eq!(a, b);
    }
}
