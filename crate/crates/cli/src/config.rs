//! INI experiment configuration.
//!
//! Sections: `problem`, `topology`, `algorithm`, `schedule`, `outputs`, and an
//! optional `verify`. Unknown sections and keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use appsag_core::graph::TopologyKind;
use appsag_core::mdp::PartitionMode;
use ini::Ini;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    /// Same m_i on every node.
    PerNode(usize),
    /// Explicit m_i list; only valid for a single node count.
    List(Vec<usize>),
    /// Fixed total m split evenly across the nodes.
    Total(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSection {
    pub n_states: usize,
    pub n_actions: usize,
    /// One run per entry.
    pub nodes: Vec<usize>,
    pub d: usize,
    pub samples: Samples,
    pub gamma: f64,
    pub rho: f64,
    pub mode: PartitionMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmSection {
    /// Either one value or one per entry of `problem.nodes`.
    pub eta1: Vec<f64>,
    pub zeta: f64,
    pub batch_size: usize,
    pub epsilon: Option<f64>,
    pub max_k: u64,
    /// eta1 of the synchronous baseline; eta1 when unset.
    pub sync_eta1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleChoice {
    UniformRandom,
    RoundRobin,
    Straggler { target: usize, slowdown: f64 },
    /// Synchronous rounds; a straggler only lengthens the round.
    Sync { straggler: Option<(usize, f64)> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub kind: ScheduleChoice,
    pub d_max: u64,
    pub seed: u64,
    pub b_max: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputsSection {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub report: PathBuf,
    pub trace: Option<PathBuf>,
    /// Also run the synchronous baseline (same straggler) and write its metrics here.
    pub sync_metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    pub topology: TopologyKind,
    pub algorithm: AlgorithmSection,
    pub schedule: ScheduleSection,
    pub outputs: OutputsSection,
    pub verify_events: u64,
}

fn cfg_err(field: &str, msg: impl Into<String>) -> CliError {
    CliError::Config { field: field.to_string(), msg: msg.into() }
}

struct Section<'a> {
    name: &'static str,
    props: BTreeMap<String, String>,
    used: Vec<&'a str>,
}

impl<'a> Section<'a> {
    fn field(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn raw(&mut self, key: &'a str) -> Option<String> {
        self.used.push(key);
        self.props.get(key).cloned()
    }

    fn parse<T: FromStr>(&mut self, key: &'a str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.trim().parse().map(Some).map_err(|e| cfg_err(&self.field(key), format!("cannot parse '{v}': {e}"))),
        }
    }

    fn require<T: FromStr>(&mut self, key: &'a str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.parse(key)?.ok_or_else(|| cfg_err(&self.field(key), "missing"))
    }

    fn list<T: FromStr>(&mut self, key: &'a str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(key) else { return Ok(None) };
        let items: Result<Vec<T>, _> = v.split(',').map(|s| s.trim().parse::<T>()).collect();
        match items {
            Ok(xs) if !xs.is_empty() => Ok(Some(xs)),
            Ok(_) => Err(cfg_err(&self.field(key), "empty list")),
            Err(e) => Err(cfg_err(&self.field(key), format!("cannot parse '{v}': {e}"))),
        }
    }

    fn finish(self) -> Result<(), CliError> {
        for k in self.props.keys() {
            if !self.used.contains(&k.as_str()) {
                return Err(cfg_err(&self.field(k), "unknown key"));
            }
        }
        Ok(())
    }
}

fn section<'a>(ini: &Ini, name: &'static str, required: bool) -> Result<Section<'a>, CliError> {
    let props = match ini.section(Some(name)) {
        Some(p) => p.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        None if required => return Err(cfg_err(name, "missing section")),
        None => BTreeMap::new(),
    };
    Ok(Section { name, props, used: Vec::new() })
}

fn positive<T: PartialOrd + Default + Copy + std::fmt::Display>(field: &str, x: T) -> Result<T, CliError> {
    if x > T::default() {
        Ok(x)
    } else {
        Err(cfg_err(field, format!("must be positive, got {x}")))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative file references resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| cfg_err("config", e.to_string()))?;
        for name in ini.sections() {
            match name {
                Some("problem" | "topology" | "algorithm" | "schedule" | "outputs" | "verify") => {}
                Some(other) => return Err(cfg_err(other, "unknown section")),
                None => {
                    if ini.section(None::<String>).is_some_and(|p| !p.is_empty()) {
                        return Err(cfg_err("config", "keys outside of a section"));
                    }
                }
            }
        }

        let mut p = section(&ini, "problem", true)?;
        let nodes: Vec<usize> = p.list("nodes")?.ok_or_else(|| cfg_err("problem.nodes", "missing"))?;
        if nodes.contains(&0) {
            return Err(cfg_err("problem.nodes", "node counts must be positive"));
        }
        let samples = match (p.parse::<usize>("total_samples")?, p.list::<usize>("samples_per_node")?) {
            (Some(_), Some(_)) => return Err(cfg_err("problem.samples_per_node", "give either samples_per_node or total_samples")),
            (Some(m), None) => Samples::Total(positive("problem.total_samples", m)?),
            (None, Some(v)) if v.len() == 1 => Samples::PerNode(positive("problem.samples_per_node", v[0])?),
            (None, Some(v)) => {
                if nodes.len() != 1 || v.len() != nodes[0] {
                    return Err(cfg_err("problem.samples_per_node", "a list needs exactly one entry per node and a single node count"));
                }
                if v.contains(&0) {
                    return Err(cfg_err("problem.samples_per_node", "sample counts must be positive"));
                }
                Samples::List(v)
            }
            (None, None) => return Err(cfg_err("problem.samples_per_node", "missing")),
        };
        let problem = ProblemSection {
            n_states: positive("problem.states", p.require("states")?)?,
            n_actions: positive("problem.actions", p.require("actions")?)?,
            nodes,
            d: positive("problem.d", p.require("d")?)?,
            samples,
            gamma: p.require("gamma")?,
            rho: positive("problem.rho", p.require("rho")?)?,
            mode: p.parse("mode")?.unwrap_or(PartitionMode::Parallel),
            seed: p.parse("seed")?.unwrap_or(0),
        };
        if !(0.0..1.0).contains(&problem.gamma) {
            return Err(cfg_err("problem.gamma", format!("must lie in [0, 1), got {}", problem.gamma)));
        }
        if let (PartitionMode::Marl, Samples::Total(_)) = (problem.mode, &problem.samples) {
            return Err(cfg_err("problem.total_samples", "marl mode needs samples_per_node"));
        }
        p.finish()?;

        let mut t = section(&ini, "topology", true)?;
        let mut topology: TopologyKind = t.require("kind")?;
        if let TopologyKind::EdgeList(rel) = &topology {
            let full = base.join(rel);
            if !full.is_file() {
                return Err(cfg_err("topology.kind", format!("edge list {} does not exist", full.display())));
            }
            topology = TopologyKind::EdgeList(full);
        }
        if let Some(n) = t.parse::<usize>("n")? {
            if problem.nodes != [n] {
                return Err(cfg_err("topology.n", format!("{n} does not match problem.nodes {:?}", problem.nodes)));
            }
        }
        t.finish()?;

        let mut a = section(&ini, "algorithm", true)?;
        let eta1 = a.list::<f64>("eta1")?.or(a.list::<f64>("eta")?).ok_or_else(|| cfg_err("algorithm.eta1", "missing (give eta1 or eta)"))?;
        if eta1.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(cfg_err("algorithm.eta1", "stepsizes must be positive"));
        }
        if eta1.len() != 1 && eta1.len() != problem.nodes.len() {
            return Err(cfg_err("algorithm.eta1", "give one value or one per entry of problem.nodes"));
        }
        let eta2 = a.list::<f64>("eta2")?;
        let zeta_given: Option<f64> = a.parse("zeta")?;
        let zeta = match (eta2, zeta_given) {
            (None, None) => return Err(cfg_err("algorithm.eta2", "missing (give eta2 or zeta)")),
            (None, Some(z)) => positive("algorithm.zeta", z)?,
            (Some(e2), z) => {
                if e2.len() != eta1.len() {
                    return Err(cfg_err("algorithm.eta2", "needs as many entries as eta1"));
                }
                let ratios: Vec<f64> = e2.iter().zip(&eta1).map(|(b, a)| b / a).collect();
                let zeta = z.unwrap_or(ratios[0]);
                for r in &ratios {
                    if !(*r > 0.0) || (r - zeta).abs() > 1e-9 * zeta {
                        return Err(cfg_err("algorithm.eta2", format!("eta2 / eta1 = {r} disagrees with zeta = {zeta}")));
                    }
                }
                zeta
            }
        };
        let algorithm = AlgorithmSection {
            eta1,
            zeta,
            batch_size: positive("algorithm.batch_size", a.parse("batch_size")?.unwrap_or(1))?,
            epsilon: a.parse("epsilon")?,
            max_k: positive("algorithm.max_k", a.require("max_k")?)?,
            sync_eta1: a.parse::<f64>("sync_eta1")?.map(|e| positive("algorithm.sync_eta1", e)).transpose()?,
        };
        a.finish()?;

        let mut s = section(&ini, "schedule", true)?;
        let kind_name: String = s.require("kind")?;
        let target: Option<usize> = s.parse("straggler_target")?;
        let slowdown: Option<f64> = s.parse("slowdown")?;
        let straggler = match (target, slowdown) {
            (Some(t), Some(f)) => {
                if problem.nodes.iter().any(|&n| t >= n) {
                    return Err(cfg_err("schedule.straggler_target", format!("node {t} out of range")));
                }
                if !(f >= 1.0) {
                    return Err(cfg_err("schedule.slowdown", format!("must be >= 1, got {f}")));
                }
                Some((t, f))
            }
            (None, None) => None,
            _ => return Err(cfg_err("schedule.slowdown", "give both straggler_target and slowdown")),
        };
        let kind = match kind_name.trim() {
            "uniform_random" => ScheduleChoice::UniformRandom,
            "round_robin" => ScheduleChoice::RoundRobin,
            "straggler" => {
                let (target, slowdown) = straggler.ok_or_else(|| cfg_err("schedule.straggler_target", "required by kind = straggler"))?;
                ScheduleChoice::Straggler { target, slowdown }
            }
            "sync" => ScheduleChoice::Sync { straggler },
            other => return Err(cfg_err("schedule.kind", format!("unknown schedule '{other}'"))),
        };
        let schedule = ScheduleSection {
            kind,
            d_max: s.parse("d_max")?.unwrap_or(0),
            seed: s.parse("seed")?.unwrap_or(problem.seed),
            b_max: s.parse("b_max")?,
        };
        if matches!(schedule.kind, ScheduleChoice::Sync { .. }) && schedule.d_max != 0 {
            return Err(cfg_err("schedule.d_max", "synchronous rounds have no extra delay"));
        }
        s.finish()?;

        let mut o = section(&ini, "outputs", false)?;
        let path_or = |x: Option<String>, default: &str| PathBuf::from(x.unwrap_or_else(|| default.to_string()).trim());
        let outputs = OutputsSection {
            dir: path_or(o.raw("dir"), "out"),
            metrics: path_or(o.raw("metrics"), "metrics.csv"),
            report: path_or(o.raw("report"), "report.txt"),
            trace: o.raw("trace").map(|x| PathBuf::from(x.trim())),
            sync_metrics: o.raw("sync_metrics").map(|x| PathBuf::from(x.trim())),
        };
        o.finish()?;

        let mut v = section(&ini, "verify", false)?;
        let verify_events = positive("verify.events", v.parse("events")?.unwrap_or(200))?;
        v.finish()?;

        Ok(Self { problem, topology, algorithm, schedule, outputs, verify_events })
    }

    /// Replaces every seed with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.problem.seed = seed;
        self.schedule.seed = seed;
    }

    pub fn eta1_for(&self, run: usize) -> f64 {
        if self.algorithm.eta1.len() == 1 {
            self.algorithm.eta1[0]
        } else {
            self.algorithm.eta1[run]
        }
    }

    pub fn samples_for(&self, n: usize) -> Vec<usize> {
        match &self.problem.samples {
            Samples::PerNode(m) => vec![*m; n],
            Samples::List(v) => v.clone(),
            Samples::Total(m) => {
                let base = m / n;
                (0..n).map(|i| base + usize::from(i < m % n)).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[problem]\nstates = 20\nactions = 3\nnodes = 4\nd = 5\nsamples_per_node = 10\ngamma = 0.9\nrho = 0.1\nseed = 7\n\
        [topology]\nkind = ring\n[algorithm]\neta1 = 0.01\neta2 = 0.2\nmax_k = 100\n[schedule]\nkind = uniform_random\nd_max = 2\n";

    fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::parse(text, Path::new("."))
    }

    fn field_of(e: CliError) -> String {
        match e {
            CliError::Config { field, .. } => field,
            other => panic!("not a config error: {other}"),
        }
    }

    #[test]
    fn parses_defaults() {
        let c = parse(BASE).unwrap();
        assert_eq!(c.problem.nodes, vec![4]);
        assert!((c.algorithm.zeta - 20.0).abs() < 1e-12);
        assert_eq!(c.schedule.seed, 7);
        assert_eq!(c.outputs.metrics, PathBuf::from("metrics.csv"));
        assert_eq!(c.samples_for(4), vec![10; 4]);
    }

    #[test]
    fn eta_ratio_must_match_zeta() {
        let e = parse(&format!("{BASE}[verify]\n").replace("eta2 = 0.2", "eta2 = 0.2\nzeta = 19")).unwrap_err();
        assert_eq!(field_of(e), "algorithm.eta2");
        assert!(parse(&BASE.replace("eta2 = 0.2", "eta2 = 0.2\nzeta = 20")).is_ok());
        let c = parse(&BASE.replace("eta1 = 0.01\neta2 = 0.2", "eta = 0.01\nzeta = 5")).unwrap();
        assert_eq!((c.algorithm.eta1.clone(), c.algorithm.zeta), (vec![0.01], 5.0));
    }

    #[test]
    fn field_level_errors() {
        assert_eq!(field_of(parse(&BASE.replace("d = 5", "d = five")).unwrap_err()), "problem.d");
        assert_eq!(field_of(parse(&BASE.replace("d = 5\n", "")).unwrap_err()), "problem.d");
        assert_eq!(field_of(parse(&BASE.replace("rho = 0.1", "rho = 0.1\nrhoo = 1")).unwrap_err()), "problem.rhoo");
        assert_eq!(field_of(parse(&BASE.replace("kind = ring", "kind = torus")).unwrap_err()), "topology.kind");
        assert_eq!(field_of(parse(&BASE.replace("kind = ring", "kind = edge_list:nope.txt")).unwrap_err()), "topology.kind");
        assert_eq!(field_of(parse(&BASE.replace("d_max = 2", "d_max = 2\nstraggler_target = 9\nslowdown = 2")).unwrap_err()), "schedule.straggler_target");
        assert_eq!(field_of(parse(&format!("{BASE}[extra]\nx = 1\n")).unwrap_err()), "extra");
        assert_eq!(field_of(parse(&BASE.replace("gamma = 0.9", "gamma = 1.0")).unwrap_err()), "problem.gamma");
    }

    #[test]
    fn node_sweep_with_total_samples() {
        let text = BASE.replace("nodes = 4", "nodes = 1, 4, 8").replace("samples_per_node = 10", "total_samples = 250").replace("eta1 = 0.01\neta2 = 0.2", "eta1 = 0.01, 0.02, 0.03\nzeta = 3");
        let c = parse(&text).unwrap();
        assert_eq!(c.samples_for(8).iter().sum::<usize>(), 250);
        assert_eq!(c.samples_for(4), vec![63, 63, 62, 62]);
        assert_eq!(c.eta1_for(2), 0.03);
        let bad = text.replace("eta1 = 0.01, 0.02, 0.03", "eta1 = 0.01, 0.02");
        assert_eq!(field_of(parse(&bad).unwrap_err()), "algorithm.eta1");
    }

    #[test]
    fn seed_override_reaches_every_stream() {
        let mut c = parse(BASE).unwrap();
        c.override_seed(99);
        assert_eq!((c.problem.seed, c.schedule.seed), (99, 99));
    }
}
