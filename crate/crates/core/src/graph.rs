//! Directed communication topologies.
//!
//! Self-loops are never stored. Neighbor queries are self-inclusive, so
//! `out_neighbors(i)` always contains `i`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TopologyKind {
    Ring,
    Exponential,
    Grid,
    Complete,
    EdgeList(PathBuf),
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "ring" => Ok(Self::Ring),
            "exponential" => Ok(Self::Exponential),
            "grid" => Ok(Self::Grid),
            "complete" => Ok(Self::Complete),
            _ => match s.strip_prefix("edge_list:") {
                Some(path) => Ok(Self::EdgeList(PathBuf::from(path.trim()))),
                None => Err(Error::InvalidArgument(format!("unknown topology kind '{s}'"))),
            },
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ring => write!(f, "ring"),
            Self::Exponential => write!(f, "exponential"),
            Self::Grid => write!(f, "grid"),
            Self::Complete => write!(f, "complete"),
            Self::EdgeList(p) => write!(f, "edge_list:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    n: usize,
    out: Vec<BTreeSet<usize>>,
    inc: Vec<BTreeSet<usize>>,
}

impl DirectedGraph {
    /// Empty graph on `n` nodes (only the implicit self-loops).
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("graph needs at least one node".into()));
        }
        Ok(Self {
            n,
            out: vec![BTreeSet::new(); n],
            inc: vec![BTreeSet::new(); n],
        })
    }

    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut g = Self::new(n)?;
        for (i, j) in edges {
            g.add_edge(i, j)?;
        }
        Ok(g)
    }

    /// Adds `i -> j`. Self-edges are accepted and ignored.
    pub fn add_edge(&mut self, i: usize, j: usize) -> Result<()> {
        if i >= self.n || j >= self.n {
            return Err(Error::InvalidArgument(format!(
                "edge ({i}, {j}) out of range for n = {}",
                self.n
            )));
        }
        if i != j {
            self.out[i].insert(j);
            self.inc[j].insert(i);
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Stored edges in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.out
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |&j| (i, j)))
            .collect()
    }

    pub fn num_edges(&self) -> usize {
        self.out.iter().map(BTreeSet::len).sum()
    }

    /// N_out^i, sorted, including `i`.
    pub fn out_neighbors(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.out[i].iter().copied().chain(std::iter::once(i)).collect();
        v.sort_unstable();
        v
    }

    /// N_in^i, sorted, including `i`.
    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self.inc[i].iter().copied().chain(std::iter::once(i)).collect();
        v.sort_unstable();
        v
    }

    /// |N_out^i| including `i`.
    pub fn out_degree(&self, i: usize) -> usize {
        self.out[i].len() + 1
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i == j || self.out[i].contains(&j)
    }

    fn bfs(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &v in &self.out[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    pub fn is_strongly_connected(&self) -> bool {
        (0..self.n).all(|s| self.bfs(s).iter().all(Option::is_some))
    }

    /// Longest shortest directed path.
    pub fn diameter(&self) -> Result<usize> {
        let mut best = 0;
        for s in 0..self.n {
            for d in self.bfs(s) {
                best = best.max(d.ok_or(Error::NotStronglyConnected)?);
            }
        }
        Ok(best)
    }

    pub fn ring(n: usize) -> Result<Self> {
        Self::from_edges(n, (0..n).map(|i| (i, (i + 1) % n)))
    }

    /// i -> (2^j + i) mod n for 0 <= j < ceil(log2 n).
    pub fn exponential(n: usize) -> Result<Self> {
        let mut g = Self::new(n)?;
        let jmax = n.next_power_of_two().trailing_zeros();
        for i in 0..n {
            for j in 0..jmax {
                g.add_edge(i, ((1usize << j) + i) % n)?;
            }
        }
        Ok(g)
    }

    /// Bidirected 4-neighbor lattice with `ceil(sqrt n)` columns, filled row-major.
    pub fn grid(n: usize) -> Result<Self> {
        let mut g = Self::new(n)?;
        let cols = (1..=n).find(|c| c * c >= n).unwrap_or(1);
        for i in 0..n {
            let (r, c) = (i / cols, i % cols);
            if c + 1 < cols && i + 1 < n {
                g.add_edge(i, i + 1)?;
                g.add_edge(i + 1, i)?;
            }
            let below = (r + 1) * cols + c;
            if below < n {
                g.add_edge(i, below)?;
                g.add_edge(below, i)?;
            }
        }
        Ok(g)
    }

    pub fn complete(n: usize) -> Result<Self> {
        Self::from_edges(n, (0..n).flat_map(|i| (0..n).map(move |j| (i, j))))
    }

    /// Parses one `i j` pair per line. Blank lines and `#` comments are skipped.
    pub fn parse_edge_list(text: &str, n: usize) -> Result<Self> {
        let mut g = Self::new(n)?;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: line_no, msg };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(parse_err(format!("expected 'i j', found '{line}'")));
            }
            let i: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(format!("bad node id '{}'", fields[0])))?;
            let j: usize = fields[1]
                .parse()
                .map_err(|_| parse_err(format!("bad node id '{}'", fields[1])))?;
            if i >= n || j >= n {
                return Err(parse_err(format!("node id out of range for n = {n}")));
            }
            g.add_edge(i, j)?;
        }
        Ok(g)
    }

    pub fn read_edge_list(path: &Path, n: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_edge_list(&text, n)
    }

    pub fn to_edge_list(&self) -> String {
        self.edges().iter().map(|(i, j)| format!("{i} {j}\n")).collect()
    }
}

pub fn generate_topology(kind: &TopologyKind, n: usize) -> Result<DirectedGraph> {
    match kind {
        TopologyKind::Ring => DirectedGraph::ring(n),
        TopologyKind::Exponential => DirectedGraph::exponential(n),
        TopologyKind::Grid => DirectedGraph::grid(n),
        TopologyKind::Complete => DirectedGraph::complete(n),
        TopologyKind::EdgeList(path) => DirectedGraph::read_edge_list(path, n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn floyd_warshall(g: &DirectedGraph) -> Vec<Vec<usize>> {
        let n = g.n();
        let inf = usize::MAX / 4;
        let mut d = vec![vec![inf; n]; n];
        for i in 0..n {
            d[i][i] = 0;
        }
        for (i, j) in g.edges() {
            d[i][j] = 1;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d
    }

    #[test]
    fn exponential_four_nodes() {
        let g = DirectedGraph::exponential(4).unwrap();
        let mut expect = Vec::new();
        for i in 0..4 {
            expect.push((i, (i + 1) % 4));
            expect.push((i, (i + 2) % 4));
        }
        expect.sort();
        assert_eq!(g.edges(), expect);
    }

    #[test]
    fn exponential_eight_has_out_degree_three() {
        let g = DirectedGraph::exponential(8).unwrap();
        for i in 0..8 {
            assert_eq!(g.out_degree(i) - 1, 3);
        }
        assert!(g.is_strongly_connected());
        let fw = floyd_warshall(&g);
        let oracle = fw.iter().flatten().copied().max().unwrap();
        assert_eq!(g.diameter().unwrap(), oracle);
    }

    #[test]
    fn single_node_ring() {
        let g = DirectedGraph::ring(1).unwrap();
        assert_eq!(g.num_edges(), 0);
        assert_eq!(g.out_neighbors(0), vec![0]);
        assert_eq!(g.diameter().unwrap(), 0);
    }

    #[test]
    fn zero_nodes_rejected() {
        assert!(matches!(DirectedGraph::ring(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn connectivity_and_diameter() {
        let ring = DirectedGraph::ring(3).unwrap();
        assert!(ring.is_strongly_connected());
        assert_eq!(ring.diameter().unwrap(), 2);

        let one_way = DirectedGraph::from_edges(2, [(0, 1)]).unwrap();
        assert!(!one_way.is_strongly_connected());
        assert!(matches!(one_way.diameter(), Err(Error::NotStronglyConnected)));

        assert_eq!(DirectedGraph::complete(4).unwrap().diameter().unwrap(), 1);
    }

    #[test]
    fn grid_nine_is_three_by_three() {
        let g = DirectedGraph::grid(9).unwrap();
        assert_eq!(g.num_edges(), 24);
        assert_eq!(g.out_degree(4), 5);
        assert_eq!(g.out_degree(0), 3);
        assert_eq!(g.diameter().unwrap(), 4);
        for (i, j) in g.edges() {
            assert!(g.has_edge(j, i));
        }
    }

    #[test]
    fn edge_list_round_trip_and_errors() {
        let g = DirectedGraph::exponential(5).unwrap();
        let parsed = DirectedGraph::parse_edge_list(&g.to_edge_list(), 5).unwrap();
        assert_eq!(parsed, g);

        let err = DirectedGraph::parse_edge_list("0 1\n1 x\n", 3).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = DirectedGraph::parse_edge_list("0 1\n\n1 2 3\n", 3).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        let err = DirectedGraph::parse_edge_list("0 7\n", 3).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn edge_list_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.txt");
        std::fs::write(&path, "0 1\n1 2\n2 0\n").unwrap();
        let g = generate_topology(&TopologyKind::EdgeList(path), 3).unwrap();
        assert_eq!(g, DirectedGraph::ring(3).unwrap());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("ring".parse::<TopologyKind>().unwrap(), TopologyKind::Ring);
        let k: TopologyKind = "edge_list:/tmp/x".parse().unwrap();
        assert_eq!(k.to_string(), "edge_list:/tmp/x");
        assert!("torus".parse::<TopologyKind>().is_err());
    }

    proptest! {
        #[test]
        fn neighbor_sets_are_self_inclusive(n in 1usize..20, kind in 0usize..4) {
            let g = match kind {
                0 => DirectedGraph::ring(n),
                1 => DirectedGraph::exponential(n),
                2 => DirectedGraph::grid(n),
                _ => DirectedGraph::complete(n),
            }.unwrap();
            for i in 0..n {
                prop_assert!(g.out_neighbors(i).contains(&i));
                prop_assert!(g.in_neighbors(i).contains(&i));
                prop_assert!(!g.edges().contains(&(i, i)));
            }
            prop_assert!(g.is_strongly_connected());
            prop_assert!(g.diameter().unwrap() <= n - 1);
        }

        #[test]
        fn generation_is_deterministic(n in 1usize..30) {
            prop_assert_eq!(DirectedGraph::exponential(n).unwrap(), DirectedGraph::exponential(n).unwrap());
            prop_assert_eq!(DirectedGraph::grid(n).unwrap(), DirectedGraph::grid(n).unwrap());
        }
    }
}
