//! Deterministic discrete-event engine for APP-SAG.
//!
//! The virtual counter k advances by one per activation. Before activation k
//! every in-flight message with `deliver_at <= k` is handed to its receiver,
//! ordered by (deliver_at, emission order). A message emitted at event s with
//! sampled delay `delta` becomes deliverable at `s + 1 + delta`; delivery on a
//! single edge is FIFO. Self-copies land in the sender's buffer at once.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::mspbe::{ProblemSpec, SaddleVec};
use crate::protocol::{init_node, Message, NodeConfig, NodeState, Payload};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    UniformRandom,
    RoundRobin,
    /// `target` is scheduled 1/slowdown as often as any other node.
    Straggler { target: usize, slowdown: f64 },
    /// Cycles through a fixed node sequence.
    Fixed(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSchedule {
    pub kind: ScheduleKind,
    pub seed: u64,
    pub n: usize,
}

impl ActivationSchedule {
    pub fn new(kind: ScheduleKind, seed: u64, n: usize) -> Self {
        Self { kind, seed, n }
    }

    fn validate(&self) -> Result<()> {
        match &self.kind {
            ScheduleKind::Straggler { target, slowdown } => {
                if *target >= self.n || !(*slowdown >= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "straggler target {target} / slowdown {slowdown} invalid for n = {}",
                        self.n
                    )));
                }
            }
            ScheduleKind::Fixed(seq) => {
                if seq.is_empty() || seq.iter().any(|&i| i >= self.n) {
                    return Err(Error::InvalidArgument("fixed schedule must be nonempty with ids < n".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

struct ScheduleState {
    kind: ScheduleKind,
    n: usize,
    rng: ChaCha8Rng,
    counter: usize,
    weights: Option<WeightedIndex<f64>>,
}

impl ScheduleState {
    fn new(s: &ActivationSchedule) -> Result<Self> {
        s.validate()?;
        let weights = match s.kind {
            ScheduleKind::Straggler { target, slowdown } => {
                let w: Vec<f64> = (0..s.n).map(|i| if i == target { 1.0 / slowdown } else { 1.0 }).collect();
                Some(WeightedIndex::new(w).map_err(|e| Error::InvalidArgument(e.to_string()))?)
            }
            _ => None,
        };
        Ok(Self { kind: s.kind.clone(), n: s.n, rng: rng::stream(s.seed, rng::STREAM_SCHEDULE), counter: 0, weights })
    }

    fn next_node(&mut self) -> usize {
        let c = self.counter;
        self.counter += 1;
        match &self.kind {
            ScheduleKind::UniformRandom => self.rng.random_range(0..self.n),
            ScheduleKind::RoundRobin => c % self.n,
            ScheduleKind::Straggler { .. } => self.weights.as_ref().expect("weights").sample(&mut self.rng),
            ScheduleKind::Fixed(seq) => seq[c % seq.len()],
        }
    }
}

/// Message delays in event counts.
#[derive(Debug, Clone, PartialEq)]
pub enum DelayModel {
    Zero,
    /// Uniform on 0..=max.
    Uniform { max: u64, seed: u64 },
    /// Fixed delay per directed edge; missing edges get 0.
    PerEdge(BTreeMap<(usize, usize), u64>),
}

impl DelayModel {
    pub fn d_max(&self) -> u64 {
        match self {
            DelayModel::Zero => 0,
            DelayModel::Uniform { max, .. } => *max,
            DelayModel::PerEdge(t) => t.values().copied().max().unwrap_or(0),
        }
    }
}

enum DelayState {
    Model(DelayModel, ChaCha8Rng),
    /// Synchronous rounds of n events: everything sent in a round arrives
    /// right before the next round starts.
    Barrier(u64),
}

impl DelayState {
    fn deliver_at(&mut self, from: usize, to: usize, sent_at: u64) -> u64 {
        match self {
            DelayState::Model(DelayModel::Zero, _) => sent_at + 1,
            DelayState::Model(DelayModel::Uniform { max, .. }, r) => sent_at + 1 + r.random_range(0..=*max),
            DelayState::Model(DelayModel::PerEdge(t), _) => sent_at + 1 + t.get(&(from, to)).copied().unwrap_or(0),
            DelayState::Barrier(n) => sent_at.div_ceil(*n) * *n + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    MaxK(u64),
    /// Stop once max_i ||y_i|| < eps, or at max_k.
    Epsilon { eps: f64, max_k: u64 },
}

impl StopRule {
    fn max_k(&self) -> u64 {
        match *self {
            StopRule::MaxK(k) | StopRule::Epsilon { max_k: k, .. } => k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub eta1: f64,
    pub eta2: f64,
    /// Seed of the per-node sample selectors.
    pub seed: u64,
    pub batch_size: usize,
    /// Common initial point; zeros when unset.
    pub z0: Option<SaddleVec>,
    /// Longest tolerated gap between two activations of one node.
    pub b_max: Option<u64>,
    pub record: bool,
    /// Fault injection: silently drop the message (from, to, sent_at).
    pub drop_message: Option<(usize, usize, u64)>,
}

impl RunConfig {
    pub fn new(eta1: f64, eta2: f64, seed: u64) -> Self {
        Self { eta1, eta2, seed, batch_size: 1, z0: None, b_max: None, record: true, drop_message: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MessageRecord {
    pub from: usize,
    pub to: usize,
    pub sent_at: u64,
    pub deliver_at: u64,
    pub dropped: bool,
}

impl MessageRecord {
    /// First event index at which the message's y-mass can be consumed.
    pub fn available_at(&self) -> u64 {
        self.deliver_at.max(self.sent_at + 1)
    }
}

#[derive(Debug, Clone)]
pub struct InitRecord {
    pub z: SaddleVec,
    pub y: DVector<f64>,
    pub payload: Arc<Payload>,
    /// All initial messages, the self-copy included.
    pub emitted: Vec<MessageRecord>,
}

#[derive(Debug, Clone)]
pub struct ActivationRecord {
    pub k: u64,
    pub node: usize,
    pub picks: Vec<usize>,
    pub pre_z: SaddleVec,
    pub pre_y: DVector<f64>,
    pub z: SaddleVec,
    pub y: DVector<f64>,
    pub payload: Arc<Payload>,
    /// (sender, sent_at) of the consumed receptions, in buffer order.
    pub consumed: Vec<(usize, u64)>,
    /// Emitted messages, the self-copy included.
    pub emitted: Vec<MessageRecord>,
    /// Wall-model time at the end of this event.
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct DeliveryRecord {
    /// The activation this delivery precedes (k = sent_at for self-copies).
    pub k: u64,
    pub msg: MessageRecord,
}

#[derive(Debug, Clone)]
pub enum Event {
    Delivery(DeliveryRecord),
    Activation(ActivationRecord),
}

#[derive(Debug, Clone)]
pub struct EventTrace {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub rho: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub d_max: u64,
    pub out_degree: Vec<usize>,
    pub init: Vec<InitRecord>,
    pub events: Vec<Event>,
}

impl EventTrace {
    pub fn activations(&self) -> impl Iterator<Item = &ActivationRecord> {
        self.events.iter().filter_map(|e| match e {
            Event::Activation(a) => Some(a),
            Event::Delivery(_) => None,
        })
    }

    pub fn deliveries(&self) -> impl Iterator<Item = &DeliveryRecord> {
        self.events.iter().filter_map(|e| match e {
            Event::Delivery(d) => Some(d),
            Event::Activation(_) => None,
        })
    }

    pub fn num_activations(&self) -> u64 {
        self.activations().count() as u64
    }

    /// Line-oriented dump with full payload vectors.
    pub fn to_text(&self) -> String {
        fn vec(v: &DVector<f64>) -> String {
            v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",")
        }
        let mut s = String::new();
        let _ = writeln!(
            s,
            "trace n={} m={} d={} rho={:e} eta1={:e} eta2={:e} d_max={}",
            self.n, self.m, self.d, self.rho, self.eta1, self.eta2, self.d_max
        );
        for (i, r) in self.init.iter().enumerate() {
            let _ = writeln!(s, "init node={i} z={} y={}", vec(&r.z), vec(&r.y));
        }
        for e in &self.events {
            match e {
                Event::Delivery(d) => {
                    let m = &d.msg;
                    let _ = writeln!(s, "deliver k={} from={} to={} sent_at={} deliver_at={}", d.k, m.from, m.to, m.sent_at, m.deliver_at);
                }
                Event::Activation(a) => {
                    let consumed: Vec<String> = a.consumed.iter().map(|(f, t)| format!("{f}@{t}")).collect();
                    let picks: Vec<String> = a.picks.iter().map(|p| p.to_string()).collect();
                    let _ = writeln!(
                        s,
                        "activate k={} node={} picks={} consumed={} z={} y={} z_tilde={} y_tilde={} wall={:e}",
                        a.k,
                        a.node,
                        picks.join(","),
                        consumed.join(","),
                        vec(&a.z),
                        vec(&a.y),
                        vec(&a.payload.z_tilde),
                        vec(&a.payload.y_tilde),
                        a.wall_time
                    );
                }
            }
        }
        s
    }
}

/// Step-by-step driver. With `record = false` nothing is logged, which keeps
/// long runs at constant memory.
pub struct AsyncSimulator {
    nodes: Vec<NodeState>,
    out: Vec<Vec<usize>>,
    sched: ScheduleState,
    delays: DelayState,
    in_flight: BTreeMap<(u64, u64), Message>,
    edge_last: BTreeMap<(usize, usize), u64>,
    seq: u64,
    k: u64,
    last_active: Vec<u64>,
    cfg: RunConfig,
    wall: f64,
    round_time: Option<f64>,
    trace: Option<EventTrace>,
}

impl AsyncSimulator {
    pub fn new(
        problem: &ProblemSpec,
        graph: &DirectedGraph,
        schedule: &ActivationSchedule,
        delays: &DelayModel,
        cfg: &RunConfig,
    ) -> Result<Self> {
        let seed = match delays {
            DelayModel::Uniform { seed, .. } => *seed,
            _ => 0,
        };
        let state = DelayState::Model(delays.clone(), rng::stream(seed, rng::STREAM_DELAY));
        Self::build(problem, graph, schedule, state, delays.d_max(), cfg, None)
    }

    fn build(
        problem: &ProblemSpec,
        graph: &DirectedGraph,
        schedule: &ActivationSchedule,
        delays: DelayState,
        d_max: u64,
        cfg: &RunConfig,
        round_time: Option<f64>,
    ) -> Result<Self> {
        let n = problem.n();
        if graph.n() != n || schedule.n != n {
            return Err(Error::InvalidArgument(format!(
                "problem has {n} nodes, graph {}, schedule {}",
                graph.n(),
                schedule.n
            )));
        }
        if !graph.is_strongly_connected() {
            return Err(Error::NotStronglyConnected);
        }
        if !(cfg.eta1 > 0.0 && cfg.eta2 > 0.0) {
            return Err(Error::InvalidArgument("stepsizes must be positive".into()));
        }
        let dim = 2 * problem.d;
        let z0 = cfg.z0.clone().unwrap_or_else(|| DVector::zeros(dim));
        if z0.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: z0.len() });
        }
        let node_cfg = NodeConfig { rho: problem.rho, batch_size: cfg.batch_size };
        let out: Vec<Vec<usize>> = (0..n).map(|i| graph.out_neighbors(i)).collect();
        let mut sim = Self {
            nodes: Vec::with_capacity(n),
            out,
            sched: ScheduleState::new(schedule)?,
            delays,
            in_flight: BTreeMap::new(),
            edge_last: BTreeMap::new(),
            seq: 0,
            k: 0,
            last_active: vec![0; n],
            cfg: cfg.clone(),
            wall: 0.0,
            round_time,
            trace: None,
        };
        let mut init = Vec::with_capacity(n);
        for i in 0..n {
            let samples = Arc::new(problem.per_node[i].clone());
            let (node, payload) = init_node(i, samples, z0.clone(), sim.out[i].len(), problem.m(), cfg.seed, node_cfg)?;
            init.push(InitRecord { z: node.z.clone(), y: node.y.clone(), payload, emitted: Vec::new() });
            sim.nodes.push(node);
        }
        let mut self_deliveries = Vec::new();
        for (i, rec) in init.iter_mut().enumerate() {
            rec.emitted = sim.emit(i, 0, &rec.payload.clone());
            self_deliveries.extend(rec.emitted.iter().filter(|m| m.to == i).cloned());
        }
        if cfg.record {
            sim.trace = Some(EventTrace {
                n,
                m: problem.m(),
                d: problem.d,
                rho: problem.rho,
                eta1: cfg.eta1,
                eta2: cfg.eta2,
                d_max,
                out_degree: sim.out.iter().map(Vec::len).collect(),
                init,
                events: self_deliveries.into_iter().map(|msg| Event::Delivery(DeliveryRecord { k: 0, msg })).collect(),
            });
        }
        Ok(sim)
    }

    /// Queues the non-self copies of `payload`; the self-copy is already buffered.
    fn emit(&mut self, from: usize, k: u64, payload: &Arc<Payload>) -> Vec<MessageRecord> {
        let mut records = Vec::with_capacity(self.out[from].len());
        for idx in 0..self.out[from].len() {
            let to = self.out[from][idx];
            if to == from {
                records.push(MessageRecord { from, to, sent_at: k, deliver_at: k, dropped: false });
                continue;
            }
            let mut at = self.delays.deliver_at(from, to, k);
            let last = self.edge_last.entry((from, to)).or_insert(0);
            at = at.max(*last);
            *last = at;
            let dropped = self.cfg.drop_message == Some((from, to, k));
            records.push(MessageRecord { from, to, sent_at: k, deliver_at: at, dropped });
            if !dropped {
                let msg = Message { from, to, payload: payload.clone(), sent_at: k, deliver_at: at };
                self.in_flight.insert((at, self.seq), msg);
                self.seq += 1;
            }
        }
        records
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &Message> {
        self.in_flight.values()
    }

    pub fn wall_time(&self) -> f64 {
        self.wall
    }

    pub fn max_residual(&self) -> f64 {
        self.nodes.iter().map(|n| n.y.norm()).fold(0.0, f64::max)
    }

    /// || sum of buffered and in-flight y~ - (1/m) sum_{i,p} g_{i,p} ||_inf.
    pub fn mass_residual(&self) -> f64 {
        let dim = self.nodes[0].z.len();
        let mut diff = DVector::zeros(dim);
        for n in &self.nodes {
            diff += n.buffered_mass() - n.table_mass();
        }
        for m in self.in_flight.values() {
            diff += &m.payload.y_tilde;
        }
        diff.amax()
    }

    /// Runs one activation event and returns the activated node.
    pub fn step(&mut self) -> Result<usize> {
        let k = self.k + 1;
        let w = self.sched.next_node();
        while let Some(entry) = self.in_flight.first_entry() {
            if entry.key().0 > k {
                break;
            }
            let msg = entry.remove();
            self.nodes[msg.to].on_receive(&msg)?;
            if let Some(t) = self.trace.as_mut() {
                let rec = MessageRecord { from: msg.from, to: msg.to, sent_at: msg.sent_at, deliver_at: msg.deliver_at, dropped: false };
                t.events.push(Event::Delivery(DeliveryRecord { k, msg: rec }));
            }
        }
        let (pre_z, pre_y) = if self.trace.is_some() {
            (self.nodes[w].z.clone(), self.nodes[w].y.clone())
        } else {
            (DVector::zeros(0), DVector::zeros(0))
        };
        let act = self.nodes[w].activate(k, self.cfg.eta1, self.cfg.eta2)?;
        let emitted = self.emit(w, k, &act.payload);
        self.k = k;
        self.last_active[w] = k;
        let n = self.nodes.len() as u64;
        match self.round_time {
            Some(rt) if k % n == 0 => self.wall += rt,
            Some(_) => {}
            None => self.wall += 1.0,
        }
        if let Some(t) = self.trace.as_mut() {
            let node = &self.nodes[w];
            let self_copy = emitted.iter().find(|m| m.to == w).cloned();
            t.events.push(Event::Activation(ActivationRecord {
                k,
                node: w,
                picks: act.picks,
                pre_z,
                pre_y,
                z: node.z.clone(),
                y: node.y.clone(),
                payload: act.payload,
                consumed: act.consumed,
                emitted,
                wall_time: self.wall,
            }));
            if let Some(msg) = self_copy {
                t.events.push(Event::Delivery(DeliveryRecord { k, msg }));
            }
        }
        if let Some(b_max) = self.cfg.b_max {
            if let Some((i, &last)) = self.last_active.iter().enumerate().find(|&(_, &l)| k - l > b_max) {
                return Err(Error::Assumption {
                    assumption: "1(b)",
                    detail: format!("node {i} has not updated since event {last} (k = {k}, b_max = {b_max})"),
                });
            }
        }
        Ok(w)
    }

    pub fn into_trace(self) -> Option<EventTrace> {
        self.trace
    }

    /// Steps until the stop rule fires and returns the recorded trace.
    pub fn run(mut self, stop: StopRule) -> Result<EventTrace> {
        while self.k < stop.max_k() {
            self.step()?;
            if let StopRule::Epsilon { eps, .. } = stop {
                if self.max_residual() < eps {
                    break;
                }
            }
        }
        self.trace.ok_or_else(|| Error::InvalidArgument("recording was disabled".into()))
    }
}

pub fn run_async(
    problem: &ProblemSpec,
    graph: &DirectedGraph,
    schedule: &ActivationSchedule,
    delays: &DelayModel,
    stop: StopRule,
    cfg: &RunConfig,
) -> Result<EventTrace> {
    AsyncSimulator::new(problem, graph, schedule, delays, cfg)?.run(stop)
}

/// Synchronous rounds with an optional slowed node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SyncOptions {
    /// (node, slowdown): that node's compute time per round is `slowdown`
    /// instead of 1, and a round lasts as long as its slowest node.
    pub straggler: Option<(usize, f64)>,
}

impl SyncOptions {
    pub fn round_time(&self) -> f64 {
        self.straggler.map_or(1.0, |(_, s)| s.max(1.0))
    }
}

/// Synchronous simulator: round r is events r n + 1 ..= (r + 1) n in node
/// order, and every message of round r arrives right before round r + 1.
pub fn sync_simulator(
    problem: &ProblemSpec,
    graph: &DirectedGraph,
    cfg: &RunConfig,
    opts: SyncOptions,
) -> Result<AsyncSimulator> {
    let n = problem.n();
    if let Some((t, _)) = opts.straggler {
        if t >= n {
            return Err(Error::InvalidArgument(format!("straggler {t} out of range")));
        }
    }
    let schedule = ActivationSchedule::new(ScheduleKind::RoundRobin, 0, n);
    AsyncSimulator::build(problem, graph, &schedule, DelayState::Barrier(n as u64), n as u64, cfg, Some(opts.round_time()))
}

pub fn run_sync(
    problem: &ProblemSpec,
    graph: &DirectedGraph,
    rounds: u64,
    cfg: &RunConfig,
    opts: SyncOptions,
) -> Result<EventTrace> {
    sync_simulator(problem, graph, cfg, opts)?.run(StopRule::MaxK(rounds * problem.n() as u64))
}

/// Smallest b for which, in every window of b events fully inside the trace,
/// each node completes an update whose messages are all consumable by the
/// event after the window. The result is raised to the largest provenance age
/// in the trace so that it also sizes the delay-augmented graph.
pub fn verify_assumption1b(trace: &EventTrace) -> Result<u64> {
    let n = trace.n;
    let acts: Vec<&ActivationRecord> = trace.activations().collect();
    let k_total = acts.len();
    let mut count = vec![0usize; n];
    for a in &acts {
        count[a.node] += 1;
    }
    if let Some(i) = count.iter().position(|&c| c < 2) {
        return Err(Error::Assumption {
            assumption: "1(b)",
            detail: format!("node {i} updates {} times; need at least 2 to certify b", count[i]),
        });
    }

    // g[k] = max_v (min over v's activations a >= k of Dmax(a)) - k
    let mut g = vec![0u64; k_total + 2];
    let mut best = vec![u64::MAX; n];
    let mut worst_node = vec![0usize; k_total + 2];
    for k in (1..=k_total).rev() {
        let a = acts[k - 1];
        let done = if a.emitted.iter().any(|m| m.dropped) {
            u64::MAX
        } else {
            a.emitted.iter().map(MessageRecord::available_at).max().unwrap_or(a.k + 1)
        };
        best[a.node] = best[a.node].min(done);
        let (v, worst) = best.iter().enumerate().max_by_key(|&(_, &b)| b).expect("n >= 1");
        g[k] = if *worst == u64::MAX { u64::MAX } else { worst - k as u64 };
        worst_node[k] = v;
    }
    let mut prefix = vec![0u64; k_total + 1];
    let mut arg = vec![0usize; k_total + 1];
    for k in 1..=k_total {
        let (p, a) = if g[k] > prefix[k - 1] { (g[k], k) } else { (prefix[k - 1], arg[k - 1]) };
        prefix[k] = p;
        arg[k] = a;
    }
    let mut window_b = None;
    for b in 1..=k_total as u64 {
        let last_start = k_total as u64 + 1 - b;
        if prefix[last_start as usize] <= b {
            window_b = Some(b);
            break;
        }
    }
    let window_b = window_b.ok_or_else(|| {
        let k = arg[k_total];
        Error::Assumption {
            assumption: "1(b)",
            detail: format!("node {} has no completed update covering the window starting at k = {k}", worst_node[k]),
        }
    })?;

    let mut age = 0u64;
    for a in &acts {
        for &(_, s) in &a.consumed {
            age = age.max(a.k - 1 - s);
        }
        for m in a.emitted.iter().filter(|m| !m.dropped) {
            age = age.max(m.available_at() - a.k - 1);
        }
    }
    for r in &trace.init {
        for m in r.emitted.iter().filter(|m| !m.dropped) {
            age = age.max(m.available_at() - 1);
        }
    }
    Ok(window_b.max(age))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub k: u64,
    pub node: Option<usize>,
    pub event_type: &'static str,
    pub err_max: f64,
    pub err_mean: f64,
    pub y_norm_max: f64,
}

/// Running per-node errors; one row per update.
#[derive(Debug, Clone)]
pub struct OnlineMetrics {
    z_star: SaddleVec,
    err: Vec<f64>,
    y_norm: Vec<f64>,
}

impl OnlineMetrics {
    pub fn new(z0: &[SaddleVec], y0: &[DVector<f64>], z_star: &SaddleVec) -> Self {
        Self {
            z_star: z_star.clone(),
            err: z0.iter().map(|z| (z - z_star).norm()).collect(),
            y_norm: y0.iter().map(|y| y.norm()).collect(),
        }
    }

    pub fn from_nodes(nodes: &[NodeState], z_star: &SaddleVec) -> Self {
        let z: Vec<SaddleVec> = nodes.iter().map(|n| n.z.clone()).collect();
        let y: Vec<DVector<f64>> = nodes.iter().map(|n| n.y.clone()).collect();
        Self::new(&z, &y, z_star)
    }

    pub fn row(&self, k: u64, node: Option<usize>, event_type: &'static str) -> MetricsRow {
        MetricsRow {
            k,
            node,
            event_type,
            err_max: self.err.iter().copied().fold(0.0, f64::max),
            err_mean: self.err.iter().sum::<f64>() / self.err.len() as f64,
            y_norm_max: self.y_norm.iter().copied().fold(0.0, f64::max),
        }
    }

    pub fn update(&mut self, node: usize, z: &SaddleVec, y: &DVector<f64>) {
        self.err[node] = (z - &self.z_star).norm();
        self.y_norm[node] = y.norm();
    }

    pub fn err_max(&self) -> f64 {
        self.err.iter().copied().fold(0.0, f64::max)
    }
}

/// One row per k; row k uses every node's latest z after k activations.
pub fn metrics(trace: &EventTrace, z_star: &SaddleVec) -> Vec<MetricsRow> {
    let z0: Vec<SaddleVec> = trace.init.iter().map(|r| r.z.clone()).collect();
    let y0: Vec<DVector<f64>> = trace.init.iter().map(|r| r.y.clone()).collect();
    let mut om = OnlineMetrics::new(&z0, &y0, z_star);
    let mut rows = vec![om.row(0, None, "init")];
    for a in trace.activations() {
        om.update(a.node, &a.z, &a.y);
        rows.push(om.row(a.k, Some(a.node), "activation"));
    }
    rows
}

/// Outcome of [`run_to_error`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Progress {
    pub err0: f64,
    pub final_err: f64,
    /// First event at which err_max <= target.
    pub k_hit: Option<u64>,
    /// Wall-model time at `k_hit`.
    pub wall_hit: Option<f64>,
    /// err_max left [0, 1e6 err0] or became non-finite.
    pub diverged: bool,
    pub k_end: u64,
}

/// Steps until err_max <= `target`, divergence, or `max_k` events, passing
/// every metrics row (the initial one included) to `on_row`.
pub fn run_to_error(
    sim: &mut AsyncSimulator,
    z_star: &SaddleVec,
    target: f64,
    max_k: u64,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<Progress> {
    let mut om = OnlineMetrics::from_nodes(sim.nodes(), z_star);
    let err0 = om.err_max();
    on_row(&om.row(sim.k(), None, "init"));
    let mut out = Progress { err0, final_err: err0, k_hit: None, wall_hit: None, diverged: false, k_end: sim.k() };
    if err0 <= target {
        out.k_hit = Some(sim.k());
        out.wall_hit = Some(sim.wall_time());
        return Ok(out);
    }
    while sim.k() < max_k {
        let w = sim.step()?;
        let node = &sim.nodes()[w];
        om.update(w, &node.z, &node.y);
        on_row(&om.row(sim.k(), Some(w), "activation"));
        let e = om.err_max();
        out.final_err = e;
        out.k_end = sim.k();
        if !e.is_finite() || e > 1e6 * err0 {
            out.diverged = true;
            break;
        }
        if e <= target {
            out.k_hit = Some(sim.k());
            out.wall_hit = Some(sim.wall_time());
            break;
        }
    }
    Ok(out)
}

pub const METRICS_HEADER: [&str; 6] = ["k", "node", "event_type", "err_max", "err_mean", "y_norm_max"];

pub fn write_metrics_csv<W: std::io::Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        let node = r.node.map(|i| i.to_string()).unwrap_or_default();
        w.write_record([
            r.k.to_string(),
            node,
            r.event_type.to_string(),
            format!("{:e}", r.err_max),
            format!("{:e}", r.err_mean),
            format!("{:e}", r.y_norm_max),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_file(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_metrics_csv(&mut f, rows)?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    /// exp(slope) of log(err) against k over the tail half.
    pub c_hat: f64,
    pub r_squared: f64,
    /// Largest per-step factor (err[k+w] / err[k])^(1/w) over windows of w = len/10.
    pub max_window_ratio: f64,
}

pub fn estimate_rate(series: &[f64]) -> Result<RateFit> {
    if series.len() < 100 {
        return Err(Error::InvalidArgument(format!("rate fit needs at least 100 points, got {}", series.len())));
    }
    if let Some(x) = series.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::InvalidArgument(format!("series entry {x} is negative or NaN")));
    }
    let logs: Vec<f64> = series.iter().map(|x| x.max(1e-300).ln()).collect();
    let tail = &logs[logs.len() / 2..];
    let t = tail.len() as f64;
    let xm = (t - 1.0) / 2.0;
    let ym = tail.iter().sum::<f64>() / t;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (i, y) in tail.iter().enumerate() {
        let dx = i as f64 - xm;
        let dy = y - ym;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    let w = logs.len() / 10;
    let max_window_ratio = (0..logs.len() - w)
        .map(|k| ((logs[k + w] - logs[k]) / w as f64).exp())
        .fold(0.0, f64::max);
    Ok(RateFit { c_hat: slope.exp(), r_squared, max_window_ratio })
}
