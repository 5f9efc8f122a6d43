//! Per-node APP-SAG state machine.
//!
//! A node pulls (averages) the z-messages in its buffer, pushes (sums) the
//! y-messages, refreshes one SAG table entry, and emits
//! (z - diag(eta1, eta2) y, y / |N_out|) to every out-neighbor, itself included.

use std::sync::Arc;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mspbe::{saddle_gradient_into, SaddleVec, SampleStats};
use crate::rng;

/// The (z~, y~) pair a node broadcasts.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub z_tilde: SaddleVec,
    pub y_tilde: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    pub payload: Arc<Payload>,
    /// Event index of the emitting activation (0 for the initial broadcast).
    pub sent_at: u64,
    /// First event index whose activation may consume the message.
    pub deliver_at: u64,
}

/// One buffered message, tagged with where and when it was produced.
#[derive(Debug, Clone)]
pub struct Reception {
    pub from: usize,
    pub sent_at: u64,
    pub payload: Arc<Payload>,
}

/// Random reshuffle over the local sample indices.
#[derive(Debug, Clone)]
pub struct SampleSelector {
    perm: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl SampleSelector {
    pub fn new(m_i: usize, rng: ChaCha8Rng) -> Self {
        let mut s = Self { perm: (0..m_i).collect(), pos: m_i, rng };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.perm.shuffle(&mut self.rng);
        self.pos = 0;
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> usize {
        if self.pos == self.perm.len() {
            self.reshuffle();
        }
        let p = self.perm[self.pos];
        self.pos += 1;
        p
    }

    /// K = 2 m_i - 1: every sample appears in any window of this many picks.
    pub fn window(&self) -> usize {
        2 * self.perm.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeConfig {
    pub rho: f64,
    pub batch_size: usize,
}

/// Result of one activation.
#[derive(Debug, Clone)]
pub struct Activation {
    pub picks: Vec<usize>,
    /// (sender, sent_at) of every consumed reception, in buffer order.
    pub consumed: Vec<(usize, u64)>,
    pub payload: Arc<Payload>,
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: usize,
    pub z: SaddleVec,
    pub y: DVector<f64>,
    sag_table: Vec<DVector<f64>>,
    /// Event index at which each sample was last selected (0 = initialization).
    sag_at: Vec<u64>,
    buffer: Vec<Reception>,
    pub out_degree: usize,
    selector: SampleSelector,
    /// Global sample count m.
    pub m: usize,
    samples: Arc<Vec<SampleStats>>,
    cfg: NodeConfig,
    scratch: Vec<f64>,
}

/// Builds node `id` at z0 and returns its initial broadcast payload.
///
/// The node's self-copy is already in its buffer.
pub fn init_node(
    id: usize,
    samples: Arc<Vec<SampleStats>>,
    z0: SaddleVec,
    out_degree: usize,
    m: usize,
    seed: u64,
    cfg: NodeConfig,
) -> Result<(NodeState, Arc<Payload>)> {
    let m_i = samples.len();
    if m_i == 0 {
        return Err(Error::InvalidArgument(format!("node {id} has no samples")));
    }
    if out_degree == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("out-degree and batch size must be positive".into()));
    }
    let dim = z0.len();
    if dim != 2 * samples[0].dim() {
        return Err(Error::DimensionMismatch { expected: 2 * samples[0].dim(), got: dim });
    }
    let mut scratch = vec![0.0; dim];
    let mut y = DVector::zeros(dim);
    let mut sag_table = Vec::with_capacity(m_i);
    for s in samples.iter() {
        saddle_gradient_into(z0.as_slice(), s, cfg.rho, &mut scratch);
        let g = DVector::from_column_slice(&scratch);
        y += &g;
        sag_table.push(g);
    }
    y /= m as f64;
    let payload = Arc::new(Payload { z_tilde: z0.clone(), y_tilde: &y / out_degree as f64 });
    let node = NodeState {
        id,
        z: z0,
        y,
        sag_table,
        sag_at: vec![0; m_i],
        buffer: vec![Reception { from: id, sent_at: 0, payload: payload.clone() }],
        out_degree,
        selector: SampleSelector::new(m_i, rng::selector_stream(seed, id)),
        m,
        samples,
        cfg,
        scratch,
    };
    Ok((node, payload))
}

impl NodeState {
    pub fn m_i(&self) -> usize {
        self.samples.len()
    }

    pub fn sag_table(&self) -> &[DVector<f64>] {
        &self.sag_table
    }

    pub fn sag_at(&self) -> &[u64] {
        &self.sag_at
    }

    pub fn buffer(&self) -> &[Reception] {
        &self.buffer
    }

    pub fn samples(&self) -> &[SampleStats] {
        &self.samples
    }

    pub fn selector_window(&self) -> usize {
        self.selector.window()
    }

    pub fn on_receive(&mut self, msg: &Message) -> Result<()> {
        if msg.to != self.id {
            return Err(Error::Misrouted { to: msg.to, node: self.id });
        }
        self.buffer.push(Reception { from: msg.from, sent_at: msg.sent_at, payload: msg.payload.clone() });
        Ok(())
    }

    /// One activation at event index `k`.
    pub fn activate(&mut self, k: u64, eta1: f64, eta2: f64) -> Result<Activation> {
        if self.buffer.is_empty() {
            return Err(Error::Protocol { node: self.id, detail: "activation with an empty z-buffer".into() });
        }
        let dim = self.z.len();
        let d = dim / 2;
        let mut z = DVector::zeros(dim);
        let mut y = DVector::zeros(dim);
        for r in &self.buffer {
            z += &r.payload.z_tilde;
            y += &r.payload.y_tilde;
        }
        z /= self.buffer.len() as f64;

        let inv_m = 1.0 / self.m as f64;
        let mut picks = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let p = self.selector.next();
            saddle_gradient_into(z.as_slice(), &self.samples[p], self.cfg.rho, &mut self.scratch);
            let g = DVector::from_column_slice(&self.scratch);
            y += (&g - &self.sag_table[p]) * inv_m;
            self.sag_table[p] = g;
            self.sag_at[p] = k;
            picks.push(p);
        }

        let mut z_tilde = z.clone();
        for r in 0..d {
            z_tilde[r] -= eta1 * y[r];
            z_tilde[d + r] -= eta2 * y[d + r];
        }
        let payload = Arc::new(Payload { z_tilde, y_tilde: &y / self.out_degree as f64 });
        let consumed = self.buffer.iter().map(|r| (r.from, r.sent_at)).collect();
        self.buffer.clear();
        self.buffer.push(Reception { from: self.id, sent_at: k, payload: payload.clone() });
        self.z = z;
        self.y = y;
        Ok(Activation { picks, consumed, payload })
    }

    /// (1/m) sum_p g_p over this node's table.
    pub fn table_mass(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.z.len());
        for g in &self.sag_table {
            s += g;
        }
        s / self.m as f64
    }

    /// Sum of the buffered y~ vectors.
    pub fn buffered_mass(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.z.len());
        for r in &self.buffer {
            s += &r.payload.y_tilde;
        }
        s
    }
}

/// ||y_i||.
pub fn local_residual(node: &NodeState) -> f64 {
    node.y.norm()
}
