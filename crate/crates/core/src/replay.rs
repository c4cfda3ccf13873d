//! Proportional prioritized experience replay.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::Action;
use crate::env::{Transition, OBS_DIM};

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("buffer holds {size} transitions, cannot sample a batch of {batch}")]
    Undersized { size: usize, batch: usize },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a replay snapshot (bad magic)")]
    BadMagic,
    #[error("unsupported replay snapshot version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt replay snapshot: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, ReplayError>;

/// Binary tree of partial sums over a power-of-two number of leaves.
/// Node 1 is the root; leaf `i` lives at `leaves + i`.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        Self {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, leaf: usize) -> f64 {
        self.nodes[self.leaves + leaf]
    }

    /// Set a leaf and recompute every ancestor from its children, so internal
    /// nodes never accumulate drift.
    pub fn set(&mut self, leaf: usize, priority: f64) {
        let mut node = self.leaves + leaf;
        self.nodes[node] = priority;
        while node > 1 {
            node /= 2;
            self.nodes[node] = self.nodes[2 * node] + self.nodes[2 * node + 1];
        }
    }

    /// Leaf whose cumulative interval contains `mass`.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut node = 1;
        while node < self.leaves {
            let left = 2 * node;
            if mass < self.nodes[left] || self.nodes[left + 1] == 0.0 {
                node = left;
            } else {
                mass -= self.nodes[left];
                node = left + 1;
            }
        }
        node - self.leaves
    }

    /// Every internal node equals the sum of its children.
    pub fn is_consistent(&self) -> bool {
        (1..self.leaves).all(|n| self.nodes[n] == self.nodes[2 * n] + self.nodes[2 * n + 1])
    }

    pub fn leaf_sum(&self) -> f64 {
        self.nodes[self.leaves..].iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub capacity: usize,
    /// Priority exponent.
    pub alpha: f64,
    /// Added to |δ| so no transition becomes unsampleable.
    pub eps: f64,
    /// Importance-sampling exponent at the start of training.
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 1 << 20,
            alpha: 0.6,
            eps: 1e-3,
            beta_start: 0.4,
            beta_end: 1.0,
        }
    }
}

impl ReplayConfig {
    /// Linear annealing of β over `total` steps.
    pub fn beta_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.beta_end;
        }
        let frac = (step as f64 / (total - 1) as f64).min(1.0);
        self.beta_start + (self.beta_end - self.beta_start) * frac
    }
}

/// Handle to a sampled slot. The generation detects slots overwritten since
/// sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleIndex {
    pub slot: usize,
    pub generation: u64,
}

#[derive(Debug, Clone)]
pub struct SampledBatch<T> {
    pub items: Vec<T>,
    pub indices: Vec<SampleIndex>,
    /// Importance weights normalized by the batch maximum.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReplayStats {
    pub pushes: u64,
    pub stale_updates: u64,
}

#[derive(Debug, Clone)]
pub struct PrioritizedBuffer<T> {
    config: ReplayConfig,
    tree: SumTree,
    items: Vec<Option<T>>,
    generations: Vec<u64>,
    next: usize,
    len: usize,
    max_priority: f64,
    stats: ReplayStats,
}

impl<T: Clone> PrioritizedBuffer<T> {
    pub fn new(config: ReplayConfig) -> Self {
        let capacity = config.capacity.max(1);
        Self {
            config,
            tree: SumTree::new(capacity),
            items: vec![None; capacity],
            generations: vec![0; capacity],
            next: 0,
            len: 0,
            max_priority: 1.0,
            stats: ReplayStats::default(),
        }
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.items.len()
    }

    pub fn stats(&self) -> ReplayStats {
        self.stats
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn priority_of(&self, seed: f64) -> f64 {
        (seed.abs() + self.config.eps).powf(self.config.alpha)
    }

    fn insert(&mut self, item: T, priority: f64) -> SampleIndex {
        let slot = self.next;
        self.items[slot] = Some(item);
        self.stats.pushes += 1;
        self.generations[slot] = self.stats.pushes;
        self.tree.set(slot, priority);
        self.max_priority = self.max_priority.max(priority);
        self.next = (self.next + 1) % self.capacity();
        self.len = (self.len + 1).min(self.capacity());
        SampleIndex {
            slot,
            generation: self.generations[slot],
        }
    }

    /// Store with leaf priority `(|priority_seed| + eps)^alpha`, evicting the
    /// oldest entry when full.
    pub fn push(&mut self, item: T, priority_seed: f64) -> SampleIndex {
        let p = self.priority_of(priority_seed);
        self.insert(item, p)
    }

    /// Store at the largest priority seen so far, so it is sampled soon.
    pub fn push_max(&mut self, item: T) -> SampleIndex {
        let p = self.max_priority;
        self.insert(item, p)
    }

    /// Stratified proportional sampling: the total mass is cut into `batch`
    /// equal segments and one leaf is drawn from each.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, beta: f64, rng: &mut R) -> Result<SampledBatch<T>> {
        if batch == 0 || self.len < batch {
            return Err(ReplayError::Undersized { size: self.len, batch });
        }
        let total = self.tree.total();
        let segment = total / batch as f64;
        let n = self.len as f64;
        let mut out = SampledBatch {
            items: Vec::with_capacity(batch),
            indices: Vec::with_capacity(batch),
            weights: Vec::with_capacity(batch),
        };
        for i in 0..batch {
            let lo = segment * i as f64;
            let mass = lo + rng.random::<f64>() * segment;
            let mut slot = self.tree.find(mass.min(total));
            if slot >= self.len || self.tree.get(slot) == 0.0 {
                // Round-off at the right edge can land on an empty leaf.
                slot = (0..self.len).rev().find(|&s| self.tree.get(s) > 0.0).unwrap_or(0);
            }
            let prob = self.tree.get(slot) / total;
            out.weights.push((n * prob).powf(-beta));
            out.items.push(self.items[slot].clone().expect("occupied slot"));
            out.indices.push(SampleIndex {
                slot,
                generation: self.generations[slot],
            });
        }
        let max_w = out.weights.iter().cloned().fold(f64::MIN, f64::max);
        for w in &mut out.weights {
            *w /= max_w;
        }
        Ok(out)
    }

    /// Refresh priorities from TD errors. Returns how many handles were stale.
    pub fn update_priorities(&mut self, indices: &[SampleIndex], td_errors: &[f64]) -> usize {
        let mut stale = 0;
        for (idx, td) in indices.iter().zip(td_errors) {
            if idx.slot >= self.len || self.generations[idx.slot] != idx.generation {
                stale += 1;
                continue;
            }
            let p = self.priority_of(*td);
            self.tree.set(idx.slot, p);
            self.max_priority = self.max_priority.max(p);
        }
        self.stats.stale_updates += stale as u64;
        stale
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"PSRB";
const SNAPSHOT_VERSION: u32 = 1;

struct Le<W>(W);

impl<W: Write> Le<W> {
    fn u8(&mut self, v: u8) -> std::io::Result<()> {
        self.0.write_all(&[v])
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
}

struct LeRead<R>(R);

impl<R: Read> LeRead<R> {
    fn bytes<const N: usize>(&mut self) -> std::io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }
    fn u8(&mut self) -> std::io::Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> std::io::Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> std::io::Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

impl PrioritizedBuffer<Transition> {
    /// Flat little-endian record stream:
    ///
    /// ```text
    /// "PSRB" u32:version u32:obs_dim
    /// u64:capacity f64:alpha f64:eps f64:beta_start f64:beta_end
    /// f64:max_priority u64:next u64:len u64:pushes u64:stale_updates
    /// len × { u64:slot u64:generation f64:priority
    ///         obs_dim×f64 u8:action f64:reward obs_dim×f64 u8:terminal }
    /// ```
    pub fn save<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = Le(sink);
        w.0.write_all(SNAPSHOT_MAGIC)?;
        w.u32(SNAPSHOT_VERSION)?;
        w.u32(OBS_DIM as u32)?;
        w.u64(self.capacity() as u64)?;
        for v in [self.config.alpha, self.config.eps, self.config.beta_start, self.config.beta_end, self.max_priority] {
            w.f64(v)?;
        }
        for v in [self.next as u64, self.len as u64, self.stats.pushes, self.stats.stale_updates] {
            w.u64(v)?;
        }
        for slot in 0..self.len {
            let t = self.items[slot].as_ref().expect("occupied slot");
            w.u64(slot as u64)?;
            w.u64(self.generations[slot])?;
            w.f64(self.tree.get(slot))?;
            for v in t.obs {
                w.f64(v)?;
            }
            w.u8(t.action.index() as u8)?;
            w.f64(t.reward)?;
            for v in t.next_obs {
                w.f64(v)?;
            }
            w.u8(u8::from(t.terminal))?;
        }
        w.0.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(source: R) -> Result<Self> {
        let mut r = LeRead(source);
        if &r.bytes::<4>()? != SNAPSHOT_MAGIC {
            return Err(ReplayError::BadMagic);
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(ReplayError::UnsupportedVersion(version));
        }
        let dim = r.u32()? as usize;
        if dim != OBS_DIM {
            return Err(ReplayError::Corrupt(format!("observation width {dim}, expected {OBS_DIM}")));
        }
        let capacity = r.u64()? as usize;
        let config = ReplayConfig {
            capacity,
            alpha: r.f64()?,
            eps: r.f64()?,
            beta_start: r.f64()?,
            beta_end: r.f64()?,
        };
        let mut buf = Self::new(config);
        buf.max_priority = r.f64()?;
        buf.next = r.u64()? as usize;
        buf.len = r.u64()? as usize;
        buf.stats.pushes = r.u64()?;
        buf.stats.stale_updates = r.u64()?;
        if buf.len > capacity || buf.next >= capacity.max(1) {
            return Err(ReplayError::Corrupt("cursor outside capacity".into()));
        }
        for _ in 0..buf.len {
            let slot = r.u64()? as usize;
            if slot >= buf.len {
                return Err(ReplayError::Corrupt(format!("slot {slot} outside stored range")));
            }
            buf.generations[slot] = r.u64()?;
            let priority = r.f64()?;
            let mut obs = [0.0; OBS_DIM];
            for v in &mut obs {
                *v = r.f64()?;
            }
            let action = Action::from_index(r.u8()? as usize).ok_or_else(|| ReplayError::Corrupt("bad action".into()))?;
            let reward = r.f64()?;
            let mut next_obs = [0.0; OBS_DIM];
            for v in &mut next_obs {
                *v = r.f64()?;
            }
            let terminal = r.u8()? != 0;
            buf.items[slot] = Some(Transition {
                obs,
                action,
                reward,
                next_obs,
                terminal,
            });
            buf.tree.set(slot, priority);
        }
        if buf.items[..buf.len].iter().any(Option::is_none) {
            return Err(ReplayError::Corrupt("missing slots".into()));
        }
        Ok(buf)
    }
}
