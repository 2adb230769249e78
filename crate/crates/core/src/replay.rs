//! Ring-buffer replay of mask-augmented transitions.
//!
//! Transitions are stored immediately with `mask = 0`; mentor feedback that
//! arrives later is attached through the `(env_id, step_idx)` key while the
//! transition is still resident.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action2D, Grid, Observation, STATE_DIM};
use crate::shaping::ShapingRecord;

const SNAPSHOT_MAGIC: &[u8; 4] = b"MDRB";
const SNAPSHOT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("transition has mask={mask} but feedback present={present}")]
    MaskMismatch { mask: bool, present: bool },
    #[error("buffer holds {len} transitions, cannot sample {requested}")]
    Undersized { len: usize, requested: usize },
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransitionKey {
    pub env_id: u32,
    pub step_idx: u64,
}

impl TransitionKey {
    pub fn new(env_id: u32, step_idx: u64) -> Self {
        Self { env_id, step_idx }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTransition {
    pub key: TransitionKey,
    pub obs: Arc<Observation>,
    pub action: Action2D,
    pub reward: f64,
    pub next_obs: Arc<Observation>,
    pub done: bool,
    pub vlm_feedback: Option<Action2D>,
    pub mask: bool,
    pub shaping: Option<ShapingRecord>,
}

impl AugmentedTransition {
    pub fn new(
        key: TransitionKey,
        obs: Arc<Observation>,
        action: Action2D,
        reward: f64,
        next_obs: Arc<Observation>,
        done: bool,
    ) -> Self {
        Self { key, obs, action, reward, next_obs, done, vlm_feedback: None, mask: false, shaping: None }
    }
}

/// Handle returned by `push`: ring slot plus global push sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotKey {
    pub slot: usize,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachOutcome {
    Attached,
    Dropped,
    Duplicate,
}

#[derive(Debug, Clone, Default)]
pub struct SampledBatch {
    pub obs: Vec<Arc<Observation>>,
    pub actions: Vec<Action2D>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<Arc<Observation>>,
    pub dones: Vec<f64>,
    pub vlm_actions: Vec<Option<Action2D>>,
    pub masks: Vec<f64>,
    pub indices: Vec<usize>,
}

impl SampledBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        self.masks.iter().filter(|m| **m > 0.0).count()
    }

    /// Builds a batch directly from transitions, preserving order.
    pub fn from_transitions<'a>(ts: impl IntoIterator<Item = &'a AugmentedTransition>) -> Self {
        let mut b = SampledBatch::default();
        for (i, t) in ts.into_iter().enumerate() {
            b.push(t, i);
        }
        b
    }

    fn push(&mut self, t: &AugmentedTransition, index: usize) {
        self.obs.push(Arc::clone(&t.obs));
        self.actions.push(t.action);
        self.rewards.push(t.reward);
        self.next_obs.push(Arc::clone(&t.next_obs));
        self.dones.push(if t.done { 1.0 } else { 0.0 });
        self.vlm_actions.push(t.vlm_feedback);
        self.masks.push(if t.mask { 1.0 } else { 0.0 });
        self.indices.push(index);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayCounters {
    pub pushed: u64,
    pub evicted: u64,
    pub attached: u64,
    pub dropped: u64,
    pub duplicates: u64,
    pub shaping_attached: u64,
}

#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    slots: Vec<AugmentedTransition>,
    seqs: Vec<u64>,
    next: usize,
    keys: HashMap<TransitionKey, (usize, u64)>,
    staleness_horizon: u64,
    counters: ReplayCounters,
    masked: usize,
    margin_sum: f64,
    margin_count: usize,
}

impl ReplayBuffer {
    pub const DEFAULT_CAPACITY: usize = 200_000;
    pub const DEFAULT_STALENESS: u64 = 5_000;

    pub fn new(capacity: usize) -> Result<Self, ReplayError> {
        Self::with_staleness(capacity, Self::DEFAULT_STALENESS)
    }

    pub fn with_staleness(capacity: usize, staleness_horizon: u64) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            slots: Vec::new(),
            seqs: Vec::new(),
            next: 0,
            keys: HashMap::new(),
            staleness_horizon,
            counters: ReplayCounters::default(),
            masked: 0,
            margin_sum: 0.0,
            margin_count: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn counters(&self) -> ReplayCounters {
        self.counters
    }

    pub fn get(&self, slot: usize) -> Option<&AugmentedTransition> {
        self.slots.get(slot)
    }

    pub fn iter(&self) -> impl Iterator<Item = &AugmentedTransition> {
        self.slots.iter()
    }

    pub fn lookup(&self, key: TransitionKey) -> Option<&AugmentedTransition> {
        self.keys.get(&key).map(|&(slot, _)| &self.slots[slot])
    }

    /// Fraction of resident transitions carrying mentor feedback.
    pub fn mask_fraction(&self) -> f64 {
        if self.slots.is_empty() {
            0.0
        } else {
            self.masked as f64 / self.slots.len() as f64
        }
    }

    /// Mean raw shaping margin over resident transitions that received one.
    pub fn margin_mean(&self) -> Option<f64> {
        (self.margin_count > 0).then(|| self.margin_sum / self.margin_count as f64)
    }

    fn forget(&mut self, slot: usize) {
        let old = &self.slots[slot];
        if self.keys.get(&old.key).is_some_and(|&(s, _)| s == slot) {
            self.keys.remove(&old.key);
        }
        if old.mask {
            self.masked -= 1;
        }
        if let Some(rec) = &old.shaping {
            self.margin_sum -= rec.r_raw;
            self.margin_count -= 1;
        }
        self.counters.evicted += 1;
    }

    pub fn push(&mut self, t: AugmentedTransition) -> Result<SlotKey, ReplayError> {
        if t.mask != t.vlm_feedback.is_some() {
            return Err(ReplayError::MaskMismatch { mask: t.mask, present: t.vlm_feedback.is_some() });
        }
        let seq = self.counters.pushed;
        let slot = self.next;
        if t.mask {
            self.masked += 1;
        }
        if let Some(rec) = &t.shaping {
            self.margin_sum += rec.r_raw;
            self.margin_count += 1;
        }
        let key = t.key;
        if slot < self.slots.len() {
            self.forget(slot);
            self.slots[slot] = t;
            self.seqs[slot] = seq;
        } else {
            self.slots.push(t);
            self.seqs.push(seq);
        }
        self.keys.insert(key, (slot, seq));
        self.next = (slot + 1) % self.capacity;
        self.counters.pushed += 1;
        Ok(SlotKey { slot, seq })
    }

    fn resolve(&mut self, key: TransitionKey) -> Option<usize> {
        let &(slot, seq) = self.keys.get(&key)?;
        if self.counters.pushed - seq > self.staleness_horizon {
            self.keys.remove(&key);
            return None;
        }
        Some(slot)
    }

    /// Late attachment of a mentor action to a resident transition.
    pub fn attach_feedback(&mut self, key: TransitionKey, feedback: Action2D) -> AttachOutcome {
        let Some(slot) = self.resolve(key) else {
            self.counters.dropped += 1;
            return AttachOutcome::Dropped;
        };
        let t = &mut self.slots[slot];
        if t.mask {
            self.counters.duplicates += 1;
            return AttachOutcome::Duplicate;
        }
        t.vlm_feedback = Some(feedback.clamped());
        t.mask = true;
        self.masked += 1;
        self.counters.attached += 1;
        AttachOutcome::Attached
    }

    /// Late attachment of a shaping bonus; the bonus is added to the stored reward.
    pub fn attach_shaping(&mut self, key: TransitionKey, record: ShapingRecord) -> AttachOutcome {
        let Some(slot) = self.resolve(key) else {
            self.counters.dropped += 1;
            return AttachOutcome::Dropped;
        };
        let t = &mut self.slots[slot];
        if t.shaping.is_some() {
            self.counters.duplicates += 1;
            return AttachOutcome::Duplicate;
        }
        t.reward += record.bonus;
        self.margin_sum += record.r_raw;
        self.margin_count += 1;
        t.shaping = Some(record);
        self.counters.shaping_attached += 1;
        AttachOutcome::Attached
    }

    /// Uniform sample without replacement, deterministic in `seed`.
    pub fn sample(&self, batch_size: usize, seed: u64) -> Result<SampledBatch, ReplayError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(batch_size, &mut rng)
    }

    pub fn sample_with<R: rand::Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<SampledBatch, ReplayError> {
        if self.slots.len() < batch_size || batch_size == 0 {
            return Err(ReplayError::Undersized { len: self.slots.len(), requested: batch_size });
        }
        let idx = rand::seq::index::sample(rng, self.slots.len(), batch_size);
        let mut b = SampledBatch::default();
        for i in idx.iter() {
            b.push(&self.slots[i], i);
        }
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReplayError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_u16::<LittleEndian>(SNAPSHOT_VERSION)?;
        w.write_u64::<LittleEndian>(self.capacity as u64)?;
        w.write_u64::<LittleEndian>(self.staleness_horizon)?;
        w.write_u64::<LittleEndian>(self.slots.len() as u64)?;
        // Oldest first so a reload reproduces eviction order.
        let start = if self.slots.len() == self.capacity { self.next } else { 0 };
        for k in 0..self.slots.len() {
            let t = &self.slots[(start + k) % self.slots.len()];
            w.write_u32::<LittleEndian>(t.key.env_id)?;
            w.write_u64::<LittleEndian>(t.key.step_idx)?;
            write_obs(&mut w, &t.obs)?;
            write_obs(&mut w, &t.next_obs)?;
            w.write_f64::<LittleEndian>(t.action.longitudinal)?;
            w.write_f64::<LittleEndian>(t.action.steer)?;
            w.write_f64::<LittleEndian>(t.reward)?;
            w.write_u8(t.done as u8)?;
            match t.vlm_feedback {
                Some(f) => {
                    w.write_u8(1)?;
                    w.write_f64::<LittleEndian>(f.longitudinal)?;
                    w.write_f64::<LittleEndian>(f.steer)?;
                }
                None => w.write_u8(0)?,
            }
            match &t.shaping {
                Some(r) => {
                    w.write_u8(1)?;
                    for v in [r.r_raw, r.r_vlm, r.bonus] {
                        w.write_f64::<LittleEndian>(v)?;
                    }
                }
                None => w.write_u8(0)?,
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReplayError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(ReplayError::Snapshot("bad magic".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != SNAPSHOT_VERSION {
            return Err(ReplayError::Snapshot(format!("unsupported version {version}")));
        }
        let capacity = r.read_u64::<LittleEndian>()? as usize;
        let staleness = r.read_u64::<LittleEndian>()?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        if n > capacity {
            return Err(ReplayError::Snapshot("length exceeds capacity".into()));
        }
        let mut buf = Self::with_staleness(capacity, staleness)?;
        for _ in 0..n {
            let key = TransitionKey::new(r.read_u32::<LittleEndian>()?, r.read_u64::<LittleEndian>()?);
            let obs = Arc::new(read_obs(&mut r)?);
            let next_obs = Arc::new(read_obs(&mut r)?);
            let action = Action2D::new(r.read_f64::<LittleEndian>()?, r.read_f64::<LittleEndian>()?);
            let reward = r.read_f64::<LittleEndian>()?;
            let done = r.read_u8()? != 0;
            let mut t = AugmentedTransition::new(key, obs, action, reward, next_obs, done);
            if r.read_u8()? != 0 {
                t.vlm_feedback =
                    Some(Action2D::new(r.read_f64::<LittleEndian>()?, r.read_f64::<LittleEndian>()?));
                t.mask = true;
            }
            if r.read_u8()? != 0 {
                t.shaping = Some(ShapingRecord {
                    r_raw: r.read_f64::<LittleEndian>()?,
                    r_vlm: r.read_f64::<LittleEndian>()?,
                    bonus: r.read_f64::<LittleEndian>()?,
                });
            }
            buf.push(t)?;
        }
        Ok(buf)
    }
}

fn write_obs<W: Write>(w: &mut W, o: &Observation) -> std::io::Result<()> {
    for d in [o.grid.channels, o.grid.height, o.grid.width] {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    w.write_all(&o.grid.data)?;
    for v in o.state_vec {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_obs<R: Read>(r: &mut R) -> Result<Observation, ReplayError> {
    let channels = r.read_u32::<LittleEndian>()? as usize;
    let height = r.read_u32::<LittleEndian>()? as usize;
    let width = r.read_u32::<LittleEndian>()? as usize;
    let len = channels
        .checked_mul(height)
        .and_then(|x| x.checked_mul(width))
        .filter(|&l| l <= 1 << 24)
        .ok_or_else(|| ReplayError::Snapshot("grid too large".into()))?;
    let mut data = vec![0u8; len];
    r.read_exact(&mut data)?;
    let mut state_vec = [0.0; STATE_DIM];
    for v in &mut state_vec {
        *v = r.read_f64::<LittleEndian>()?;
    }
    Ok(Observation { grid: Grid { channels, height, width, data }, state_vec })
}

/// Replay buffer behind a mutex, shared by the rollout, feedback and learner paths.
#[derive(Debug, Clone)]
pub struct SharedReplay(Arc<Mutex<ReplayBuffer>>);

impl SharedReplay {
    pub fn new(buffer: ReplayBuffer) -> Self {
        Self(Arc::new(Mutex::new(buffer)))
    }

    pub fn lock(&self) -> MutexGuard<'_, ReplayBuffer> {
        self.0.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn push(&self, t: AugmentedTransition) -> Result<SlotKey, ReplayError> {
        self.lock().push(t)
    }

    pub fn attach_feedback(&self, key: TransitionKey, feedback: Action2D) -> AttachOutcome {
        self.lock().attach_feedback(key, feedback)
    }

    pub fn sample(&self, batch_size: usize, seed: u64) -> Result<SampledBatch, ReplayError> {
        self.lock().sample(batch_size, seed)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.lock().is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(x: f64) -> Arc<Observation> {
        let mut state_vec = [0.0; STATE_DIM];
        state_vec[0] = x;
        Arc::new(Observation { grid: Grid::empty(), state_vec })
    }

    fn tr(env: u32, step: u64) -> AugmentedTransition {
        AugmentedTransition::new(TransitionKey::new(env, step), obs(step as f64), Action2D::new(0.1, 0.0), 1.0, obs(step as f64 + 1.0), false)
    }

    #[test]
    fn ring_semantics() {
        let mut b = ReplayBuffer::new(3).unwrap();
        b.push(tr(0, 0)).unwrap();
        assert_eq!(b.len(), 1);
        for s in 1..4 {
            b.push(tr(0, s)).unwrap();
        }
        assert_eq!(b.len(), 3);
        assert!(b.lookup(TransitionKey::new(0, 0)).is_none());
        assert_eq!(b.counters().pushed, b.len() as u64 + b.counters().evicted);
    }

    #[test]
    fn mask_invariant_enforced() {
        let mut b = ReplayBuffer::new(3).unwrap();
        let mut t = tr(0, 0);
        t.vlm_feedback = Some(Action2D::new(0.0, 0.0));
        assert!(matches!(b.push(t), Err(ReplayError::MaskMismatch { .. })));
    }

    #[test]
    fn attach_paths() {
        let mut b = ReplayBuffer::new(2).unwrap();
        b.push(tr(1, 0)).unwrap();
        b.push(tr(1, 1)).unwrap();
        let k = TransitionKey::new(1, 1);
        assert_eq!(b.attach_feedback(k, Action2D::new(0.5, 0.1)), AttachOutcome::Attached);
        assert!(b.lookup(k).unwrap().mask);
        assert_eq!(b.attach_feedback(k, Action2D::new(0.0, 0.0)), AttachOutcome::Duplicate);
        assert_eq!(b.lookup(k).unwrap().vlm_feedback, Some(Action2D::new(0.5, 0.1)));
        b.push(tr(1, 2)).unwrap();
        assert_eq!(b.attach_feedback(TransitionKey::new(1, 0), Action2D::new(0.0, 0.0)), AttachOutcome::Dropped);
        assert_eq!(b.counters().dropped, 1);
        assert_eq!(b.counters().duplicates, 1);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn stale_keys_drop() {
        let mut b = ReplayBuffer::with_staleness(100, 2).unwrap();
        for s in 0..4 {
            b.push(tr(0, s)).unwrap();
        }
        assert_eq!(b.attach_feedback(TransitionKey::new(0, 0), Action2D::new(0.0, 0.0)), AttachOutcome::Dropped);
        assert_eq!(b.attach_feedback(TransitionKey::new(0, 3), Action2D::new(0.0, 0.0)), AttachOutcome::Attached);
    }

    #[test]
    fn shaping_adds_bonus_and_tracks_margin() {
        let mut b = ReplayBuffer::new(2).unwrap();
        b.push(tr(0, 0)).unwrap();
        let rec = ShapingRecord { r_raw: 0.4, r_vlm: 0.5, bonus: 0.05 };
        assert_eq!(b.attach_shaping(TransitionKey::new(0, 0), rec.clone()), AttachOutcome::Attached);
        assert_eq!(b.lookup(TransitionKey::new(0, 0)).unwrap().reward, 1.05);
        assert_eq!(b.margin_mean(), Some(0.4));
        b.push(tr(0, 1)).unwrap();
        b.push(tr(0, 2)).unwrap();
        assert_eq!(b.margin_mean(), None);
    }

    #[test]
    fn sampling_is_distinct_and_deterministic() {
        let mut b = ReplayBuffer::new(1000).unwrap();
        for s in 0..1000 {
            b.push(tr(0, s)).unwrap();
        }
        let x = b.sample(32, 9).unwrap();
        let mut idx = x.indices.clone();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 32);
        assert_eq!(x.indices, b.sample(32, 9).unwrap().indices);
        assert!(matches!(ReplayBuffer::new(5).unwrap().sample(1, 0), Err(ReplayError::Undersized { .. })));
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for s in 0..5 {
            b.push(tr(2, s)).unwrap();
        }
        b.attach_feedback(TransitionKey::new(2, 4), Action2D::new(-0.3, 0.2));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("replay.bin");
        b.save(&p).unwrap();
        let c = ReplayBuffer::load(&p).unwrap();
        assert_eq!(c.len(), 3);
        for s in 2..5 {
            let k = TransitionKey::new(2, s);
            assert_eq!(b.lookup(k), c.lookup(k));
        }
    }
}
