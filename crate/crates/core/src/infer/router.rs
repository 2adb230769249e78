use std::collections::{BTreeMap, HashSet, VecDeque};

use super::InferenceResponse;
use crate::replay::TransitionKey;

const SEEN_CAPACITY: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routed {
    Queued,
    Late,
    Duplicate,
}

/// Output side of the service: per-env response queues with at-most-once
/// delivery per key.
#[derive(Debug, Clone)]
pub struct Router {
    deadline: f64,
    queues: BTreeMap<u32, VecDeque<InferenceResponse>>,
    seen: HashSet<TransitionKey>,
    seen_order: VecDeque<TransitionKey>,
    pub delivered: u64,
    pub delivered_with_feedback: u64,
    pub late: u64,
    pub duplicates: u64,
}

impl Router {
    pub fn new(deadline: f64) -> Self {
        Self {
            deadline,
            queues: BTreeMap::new(),
            seen: HashSet::new(),
            seen_order: VecDeque::new(),
            delivered: 0,
            delivered_with_feedback: 0,
            late: 0,
            duplicates: 0,
        }
    }

    fn remember(&mut self, key: TransitionKey) -> bool {
        if !self.seen.insert(key) {
            return false;
        }
        self.seen_order.push_back(key);
        if self.seen_order.len() > SEEN_CAPACITY {
            let old = self.seen_order.pop_front().unwrap();
            self.seen.remove(&old);
        }
        true
    }

    /// Routes a model response; responses past the deadline are discarded.
    pub fn deliver(&mut self, resp: InferenceResponse) -> Routed {
        if !self.remember(resp.key) {
            self.duplicates += 1;
            return Routed::Duplicate;
        }
        if resp.service_time > self.deadline {
            self.late += 1;
            return Routed::Late;
        }
        self.delivered += 1;
        if resp.mask() {
            self.delivered_with_feedback += 1;
        }
        self.queues.entry(resp.key.env_id).or_default().push_back(resp);
        Routed::Queued
    }

    /// Queues a `mask = 0` notice for a request the batcher dropped. Counted
    /// by the batcher, not here.
    pub fn notify_dropped(&mut self, key: TransitionKey, service_time: f64) {
        if self.remember(key) {
            self.queues.entry(key.env_id).or_default().push_back(InferenceResponse { key, feedback: None, service_time });
        }
    }

    pub fn poll(&mut self, env_id: u32) -> Vec<InferenceResponse> {
        self.queues.get_mut(&env_id).map(|q| q.drain(..).collect()).unwrap_or_default()
    }

    pub fn poll_all(&mut self) -> Vec<InferenceResponse> {
        self.queues.values_mut().flat_map(|q| q.drain(..)).collect()
    }

    pub fn pending(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }
}
