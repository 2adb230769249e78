use std::collections::VecDeque;

use super::{BatcherConfig, BatcherStats, DropPolicy, InferenceRequest, SubmitOutcome};

const TIME_EPS: f64 = 1e-12;

/// FIFO request queue with the `(max_batch, timeout)` dispatch rule. Owns no
/// threads; servers drive it.
#[derive(Debug, Clone)]
pub struct Batcher {
    cfg: BatcherConfig,
    queue: VecDeque<InferenceRequest>,
    stats: BatcherStats,
}

impl Batcher {
    pub fn new(cfg: BatcherConfig) -> Self {
        let hist = vec![0; cfg.max_batch + 1];
        Self { cfg, queue: VecDeque::new(), stats: BatcherStats { size_histogram: hist, ..Default::default() } }
    }

    pub fn config(&self) -> &BatcherConfig {
        &self.cfg
    }

    pub fn depth(&self) -> usize {
        self.queue.len()
    }

    pub fn stats(&self) -> &BatcherStats {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut BatcherStats {
        &mut self.stats
    }

    /// Enqueues `req` stamped at `now`. Under drop-oldest the evicted request
    /// is returned so the caller can resolve it with `mask = 0`.
    pub fn submit(&mut self, mut req: InferenceRequest, now: f64) -> (SubmitOutcome, Option<InferenceRequest>) {
        self.stats.submitted += 1;
        req.submit_time = now;
        let mut evicted = None;
        if self.queue.len() >= self.cfg.queue_capacity {
            match self.cfg.drop_policy {
                DropPolicy::Reject => {
                    self.stats.rejected += 1;
                    self.stats.dropped_policy += 1;
                    return (SubmitOutcome::Rejected, None);
                }
                DropPolicy::DropOldest => {
                    let old = self.queue.pop_front().expect("capacity is positive");
                    self.stats.evicted += 1;
                    self.stats.dropped_policy += 1;
                    evicted = Some(old);
                }
            }
        }
        self.stats.accepted += 1;
        self.queue.push_back(req);
        let outcome = match &evicted {
            Some(old) => SubmitOutcome::AcceptedEvicting(old.key),
            None => SubmitOutcome::Accepted,
        };
        (outcome, evicted)
    }

    fn visible(&self, now: f64) -> usize {
        self.queue.iter().take_while(|r| r.submit_time <= now + TIME_EPS).count()
    }

    /// Earliest time a batch can be formed from the current queue.
    pub fn ready_at(&self) -> Option<f64> {
        let head = self.queue.front()?;
        let timeout_at = head.submit_time + self.cfg.timeout;
        Some(match self.queue.get(self.cfg.max_batch - 1) {
            Some(r) => r.submit_time.min(timeout_at),
            None => timeout_at,
        })
    }

    /// Dispatches `max_batch` oldest requests when that many are queued, or
    /// everything queued (up to `max_batch`) once the head has waited
    /// `timeout`. Requests submitted after `now` are not visible.
    pub fn form_batch(&mut self, now: f64) -> Option<Vec<InferenceRequest>> {
        let visible = self.visible(now);
        if visible == 0 {
            return None;
        }
        let take = if visible >= self.cfg.max_batch {
            self.cfg.max_batch
        } else if now + TIME_EPS >= self.queue[0].submit_time + self.cfg.timeout {
            self.stats.timeouts_fired += 1;
            visible
        } else {
            return None;
        };
        let batch: Vec<_> = self.queue.drain(..take).collect();
        self.stats.batches_formed += 1;
        self.stats.size_histogram[take] += 1;
        self.stats.dispatched += take as u64;
        self.stats.total_wait += batch.iter().map(|r| (now - r.submit_time).max(0.0)).sum::<f64>();
        Some(batch)
    }

    /// Removes every queued request, counting them as dropped by policy.
    pub fn drain(&mut self) -> Vec<InferenceRequest> {
        self.stats.dropped_policy += self.queue.len() as u64;
        self.queue.drain(..).collect()
    }
}
