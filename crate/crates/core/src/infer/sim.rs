use std::collections::VecDeque;
use std::sync::Arc;

use super::router::Router;
use super::{run_model, BatchModel, Batcher, BatcherConfig, BatcherStats, InferError, InferenceClient, InferenceRequest, InferenceResponse, SubmitOutcome};

/// Single-server batching on a virtual clock. The model runs inline and its
/// injected latency only moves the clock, so runs are reproducible.
pub struct SimulatedService {
    batcher: Batcher,
    router: Router,
    model: Arc<dyn BatchModel>,
    now: f64,
    busy_until: f64,
    /// Completion-ordered: one server, so batches finish in dispatch order.
    in_flight: VecDeque<(f64, InferenceResponse)>,
    failures: u64,
}

impl SimulatedService {
    pub fn new(cfg: BatcherConfig, model: Arc<dyn BatchModel>) -> Result<Self, InferError> {
        cfg.validate()?;
        Ok(Self {
            router: Router::new(cfg.response_deadline),
            batcher: Batcher::new(cfg),
            model,
            now: 0.0,
            busy_until: 0.0,
            in_flight: VecDeque::new(),
            failures: 0,
        })
    }

    pub fn depth(&self) -> usize {
        self.batcher.depth()
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn poll(&mut self, env_id: u32) -> Vec<InferenceResponse> {
        self.router.poll(env_id)
    }

    fn run_until(&mut self, now: f64) {
        while let Some(ready) = self.batcher.ready_at() {
            let t = ready.max(self.busy_until);
            if t > now {
                break;
            }
            let Some(batch) = self.batcher.form_batch(t) else { break };
            let (results, latency) = run_model(self.model.as_ref(), &batch);
            let done = t + latency.as_secs_f64();
            self.busy_until = done;
            for (req, feedback) in batch.into_iter().zip(results) {
                if feedback.is_none() {
                    self.failures += 1;
                }
                self.in_flight.push_back((done, InferenceResponse { key: req.key, feedback, service_time: done - req.submit_time }));
            }
        }
        while self.in_flight.front().is_some_and(|(t, _)| *t <= now) {
            let (_, resp) = self.in_flight.pop_front().unwrap();
            self.router.deliver(resp);
        }
        self.now = self.now.max(now);
    }
}

impl InferenceClient for SimulatedService {
    fn now(&self) -> f64 {
        self.now
    }

    fn submit(&mut self, req: InferenceRequest) -> SubmitOutcome {
        let (outcome, evicted) = self.batcher.submit(req, self.now);
        if let Some(old) = evicted {
            self.router.notify_dropped(old.key, self.now - old.submit_time);
        }
        outcome
    }

    fn advance(&mut self, now: f64) {
        self.run_until(now);
    }

    fn poll_all(&mut self) -> Vec<InferenceResponse> {
        self.router.poll_all()
    }

    fn stats(&self) -> BatcherStats {
        let mut s = self.batcher.stats().clone();
        s.delivered = self.router.delivered;
        s.delivered_with_feedback = self.router.delivered_with_feedback;
        s.dropped_late = self.router.late;
        s.duplicates_suppressed = self.router.duplicates;
        s.model_failures = self.failures;
        s
    }

    fn shutdown(&mut self) -> BatcherStats {
        let last = self.in_flight.iter().map(|(t, _)| *t).fold(self.now, f64::max);
        for (_, resp) in std::mem::take(&mut self.in_flight) {
            self.router.deliver(resp);
        }
        self.now = last;
        for req in self.batcher.drain() {
            self.router.notify_dropped(req.key, self.now - req.submit_time);
        }
        self.stats()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Action2D;
    use crate::infer::{Feedback, ModelError};
    use std::time::Duration;

    struct Slow(Duration);

    impl BatchModel for Slow {
        fn infer(&self, batch: &[InferenceRequest]) -> Vec<Result<Feedback, ModelError>> {
            batch.iter().map(|_| Ok(Feedback::action(Action2D::new(0.2, 0.0)))).collect()
        }

        fn latency(&self, _req: &InferenceRequest) -> Duration {
            self.0
        }
    }

    #[test]
    fn twelve_requests_two_batches() {
        let mut s = SimulatedService::new(BatcherConfig::default(), Arc::new(Slow(Duration::from_millis(5)))).unwrap();
        for i in 0..12 {
            s.submit(InferenceRequest::new(0, i, vec![]));
        }
        s.advance(0.004);
        assert!(s.poll_all().is_empty());
        s.advance(0.005);
        assert_eq!(s.poll_all().len(), 8);
        s.advance(0.0249);
        assert!(s.poll_all().is_empty());
        s.advance(0.025);
        assert_eq!(s.poll_all().len(), 4);
        let st = s.stats();
        assert_eq!(st.size_histogram[8], 1);
        assert_eq!(st.size_histogram[4], 1);
    }

    #[test]
    fn late_responses_are_dropped() {
        let cfg = BatcherConfig { response_deadline: 0.01, ..Default::default() };
        let mut s = SimulatedService::new(cfg, Arc::new(Slow(Duration::from_millis(50)))).unwrap();
        s.submit(InferenceRequest::new(0, 0, vec![]));
        s.advance(1.0);
        assert!(s.poll_all().is_empty());
        assert_eq!(s.stats().dropped_late, 1);
    }
}
