use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::router::Router;
use super::{
    run_model, BatchModel, Batcher, BatcherConfig, BatcherStats, InferError, InferenceClient, InferenceRequest,
    InferenceResponse, SubmitOutcome,
};
use crate::replay::TransitionKey;

/// Queue operations in the order they took effect, for linearizability checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueueEvent {
    Submit { key: TransitionKey, outcome: SubmitOutcome },
    Form { keys: Vec<TransitionKey> },
    Poll { env_id: u32, keys: Vec<TransitionKey> },
    Drain { keys: Vec<TransitionKey> },
}

struct Inner {
    start: Instant,
    state: Mutex<Batcher>,
    cv: Condvar,
    router: Mutex<Router>,
    stop: AtomicBool,
    failures: Mutex<u64>,
    history: Option<Mutex<Vec<QueueEvent>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Inner {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn record(&self, ev: impl FnOnce() -> QueueEvent) {
        if let Some(h) = &self.history {
            lock(h).push(ev());
        }
    }
}

/// Batching server on a dedicated thread. Submit and poll never wait for the
/// model; the server sleeps at most until the next dispatch deadline.
pub struct InferenceService {
    inner: Arc<Inner>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl InferenceService {
    pub fn start(cfg: BatcherConfig, model: Arc<dyn BatchModel>) -> Result<Self, InferError> {
        Self::spawn(cfg, model, false)
    }

    /// Like [`start`](Self::start) but records every queue operation.
    pub fn start_recording(cfg: BatcherConfig, model: Arc<dyn BatchModel>) -> Result<Self, InferError> {
        Self::spawn(cfg, model, true)
    }

    fn spawn(cfg: BatcherConfig, model: Arc<dyn BatchModel>, record: bool) -> Result<Self, InferError> {
        cfg.validate()?;
        let inner = Arc::new(Inner {
            start: Instant::now(),
            router: Mutex::new(Router::new(cfg.response_deadline)),
            state: Mutex::new(Batcher::new(cfg)),
            cv: Condvar::new(),
            stop: AtomicBool::new(false),
            failures: Mutex::new(0),
            history: record.then(|| Mutex::new(Vec::new())),
        });
        let shared = Arc::clone(&inner);
        let worker = std::thread::Builder::new()
            .name("infer-server".into())
            .spawn(move || serve_loop(&shared, model.as_ref()))
            .expect("spawn inference server");
        Ok(Self { inner, worker: Mutex::new(Some(worker)) })
    }

    pub fn now(&self) -> f64 {
        self.inner.now()
    }

    pub fn submit(&self, req: InferenceRequest) -> SubmitOutcome {
        if self.inner.stop.load(Ordering::Acquire) {
            return SubmitOutcome::Rejected;
        }
        let key = req.key;
        let (outcome, evicted, wake) = {
            let mut b = lock(&self.inner.state);
            let now = self.inner.now();
            let (outcome, evicted) = b.submit(req, now);
            self.inner.record(|| QueueEvent::Submit { key, outcome: outcome.clone() });
            let depth = b.depth();
            (outcome, evicted, depth == 1 || depth == b.config().max_batch)
        };
        if wake {
            self.inner.cv.notify_one();
        }
        if let Some(old) = evicted {
            let t = self.inner.now() - old.submit_time;
            lock(&self.inner.router).notify_dropped(old.key, t);
        }
        outcome
    }

    pub fn poll(&self, env_id: u32) -> Vec<InferenceResponse> {
        let mut r = lock(&self.inner.router);
        let out = r.poll(env_id);
        self.inner.record(|| QueueEvent::Poll { env_id, keys: out.iter().map(|x| x.key).collect() });
        out
    }

    pub fn poll_all_envs(&self) -> Vec<InferenceResponse> {
        lock(&self.inner.router).poll_all()
    }

    pub fn depth(&self) -> usize {
        lock(&self.inner.state).depth()
    }

    pub fn stats(&self) -> BatcherStats {
        let mut s = lock(&self.inner.state).stats().clone();
        let r = lock(&self.inner.router);
        s.delivered = r.delivered;
        s.delivered_with_feedback = r.delivered_with_feedback;
        s.dropped_late = r.late;
        s.duplicates_suppressed = r.duplicates;
        s.model_failures = *lock(&self.inner.failures);
        s
    }

    pub fn history(&self) -> Vec<QueueEvent> {
        self.inner.history.as_ref().map(|h| lock(h).clone()).unwrap_or_default()
    }

    /// Stops the server thread, drops whatever is still queued and returns
    /// the final counters. In-flight batches finish first.
    pub fn stop(&self) -> BatcherStats {
        let worker = lock(&self.worker).take();
        if let Some(w) = worker {
            self.inner.stop.store(true, Ordering::Release);
            self.inner.cv.notify_all();
            let _ = w.join();
            let drained = {
                let mut b = lock(&self.inner.state);
                let d = b.drain();
                self.inner.record(|| QueueEvent::Drain { keys: d.iter().map(|r| r.key).collect() });
                d
            };
            let now = self.inner.now();
            let mut r = lock(&self.inner.router);
            for req in drained {
                r.notify_dropped(req.key, now - req.submit_time);
            }
        }
        self.stats()
    }
}

impl Drop for InferenceService {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_loop(inner: &Inner, model: &dyn BatchModel) {
    loop {
        let batch = {
            let mut b = lock(&inner.state);
            loop {
                if inner.stop.load(Ordering::Acquire) {
                    return;
                }
                let now = inner.now();
                if let Some(batch) = b.form_batch(now) {
                    inner.record(|| QueueEvent::Form { keys: batch.iter().map(|r| r.key).collect() });
                    break batch;
                }
                let wait = b.ready_at().map_or(Duration::from_millis(50), |t| {
                    Duration::from_secs_f64((t - now).max(0.0)) + Duration::from_micros(20)
                });
                b = inner.cv.wait_timeout(b, wait).unwrap_or_else(|e| e.into_inner()).0;
            }
        };
        let (results, latency) = run_model(model, &batch);
        if !latency.is_zero() {
            std::thread::sleep(latency);
        }
        let failed = results.iter().filter(|r| r.is_none()).count() as u64;
        if failed > 0 {
            *lock(&inner.failures) += failed;
        }
        let now = inner.now();
        let mut router = lock(&inner.router);
        for (req, feedback) in batch.into_iter().zip(results) {
            router.deliver(InferenceResponse { key: req.key, feedback, service_time: now - req.submit_time });
        }
    }
}

impl InferenceClient for InferenceService {
    fn now(&self) -> f64 {
        InferenceService::now(self)
    }

    fn submit(&mut self, req: InferenceRequest) -> SubmitOutcome {
        InferenceService::submit(self, req)
    }

    fn poll_all(&mut self) -> Vec<InferenceResponse> {
        self.poll_all_envs()
    }

    fn stats(&self) -> BatcherStats {
        InferenceService::stats(self)
    }

    fn shutdown(&mut self) -> BatcherStats {
        self.stop()
    }
}
