//! Asynchronous micro-batched inference.
//!
//! Rollout code submits keyed requests without blocking; a single server
//! forms batches when `max_batch` requests are queued or the oldest request
//! has waited `timeout` seconds, runs the model once per batch, and routes
//! responses back by `(env_id, step_idx)`.
//!
//! Two servers share the same queue logic: [`InferenceService`] runs on a real
//! thread, [`SimulatedService`] runs on a virtual clock for reproducible runs.
//! [`wire`] carries the protocol over a socket.

mod batcher;
pub mod prompt;
mod router;
mod service;
mod sim;
pub mod wire;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::Action2D;
use crate::replay::TransitionKey;

pub use batcher::Batcher;
pub use router::{Routed, Router};
pub use service::{InferenceService, QueueEvent};
pub use sim::SimulatedService;

#[derive(Debug, Error, PartialEq)]
pub enum InferError {
    #[error("invalid batcher config: {0}")]
    InvalidConfig(String),
    #[error("service has shut down")]
    Shutdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropPolicy {
    Reject,
    DropOldest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatcherConfig {
    pub max_batch: usize,
    /// Seconds the oldest request may wait before a partial batch dispatches.
    pub timeout: f64,
    pub queue_capacity: usize,
    pub drop_policy: DropPolicy,
    /// Responses completing later than this many seconds after submission
    /// are discarded as late.
    pub response_deadline: f64,
}

impl Default for BatcherConfig {
    fn default() -> Self {
        Self { max_batch: 8, timeout: 0.02, queue_capacity: 256, drop_policy: DropPolicy::DropOldest, response_deadline: 1.0 }
    }
}

impl BatcherConfig {
    pub fn validate(&self) -> Result<(), InferError> {
        if self.max_batch == 0 {
            return Err(InferError::InvalidConfig("max_batch must be at least 1".into()));
        }
        if !(self.timeout > 0.0) {
            return Err(InferError::InvalidConfig("timeout must be positive".into()));
        }
        if self.queue_capacity == 0 {
            return Err(InferError::InvalidConfig("queue_capacity must be positive".into()));
        }
        if !(self.response_deadline > 0.0) {
            return Err(InferError::InvalidConfig("response_deadline must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub key: TransitionKey,
    pub payload: Arc<[u8]>,
    /// Seconds on the serving clock; stamped by the service on submit.
    pub submit_time: f64,
}

impl InferenceRequest {
    pub fn new(env_id: u32, step_idx: u64, payload: Vec<u8>) -> Self {
        Self { key: TransitionKey::new(env_id, step_idx), payload: payload.into(), submit_time: 0.0 }
    }
}

/// Mentor output. At least one field is present in a delivered response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub action: Option<Action2D>,
    pub scores: Option<Vec<f64>>,
}

impl Feedback {
    pub fn action(a: Action2D) -> Self {
        Self { action: Some(a), scores: None }
    }

    pub fn scores(s: Vec<f64>) -> Self {
        Self { action: None, scores: Some(s) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResponse {
    pub key: TransitionKey,
    pub feedback: Option<Feedback>,
    pub service_time: f64,
}

impl InferenceResponse {
    pub fn mask(&self) -> bool {
        self.feedback.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubmitOutcome {
    Accepted,
    Rejected,
    /// Accepted after evicting the oldest queued request.
    AcceptedEvicting(TransitionKey),
}

impl SubmitOutcome {
    pub fn accepted(&self) -> bool {
        !matches!(self, Self::Rejected)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("model failed: {0}")]
pub struct ModelError(pub String);

/// A model executed once per batch.
pub trait BatchModel: Send + Sync {
    /// One result per request, in order.
    fn infer(&self, batch: &[InferenceRequest]) -> Vec<Result<Feedback, ModelError>>;

    /// Injected service latency for one request; a batch takes the maximum.
    fn latency(&self, _req: &InferenceRequest) -> Duration {
        Duration::ZERO
    }
}

impl<F> BatchModel for F
where
    F: Fn(&[InferenceRequest]) -> Vec<Result<Feedback, ModelError>> + Send + Sync,
{
    fn infer(&self, batch: &[InferenceRequest]) -> Vec<Result<Feedback, ModelError>> {
        self(batch)
    }
}

pub(crate) fn run_model(model: &dyn BatchModel, batch: &[InferenceRequest]) -> (Vec<Option<Feedback>>, Duration) {
    let latency = batch.iter().map(|r| model.latency(r)).max().unwrap_or_default();
    let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| model.infer(batch)));
    let results = match out {
        Ok(v) if v.len() == batch.len() => v.into_iter().map(Result::ok).collect(),
        _ => vec![None; batch.len()],
    };
    (results, latency)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatcherStats {
    pub submitted: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub evicted: u64,
    pub batches_formed: u64,
    /// `size_histogram[k]` counts batches of size `k`.
    pub size_histogram: Vec<u64>,
    pub timeouts_fired: u64,
    pub total_wait: f64,
    pub dispatched: u64,
    pub delivered: u64,
    pub delivered_with_feedback: u64,
    pub dropped_policy: u64,
    pub dropped_late: u64,
    pub duplicates_suppressed: u64,
    pub model_failures: u64,
}

impl BatcherStats {
    pub fn mean_wait(&self) -> f64 {
        if self.dispatched == 0 {
            0.0
        } else {
            self.total_wait / self.dispatched as f64
        }
    }

    /// Fraction of submitted requests that came back with feedback.
    pub fn availability(&self) -> f64 {
        if self.submitted == 0 {
            1.0
        } else {
            self.delivered_with_feedback as f64 / self.submitted as f64
        }
    }

    pub fn max_batch_size(&self) -> usize {
        self.size_histogram.iter().rposition(|&c| c > 0).unwrap_or(0)
    }

    /// Requests resolved one way or another.
    pub fn resolved(&self) -> u64 {
        self.delivered + self.dropped_policy + self.dropped_late
    }
}

/// Client view shared by the threaded, simulated and socket services.
pub trait InferenceClient {
    /// Current time on the serving clock, in seconds.
    fn now(&self) -> f64;
    fn submit(&mut self, req: InferenceRequest) -> SubmitOutcome;
    /// Advances a virtual clock; real-time services ignore it.
    fn advance(&mut self, _now: f64) {}
    /// All responses ready for any env, each delivered at most once.
    fn poll_all(&mut self) -> Vec<InferenceResponse>;
    fn stats(&self) -> BatcherStats;
    /// Stops serving; queued requests are dropped and counted.
    fn shutdown(&mut self) -> BatcherStats;
}
