mod common;

use std::collections::{HashSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use common::{batcher_fuzz, key_payload, FuzzModel};
use mentor_drive::env::EnvConfig;
use mentor_drive::infer::{BatcherConfig, DropPolicy, InferenceRequest, InferenceService, QueueEvent, SubmitOutcome};
use mentor_drive::replay::TransitionKey;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Replays a recorded history against a sequential FIFO and returns the first
/// violation, if any.
fn check_history(history: &[QueueEvent], cfg: &BatcherConfig) -> Result<usize, String> {
    let mut queue: VecDeque<TransitionKey> = VecDeque::new();
    let mut resolved: HashSet<TransitionKey> = HashSet::new();
    let mut polled: HashSet<TransitionKey> = HashSet::new();
    let mut accepted = 0usize;
    for (i, ev) in history.iter().enumerate() {
        match ev {
            QueueEvent::Submit { key, outcome } => {
                let expect = if queue.len() >= cfg.queue_capacity {
                    match cfg.drop_policy {
                        DropPolicy::Reject => SubmitOutcome::Rejected,
                        DropPolicy::DropOldest => {
                            let old = queue.pop_front().unwrap();
                            resolved.insert(old);
                            SubmitOutcome::AcceptedEvicting(old)
                        }
                    }
                } else {
                    SubmitOutcome::Accepted
                };
                if &expect != outcome {
                    return Err(format!("event {i}: submit {key:?} got {outcome:?}, reference {expect:?}"));
                }
                if expect.accepted() {
                    queue.push_back(*key);
                    accepted += 1;
                }
            }
            QueueEvent::Form { keys } => {
                if keys.is_empty() || keys.len() > cfg.max_batch {
                    return Err(format!("event {i}: batch of {}", keys.len()));
                }
                let head: Vec<_> = queue.drain(..keys.len().min(queue.len())).collect();
                if &head != keys {
                    return Err(format!("event {i}: formed {keys:?}, reference head {head:?}"));
                }
                resolved.extend(keys.iter().copied());
            }
            QueueEvent::Poll { env_id, keys } => {
                for k in keys {
                    if k.env_id != *env_id || !resolved.contains(k) || !polled.insert(*k) {
                        return Err(format!("event {i}: poll of env {env_id} returned {k:?} out of turn"));
                    }
                }
            }
            QueueEvent::Drain { keys } => {
                let rest: Vec<_> = queue.drain(..).collect();
                if &rest != keys {
                    return Err(format!("event {i}: drained {keys:?}, reference {rest:?}"));
                }
                resolved.extend(keys.iter().copied());
            }
        }
    }
    if !queue.is_empty() {
        return Err(format!("{} requests never left the queue", queue.len()));
    }
    Ok(accepted)
}

fn interleaving_run(policy: DropPolicy, seed: u64) {
    let cfg = BatcherConfig { max_batch: 4, timeout: 0.001, queue_capacity: 12, drop_policy: policy, response_deadline: 1.0 };
    let model = Arc::new(FuzzModel { max_latency: 0.002, failure_every: 7 });
    let svc = Arc::new(InferenceService::start_recording(cfg.clone(), model).unwrap());
    let threads: Vec<_> = (0..4u32)
        .map(|t| {
            let svc = Arc::clone(&svc);
            std::thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 10 + t as u64);
                for step in 0..300u64 {
                    let env = t * 2 + rng.gen_range(0..2);
                    svc.submit(InferenceRequest::new(env, step, key_payload(TransitionKey::new(env, step))));
                    if rng.gen_bool(0.3) {
                        svc.poll(t * 2);
                        svc.poll(t * 2 + 1);
                    }
                    if rng.gen_bool(0.05) {
                        std::thread::sleep(Duration::from_micros(rng.gen_range(0..1500)));
                    }
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    std::thread::sleep(Duration::from_millis(20));
    for e in 0..8 {
        svc.poll(e);
    }
    let stats = svc.stop();
    for e in 0..8 {
        svc.poll(e);
    }
    let history = svc.history();
    let accepted = check_history(&history, &cfg).unwrap_or_else(|e| panic!("{policy:?}: {e}"));
    assert_eq!(accepted as u64, stats.accepted);
    assert_eq!(stats.submitted, 1200);
    assert_eq!(stats.resolved(), stats.submitted);
    assert!(stats.max_batch_size() <= cfg.max_batch);
}

#[test]
fn concurrent_queue_matches_sequential_reference() {
    for seed in 0..3 {
        interleaving_run(DropPolicy::DropOldest, seed);
        interleaving_run(DropPolicy::Reject, seed);
    }
}

#[test]
fn protocol_fuzz_small() {
    let cfg = BatcherConfig::default();
    let env = EnvConfig { grid_size: 0, vehicles: 0, pedestrians: 0, ..Default::default() };
    let r = batcher_fuzz(20_000, 16, cfg, &env, 7);
    assert_eq!(r.mismatches, 0);
    assert!(r.max_batch <= r.b_max);
    assert!(r.all_resolved(), "{r:?}");
    assert!(r.stats.evicted > 0 && r.stats.dropped_late > 0 && r.stats.timeouts_fired > 0, "{:?}", r.stats);
}
