use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::HarnessError;
use crate::env::{KineticEnv, RouteGenerator};
use crate::infer::prompt::{build_prompt, MentorTask, PromptMeta, RuleState};
use crate::infer::{BatcherConfig, InferenceRequest, InferenceService};
use crate::learner::{actor_spec, Policy};
use crate::mentor::{ExpertConfig, LatencyDist, MentorConfig, MentorModel};
use crate::nn::Network;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Constant mock-mentor latency in seconds.
    pub mentor_latency: f64,
    pub policy_steps: usize,
    pub requests: usize,
    pub envs: u32,
    pub rollout_steps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { mentor_latency: 0.05, policy_steps: 20_000, requests: 200, envs: 8, rollout_steps: 40_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl LatencySummary {
    pub fn of(mut xs: Vec<f64>) -> Self {
        if xs.is_empty() {
            return Self { mean: 0.0, p50: 0.0, p90: 0.0, p99: 0.0, max: 0.0 };
        }
        xs.sort_by(f64::total_cmp);
        let q = |p: f64| xs[((xs.len() - 1) as f64 * p).round() as usize];
        Self { mean: xs.iter().sum::<f64>() / xs.len() as f64, p50: q(0.5), p90: q(0.9), p99: q(0.99), max: xs[xs.len() - 1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub policy_steps_per_sec: f64,
    pub round_trip: LatencySummary,
    /// Sequential blocking mentor calls per second, `1 / mean round trip`.
    pub mentor_round_trips_per_sec: f64,
    pub max_batch_size: usize,
    pub max_batch_allowed: usize,
    pub rollout_steps_per_sec_without: f64,
    pub rollout_steps_per_sec_with: f64,
    pub availability: f64,
}

impl BenchReport {
    pub fn policy_to_mentor_ratio(&self) -> f64 {
        self.policy_steps_per_sec / self.mentor_round_trips_per_sec.max(f64::MIN_POSITIVE)
    }

    pub fn rollout_ratio(&self) -> f64 {
        self.rollout_steps_per_sec_with / self.rollout_steps_per_sec_without
    }

    pub fn table(&self) -> String {
        format!(
            "policy-only steps/s        {:>12.1}\n\
             mentor round trip mean (s) {:>12.4}  p50 {:.4}  p90 {:.4}  p99 {:.4}\n\
             mentor round trips/s       {:>12.2}\n\
             policy / mentor ratio      {:>12.1}\n\
             max batch size             {:>12} (limit {})\n\
             rollout steps/s without    {:>12.1}\n\
             rollout steps/s with       {:>12.1}  (ratio {:.3}, availability {:.3})",
            self.policy_steps_per_sec,
            self.round_trip.mean,
            self.round_trip.p50,
            self.round_trip.p90,
            self.round_trip.p99,
            self.mentor_round_trips_per_sec,
            self.policy_to_mentor_ratio(),
            self.max_batch_size,
            self.max_batch_allowed,
            self.rollout_steps_per_sec_without,
            self.rollout_steps_per_sec_with,
            self.rollout_ratio(),
            self.availability,
        )
    }
}

fn mentor(latency: f64, cfg: &RunConfig) -> Result<Arc<MentorModel>, HarnessError> {
    let mcfg = MentorConfig { latency: LatencyDist::Constant { seconds: latency }, ..cfg.mentor.clone() };
    MentorModel::new(mcfg, ExpertConfig::for_env(&cfg.env), cfg.shaping.image_noise, cfg.shaping.temperature)
        .map(Arc::new)
        .map_err(|e| HarnessError::Config(e.to_string()))
}

/// Vectorized rollout of `envs` environments; with a service attached every
/// step submits a request and each tick drains whatever came back.
fn rollout(
    cfg: &RunConfig,
    policy: &Policy,
    steps: usize,
    envs: u32,
    service: Option<&InferenceService>,
) -> Result<f64, HarnessError> {
    let gen = RouteGenerator::curvy(150.0);
    let mut slots = Vec::new();
    for e in 0..envs.max(1) as u64 {
        let mut env = KineticEnv::new(cfg.env.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
        let obs = env.reset(e, &gen.generate(e), false).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        slots.push((env, obs, 0u64));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut episode = envs as u64;
    let start = Instant::now();
    let mut done_steps = 0;
    while done_steps < steps {
        let actions = policy.act_batch(&slots.iter().map(|s| &s.1).collect::<Vec<_>>(), 0.1, &mut rng);
        for (i, ((env, obs, idx), a)) in slots.iter_mut().zip(actions).enumerate() {
            if let Some(svc) = service {
                let meta = PromptMeta { speed: env.ego().speed, command: env.current_command(), rule: RuleState::Clear };
                svc.submit(InferenceRequest::new(i as u32, *idx, build_prompt(obs, &meta, MentorTask::Action)));
            }
            let (next, _, done, _, _) = env.step(a).map_err(|e| HarnessError::Runtime(e.to_string()))?;
            *obs = next;
            *idx += 1;
            if done {
                episode += 1;
                *obs = env.reset(episode, &gen.generate(episode), false).map_err(|e| HarnessError::Runtime(e.to_string()))?;
            }
        }
        if let Some(svc) = service {
            std::hint::black_box(svc.poll_all_envs());
        }
        done_steps += slots.len();
    }
    Ok(done_steps as f64 / start.elapsed().as_secs_f64())
}

pub fn bench(cfg: &RunConfig, b: &BenchConfig) -> Result<BenchReport, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let policy = Policy {
        net: Network::new(actor_spec(&cfg.learner, cfg.env.grid_shape()), &mut rng),
        mode: cfg.learner.mode,
        log_std_min: cfg.learner.log_std_min,
        log_std_max: cfg.learner.log_std_max,
    };
    let mut env = KineticEnv::new(cfg.env.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
    let obs = env.reset(0, &RouteGenerator::curvy(150.0).generate(0), false).map_err(|e| HarnessError::Runtime(e.to_string()))?;

    let start = Instant::now();
    for _ in 0..b.policy_steps {
        std::hint::black_box(policy.act(&obs, 0.0, &mut rng));
    }
    let policy_steps_per_sec = b.policy_steps as f64 / start.elapsed().as_secs_f64();

    // Round trips under load: submit from all envs at a fixed rate and time
    // each response.
    let bcfg = BatcherConfig { response_deadline: (b.mentor_latency * 20.0).max(1.0), ..cfg.batcher.clone() };
    let max_batch_allowed = bcfg.max_batch;
    let svc = InferenceService::start(bcfg.clone(), mentor(b.mentor_latency, cfg)?)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let meta = PromptMeta { speed: 0.0, command: crate::env::Command::FollowLane, rule: RuleState::Clear };
    let payload = build_prompt(&obs, &meta, MentorTask::Action);
    let mut submitted = std::collections::HashMap::new();
    let mut latencies = Vec::with_capacity(b.requests);
    let per_env = b.requests.div_ceil(b.envs.max(1) as usize);
    for s in 0..per_env as u64 {
        for e in 0..b.envs {
            submitted.insert((e, s), Instant::now());
            svc.submit(InferenceRequest::new(e, s, payload.clone()));
        }
        // One round per service time keeps the offered load near capacity.
        std::thread::sleep(Duration::from_secs_f64(b.mentor_latency.max(0.002)));
        for r in svc.poll_all_envs() {
            if let Some(t0) = submitted.remove(&(r.key.env_id, r.key.step_idx)) {
                latencies.push(t0.elapsed().as_secs_f64());
            }
        }
    }
    let deadline = Instant::now() + Duration::from_secs_f64(bcfg.response_deadline + 1.0);
    while !submitted.is_empty() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(1));
        for r in svc.poll_all_envs() {
            if let Some(t0) = submitted.remove(&(r.key.env_id, r.key.step_idx)) {
                latencies.push(t0.elapsed().as_secs_f64());
            }
        }
    }
    let stats = svc.stop();
    let round_trip = LatencySummary::of(latencies);
    let mentor_round_trips_per_sec = if round_trip.mean > 0.0 { 1.0 / round_trip.mean } else { f64::INFINITY };

    // Interleaved repeats, best of each, to damp scheduler noise.
    let live = InferenceService::start(bcfg, mentor(b.mentor_latency, cfg)?).map_err(|e| HarnessError::Config(e.to_string()))?;
    let (mut without, mut with) = (0.0f64, 0.0f64);
    for _ in 0..3 {
        without = without.max(rollout(cfg, &policy, b.rollout_steps, b.envs, None)?);
        with = with.max(rollout(cfg, &policy, b.rollout_steps, b.envs, Some(&live))?);
    }
    let live_stats = live.stop();

    Ok(BenchReport {
        policy_steps_per_sec,
        round_trip,
        mentor_round_trips_per_sec,
        max_batch_size: stats.max_batch_size().max(live_stats.max_batch_size()),
        max_batch_allowed,
        rollout_steps_per_sec_without: without,
        rollout_steps_per_sec_with: with,
        availability: live_stats.availability(),
    })
}
