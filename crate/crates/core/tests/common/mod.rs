#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use mentor_drive::env::{Action2D, EnvConfig, Grid, KineticEnv, Observation, RouteGenerator, STATE_DIM};
use mentor_drive::guidance::{self, GuidanceConfig};
use mentor_drive::infer::{
    BatchModel, BatcherConfig, BatcherStats, Feedback, InferenceClient, InferenceRequest, ModelError, SimulatedService,
};
use mentor_drive::learner::{EncodedObs, Learner, LearnerConfig, PolicyMode};
use mentor_drive::mentor::{Expert, ExpertConfig};
use mentor_drive::nn::{Activation, Adam, NetSpec, Network};
use mentor_drive::replay::{AugmentedTransition, SampledBatch, TransitionKey};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_obs(rng: &mut impl Rng) -> Arc<Observation> {
    let mut v = [0.0; STATE_DIM];
    v.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    Arc::new(Observation { grid: Grid::empty(), state_vec: v })
}

/// Random batch; every `mask_every`-th sample carries a mentor action.
pub fn random_batch(n: usize, mask_every: usize, seed: u64) -> SampledBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts: Vec<_> = (0..n)
        .map(|i| {
            let mut t = AugmentedTransition::new(
                TransitionKey::new(0, i as u64),
                random_obs(&mut rng),
                Action2D::new(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)),
                rng.gen_range(-1.0..1.0),
                random_obs(&mut rng),
                i % 5 == 4,
            );
            if mask_every > 0 && i % mask_every == 0 {
                t.vlm_feedback = Some(Action2D::new(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)));
                t.mask = true;
            }
            t
        })
        .collect();
    SampledBatch::from_transitions(&ts)
}

/// Learner with smooth (tanh) networks below 64 parameters each.
pub fn tiny_learner(awag: bool, seed: u64) -> Learner {
    let cfg = LearnerConfig { mode: PolicyMode::Stochastic, hidden: vec![3], ..Default::default() };
    let g = GuidanceConfig { vmr_enabled: true, awag_enabled: awag, delta: 0.5, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actor = Network::new(NetSpec { grid: None, vec_in: STATE_DIM, hidden: vec![3], out: 4, activation: Activation::Tanh }, &mut rng);
    let cspec = NetSpec { grid: None, vec_in: STATE_DIM + 2, hidden: vec![3], out: 1, activation: Activation::Tanh };
    let critics = [Network::new(cspec.clone(), &mut rng), Network::new(cspec, &mut rng)];
    Learner::from_parts(cfg, g, 1000, actor, critics.clone(), critics, rng)
}

pub fn to_array(actions: impl Iterator<Item = Action2D>) -> Array2<f64> {
    let v: Vec<Action2D> = actions.collect();
    Array2::from_shape_fn((v.len(), 2), |(b, j)| if j == 0 { v[b].longitudinal } else { v[b].steer })
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and the central difference of
/// `f` over `params`.
pub fn fd_max_rel_err(params: &mut Vec<f64>, analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..params.len() {
        let orig = params[k];
        params[k] = orig + h;
        let up = f(params);
        params[k] = orig - h;
        let down = f(params);
        params[k] = orig;
        worst = worst.max(rel_err(analytic[k], (up - down) / (2.0 * h)));
    }
    worst
}

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub params_actor: usize,
    pub params_critic: usize,
    pub td: f64,
    pub vmr: f64,
    pub base: f64,
    pub awag: f64,
    /// Largest gradient entry that a detached path would contribute if it
    /// were not detached; must be nonzero for the check to mean anything.
    pub vmr_data_path: f64,
    /// `|grad with lambda scale - scale * grad without|`, zero when the scale
    /// is a detached constant.
    pub base_scale_leak: f64,
    pub awag_masked_norm: f64,
    pub open_gates: usize,
}

pub fn gradient_checks(seed: u64) -> GradReport {
    let batch = random_batch(6, 2, seed);
    let l = tiny_learner(true, seed);
    let enc = l.encode(&batch.obs);
    let y: Vec<f64> = batch.rewards.iter().map(|r| r * 2.0 + 0.3).collect();
    let a_data = to_array(batch.actions.iter().copied());
    let a_vlm = to_array(batch.vlm_actions.iter().map(|v| v.unwrap_or_default()));
    let delta = l.guidance().delta;

    let mut td = 0.0f64;
    let mut vmr = 0.0f64;
    let mut vmr_data_path = 0.0f64;
    for i in 0..2 {
        let (_, g_td) = l.critic_objective(&enc, &batch, &y, 1.0, 0.0);
        let mut p = l.critic(i).params.clone();
        td = td.max(fd_max_rel_err(&mut p, &g_td[i], |q| {
            let l2 = clone_with_critic(&l, i, q);
            l2.critic_objective(&enc, &batch, &y, 1.0, 0.0).0.td
        }));

        // Q(o, a) frozen at the current parameters: the analytic VMR gradient
        // must equal the derivative through the mentor-action path alone.
        let frozen = [l.q_values(0, &enc, &a_data), l.q_values(1, &enc, &a_data)];
        let (_, g_vmr) = l.critic_objective(&enc, &batch, &y, 0.0, 1.0);
        vmr = vmr.max(fd_max_rel_err(&mut p, &g_vmr[i], |q| {
            let l2 = clone_with_critic(&l, i, q);
            let qv = [l2.q_values(0, &enc, &a_vlm), l2.q_values(1, &enc, &a_vlm)];
            guidance::vmr_loss([&qv[0], &qv[1]], [&frozen[0], &frozen[1]], &batch.masks, delta)
        }));
        let qv_frozen = [l.q_values(0, &enc, &a_vlm), l.q_values(1, &enc, &a_vlm)];
        // Derivative through the detached path, for reference: nonzero, so
        // the equality above is a real test of the stop-gradient.
        let through_data = numeric_grad(&mut p, |q| {
            let l2 = clone_with_critic(&l, i, q);
            let qd = [l2.q_values(0, &enc, &a_data), l2.q_values(1, &enc, &a_data)];
            guidance::vmr_loss([&qv_frozen[0], &qv_frozen[1]], [&qd[0], &qd[1]], &batch.masks, delta)
        });
        vmr_data_path = vmr_data_path.max(through_data.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    }

    let xi = Array2::from_shape_fn((batch.len(), 2), |(b, j)| ((b * 2 + j) as f64 * 0.7).sin());
    let (terms, g_base) = l.actor_objective(&enc, &batch, &xi, 1.0, 0.0).unwrap();
    let mut p = l.policy().net.params.clone();
    let base = fd_max_rel_err(&mut p, &g_base, |q| {
        let l2 = clone_with_actor(&l, q);
        l2.actor_objective(&enc, &batch, &xi, 1.0, 0.0).unwrap().0.base
    });

    let mut plain = tiny_learner(false, seed);
    *plain.policy_mut() = l.policy().clone();
    for i in 0..2 {
        plain.critic_mut(i).params = l.critic(i).params.clone();
    }
    let (_, g_plain) = plain.actor_objective(&enc, &batch, &xi, 1.0, 0.0).unwrap();
    let base_scale_leak = g_base.iter().zip(&g_plain).fold(0.0f64, |m, (a, b)| m.max((a - terms.scale * b).abs()));

    // Gate, weight and mask frozen; only log pi(a_vlm | o) moves.
    let (_, g_awag) = l.actor_objective(&enc, &batch, &xi, 0.0, 1.0).unwrap();
    let (gate, weight) = current_gates(&l, &enc, &batch);
    let awag = fd_max_rel_err(&mut p, &g_awag, |q| {
        let l2 = clone_with_actor(&l, q);
        let lp = l2.policy().log_prob(&enc, &a_vlm).unwrap();
        guidance::awag_loss(&batch.masks, &gate, &weight, &lp)
    });
    let open_gates = gate.iter().filter(|g| **g).count();

    let unmasked = SampledBatch { masks: vec![0.0; batch.len()], ..batch.clone() };
    let (_, g0) = l.actor_objective(&enc, &unmasked, &xi, 0.0, 1.0).unwrap();
    let awag_masked_norm = g0.iter().map(|x| x * x).sum::<f64>().sqrt();

    GradReport {
        params_actor: l.policy().net.num_params(),
        params_critic: l.critic(0).num_params(),
        td,
        vmr,
        base,
        awag,
        vmr_data_path,
        base_scale_leak,
        awag_masked_norm,
        open_gates,
    }
}

fn current_gates(l: &Learner, enc: &EncodedObs, batch: &SampledBatch) -> (Vec<bool>, Vec<f64>) {
    let a_pi = l.policy().mean_actions(enc);
    let a_vlm = to_array(batch.vlm_actions.iter().map(|v| v.unwrap_or_default()));
    let q_pi = [l.q_values(0, enc, &a_pi), l.q_values(1, enc, &a_pi)];
    let q_v = [l.q_values(0, enc, &a_vlm), l.q_values(1, enc, &a_vlm)];
    let g = l.guidance();
    (0..batch.len())
        .map(|b| {
            if batch.masks[b] <= 0.0 {
                return (false, 0.0);
            }
            let (adv, gate) = guidance::awag_advantage((q_v[0][b], q_v[1][b]), (q_pi[0][b], q_pi[1][b]));
            (gate, guidance::awag_weight(adv, g.beta, g.w_max))
        })
        .unzip()
}

fn numeric_grad(params: &mut Vec<f64>, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..params.len())
        .map(|k| {
            let orig = params[k];
            params[k] = orig + h;
            let up = f(params);
            params[k] = orig - h;
            let down = f(params);
            params[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn clone_with_critic(l: &Learner, i: usize, params: &[f64]) -> Learner {
    let mut c = rebuild(l);
    c.critic_mut(i).params = params.to_vec();
    c
}

fn clone_with_actor(l: &Learner, params: &[f64]) -> Learner {
    let mut c = rebuild(l);
    c.policy_mut().net.params = params.to_vec();
    c
}

fn rebuild(l: &Learner) -> Learner {
    Learner::from_parts(
        l.config().clone(),
        l.guidance().clone(),
        l.total_steps(),
        l.policy().net.clone(),
        [l.critic(0).clone(), l.critic(1).clone()],
        [l.target(0).clone(), l.target(1).clone()],
        ChaCha8Rng::seed_from_u64(0),
    )
}

/// Critic-only updates on one frozen, fully masked batch with lambda = 1.
/// Returns the mean gap `Q(o, a_vlm) - Q(o, a)` over both heads after `steps`.
pub fn vmr_directional(steps: usize, seed: u64) -> (f64, f64, f64) {
    let batch = random_batch(64, 1, seed);
    let g = GuidanceConfig { vmr_enabled: true, ..Default::default() };
    let mut l = Learner::new(LearnerConfig::default(), g, mentor_drive::env::GridShape::new(0), 10_000, seed).unwrap();
    let enc = l.encode(&batch.obs);
    let a = to_array(batch.actions.iter().copied());
    let a_vlm = to_array(batch.vlm_actions.iter().map(|v| v.unwrap()));
    let gap = |l: &Learner| {
        (0..2)
            .map(|i| {
                let qv = l.q_values(i, &enc, &a_vlm);
                let qd = l.q_values(i, &enc, &a);
                qv.iter().zip(&qd).map(|(x, y)| x - y).sum::<f64>() / qv.len() as f64
            })
            .sum::<f64>()
            / 2.0
    };
    let before = gap(&l);
    let y = l.td_target(&batch, 0.0);
    let mut opts = [Adam::new(l.critic(0).num_params(), 3e-4), Adam::new(l.critic(1).num_params(), 3e-4)];
    for _ in 0..steps {
        let (_, grads) = l.critic_objective(&enc, &batch, &y, 1.0, 1.0);
        for (i, g) in grads.iter().enumerate() {
            opts[i].step(&mut l.critic_mut(i).params, g);
        }
    }
    (before, gap(&l), l.guidance().delta)
}

/// Mock mentor for the protocol fuzz: decodes the key from the payload,
/// answers with a key-derived action, fails a few requests and draws latency
/// in `[0, max_latency]` from the key.
pub struct FuzzModel {
    pub max_latency: f64,
    pub failure_every: u64,
}

pub fn key_payload(key: TransitionKey) -> Vec<u8> {
    let mut p = key.env_id.to_le_bytes().to_vec();
    p.extend_from_slice(&key.step_idx.to_le_bytes());
    p
}

pub fn key_action(env_id: u32, step_idx: u64) -> Action2D {
    Action2D::new(((step_idx % 997) as f64) / 997.0, (env_id as f64) / 64.0)
}

fn hash(env: u32, step: u64) -> u64 {
    let mut z = (env as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 31;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 29)
}

impl BatchModel for FuzzModel {
    fn infer(&self, batch: &[InferenceRequest]) -> Vec<Result<Feedback, ModelError>> {
        batch
            .iter()
            .map(|r| {
                let env = u32::from_le_bytes(r.payload[0..4].try_into().unwrap());
                let step = u64::from_le_bytes(r.payload[4..12].try_into().unwrap());
                if self.failure_every > 0 && hash(env, step) % self.failure_every == 0 {
                    return Err(ModelError("injected".into()));
                }
                Ok(Feedback::action(key_action(env, step)))
            })
            .collect()
    }

    fn latency(&self, req: &InferenceRequest) -> Duration {
        let u = (hash(req.key.env_id, req.key.step_idx) >> 11) as f64 / (1u64 << 53) as f64;
        Duration::from_secs_f64(u * self.max_latency)
    }
}

#[derive(Debug, Clone)]
pub struct FuzzReport {
    pub requests: u64,
    pub mismatches: u64,
    pub unknown_or_repeat: u64,
    pub max_batch: usize,
    pub b_max: usize,
    pub stats: BatcherStats,
    pub delivered_polled: u64,
    pub mask0_polled: u64,
    pub rejected: u64,
    pub throughput_with: f64,
    pub throughput_without: f64,
}

impl FuzzReport {
    pub fn all_resolved(&self) -> bool {
        // Every key is accounted for exactly once: polled (with or without
        // feedback), rejected at submit, or dropped late by the router.
        self.delivered_polled + self.mask0_polled + self.rejected + self.stats.dropped_late == self.requests
            && self.unknown_or_repeat == 0
            && self.stats.resolved() == self.requests
    }

    pub fn ratio(&self) -> f64 {
        self.throughput_with / self.throughput_without
    }
}

struct Slot {
    env: KineticEnv,
    obs: Observation,
    step: u64,
    episode: u64,
}

fn make_slots(n: u32, cfg: &EnvConfig) -> Vec<Slot> {
    let gen = RouteGenerator::curvy(150.0);
    (0..n)
        .map(|e| {
            let mut env = KineticEnv::new(cfg.clone()).unwrap();
            let obs = env.reset(e as u64, &gen.generate(e as u64), false).unwrap();
            Slot { env, obs, step: 0, episode: e as u64 }
        })
        .collect()
}

/// Steps `envs` simulated environments with the expert for `requests` total
/// steps. With a service attached every env submits on a random subset of
/// ticks, the virtual clock moves with the rollout, and responses are drained
/// every tick.
fn fuzz_rollout(
    envs: u32,
    requests: u64,
    cfg: &EnvConfig,
    mut service: Option<&mut SimulatedService>,
    seed: u64,
) -> (f64, Vec<mentor_drive::infer::InferenceResponse>, u64) {
    let expert = Expert::new(ExpertConfig::for_env(cfg));
    let gen = RouteGenerator::curvy(150.0);
    let mut slots = make_slots(envs, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut polled = Vec::new();
    let mut rejected = 0u64;
    let mut submitted = 0u64;
    let mut clock = 0.0;
    let mut next_episode = envs as u64;
    let mut env_steps = 0u64;
    let start = Instant::now();
    while submitted < requests {
        // Phases per 5000 requests: calm (below capacity, batches close by
        // timeout), near capacity, then a short burst that overflows the
        // queue and pushes waits past the response deadline.
        let (dt, p_submit) = match submitted % 5_000 {
            0..=2_999 => (0.1, 0.2),
            3_000..=4_499 => (rng.gen_range(0.0..0.1), 0.1),
            _ => (0.005, 1.0),
        };
        for (i, s) in slots.iter_mut().enumerate() {
            let a = expert.act_2d(&s.obs.state_vec);
            if let Some(svc) = service.as_deref_mut() {
                if submitted < requests && rng.gen_bool(p_submit) {
                    let key = TransitionKey::new(i as u32, s.step);
                    let out = svc.submit(InferenceRequest::new(key.env_id, key.step_idx, key_payload(key)));
                    if !out.accepted() {
                        rejected += 1;
                    }
                    submitted += 1;
                }
            } else if submitted < requests && rng.gen_bool(p_submit) {
                submitted += 1;
            }
            let (next, _, done, _, _) = s.env.step(a).unwrap();
            s.obs = next;
            s.step += 1;
            env_steps += 1;
            if done {
                next_episode += 1;
                s.episode = next_episode;
                s.obs = s.env.reset(next_episode, &gen.generate(next_episode), true).unwrap();
            }
        }
        clock += dt;
        if let Some(svc) = service.as_deref_mut() {
            svc.advance(clock);
            polled.extend(svc.poll_all());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    (env_steps as f64 / elapsed, polled, rejected)
}

pub fn batcher_fuzz(requests: u64, envs: u32, cfg: BatcherConfig, env_cfg: &EnvConfig, seed: u64) -> FuzzReport {
    let model = Arc::new(FuzzModel { max_latency: 10.0 * cfg.timeout, failure_every: 50 });
    let mut best_without = 0.0f64;
    let mut best_with = 0.0f64;
    let mut last = None;
    for rep in 0..2 {
        let (tp0, _, _) = fuzz_rollout(envs, requests, env_cfg, None, seed);
        best_without = best_without.max(tp0);
        let mut svc = SimulatedService::new(cfg.clone(), model.clone()).unwrap();
        let (tp1, mut polled, rejected) = fuzz_rollout(envs, requests, env_cfg, Some(&mut svc), seed);
        best_with = best_with.max(tp1);
        let stats = svc.shutdown();
        polled.extend(svc.poll_all());
        if rep == 0 {
            last = Some((polled, rejected, stats));
        }
    }
    let (polled, rejected, stats) = last.unwrap();

    let mut seen = std::collections::HashSet::new();
    let (mut mismatches, mut unknown, mut with_fb, mut mask0) = (0u64, 0u64, 0u64, 0u64);
    for r in &polled {
        if !seen.insert(r.key) {
            unknown += 1;
        }
        match &r.feedback {
            Some(f) => {
                with_fb += 1;
                if f.action != Some(key_action(r.key.env_id, r.key.step_idx)) {
                    mismatches += 1;
                }
            }
            None => mask0 += 1,
        }
    }
    FuzzReport {
        requests,
        mismatches,
        unknown_or_repeat: unknown,
        max_batch: stats.max_batch_size(),
        b_max: cfg.max_batch,
        delivered_polled: with_fb,
        mask0_polled: mask0,
        rejected,
        stats,
        throughput_with: best_with,
        throughput_without: best_without,
    }
}
