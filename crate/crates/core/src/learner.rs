//! Twin-critic off-policy actor-critic learner.
//!
//! Critics regress onto a clipped double-Q bootstrap computed from Polyak
//! averaged target critics; the actor ascends the smaller critic head. The
//! mentor guidance terms from [`crate::guidance`] are folded into the same
//! backward passes.

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action2D, GridShape, Observation, STATE_DIM};
use crate::guidance::{self, GuidanceConfig, GuidanceDiagnostics, GuidanceError};
use crate::nn::{clip_grad_norm, Activation, Adam, ConvSpec, GridStem, NetInput, NetSpec, Network};
use crate::replay::SampledBatch;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;
const ATANH_CLIP: f64 = 0.999;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid learner config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub polyak: f64,
    pub noise_start: f64,
    pub noise_end: f64,
    /// Fraction of the run over which exploration noise decays linearly.
    pub noise_decay_fraction: f64,
    pub mode: PolicyMode,
    pub hidden: Vec<usize>,
    pub convs: Vec<ConvSpec>,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub policy_delay: u32,
    /// Gradient norm cap per network; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Environment steps of uniform random actions before learning starts.
    pub learning_starts: u64,
    pub updates_per_step: u32,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            polyak: 0.005,
            noise_start: 0.5,
            noise_end: 0.1,
            noise_decay_fraction: 1.0 / 3.0,
            mode: PolicyMode::Stochastic,
            hidden: vec![256, 256],
            convs: vec![
                ConvSpec { out_channels: 16, kernel: 5, stride: 2 },
                ConvSpec { out_channels: 32, kernel: 3, stride: 2 },
            ],
            log_std_min: -5.0,
            log_std_max: 2.0,
            policy_delay: 2,
            max_grad_norm: 0.0,
            learning_starts: 1000,
            updates_per_step: 1,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return bad("polyak must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.noise_start >= 0.0 && self.noise_end >= 0.0) {
            return bad("noise levels must be nonnegative");
        }
        if !(self.noise_decay_fraction > 0.0) {
            return bad("noise_decay_fraction must be positive");
        }
        if !(self.log_std_min < self.log_std_max) {
            return bad("log_std_min must be below log_std_max");
        }
        if self.policy_delay == 0 || self.updates_per_step == 0 {
            return bad("policy_delay and updates_per_step must be positive");
        }
        if self.max_grad_norm < 0.0 {
            return bad("max_grad_norm must be nonnegative");
        }
        Ok(())
    }

    /// Linear exploration-noise decay over the first part of the run.
    pub fn noise_scale(&self, step: u64, total_steps: u64) -> f64 {
        let span = (self.noise_decay_fraction * total_steps as f64).max(1.0);
        let p = step as f64 / span;
        if p >= 1.0 {
            self.noise_end
        } else {
            self.noise_start + (self.noise_end - self.noise_start) * p
        }
    }
}

/// Network inputs for a batch of observations.
#[derive(Debug, Clone)]
pub struct EncodedObs {
    pub grid: Option<Array2<f64>>,
    pub state: Array2<f64>,
}

impl EncodedObs {
    pub fn new<'a>(obs: impl ExactSizeIterator<Item = &'a Observation>, with_grid: bool) -> Self {
        let n = obs.len();
        let mut state = Array2::zeros((n, STATE_DIM));
        let mut grid: Option<Array2<f64>> = None;
        for (b, o) in obs.enumerate() {
            state.row_mut(b).assign(&ndarray::aview1(&o.state_vec));
            if with_grid {
                let g = &o.grid;
                let (c, h, w) = (g.channels, g.height, g.width);
                let rows = grid.get_or_insert_with(|| Array2::zeros((n, c * h * w)));
                let mut row = rows.row_mut(b);
                // Channel-major bytes to channel-last floats.
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            row[(y * w + x) * c + ci] = g.data[(ci * h + y) * w + x] as f64 / 255.0;
                        }
                    }
                }
            }
        }
        Self { grid, state }
    }

    pub fn len(&self) -> usize {
        self.state.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn critic_input(&self, actions: &Array2<f64>) -> Array2<f64> {
        ndarray::concatenate(Axis(1), &[self.state.view(), actions.view()]).unwrap()
    }
}

fn actions_to_array(actions: impl ExactSizeIterator<Item = Action2D>) -> Array2<f64> {
    let n = actions.len();
    let mut a = Array2::zeros((n, 2));
    for (i, x) in actions.enumerate() {
        a[[i, 0]] = x.longitudinal;
        a[[i, 1]] = x.steer;
    }
    a
}

/// Actor snapshot usable for acting outside the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub net: Network,
    pub mode: PolicyMode,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

/// Actor heads for a batch: pre-squash mean, and log-std with its raw input.
struct Heads {
    mu: Array2<f64>,
    log_std: Option<Array2<f64>>,
    raw_std: Option<Array2<f64>>,
}

impl Policy {
    pub fn uses_grid(&self) -> bool {
        self.net.spec().grid.is_some()
    }

    fn heads(&self, out: &Array2<f64>) -> Heads {
        let mu = out.slice(s![.., 0..2]).to_owned();
        match self.mode {
            PolicyMode::Deterministic => Heads { mu, log_std: None, raw_std: None },
            PolicyMode::Stochastic => {
                let raw = out.slice(s![.., 2..4]).to_owned();
                let (lo, hi) = (self.log_std_min, self.log_std_max);
                let ls = raw.mapv(|z| lo + 0.5 * (hi - lo) * (z.tanh() + 1.0));
                Heads { mu, log_std: Some(ls), raw_std: Some(raw) }
            }
        }
    }

    fn log_std_grad(&self, raw: f64) -> f64 {
        let t = raw.tanh();
        0.5 * (self.log_std_max - self.log_std_min) * (1.0 - t * t)
    }

    fn encode(&self, obs: &[&Observation]) -> EncodedObs {
        EncodedObs::new(obs.iter().copied(), self.uses_grid())
    }

    fn forward(&self, enc: &EncodedObs) -> crate::nn::Forward {
        self.net.forward(NetInput { grid: enc.grid.as_ref().map(|g| g.view()), vec: enc.state.view() })
    }

    /// Noise-free action `tanh(mean)`.
    pub fn mean_actions(&self, enc: &EncodedObs) -> Array2<f64> {
        let out = self.forward(enc).output;
        self.heads(&out).mu.mapv(f64::tanh)
    }

    /// Exploration actions. Deterministic mode adds Gaussian noise to the
    /// squashed mean; stochastic mode samples the squashed Gaussian and adds
    /// the same scheduled noise. Zero noise returns the mean in both modes.
    pub fn sample_actions<R: rand::Rng + ?Sized>(&self, enc: &EncodedObs, noise_scale: f64, rng: &mut R) -> Array2<f64> {
        let out = self.forward(enc).output;
        let h = self.heads(&out);
        if noise_scale <= 0.0 {
            return h.mu.mapv(f64::tanh);
        }
        let mut a = h.mu.clone();
        if let Some(ls) = &h.log_std {
            ndarray::Zip::from(&mut a).and(ls).for_each(|u, l| {
                let xi: f64 = StandardNormal.sample(rng);
                *u += l.exp() * xi;
            });
        }
        a.mapv_inplace(|u| {
            let xi: f64 = StandardNormal.sample(rng);
            (u.tanh() + noise_scale * xi).clamp(-1.0, 1.0)
        });
        a
    }

    pub fn act<R: rand::Rng + ?Sized>(&self, obs: &Observation, noise_scale: f64, rng: &mut R) -> Action2D {
        let enc = self.encode(&[obs]);
        let a = self.sample_actions(&enc, noise_scale, rng);
        Action2D::new(a[[0, 0]], a[[0, 1]])
    }

    pub fn act_batch<R: rand::Rng + ?Sized>(&self, obs: &[&Observation], noise_scale: f64, rng: &mut R) -> Vec<Action2D> {
        let enc = self.encode(obs);
        let a = self.sample_actions(&enc, noise_scale, rng);
        a.rows().into_iter().map(|r| Action2D::new(r[0], r[1])).collect()
    }

    /// Log-density of `actions` under the squashed Gaussian.
    pub fn log_prob(&self, enc: &EncodedObs, actions: &Array2<f64>) -> Result<Vec<f64>, GuidanceError> {
        let out = self.forward(enc).output;
        let h = self.heads(&out);
        let ls = h.log_std.as_ref().ok_or(GuidanceError::DeterministicPolicy)?;
        Ok((0..actions.nrows())
            .map(|b| (0..2).map(|j| gaussian_tanh_logp(actions[[b, j]], h.mu[[b, j]], ls[[b, j]])).sum())
            .collect())
    }
}

fn gaussian_tanh_logp(a: f64, mu: f64, log_std: f64) -> f64 {
    let a = a.clamp(-ATANH_CLIP, ATANH_CLIP);
    let u = a.atanh();
    let z = (u - mu) / log_std.exp();
    -0.5 * z * z - log_std - 0.5 * LOG_2PI - (1.0 - a * a).ln()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticTerms {
    pub td: f64,
    pub vmr: f64,
    pub total: f64,
    pub q_mean: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ActorTerms {
    pub base: f64,
    pub awag: f64,
    pub total: f64,
    pub scale: f64,
    pub mean_advantage: f64,
    pub gate_fraction: f64,
    pub mean_weight: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic: CriticTerms,
    pub actor: Option<ActorTerms>,
    pub guidance: GuidanceDiagnostics,
    pub noise: f64,
}

pub struct Learner {
    cfg: LearnerConfig,
    guidance: GuidanceConfig,
    total_steps: u64,
    horizon: u64,
    policy: Policy,
    critics: [Network; 2],
    targets: [Network; 2],
    actor_opt: Adam,
    critic_opt: [Adam; 2],
    rng: ChaCha8Rng,
    updates: u64,
}

pub fn actor_spec(cfg: &LearnerConfig, grid: GridShape) -> NetSpec {
    NetSpec {
        grid: stem(cfg, grid),
        vec_in: STATE_DIM,
        hidden: cfg.hidden.clone(),
        out: match cfg.mode {
            PolicyMode::Deterministic => 2,
            PolicyMode::Stochastic => 4,
        },
        activation: Activation::Relu,
    }
}

pub fn critic_spec(cfg: &LearnerConfig, grid: GridShape) -> NetSpec {
    NetSpec { grid: stem(cfg, grid), vec_in: STATE_DIM + 2, hidden: cfg.hidden.clone(), out: 1, activation: Activation::Relu }
}

fn stem(cfg: &LearnerConfig, grid: GridShape) -> Option<GridStem> {
    (!grid.is_empty() && !cfg.convs.is_empty()).then(|| GridStem {
        channels: grid.channels,
        size: grid.size,
        convs: cfg.convs.clone(),
    })
}

impl Learner {
    pub fn new(
        cfg: LearnerConfig,
        guidance: GuidanceConfig,
        grid: GridShape,
        total_steps: u64,
        seed: u64,
    ) -> Result<Self, LearnerError> {
        cfg.validate()?;
        guidance.validate()?;
        if guidance.awag_enabled && cfg.mode == PolicyMode::Deterministic {
            return Err(GuidanceError::DeterministicPolicy.into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = Network::new(actor_spec(&cfg, grid), &mut rng);
        let critics = [Network::new(critic_spec(&cfg, grid), &mut rng), Network::new(critic_spec(&cfg, grid), &mut rng)];
        Ok(Self::from_parts(cfg, guidance, total_steps, actor, critics.clone(), critics, rng))
    }

    pub fn from_parts(
        cfg: LearnerConfig,
        guidance: GuidanceConfig,
        total_steps: u64,
        actor: Network,
        critics: [Network; 2],
        targets: [Network; 2],
        rng: ChaCha8Rng,
    ) -> Self {
        let horizon = guidance.resolved_horizon(total_steps);
        let policy = Policy { net: actor, mode: cfg.mode, log_std_min: cfg.log_std_min, log_std_max: cfg.log_std_max };
        let actor_opt = Adam::new(policy.net.num_params(), cfg.actor_lr);
        let critic_opt = [Adam::new(critics[0].num_params(), cfg.critic_lr), Adam::new(critics[1].num_params(), cfg.critic_lr)];
        Self { cfg, guidance, total_steps, horizon, policy, critics, targets, actor_opt, critic_opt, rng, updates: 0 }
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.cfg
    }

    pub fn guidance(&self) -> &GuidanceConfig {
        &self.guidance
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut Policy {
        &mut self.policy
    }

    pub fn critic(&self, i: usize) -> &Network {
        &self.critics[i]
    }

    pub fn critic_mut(&mut self, i: usize) -> &mut Network {
        &mut self.critics[i]
    }

    pub fn target(&self, i: usize) -> &Network {
        &self.targets[i]
    }

    pub fn optimizers(&self) -> (&Adam, &[Adam; 2]) {
        (&self.actor_opt, &self.critic_opt)
    }

    pub fn optimizers_mut(&mut self) -> (&mut Adam, &mut [Adam; 2]) {
        (&mut self.actor_opt, &mut self.critic_opt)
    }

    pub fn set_updates(&mut self, n: u64) {
        self.updates = n;
    }

    /// Actor plus both critics, as reported at startup.
    pub fn param_count(&self) -> usize {
        self.policy.net.num_params() + self.critics.iter().map(Network::num_params).sum::<usize>()
    }

    pub fn noise_scale(&self, step: u64) -> f64 {
        self.cfg.noise_scale(step, self.total_steps)
    }

    pub fn act(&mut self, obs: &Observation, noise_scale: f64) -> Action2D {
        self.policy.act(obs, noise_scale, &mut self.rng)
    }

    pub fn encode(&self, obs: &[std::sync::Arc<Observation>]) -> EncodedObs {
        EncodedObs::new(obs.iter().map(|o| o.as_ref()), self.policy.uses_grid())
    }

    fn q(net: &Network, enc: &EncodedObs, actions: &Array2<f64>) -> Vec<f64> {
        let vec = enc.critic_input(actions);
        net.predict(NetInput { grid: enc.grid.as_ref().map(|g| g.view()), vec: vec.view() }).column(0).to_vec()
    }

    /// Critic outputs of head `i` for arbitrary actions.
    pub fn q_values(&self, i: usize, enc: &EncodedObs, actions: &Array2<f64>) -> Vec<f64> {
        Self::q(&self.critics[i], enc, actions)
    }

    /// Bootstrap targets `r + (1 - d) * gamma * min_i Qbar_i(o', a')`.
    pub fn td_target(&mut self, batch: &SampledBatch, noise_scale: f64) -> Vec<f64> {
        let next = self.encode(&batch.next_obs);
        let a_next = self.policy.sample_actions(&next, noise_scale, &mut self.rng);
        let q1 = Self::q(&self.targets[0], &next, &a_next);
        let q2 = Self::q(&self.targets[1], &next, &a_next);
        (0..batch.len())
            .map(|b| batch.rewards[b] + (1.0 - batch.dones[b]) * self.cfg.gamma * q1[b].min(q2[b]))
            .collect()
    }

    /// Critic losses and per-head parameter gradients of
    /// `w_td * L_TD + w_vmr * L_VMR`.
    pub fn critic_objective(
        &self,
        enc: &EncodedObs,
        batch: &SampledBatch,
        y: &[f64],
        w_td: f64,
        w_vmr: f64,
    ) -> (CriticTerms, [Vec<f64>; 2]) {
        let a = actions_to_array(batch.actions.iter().copied());
        let any_mask = batch.masks.iter().any(|m| *m > 0.0);
        let a_vlm = actions_to_array(batch.vlm_actions.iter().map(|v| v.unwrap_or_default()));
        let grid = enc.grid.as_ref().map(|g| g.view());
        let in_data = enc.critic_input(&a);
        let in_vlm = any_mask.then(|| enc.critic_input(&a_vlm));
        let mut q_data: [Vec<f64>; 2] = Default::default();
        let mut q_vlm: [Vec<f64>; 2] = Default::default();
        let mut grads: [Vec<f64>; 2] = Default::default();
        for i in 0..2 {
            let net = &self.critics[i];
            let fwd = net.forward(NetInput { grid, vec: in_data.view() });
            q_data[i] = fwd.output.column(0).to_vec();
            let d: Vec<f64> = guidance::td_loss_grad(&q_data[i], y).into_iter().map(|g| g * w_td).collect();
            let (mut g, _) = net.backward(&fwd, &Array2::from_shape_vec((d.len(), 1), d).unwrap());
            if let Some(iv) = &in_vlm {
                let fwd_v = net.forward(NetInput { grid, vec: iv.view() });
                q_vlm[i] = fwd_v.output.column(0).to_vec();
                if w_vmr != 0.0 {
                    let dv: Vec<f64> = guidance::vmr_loss_grad(&q_vlm[i], &q_data[i], &batch.masks, self.guidance.delta)
                        .into_iter()
                        .map(|g| g * w_vmr)
                        .collect();
                    let (gv, _) = net.backward(&fwd_v, &Array2::from_shape_vec((dv.len(), 1), dv).unwrap());
                    g.iter_mut().zip(gv).for_each(|(a, b)| *a += b);
                }
            }
            grads[i] = g;
        }
        let td = guidance::td_loss([&q_data[0], &q_data[1]], y);
        let vmr = if any_mask {
            guidance::vmr_loss([&q_vlm[0], &q_vlm[1]], [&q_data[0], &q_data[1]], &batch.masks, self.guidance.delta)
        } else {
            0.0
        };
        let n = y.len() as f64;
        let q_mean = q_data[0].iter().chain(&q_data[1]).sum::<f64>() / (2.0 * n);
        let terms = CriticTerms { td, vmr, total: w_td * td + w_vmr * vmr, q_mean };
        (terms, grads)
    }

    /// Actor losses and parameter gradient of `w_base * L_base + w_awag * L_AWAG`.
    /// `xi` holds the standard-normal draws of the reparameterized sample.
    pub fn actor_objective(
        &self,
        enc: &EncodedObs,
        batch: &SampledBatch,
        xi: &Array2<f64>,
        w_base: f64,
        w_awag: f64,
    ) -> Result<(ActorTerms, Vec<f64>), LearnerError> {
        let n = enc.len();
        if n == 0 {
            return Err(LearnerError::EmptyBatch);
        }
        let pol = &self.policy;
        let fwd = pol.forward(enc);
        let h = pol.heads(&fwd.output);
        let grid = enc.grid.as_ref().map(|g| g.view());

        let mut u = h.mu.clone();
        if let Some(ls) = &h.log_std {
            ndarray::Zip::from(&mut u).and(ls).and(xi).for_each(|u, l, x| *u += l.exp() * x);
        }
        let a_hat = u.mapv(f64::tanh);

        let awag_on = self.guidance.awag_enabled;
        let scale = if awag_on {
            let a = actions_to_array(batch.actions.iter().copied());
            guidance::awag_scale(&Self::q(&self.critics[0], enc, &a), self.guidance.alpha, self.guidance.eps)
        } else {
            1.0
        };

        let in_hat = enc.critic_input(&a_hat);
        let fwds: Vec<_> = self.critics.iter().map(|c| c.forward(NetInput { grid, vec: in_hat.view() })).collect();
        let q_hat: Vec<Vec<f64>> = fwds.iter().map(|f| f.output.column(0).to_vec()).collect();
        let base = guidance::actor_base_loss([&q_hat[0], &q_hat[1]], scale);

        let mut d_ahat = Array2::<f64>::zeros((n, 2));
        if w_base != 0.0 {
            for i in 0..2 {
                let mut d = Array2::zeros((n, 1));
                let mut any = false;
                for b in 0..n {
                    let pick = if i == 0 { q_hat[0][b] <= q_hat[1][b] } else { q_hat[1][b] < q_hat[0][b] };
                    if pick {
                        d[[b, 0]] = -w_base * scale / n as f64;
                        any = true;
                    }
                }
                if any {
                    let (_, dv) = self.critics[i].backward(&fwds[i], &d);
                    d_ahat += &dv.slice(s![.., STATE_DIM..STATE_DIM + 2]);
                }
            }
        }
        let mut d_mu = &d_ahat * &a_hat.mapv(|a| 1.0 - a * a);
        let mut d_ls = h.log_std.as_ref().map(|ls| &d_mu * &ls.mapv(f64::exp) * xi);

        let mut terms = ActorTerms { base, scale, ..Default::default() };
        let any_mask = batch.masks.iter().any(|m| *m > 0.0);
        if awag_on && any_mask {
            let ls = h.log_std.as_ref().ok_or(GuidanceError::DeterministicPolicy)?;
            let a_pi = h.mu.mapv(f64::tanh);
            let a_vlm = actions_to_array(batch.vlm_actions.iter().map(|v| v.unwrap_or_default()));
            let q_pi: Vec<Vec<f64>> = self.critics.iter().map(|c| Self::q(c, enc, &a_pi)).collect();
            let q_v: Vec<Vec<f64>> = self.critics.iter().map(|c| Self::q(c, enc, &a_vlm)).collect();
            let mut gate = vec![false; n];
            let mut weight = vec![0.0; n];
            let mut logp = vec![0.0; n];
            let (mut adv_sum, mut w_sum, mut cnt) = (0.0, 0.0, 0usize);
            for b in 0..n {
                if batch.masks[b] <= 0.0 {
                    continue;
                }
                let (adv, g) = guidance::awag_advantage((q_v[0][b], q_v[1][b]), (q_pi[0][b], q_pi[1][b]));
                gate[b] = g;
                weight[b] = guidance::awag_weight(adv, self.guidance.beta, self.guidance.w_max);
                logp[b] = (0..2).map(|j| gaussian_tanh_logp(a_vlm[[b, j]], h.mu[[b, j]], ls[[b, j]])).sum();
                adv_sum += adv;
                w_sum += weight[b];
                cnt += 1;
                if g && w_awag != 0.0 {
                    let c = -w_awag * batch.masks[b] * weight[b] / n as f64;
                    let dl = d_ls.as_mut().unwrap();
                    for j in 0..2 {
                        let av = a_vlm[[b, j]].clamp(-ATANH_CLIP, ATANH_CLIP);
                        let sigma = ls[[b, j]].exp();
                        let z = (av.atanh() - h.mu[[b, j]]) / sigma;
                        d_mu[[b, j]] += c * z / sigma;
                        dl[[b, j]] += c * (z * z - 1.0);
                    }
                }
            }
            terms.awag = guidance::awag_loss(&batch.masks, &gate, &weight, &logp);
            if cnt > 0 {
                terms.mean_advantage = adv_sum / cnt as f64;
                terms.mean_weight = w_sum / cnt as f64;
                terms.gate_fraction = gate.iter().filter(|g| **g).count() as f64 / cnt as f64;
            }
        }
        terms.total = w_base * terms.base + w_awag * terms.awag;

        let mut d_out = Array2::zeros(fwd.output.raw_dim());
        d_out.slice_mut(s![.., 0..2]).assign(&d_mu);
        if let (Some(dl), Some(raw)) = (&d_ls, &h.raw_std) {
            let dz = ndarray::Zip::from(dl).and(raw).map_collect(|d, r| d * pol.log_std_grad(*r));
            d_out.slice_mut(s![.., 2..4]).assign(&dz);
        }
        let (grad, _) = pol.net.backward(&fwd, &d_out);
        Ok((terms, grad))
    }

    pub fn soft_update(&mut self) {
        for i in 0..2 {
            self.targets[i].soft_update_from(&self.critics[i], self.cfg.polyak);
        }
    }

    fn apply(opt: &mut Adam, params: &mut [f64], mut grad: Vec<f64>, max_norm: f64) {
        if max_norm > 0.0 {
            clip_grad_norm(&mut grad, max_norm);
        }
        opt.step(params, &grad);
    }

    /// One critic step (plus a delayed actor step) on `batch`; `step` is the
    /// environment step driving the schedules.
    pub fn update(&mut self, batch: &SampledBatch, step: u64) -> Result<UpdateStats, LearnerError> {
        if batch.is_empty() {
            return Err(LearnerError::EmptyBatch);
        }
        let noise = self.noise_scale(step);
        let y = self.td_target(batch, noise);
        let enc = self.encode(&batch.obs);
        let lambda = self.guidance.vmr_coeff(step, self.horizon);
        let iota = self.guidance.awag_coeff(step, self.horizon);
        let (critic, grads) = self.critic_objective(&enc, batch, &y, 1.0, lambda);
        for (i, g) in grads.into_iter().enumerate() {
            Self::apply(&mut self.critic_opt[i], &mut self.critics[i].params, g, self.cfg.max_grad_norm);
        }
        self.updates += 1;

        let mut actor = None;
        if self.updates % self.cfg.policy_delay as u64 == 0 {
            let xi = Array2::from_shape_simple_fn((batch.len(), 2), || StandardNormal.sample(&mut self.rng));
            let (terms, g) = self.actor_objective(&enc, batch, &xi, 1.0, iota)?;
            Self::apply(&mut self.actor_opt, &mut self.policy.net.params, g, self.cfg.max_grad_norm);
            actor = Some(terms);
        }
        self.soft_update();

        let a = actor.unwrap_or_default();
        let guidance = GuidanceDiagnostics {
            vmr_loss: critic.vmr,
            awag_loss: a.awag,
            mean_advantage: a.mean_advantage,
            gate_fraction: a.gate_fraction,
            mean_weight: a.mean_weight,
            lambda,
            iota,
        };
        Ok(UpdateStats { critic, actor, guidance, noise })
    }
}
