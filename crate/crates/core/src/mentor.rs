//! Mock mentors: a scripted expert standing in for an action-suggesting
//! vision-language model, and a seeded embedding model standing in for a
//! contrastive image-text encoder. Both can be served through
//! [`crate::infer`] with injected latency and failures.

use std::collections::HashMap;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{state_index as si, Action2D, EnvConfig, STATE_DIM};
use crate::infer::prompt::{parse_prompt, ParsedPrompt};
use crate::infer::{BatchModel, Feedback, InferenceRequest, ModelError};
use crate::shaping::{
    executed_action, prompt_text, score, Context, Lateral, Longitudinal, PromptLibrary, SemanticAction, ShapingError,
    TextEmbedder,
};

#[derive(Debug, Error, PartialEq)]
pub enum MentorError {
    #[error("invalid mentor config: {0}")]
    InvalidConfig(String),
    #[error("unknown prompt: {0}")]
    UnknownPrompt(String),
}

/// Throttle/steer/brake control as produced by a driving mentor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action3D {
    pub throttle: f64,
    pub steer: f64,
    pub brake: f64,
}

impl Action3D {
    pub fn new(throttle: f64, steer: f64, brake: f64) -> Self {
        let unit = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        Self { throttle: unit(throttle), steer: Action2D::new(0.0, steer).steer, brake: unit(brake) }
    }
}

/// Brake above 0.05 takes precedence over throttle.
pub fn map_3d_to_2d(a: Action3D) -> Action2D {
    let a = Action3D::new(a.throttle, a.steer, a.brake);
    let lon = if a.brake > 0.05 { -a.brake } else { a.throttle };
    Action2D::new(lon, a.steer)
}

/// Pure-pursuit steering with proportional speed control, computed from the
/// state vector alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub v_max: f64,
    pub detection_range: f64,
    pub wheelbase: f64,
    pub max_steer_angle: f64,
    pub lookahead: f64,
    pub max_accel: f64,
    pub max_decel: f64,
    pub drag: f64,
    /// Distance kept to obstacles and stop lines, in meters.
    pub safety_margin: f64,
    pub speed_gain: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self::for_env(&EnvConfig::default())
    }
}

impl ExpertConfig {
    pub fn for_env(env: &EnvConfig) -> Self {
        Self {
            v_max: env.v_max,
            detection_range: env.detection_range,
            wheelbase: env.wheelbase,
            max_steer_angle: env.max_steer_angle,
            lookahead: env.lookahead,
            max_accel: env.max_accel,
            max_decel: env.max_decel,
            drag: env.drag,
            safety_margin: 3.0,
            speed_gain: 2.0,
        }
    }

    /// Speed the expert aims for given the nearest hazard gap.
    pub fn target_speed(&self, state: &[f64; STATE_DIM]) -> f64 {
        let desired = (state[si::DESIRED_SPEED] * self.v_max).max(0.0);
        let proximity = state[si::HAZARD_PROXIMITY];
        if proximity <= 0.0 {
            return desired;
        }
        let gap = (1.0 - proximity) * self.detection_range;
        let usable = (gap - self.safety_margin).max(0.0);
        let span = (self.detection_range - self.safety_margin).max(1e-6);
        desired.min(self.v_max * usable / span)
    }

    pub fn expert_action(&self, state: &[f64; STATE_DIM]) -> Action3D {
        let bearing = state[si::LOOKAHEAD_BEARING] * std::f64::consts::PI;
        let delta = (2.0 * self.wheelbase * bearing.sin() / self.lookahead).atan();
        let steer = -delta / self.max_steer_angle;

        let speed = state[si::SPEED] * self.v_max;
        let target = self.target_speed(state);
        let proximity = state[si::HAZARD_PROXIMITY];
        let gap = (1.0 - proximity) * self.detection_range;
        if proximity > 0.0 && gap <= self.safety_margin {
            return Action3D::new(0.0, steer, 1.0);
        }
        let accel = self.speed_gain * (target - speed) + if speed > 0.0 { self.drag } else { 0.0 };
        if accel >= 0.0 {
            Action3D::new(accel / self.max_accel, steer, 0.0)
        } else if target - speed < -0.2 {
            Action3D::new(0.0, steer, -accel / self.max_decel)
        } else {
            Action3D::new(0.0, steer, 0.0)
        }
    }
}

/// Expert with optional Gaussian action noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub cfg: ExpertConfig,
    pub noise_scale: f64,
}

impl Expert {
    pub fn new(cfg: ExpertConfig) -> Self {
        Self { cfg, noise_scale: 0.0 }
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &[f64; STATE_DIM], rng: &mut R) -> Action3D {
        let a = self.cfg.expert_action(state);
        if self.noise_scale <= 0.0 {
            return a;
        }
        let n = Normal::new(0.0, self.noise_scale).unwrap();
        Action3D::new(a.throttle + n.sample(rng), a.steer + n.sample(rng), a.brake + n.sample(rng))
    }

    pub fn act_2d(&self, state: &[f64; STATE_DIM]) -> Action2D {
        map_3d_to_2d(self.cfg.expert_action(state))
    }
}

/// Seeded unit-sphere text table over the full prompt library. Intensity
/// variants of a maneuver share a common component, so their vectors are
/// correlated.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn gaussian_vec(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// SplitMix64 finalizer; decorrelates seeds derived from small integers.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn lon_family(l: Longitudinal) -> u64 {
    l.family() as u64
}

fn lat_family(l: Lateral) -> u64 {
    l.family() as u64
}

impl EmbeddingModel {
    pub fn new(dim: usize, shared_weight: f64, seed: u64) -> Result<Self, MentorError> {
        if dim == 0 {
            return Err(MentorError::InvalidConfig("embedding dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&shared_weight) {
            return Err(MentorError::InvalidConfig("shared_weight must lie in [0, 1]".into()));
        }
        let (ws, wo) = (shared_weight.sqrt(), (1.0 - shared_weight).sqrt());
        let mut table = HashMap::new();
        for ctx in Context::all() {
            for action in SemanticAction::all() {
                let fam = [seed, 1, ctx.index() as u64, lon_family(action.longitudinal), lat_family(action.lateral)];
                let shared = unit(gaussian_vec(dim, &mut ChaCha8Rng::seed_from_u64(mix_seed(&fam))));
                let own = unit(gaussian_vec(
                    dim,
                    &mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 2, ctx.index() as u64, action.index() as u64])),
                ));
                let v: Vec<f64> = shared.iter().zip(&own).map(|(s, o)| ws * s + wo * o).collect();
                table.insert(prompt_text(ctx, action), unit(v));
            }
        }
        Ok(Self { dim, table })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, prompt: &str) -> Result<&[f64], MentorError> {
        self.table.get(prompt).map(Vec::as_slice).ok_or_else(|| MentorError::UnknownPrompt(prompt.to_string()))
    }

    /// Text vector of the true caption plus isotropic noise of total scale
    /// `sigma`, renormalized.
    pub fn embed_image<R: Rng + ?Sized>(
        &self,
        ctx: Context,
        true_label: SemanticAction,
        sigma: f64,
        rng: &mut R,
    ) -> Vec<f64> {
        let base = self.embed(&prompt_text(ctx, true_label)).expect("library prompt");
        if sigma <= 0.0 {
            return base.to_vec();
        }
        let per = sigma / (self.dim as f64).sqrt();
        unit(base.iter().map(|b| { let z: f64 = StandardNormal.sample(rng); b + per * z }).collect())
    }
}

impl TextEmbedder for EmbeddingModel {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, ShapingError> {
        self.embed(text).map(<[f64]>::to_vec).map_err(|e| ShapingError::Embedder(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyDist {
    Constant { seconds: f64 },
    Uniform { low: f64, high: f64 },
    Lognormal { mu: f64, sigma: f64 },
}

impl LatencyDist {
    fn validate(&self) -> Result<(), MentorError> {
        let ok = match *self {
            Self::Constant { seconds } => seconds >= 0.0,
            Self::Uniform { low, high } => low >= 0.0 && high >= low,
            Self::Lognormal { sigma, .. } => sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(MentorError::InvalidConfig("bad latency distribution".into()))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Constant { seconds } => seconds,
            Self::Uniform { low, high } => {
                if high > low {
                    rng.gen_range(low..high)
                } else {
                    low
                }
            }
            Self::Lognormal { mu, sigma } => LogNormal::new(mu, sigma).map(|d| d.sample(rng)).unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MentorConfig {
    pub latency: LatencyDist,
    /// Probability that a request fails and comes back with `mask = 0`.
    pub failure_rate: f64,
    /// Gaussian noise on expert actions.
    pub noise_scale: f64,
    pub embedding_dim: usize,
    /// Squared cosine shared by intensity-variant captions.
    pub shared_weight: f64,
    pub seed: u64,
}

impl Default for MentorConfig {
    fn default() -> Self {
        Self {
            latency: LatencyDist::Uniform { low: 0.001, high: 0.005 },
            failure_rate: 0.0,
            noise_scale: 0.0,
            embedding_dim: 64,
            shared_weight: 0.7,
            seed: 0,
        }
    }
}

impl MentorConfig {
    pub fn validate(&self) -> Result<(), MentorError> {
        self.latency.validate()?;
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return Err(MentorError::InvalidConfig("failure_rate must lie in [0, 1]".into()));
        }
        if self.noise_scale < 0.0 {
            return Err(MentorError::InvalidConfig("noise_scale must be nonnegative".into()));
        }
        if self.embedding_dim == 0 {
            return Err(MentorError::InvalidConfig("embedding_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Mentor served behind the batching service. Action requests get the
/// expert's suggestion; score requests get the contrastive probabilities of
/// the 30 anchors of the request's context, from an image embedding whose
/// true label is the expert's own discretized action.
pub struct MentorModel {
    cfg: MentorConfig,
    expert: Expert,
    embedder: EmbeddingModel,
    library: PromptLibrary,
    image_noise: f64,
    temperature: f64,
}

impl MentorModel {
    pub fn new(cfg: MentorConfig, expert: ExpertConfig, image_noise: f64, temperature: f64) -> Result<Self, MentorError> {
        cfg.validate()?;
        let embedder = EmbeddingModel::new(cfg.embedding_dim, cfg.shared_weight, cfg.seed)?;
        let library = PromptLibrary::build(&embedder).map_err(|e| MentorError::InvalidConfig(e.to_string()))?;
        let mut expert = Expert::new(expert);
        expert.noise_scale = cfg.noise_scale;
        Ok(Self { cfg, expert, embedder, library, image_noise, temperature })
    }

    pub fn library(&self) -> &PromptLibrary {
        &self.library
    }

    pub fn embedder(&self) -> &EmbeddingModel {
        &self.embedder
    }

    pub fn expert(&self) -> &Expert {
        &self.expert
    }

    fn request_rng(&self, req: &InferenceRequest, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(&[self.cfg.seed, stream, req.key.env_id as u64, req.key.step_idx]))
    }

    /// Answers one parsed prompt. Deterministic in the request key.
    pub fn answer(&self, req: &InferenceRequest, p: &ParsedPrompt) -> Result<Feedback, ModelError> {
        let mut rng = self.request_rng(req, 11);
        if self.cfg.failure_rate > 0.0 && rng.gen::<f64>() < self.cfg.failure_rate {
            return Err(ModelError("injected failure".into()));
        }
        let a3 = self.expert.act(&p.state, &mut rng);
        let suggestion = map_3d_to_2d(a3);
        let action = p.task.wants_action().then_some(suggestion);
        let scores = if p.task.wants_scores() {
            let ctx = p.meta.context();
            let label = executed_action(self.expert.act_2d(&p.state));
            let img = self.embedder.embed_image(ctx, label, self.image_noise, &mut rng);
            Some(score(&self.library, &img, ctx, self.temperature).map_err(|e| ModelError(e.to_string()))?.to_vec())
        } else {
            None
        };
        Ok(Feedback { action, scores })
    }
}

impl BatchModel for MentorModel {
    fn infer(&self, batch: &[InferenceRequest]) -> Vec<Result<Feedback, ModelError>> {
        batch
            .iter()
            .map(|req| {
                let p = parse_prompt(&req.payload).map_err(|e| ModelError(e.to_string()))?;
                self.answer(req, &p)
            })
            .collect()
    }

    fn latency(&self, req: &InferenceRequest) -> Duration {
        let s = self.cfg.latency.sample(&mut self.request_rng(req, 7));
        Duration::from_secs_f64(s.max(0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Command;
    use crate::env::SpeedBin;

    fn state(speed: f64, bearing: f64, desired: f64, proximity: f64) -> [f64; STATE_DIM] {
        let mut s = [0.0; STATE_DIM];
        s[si::SPEED] = speed / 6.0;
        s[si::LOOKAHEAD_BEARING] = bearing / std::f64::consts::PI;
        s[si::DESIRED_SPEED] = desired / 6.0;
        s[si::HAZARD_PROXIMITY] = proximity;
        s
    }

    #[test]
    fn map_examples() {
        assert_eq!(map_3d_to_2d(Action3D::new(0.7, 0.2, 0.0)), Action2D::new(0.7, 0.2));
        assert_eq!(map_3d_to_2d(Action3D::new(0.9, 0.0, 0.6)), Action2D::new(-0.6, 0.0));
        assert_eq!(map_3d_to_2d(Action3D::new(0.0, 0.0, 0.0)), Action2D::new(0.0, 0.0));
        let a = map_3d_to_2d(Action3D::new(0.3, -2.0, 0.05));
        assert_eq!(a, Action2D::new(0.3, -1.0));
    }

    #[test]
    fn expert_cruise_brake_and_turn() {
        let e = ExpertConfig::default();
        let cruise = e.expert_action(&state(3.0, 0.0, 6.0, 0.0));
        assert!(cruise.throttle > 0.0 && cruise.brake == 0.0 && cruise.steer.abs() < 0.05);
        let near = e.expert_action(&state(4.0, 0.0, 0.6, 0.9));
        assert!(near.brake > 0.5);
        let left = e.expert_action(&state(4.0, 0.4, 6.0, 0.0));
        assert!(left.steer < -0.05);
    }

    #[test]
    fn embeddings_are_unit_and_correlated() {
        let m = EmbeddingModel::new(64, 0.7, 3).unwrap();
        let ctx = Context::new(Command::FollowLane, SpeedBin::Moderate);
        let a = SemanticAction::new(Longitudinal::Braking, Lateral::GoingStraight);
        let b = SemanticAction::new(Longitudinal::BrakingHard, Lateral::GoingStraight);
        let c = SemanticAction::new(Longitudinal::AcceleratingFast, Lateral::TurningLeftSharply);
        let ea = m.embed(&prompt_text(ctx, a)).unwrap();
        let eb = m.embed(&prompt_text(ctx, b)).unwrap();
        let ec = m.embed(&prompt_text(ctx, c)).unwrap();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        assert!((dot(ea, ea) - 1.0).abs() < 1e-9);
        assert!(dot(ea, eb) > dot(ea, ec) + 0.3);
        let img = m.embed_image(ctx, a, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!((dot(&img, ea) - 1.0).abs() < 1e-12);
        assert!(m.embed("not a prompt").is_err());
    }

    #[test]
    fn latency_does_not_change_answers() {
        use crate::env::{Grid, Observation};
        use crate::infer::prompt::{build_prompt, MentorTask, PromptMeta, RuleState};
        let obs = Observation { grid: Grid::empty(), state_vec: state(2.0, 0.1, 5.0, 0.0) };
        let meta = PromptMeta { speed: 2.0, command: Command::FollowLane, rule: RuleState::Clear };
        let req = InferenceRequest::new(4, 17, build_prompt(&obs, &meta, MentorTask::Both));
        let fast = MentorModel::new(
            MentorConfig { latency: LatencyDist::Constant { seconds: 0.0 }, ..Default::default() },
            ExpertConfig::default(),
            0.2,
            100.0,
        )
        .unwrap();
        let slow = MentorModel::new(
            MentorConfig { latency: LatencyDist::Constant { seconds: 0.05 }, ..Default::default() },
            ExpertConfig::default(),
            0.2,
            100.0,
        )
        .unwrap();
        assert_eq!(fast.infer(std::slice::from_ref(&req)), slow.infer(std::slice::from_ref(&req)));
        assert_eq!(slow.latency(&req), Duration::from_millis(50));
        let fb = fast.infer(&[req])[0].clone().unwrap();
        let p: f64 = fb.scores.unwrap().iter().sum();
        assert!((p - 1.0).abs() < 1e-9);
    }
}
