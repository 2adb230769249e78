use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::evaluate::evaluate_policy;
use super::metrics::EpisodeRecord;
use super::HarnessError;
use crate::env::{state_index as si, Action2D, Infractions, KineticEnv, Observation, RouteSpec, TerminationEvent};
use crate::infer::prompt::{build_prompt, MentorTask, PromptMeta, RuleState};
use crate::infer::{BatcherStats, InferenceClient, InferenceRequest, InferenceResponse, InferenceService, SimulatedService};
use crate::learner::{Learner, UpdateStats};
use crate::mentor::{mix_seed, ExpertConfig, MentorModel};
use crate::replay::{AugmentedTransition, ReplayBuffer, ReplayCounters, TransitionKey};
use crate::shaping::{executed_action, margin, normalize_and_shape, NeighborSets, RmsFilter, ShapingRecord};

pub const METRICS_CSV: &str = "metrics.csv";
pub const EPISODES_CSV: &str = "episodes.csv";
pub const EVAL_CSV: &str = "eval_curve.csv";
pub const MANIFEST: &str = "manifest.json";

pub const METRIC_COLUMNS: [&str; 20] = [
    "step",
    "env",
    "reward",
    "route_m",
    "critic_loss",
    "td_loss",
    "vmr_loss",
    "actor_loss",
    "awag_loss",
    "q_mean",
    "lambda",
    "iota",
    "noise",
    "mean_advantage",
    "gate_fraction",
    "margin",
    "buffer_margin",
    "availability",
    "mask_fraction",
    "episode_return",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub mean_return: f64,
    pub mean_route_completion: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub seed: u64,
    pub status: String,
    pub error: Option<String>,
    pub steps_completed: u64,
    pub deterministic: bool,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub seed: u64,
    pub steps: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub evals: Vec<EvalPoint>,
    /// Raw margins in attach order, with the step they arrived at.
    pub margins: Vec<(u64, f64)>,
    pub mentor: Option<BatcherStats>,
    pub replay: ReplayCounters,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainOutcome {
    /// Feedback availability over the run; `None` without a mentor.
    pub fn availability(&self) -> Option<f64> {
        self.mentor.as_ref().map(BatcherStats::availability)
    }

    /// First evaluation step whose mean return reaches `threshold`.
    pub fn steps_to_threshold(&self, threshold: f64) -> Option<u64> {
        self.evals.iter().find(|e| e.mean_return >= threshold).map(|e| e.step)
    }
}

struct Slot {
    env: KineticEnv,
    obs: Arc<Observation>,
    route: RouteSpec,
    step_idx: u64,
    episode_return: f64,
    episode_steps: u32,
    speed_sum: f64,
    infractions: Infractions,
    last_return: f64,
}

fn rt(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Runtime(e.to_string())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    dir: &'a Path,
    rng: ChaCha8Rng,
    slots: Vec<Slot>,
    fixed_route: Option<RouteSpec>,
    learner: Learner,
    replay: ReplayBuffer,
    mentor: Option<(MentorTask, Box<dyn InferenceClient>)>,
    filter: RmsFilter,
    neighbors: NeighborSets,
    episodes: Vec<EpisodeRecord>,
    evals: Vec<EvalPoint>,
    margins: Vec<(u64, f64)>,
    metrics: csv::Writer<std::fs::File>,
    episode_log: csv::Writer<std::fs::File>,
    eval_log: csv::Writer<std::fs::File>,
    clock: f64,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a RunConfig, seed: u64, dir: &'a Path) -> Result<Self, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x7261_696e]));
        let fixed_route = cfg.routes.fixed_route()?;
        let mut slots = Vec::with_capacity(cfg.runtime.num_envs);
        for i in 0..cfg.runtime.num_envs {
            let mut env = KineticEnv::new(cfg.env.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
            let route_seed: u64 = rng.gen();
            let route = fixed_route.clone().unwrap_or_else(|| cfg.routes.generator.generate(route_seed));
            let obs = env.reset(route_seed, &route, false).map_err(rt)?;
            slots.push(Slot {
                env,
                obs: Arc::new(obs),
                route,
                step_idx: 0,
                episode_return: 0.0,
                episode_steps: 0,
                speed_sum: 0.0,
                infractions: Infractions::default(),
                last_return: 0.0,
            });
            log::debug!("env {i} ready");
        }
        let learner = Learner::new(
            cfg.learner.clone(),
            cfg.guidance.clone(),
            cfg.env.grid_shape(),
            cfg.total_steps,
            mix_seed(&[seed, 0x6c65_6172]),
        )
        .map_err(|e| HarnessError::Config(e.to_string()))?;
        let mentor = match cfg.mentor_task() {
            None => None,
            Some(task) => {
                let mcfg = crate::mentor::MentorConfig { seed: mix_seed(&[cfg.mentor.seed, seed]), ..cfg.mentor.clone() };
                let model = Arc::new(
                    MentorModel::new(mcfg, ExpertConfig::for_env(&cfg.env), cfg.shaping.image_noise, cfg.shaping.temperature)
                        .map_err(|e| HarnessError::Config(e.to_string()))?,
                );
                let client: Box<dyn InferenceClient> = if cfg.runtime.deterministic {
                    Box::new(SimulatedService::new(cfg.batcher.clone(), model).map_err(|e| HarnessError::Config(e.to_string()))?)
                } else {
                    Box::new(InferenceService::start(cfg.batcher.clone(), model).map_err(|e| HarnessError::Config(e.to_string()))?)
                };
                Some((task, client))
            }
        };
        let csv_at = |name: &str| csv::Writer::from_path(dir.join(name)).map_err(rt);
        let mut metrics = csv_at(METRICS_CSV)?;
        metrics.write_record(METRIC_COLUMNS).map_err(rt)?;
        let mut episode_log = csv_at(EPISODES_CSV)?;
        episode_log
            .write_record(["step", "env", "episode", "return", "route_completion", "event", "steps", "mean_speed", "distance"])
            .map_err(rt)?;
        let mut eval_log = csv_at(EVAL_CSV)?;
        eval_log.write_record(["step", "mean_return", "mean_route_completion"]).map_err(rt)?;
        Ok(Self {
            cfg,
            seed,
            dir,
            rng,
            slots,
            fixed_route,
            learner,
            replay: ReplayBuffer::new(cfg.total_steps.clamp(1, ReplayBuffer::DEFAULT_CAPACITY as u64) as usize).map_err(rt)?,
            mentor,
            filter: RmsFilter::new(cfg.shaping.rms_eps),
            neighbors: NeighborSets::intensity_variants(),
            episodes: Vec::new(),
            evals: Vec::new(),
            margins: Vec::new(),
            metrics,
            episode_log,
            eval_log,
            clock: 0.0,
        })
    }

    fn handle_response(&mut self, resp: InferenceResponse, step: u64) -> Vec<f64> {
        let mut step_margins = Vec::new();
        let Some(fb) = resp.feedback else { return step_margins };
        if let Some(a) = fb.action {
            self.replay.attach_feedback(resp.key, a);
        }
        if let Some(probs) = fb.scores {
            let Some(t) = self.replay.lookup(resp.key) else { return step_margins };
            let (executed, r_env) = (executed_action(t.action), t.reward);
            if let Ok(r_raw) = margin(&probs, executed, &self.neighbors) {
                let (r_vlm, r_final) = normalize_and_shape(r_raw, r_env, &mut self.filter, self.cfg.shaping.weight);
                self.replay.attach_shaping(resp.key, ShapingRecord { r_raw, r_vlm, bonus: r_final - r_env });
                self.margins.push((step, r_raw));
                step_margins.push(r_raw);
            }
        }
        step_margins
    }

    fn new_route(&mut self, slot: usize, soft: bool) -> Result<(), HarnessError> {
        let seed: u64 = self.rng.gen();
        let s = &mut self.slots[slot];
        if !soft {
            s.route = self.fixed_route.clone().unwrap_or_else(|| self.cfg.routes.generator.generate(seed));
        }
        s.obs = Arc::new(s.env.reset(seed, &s.route, soft).map_err(rt)?);
        Ok(())
    }

    fn finish_episode(&mut self, slot: usize, step: u64, event: TerminationEvent, rc: f64, distance: f64) -> Result<f64, HarnessError> {
        let s = &mut self.slots[slot];
        let rec = EpisodeRecord {
            seed: self.seed,
            episode: self.episodes.len() as u64,
            ret: s.episode_return,
            route_completion: rc.clamp(0.0, 1.0),
            event,
            infractions: s.infractions,
            steps: s.episode_steps,
            mean_speed: s.speed_sum / s.episode_steps.max(1) as f64,
            distance,
        };
        self.episode_log
            .write_record([
                step.to_string(),
                slot.to_string(),
                rec.episode.to_string(),
                rec.ret.to_string(),
                rec.route_completion.to_string(),
                rec.event.name().to_string(),
                rec.steps.to_string(),
                rec.mean_speed.to_string(),
                rec.distance.to_string(),
            ])
            .map_err(rt)?;
        let ret = rec.ret;
        s.last_return = ret;
        s.episode_return = 0.0;
        s.episode_steps = 0;
        s.speed_sum = 0.0;
        s.infractions = Infractions::default();
        self.episodes.push(rec);
        let soft = self.cfg.env.choose_soft_reset(ret, self.rng.gen());
        self.new_route(slot, soft)?;
        Ok(ret)
    }

    fn evaluate(&mut self, step: u64) -> Result<(), HarnessError> {
        let recs = evaluate_policy(self.learner.policy(), self.cfg, self.cfg.runtime.eval_during_training)?;
        let n = recs.len().max(1) as f64;
        let p = EvalPoint {
            step,
            mean_return: recs.iter().map(|r| r.ret).sum::<f64>() / n,
            mean_route_completion: recs.iter().map(|r| r.route_completion).sum::<f64>() / n,
        };
        self.eval_log
            .write_record([p.step.to_string(), p.mean_return.to_string(), p.mean_route_completion.to_string()])
            .map_err(rt)?;
        log::info!("seed {} step {step}: eval return {:.2}, route completion {:.3}", self.seed, p.mean_return, p.mean_route_completion);
        self.evals.push(p);
        Ok(())
    }

    fn checkpoint(&self, name: &str, step: u64) -> Result<PathBuf, HarnessError> {
        let dir = self.dir.join("checkpoints");
        std::fs::create_dir_all(&dir).map_err(rt)?;
        let path = dir.join(name);
        Checkpoint::capture(&self.learner, self.seed, step).save(&path)?;
        Ok(path)
    }

    fn step(&mut self, t: u64) -> Result<(), HarnessError> {
        let cfg = self.cfg;
        let i = (t % cfg.runtime.num_envs as u64) as usize;
        let action = if t < cfg.learner.learning_starts {
            Action2D::new(self.rng.gen_range(-1.0..=1.0), self.rng.gen_range(-1.0..=1.0))
        } else {
            let noise = self.learner.noise_scale(t);
            self.learner.policy().act(&self.slots[i].obs, noise, &mut self.rng)
        };
        let key = TransitionKey::new(i as u32, self.slots[i].step_idx);
        if let Some((task, client)) = self.mentor.as_mut() {
            let s = &self.slots[i];
            let meta = PromptMeta {
                speed: s.env.ego().speed,
                command: s.env.current_command(),
                rule: if s.obs.state_vec[si::RULE_ACTIVE] > 0.0 { RuleState::Active } else { RuleState::Clear },
            };
            client.submit(InferenceRequest::new(key.env_id, key.step_idx, build_prompt(&s.obs, &meta, *task)));
        }

        let s = &mut self.slots[i];
        let (next, reward, done, event, info) = s.env.step(action).map_err(rt)?;
        let next = Arc::new(next);
        let terminal = done && event != TerminationEvent::Timeout;
        self.replay
            .push(AugmentedTransition::new(key, Arc::clone(&s.obs), action, reward, Arc::clone(&next), terminal))
            .map_err(rt)?;
        s.obs = next;
        s.step_idx += 1;
        s.episode_return += reward;
        s.episode_steps += 1;
        s.speed_sum += info.speed;
        s.infractions.add(&info.infractions);

        self.clock += cfg.runtime.step_time;
        let mut step_margins = Vec::new();
        let mut stats = None;
        if let Some((_, client)) = self.mentor.as_mut() {
            client.advance(self.clock);
            let responses = client.poll_all();
            stats = Some(client.stats());
            for r in responses {
                step_margins.extend(self.handle_response(r, t));
            }
        }

        let mut update: Option<UpdateStats> = None;
        if t >= cfg.learner.learning_starts && self.replay.len() >= cfg.learner.batch_size {
            for _ in 0..cfg.learner.updates_per_step {
                let batch = self.replay.sample_with(cfg.learner.batch_size, &mut self.rng).map_err(rt)?;
                update = Some(self.learner.update(&batch, t).map_err(rt)?);
            }
        }

        let ep_return = if done {
            Some(self.finish_episode(i, t, event, info.route_completion, info.distance_travelled)?)
        } else {
            None
        };

        if t % cfg.runtime.log_every == 0 || done {
            let u = update.as_ref();
            let actor = u.and_then(|u| u.actor);
            let step_margin = (!step_margins.is_empty()).then(|| step_margins.iter().sum::<f64>() / step_margins.len() as f64);
            self.metrics
                .write_record([
                    t.to_string(),
                    i.to_string(),
                    reward.to_string(),
                    info.distance_travelled.to_string(),
                    fmt_opt(u.map(|u| u.critic.total)),
                    fmt_opt(u.map(|u| u.critic.td)),
                    fmt_opt(u.map(|u| u.critic.vmr)),
                    fmt_opt(actor.map(|a| a.total)),
                    fmt_opt(actor.map(|a| a.awag)),
                    fmt_opt(u.map(|u| u.critic.q_mean)),
                    self.cfg.guidance.vmr_coeff(t, self.learner.horizon()).to_string(),
                    self.cfg.guidance.awag_coeff(t, self.learner.horizon()).to_string(),
                    self.learner.noise_scale(t).to_string(),
                    fmt_opt(actor.map(|a| a.mean_advantage)),
                    fmt_opt(actor.map(|a| a.gate_fraction)),
                    fmt_opt(step_margin),
                    fmt_opt(self.replay.margin_mean()),
                    fmt_opt(stats.as_ref().map(BatcherStats::availability)),
                    self.replay.mask_fraction().to_string(),
                    fmt_opt(ep_return),
                ])
                .map_err(rt)?;
        }

        let done_steps = t + 1;
        if cfg.runtime.eval_interval > 0 && done_steps % cfg.runtime.eval_interval == 0 {
            self.evaluate(done_steps)?;
        }
        if cfg.runtime.checkpoint_every > 0 && done_steps % cfg.runtime.checkpoint_every == 0 {
            self.checkpoint(&format!("step-{done_steps}.ckpt"), done_steps)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<TrainOutcome, HarnessError> {
        let mentor = self.mentor.as_mut().map(|(_, c)| {
            let st = c.shutdown();
            let _ = c.poll_all();
            st
        });
        let final_checkpoint = Some(self.checkpoint("final.ckpt", self.cfg.total_steps)?);
        for w in [&mut self.metrics, &mut self.episode_log, &mut self.eval_log] {
            w.flush().map_err(rt)?;
        }
        if let Some(st) = &mentor {
            let json = serde_json::to_string_pretty(st).map_err(rt)?;
            std::fs::write(self.dir.join("mentor_stats.json"), json).map_err(rt)?;
        }
        Ok(TrainOutcome {
            dir: self.dir.to_path_buf(),
            seed: self.seed,
            steps: self.cfg.total_steps,
            episodes: self.episodes,
            evals: self.evals,
            margins: self.margins,
            mentor,
            replay: self.replay.counters(),
            final_checkpoint,
        })
    }
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<(), HarnessError> {
    let json = serde_json::to_string_pretty(m).map_err(rt)?;
    std::fs::write(dir.join(MANIFEST), json).map_err(rt)
}

/// Trains one seed into `dir`. A zero step budget writes only the manifest.
pub fn train_seed(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(rt)?;
    let mut manifest = Manifest {
        code_version: super::code_version(),
        seed,
        status: "running".into(),
        error: None,
        steps_completed: 0,
        deterministic: cfg.runtime.deterministic,
        config: cfg.clone(),
    };
    if cfg.total_steps == 0 {
        manifest.status = "completed".into();
        write_manifest(dir, &manifest)?;
        return Ok(TrainOutcome {
            dir: dir.to_path_buf(),
            seed,
            steps: 0,
            episodes: Vec::new(),
            evals: Vec::new(),
            margins: Vec::new(),
            mentor: None,
            replay: ReplayCounters::default(),
            final_checkpoint: None,
        });
    }
    write_manifest(dir, &manifest)?;
    let mut completed = 0;
    let result = (|| {
        let mut tr = Trainer::new(cfg, seed, dir)?;
        for t in 0..cfg.total_steps {
            tr.step(t)?;
            completed = t + 1;
        }
        tr.finish()
    })();
    manifest.steps_completed = completed;
    match &result {
        Ok(_) => manifest.status = "completed".into(),
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(e.to_string());
        }
    }
    write_manifest(dir, &manifest)?;
    result
}

/// Trains every configured seed under `output_dir/seed-<n>`.
pub fn train(cfg: &RunConfig) -> Result<Vec<TrainOutcome>, HarnessError> {
    cfg.validate()?;
    cfg.seeds.iter().map(|&s| train_seed(cfg, s, &cfg.output_dir.join(format!("seed-{s}")))).collect()
}
