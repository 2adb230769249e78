use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::metrics::{AggregateMetrics, EpisodeRecord};
use super::HarnessError;
use crate::env::{Action2D, EnvMode, Infractions, KineticEnv, Observation, RouteSpec, TerminationEvent};
use crate::learner::Policy;
use crate::mentor::{Expert, ExpertConfig};

/// Drives one episode to termination.
pub fn run_episode(
    env: &mut KineticEnv,
    route: &RouteSpec,
    seed: u64,
    episode: u64,
    driver: &mut dyn FnMut(&Observation) -> Action2D,
) -> Result<EpisodeRecord, HarnessError> {
    let mut obs = env.reset(seed, route, false).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let (mut ret, mut steps, mut speed_sum) = (0.0, 0u32, 0.0);
    let mut infractions = Infractions::default();
    loop {
        let a = driver(&obs);
        let (next, r, done, event, info) = env.step(a).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        ret += r;
        steps += 1;
        speed_sum += info.speed;
        infractions.add(&info.infractions);
        obs = next;
        if done {
            return Ok(EpisodeRecord {
                seed,
                episode,
                ret,
                route_completion: info.route_completion.clamp(0.0, 1.0),
                event,
                infractions,
                steps,
                mean_speed: speed_sum / steps as f64,
                distance: info.distance_travelled,
            });
        }
    }
}

/// The fixed evaluation route set: episode `i` uses seed `eval_seed + i`.
pub fn eval_routes(cfg: &RunConfig, episodes: usize) -> Result<Vec<(u64, RouteSpec)>, HarnessError> {
    let fixed = cfg.routes.fixed_route()?;
    Ok((0..episodes as u64)
        .map(|i| {
            let seed = cfg.routes.eval_seed + i;
            (seed, fixed.clone().unwrap_or_else(|| cfg.routes.generator.generate(seed)))
        })
        .collect())
}

fn eval_env(cfg: &RunConfig) -> Result<KineticEnv, HarnessError> {
    let mut env = KineticEnv::new(cfg.env.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
    env.set_mode(EnvMode::Eval);
    Ok(env)
}

pub fn evaluate_driver(
    cfg: &RunConfig,
    episodes: usize,
    driver: &mut dyn FnMut(&Observation) -> Action2D,
) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let mut env = eval_env(cfg)?;
    eval_routes(cfg, episodes)?
        .iter()
        .enumerate()
        .map(|(i, (seed, route))| run_episode(&mut env, route, *seed, i as u64, driver))
        .collect()
}

/// Greedy rollouts: exploration noise 0, evaluation termination rules.
pub fn evaluate_policy(policy: &Policy, cfg: &RunConfig, episodes: usize) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    evaluate_driver(cfg, episodes, &mut |obs| policy.act(obs, 0.0, &mut rng))
}

pub fn evaluate_expert(cfg: &RunConfig, episodes: usize) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let expert = Expert::new(ExpertConfig::for_env(&cfg.env));
    evaluate_driver(cfg, episodes, &mut |obs| expert.act_2d(&obs.state_vec))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub records: Vec<EpisodeRecord>,
    pub metrics: AggregateMetrics,
}

/// Loads a checkpoint, checks it against the config and evaluates it.
pub fn evaluate_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Evaluation, HarnessError> {
    let ck = Checkpoint::load(path)?;
    ck.check_compatible(&cfg.learner, cfg.env.grid_shape())?;
    let policy = ck.policy()?;
    let records = evaluate_policy(&policy, cfg, cfg.eval_episodes)?;
    let metrics = AggregateMetrics::from_records(&records, &cfg.infractions);
    Ok(Evaluation { records, metrics })
}

/// Writes `eval.json` (aggregate plus raw episodes) and `eval.csv`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let json = serde_json::json!({ "aggregate": eval.metrics, "episodes": eval.records });
    std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&json).unwrap())
        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let mut w = csv::Writer::from_path(dir.join("eval.csv")).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    w.write_record(["episode", "seed", "return", "route_completion", "event", "steps", "mean_speed", "distance"])
        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    for r in &eval.records {
        w.write_record([
            r.episode.to_string(),
            r.seed.to_string(),
            r.ret.to_string(),
            r.route_completion.to_string(),
            r.event.name().to_string(),
            r.steps.to_string(),
            r.mean_speed.to_string(),
            r.distance.to_string(),
        ])
        .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| HarnessError::Runtime(e.to_string()))
}

pub fn success_count(records: &[EpisodeRecord]) -> usize {
    records.iter().filter(|r| r.event == TerminationEvent::RouteCompleted).count()
}
