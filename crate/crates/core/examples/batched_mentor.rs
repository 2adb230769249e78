//! Eight environments share one threaded micro-batching mentor service.
//! Each step submits a prompt; responses are polled per env and matched back
//! to the step that produced them.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use mentor_drive::env::{EnvConfig, KineticEnv, RouteGenerator};
use mentor_drive::infer::prompt::{build_prompt, MentorTask, PromptMeta, RuleState};
use mentor_drive::infer::{BatcherConfig, InferenceRequest, InferenceService};
use mentor_drive::mentor::{ExpertConfig, LatencyDist, MentorConfig, MentorModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env_cfg = EnvConfig { grid_size: 0, ..Default::default() };
    let mcfg = MentorConfig { latency: LatencyDist::Constant { seconds: 0.004 }, failure_rate: 0.05, ..Default::default() };
    let model = Arc::new(MentorModel::new(mcfg, ExpertConfig::for_env(&env_cfg), 0.3, 100.0)?);
    let svc = InferenceService::start(BatcherConfig { max_batch: 8, timeout: 0.01, ..Default::default() }, model)?;

    let gen = RouteGenerator::curvy(150.0);
    let mut envs = Vec::new();
    for e in 0..8u64 {
        let mut env = KineticEnv::new(env_cfg.clone())?;
        let obs = env.reset(e, &gen.generate(e), false)?;
        envs.push((env, obs));
    }

    let mut feedback: HashMap<(u32, u64), bool> = HashMap::new();
    for step in 0..60u64 {
        for (i, (env, obs)) in envs.iter_mut().enumerate() {
            let meta = PromptMeta { speed: env.ego().speed, command: env.current_command(), rule: RuleState::Clear };
            svc.submit(InferenceRequest::new(i as u32, step, build_prompt(obs, &meta, MentorTask::Both)));
            let (next, _, _, _, _) = env.step(mentor_drive::env::Action2D::new(0.5, 0.0))?;
            *obs = next;
        }
        std::thread::sleep(Duration::from_millis(6));
        for i in 0..envs.len() as u32 {
            for r in svc.poll(i) {
                assert_eq!(r.key.env_id, i);
                feedback.insert((i, r.key.step_idx), r.mask());
            }
        }
    }
    std::thread::sleep(Duration::from_millis(200));
    for r in svc.poll_all_envs() {
        feedback.insert((r.key.env_id, r.key.step_idx), r.mask());
    }
    let stats = svc.stop();
    let with = feedback.values().filter(|m| **m).count();
    println!("responses {} ({} with feedback, {} failed)", feedback.len(), with, feedback.len() - with);
    println!(
        "submitted {} accepted {} batches {} max batch {} timeouts {} availability {:.3}",
        stats.submitted,
        stats.accepted,
        stats.batches_formed,
        stats.max_batch_size(),
        stats.timeouts_fired,
        stats.availability()
    );
    println!("batch size histogram {:?}", stats.size_histogram);
    Ok(())
}
