//! A hand-rolled training loop: environment, replay buffer with expert
//! feedback on every fourth step, and guided learner updates.

use std::sync::Arc;

use mentor_drive::env::{EnvConfig, KineticEnv, RouteGenerator};
use mentor_drive::guidance::GuidanceConfig;
use mentor_drive::learner::{Learner, LearnerConfig, PolicyMode};
use mentor_drive::mentor::{Expert, ExpertConfig};
use mentor_drive::replay::{AugmentedTransition, ReplayBuffer, TransitionKey};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let total = 3000u64;
    let env_cfg = EnvConfig { grid_size: 0, ..Default::default() };
    let expert = Expert::new(ExpertConfig::for_env(&env_cfg));
    let mut env = KineticEnv::new(env_cfg.clone())?;
    let routes = RouteGenerator::curvy(80.0);
    let cfg = LearnerConfig { hidden: vec![64, 64], mode: PolicyMode::Stochastic, batch_size: 64, ..Default::default() };
    let guidance = GuidanceConfig { vmr_enabled: true, awag_enabled: true, horizon: total, ..Default::default() };
    let mut learner = Learner::new(cfg, guidance, env_cfg.grid_shape(), total, 0)?;
    let mut buf = ReplayBuffer::new(50_000)?;

    let mut episode = 0u64;
    let mut obs = Arc::new(env.reset(episode, &routes.generate(episode), false)?);
    let mut ret = 0.0;
    for step in 0..total {
        let a = learner.act(&obs, learner.noise_scale(step));
        let (next, r, done, event, _) = env.step(a)?;
        let next = Arc::new(next);
        let key = TransitionKey::new(0, step);
        buf.push(AugmentedTransition::new(key, Arc::clone(&obs), a, r, Arc::clone(&next), done))?;
        if step % 4 == 0 {
            buf.attach_feedback(key, expert.act_2d(&obs.state_vec));
        }
        ret += r;
        obs = next;
        if done {
            println!("step {step:>5}: episode {episode} return {ret:7.1} ({event:?})");
            episode += 1;
            ret = 0.0;
            obs = Arc::new(env.reset(episode, &routes.generate(episode), false)?);
        }

        if step >= 500 && step % 500 == 0 {
            let s = learner.update(&buf.sample(64, step)?, step)?;
            let actor = s.actor.map(|t| format!("base {:+.3} awag {:.3}", t.base, t.awag)).unwrap_or_default();
            println!(
                "  update @ {step}: td {:.4} vmr {:.4} lambda {:.3} iota {:.3} {actor}",
                s.critic.td, s.critic.vmr, s.guidance.lambda, s.guidance.iota
            );
        } else if step >= 500 {
            learner.update(&buf.sample(64, step)?, step)?;
        }
    }
    println!("{} updates, {} parameters, feedback on {:.0}% of replay", learner.updates(), learner.param_count(), 100.0 * buf.mask_fraction());
    Ok(())
}
