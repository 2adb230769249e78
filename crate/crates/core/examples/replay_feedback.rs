//! Replay buffer with late-arriving mentor feedback: attach, duplicates,
//! evicted keys, and masked sampling.

use std::sync::Arc;

use mentor_drive::env::{Action2D, EnvConfig, KineticEnv, RouteGenerator};
use mentor_drive::replay::{AugmentedTransition, ReplayBuffer, TransitionKey};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut env = KineticEnv::new(EnvConfig { grid_size: 0, ..Default::default() })?;
    let mut obs = Arc::new(env.reset(0, &RouteGenerator::curvy(150.0).generate(0), false)?);
    let mut buf = ReplayBuffer::new(64)?;

    for step in 0..100u64 {
        let a = Action2D::new(0.6, 0.05 * ((step as f64) / 10.0).sin());
        let (next, r, done, _, _) = env.step(a)?;
        let next = Arc::new(next);
        buf.push(AugmentedTransition::new(TransitionKey::new(0, step), Arc::clone(&obs), a, r, Arc::clone(&next), done))?;
        obs = next;
        if done {
            break;
        }
    }
    println!("pushed 100 transitions into a 64-slot ring: len {}, {:?}", buf.len(), buf.counters());

    // Feedback for every third step arrives after the fact.
    for step in (0..100u64).step_by(3) {
        buf.attach_feedback(TransitionKey::new(0, step), Action2D::new(0.5, 0.0));
    }
    let again = buf.attach_feedback(TransitionKey::new(0, 99), Action2D::new(-1.0, 0.0));
    println!("second attach to (0, 99): {again:?}");
    println!("after feedback: mask fraction {:.3}, {:?}", buf.mask_fraction(), buf.counters());

    let batch = buf.sample(32, 7)?;
    println!("sampled 32: {} masked, first indices {:?}", batch.mask_count(), &batch.indices[..8]);
    let same = buf.sample(32, 7)?;
    println!("same seed reproduces the batch: {}", same.indices == batch.indices);
    Ok(())
}
