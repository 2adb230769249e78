//! Shaped rewards from contrastive margins: the expert's executed actions
//! agree with what the scorer sees far more often than random actions do,
//! and the running normalizer keeps the bonus on a fixed scale.

use mentor_drive::env::{Action2D, EnvConfig, KineticEnv, RouteGenerator};
use mentor_drive::mentor::{Expert, ExpertConfig, MentorConfig, MentorModel};
use mentor_drive::shaping::{executed_action, margin, normalize_and_shape, score, Context, NeighborSets, RmsFilter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env_cfg = EnvConfig { grid_size: 0, ..Default::default() };
    let expert = Expert::new(ExpertConfig::for_env(&env_cfg));
    let mentor = MentorModel::new(MentorConfig::default(), ExpertConfig::for_env(&env_cfg), 0.3, 100.0)?;
    let neighbors = NeighborSets::intensity_variants();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut filter = RmsFilter::new(1e-8);

    for (name, use_expert) in [("expert", true), ("random", false)] {
        let mut env = KineticEnv::new(env_cfg.clone())?;
        let mut obs = env.reset(0, &RouteGenerator::curvy(150.0).generate(0), false)?;
        let (mut raw_sum, mut shaped_sum, mut n) = (0.0, 0.0, 0);
        for _ in 0..300 {
            let a = if use_expert {
                expert.act_2d(&obs.state_vec)
            } else {
                Action2D::new(rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0))
            };
            let ctx = Context::new(env.current_command(), env.speed_bin());
            // The scorer sees what the expert would do here.
            let label = executed_action(expert.act_2d(&obs.state_vec));
            let img = mentor.embedder().embed_image(ctx, label, 0.3, &mut rng);
            let p = score(mentor.library(), &img, ctx, 100.0)?;
            let m = margin(&p, executed_action(a), &neighbors)?;
            let (next, r_env, done, _, _) = env.step(a)?;
            let (_, shaped) = normalize_and_shape(m, r_env, &mut filter, 0.1);
            raw_sum += m;
            shaped_sum += shaped - r_env;
            n += 1;
            obs = next;
            if done {
                break;
            }
        }
        println!(
            "{name:>6}: {n} steps, mean margin {:.3}, mean bonus {:+.3}, filter mean {:.3} std {:.3}",
            raw_sum / n as f64,
            shaped_sum / n as f64,
            filter.mean(),
            filter.std()
        );
    }
    Ok(())
}
