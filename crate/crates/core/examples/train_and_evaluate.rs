//! End to end through the harness: a short mentor-guided training run, a
//! reload-and-evaluate of the final checkpoint, and SVG plots of the curves.

use mentor_drive::harness::{evaluate_checkpoint, evaluate_expert, plot::plot, train_seed, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::compact();
    cfg.total_steps = 4000;
    cfg.guidance.vmr_enabled = true;
    cfg.guidance.horizon = 4000;
    cfg.apply_overrides(&std::env::args().skip(1).collect::<Vec<_>>())?;
    let dir = std::env::temp_dir().join("mentor-drive-example");

    let expert = evaluate_expert(&cfg, cfg.eval_episodes)?;
    let expert_return = expert.iter().map(|r| r.ret).sum::<f64>() / expert.len() as f64;
    println!("expert mean return {expert_return:.1}");

    let out = train_seed(&cfg, 0, &dir)?;
    for e in out.evals.iter().step_by(2) {
        println!("step {:>5}: eval return {:7.1}, route completion {:.2}", e.step, e.mean_return, e.mean_route_completion);
    }
    println!("steps to 60% of expert: {:?}", out.steps_to_threshold(0.6 * expert_return));
    if let Some(a) = out.availability() {
        println!("mentor feedback availability {a:.3}");
    }

    if let Some(ck) = &out.final_checkpoint {
        let ev = evaluate_checkpoint(ck, &cfg)?;
        let m = &ev.metrics;
        println!(
            "final policy over {} episodes: driving score {:.3} ± {:.3}, route completion {:.3}, collisions/km {:.2}",
            m.episodes, m.driving_score.mean, m.driving_score.std, m.route_completion.mean, m.collisions_per_km.mean
        );
    }
    let report = plot(&dir, 5)?;
    println!("plots written: {:?}", report.images);
    Ok(())
}
