//! Drives the rule-based expert through one generated route with traffic and
//! signals, printing a trace every second of simulated time.

use mentor_drive::env::{EnvConfig, EnvMode, KineticEnv, RouteGenerator};
use mentor_drive::mentor::{Expert, ExpertConfig};
use mentor_drive::shaping::executed_action;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3u64);
    let cfg = EnvConfig { mode: EnvMode::Eval, ..Default::default() };
    let route = RouteGenerator::default().generate(seed);
    let expert = Expert::new(ExpertConfig::for_env(&cfg));
    let mut env = KineticEnv::new(cfg)?;
    let mut obs = env.reset(seed, &route, false)?;
    println!(
        "route: {:.0} m, {} segments, {} stop lines, {} obstacles",
        route.total_length(),
        route.num_segments(),
        route.rule_zones().len(),
        env.obstacles().len()
    );

    let mut ret = 0.0;
    for step in 0u32.. {
        let a = expert.act_2d(&obs.state_vec);
        let (next, r, done, event, info) = env.step(a)?;
        ret += r;
        if step % 10 == 0 || done {
            let sem = executed_action(a);
            println!(
                "t={:5.1}s  v={:4.2}  cmd={:<12} action={:<36} progress={:4.2}",
                env.time(),
                info.speed,
                env.current_command().name(),
                format!("{}, {}", sem.longitudinal.phrase(), sem.lateral.phrase()),
                info.route_completion
            );
        }
        obs = next;
        if done {
            println!("episode ended: {event:?}, return {ret:.1}, infractions {:?}", info.infractions);
            break;
        }
    }
    Ok(())
}
