//! Serves the mock mentor over TCP and queries it with the socket client.

use std::net::TcpListener;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use mentor_drive::env::{EnvConfig, KineticEnv, RouteGenerator};
use mentor_drive::infer::prompt::{build_prompt, MentorTask, PromptMeta, RuleState};
use mentor_drive::infer::wire::{serve, SocketClient};
use mentor_drive::infer::{BatcherConfig, InferenceClient, InferenceRequest};
use mentor_drive::mentor::{ExpertConfig, MentorConfig, MentorModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let env_cfg = EnvConfig { grid_size: 0, ..Default::default() };
    let model = Arc::new(MentorModel::new(MentorConfig::default(), ExpertConfig::for_env(&env_cfg), 0.3, 100.0)?);
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let server = {
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || serve(listener, BatcherConfig::default(), model, stop))
    };
    println!("serving on {addr}");

    let mut client = SocketClient::connect(addr)?;
    println!("ping round trip {:?}", client.ping(1, Duration::from_secs(2))?);

    let mut env = KineticEnv::new(env_cfg)?;
    let mut obs = env.reset(0, &RouteGenerator::curvy(150.0).generate(0), false)?;
    for step in 0..20u64 {
        let meta = PromptMeta { speed: env.ego().speed, command: env.current_command(), rule: RuleState::Clear };
        client.submit(InferenceRequest::new(0, step, build_prompt(&obs, &meta, MentorTask::Action)));
        obs = env.step(mentor_drive::env::Action2D::new(0.4, 0.0))?.0;
    }
    let mut got = Vec::new();
    for _ in 0..200 {
        got.extend(client.poll_all());
        if got.len() == 20 {
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    got.sort_by_key(|r| r.key.step_idx);
    for r in got.iter().take(5) {
        println!("step {:>2}: {:?} after {:.1} ms", r.key.step_idx, r.feedback.as_ref().and_then(|f| f.action), 1e3 * r.service_time);
    }
    println!("{} of 20 answered", got.len());
    client.shutdown();
    stop.store(true, Ordering::Release);
    let stats = server.join().expect("server thread")?;
    println!("server stats: submitted {} delivered {}", stats.submitted, stats.delivered);
    Ok(())
}
