use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use mentor_drive::harness::bench::{bench, BenchConfig};
use mentor_drive::harness::evaluate::write_evaluation;
use mentor_drive::harness::{evaluate_checkpoint, plot::plot, train, HarnessError, RunConfig};
use mentor_drive::infer::wire;
use mentor_drive::mentor::{ExpertConfig, MentorModel};

#[derive(Parser)]
#[command(name = "mentor-drive", version, about = "Mentor-guided RL on a toy driving simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Start from the compact toy configuration instead of the defaults.
    #[arg(long)]
    compact: bool,
    /// Field override, e.g. `--set learner.gamma=0.95`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None if self.compact => RunConfig::compact(),
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every configured seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Single-threaded simulated-clock mode.
        #[arg(long)]
        deterministic: bool,
    },
    /// Evaluate a checkpoint greedily.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Exit with code 4 when the mean driving score is below this.
        #[arg(long)]
        min_driving_score: Option<f64>,
    },
    /// Serve the mock mentor over TCP.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Stop after this many seconds; runs until killed otherwise.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Policy, batcher and rollout throughput.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Constant mentor latency in seconds.
        #[arg(long, default_value_t = 0.05)]
        latency: f64,
        #[arg(long, default_value_t = 20_000)]
        steps: usize,
        /// Exit with code 4 below this policy/mentor throughput ratio.
        #[arg(long)]
        min_ratio: Option<f64>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Render SVG figures for a run directory.
    Plot {
        run: PathBuf,
        #[arg(long, default_value_t = 50)]
        window: usize,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        cmd: ConfigCmd,
    },
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Write a config file with every default filled in.
    Init {
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long)]
        compact: bool,
    },
}

fn runtime(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Runtime(e.to_string())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.cmd {
        Cmd::Train { cfg, output, deterministic } => {
            let mut c = cfg.load()?;
            if let Some(o) = output {
                c.output_dir = o;
            }
            if deterministic {
                c.runtime.deterministic = true;
            }
            for out in train(&c)? {
                let last = out.evals.last().map(|e| format!(", last eval return {:.2}", e.mean_return)).unwrap_or_default();
                let avail = out.availability().map(|a| format!(", availability {a:.4}")).unwrap_or_default();
                println!("seed {}: {} steps, {} episodes{last}{avail} -> {}", out.seed, out.steps, out.episodes.len(), out.dir.display());
            }
        }
        Cmd::Evaluate { cfg, checkpoint, output, min_driving_score } => {
            let c = cfg.load()?;
            let ev = evaluate_checkpoint(&checkpoint, &c)?;
            println!("{}", ev.metrics.table());
            let dir = output.unwrap_or_else(|| checkpoint.parent().map(|p| p.join("eval")).unwrap_or_else(|| "eval".into()));
            write_evaluation(&dir, &ev)?;
            println!("wrote {}", dir.join("eval.json").display());
            if let Some(min) = min_driving_score {
                if ev.metrics.driving_score.mean < min {
                    return Err(HarnessError::Threshold(format!(
                        "driving score {:.4} below {min}",
                        ev.metrics.driving_score.mean
                    )));
                }
            }
        }
        Cmd::Serve { cfg, addr, duration } => {
            let c = cfg.load()?;
            let model = MentorModel::new(c.mentor.clone(), ExpertConfig::for_env(&c.env), c.shaping.image_noise, c.shaping.temperature)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            let listener = TcpListener::bind(&addr).map_err(runtime)?;
            println!("serving on {}", listener.local_addr().map_err(runtime)?);
            let stop = Arc::new(AtomicBool::new(false));
            if let Some(d) = duration {
                let s = Arc::clone(&stop);
                std::thread::spawn(move || {
                    std::thread::sleep(Duration::from_secs_f64(d.max(0.0)));
                    s.store(true, Ordering::Release);
                });
            }
            let stats = wire::serve(listener, c.batcher.clone(), Arc::new(model), stop).map_err(runtime)?;
            println!("{}", serde_json::to_string_pretty(&stats).map_err(runtime)?);
        }
        Cmd::Bench { cfg, latency, steps, min_ratio, json } => {
            let c = cfg.load()?;
            let b = BenchConfig { mentor_latency: latency, policy_steps: steps, rollout_steps: steps, ..Default::default() };
            let report = bench(&c, &b)?;
            println!("{}", report.table());
            if let Some(p) = json {
                std::fs::write(&p, serde_json::to_string_pretty(&report).map_err(runtime)?).map_err(runtime)?;
            }
            if let Some(min) = min_ratio {
                if report.policy_to_mentor_ratio() < min {
                    return Err(HarnessError::Threshold(format!(
                        "policy/mentor throughput ratio {:.1} below {min}",
                        report.policy_to_mentor_ratio()
                    )));
                }
            }
        }
        Cmd::Plot { run, window } => {
            let r = plot(&run, window)?;
            for p in &r.images {
                println!("{}", p.display());
            }
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
        }
        Cmd::Config { cmd: ConfigCmd::Init { output, compact } } => {
            let c = if compact { RunConfig::compact() } else { RunConfig::default() };
            let text = c.to_toml();
            match output {
                Some(p) => std::fs::write(&p, text).map_err(runtime)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
