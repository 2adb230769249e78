//! Acceptance criteria 1-12. One PASS/FAIL line per criterion goes straight to
//! stderr so it shows without `--nocapture`.

mod common;

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use mentor_drive::env::{
    EnvConfig, EnvMode, KineticEnv, Obstacle, ObstacleKind, Point, RouteGenerator, SpeedBin,
    STATE_DIM,
};
use mentor_drive::guidance::{
    actor_base_loss, actor_total, awag_advantage, awag_loss, awag_scale, awag_weight, cosine_coeff, critic_total, td_loss,
    vmr_loss, GuidanceConfig,
};
use mentor_drive::harness::train::{EPISODES_CSV, EVAL_CSV, METRICS_CSV};
use mentor_drive::harness::{evaluate_expert, train_seed, AggregateMetrics, RunConfig, TrainOutcome};
use mentor_drive::infer::BatcherConfig;
use mentor_drive::learner::{Learner, LearnerConfig, PolicyMode};
use mentor_drive::mentor::{EmbeddingModel, Expert, ExpertConfig};
use mentor_drive::nn::{Activation, NetSpec, Network};
use mentor_drive::shaping::{
    discretize_lateral, discretize_longitudinal, discretize_speed, margin, normalize_and_shape, score, Context, Lateral,
    Longitudinal, NeighborSets, PromptLibrary, RmsFilter, SemanticAction, NUM_ACTIONS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, StudentsT};

const SEEDS: std::ops::Range<u64> = 0..11;
const SHAPING_SEEDS: std::ops::Range<u64> = 0..6;

struct Line {
    id: u8,
    pass: bool,
}

fn emit(id: u8, name: &str, pass: bool, secs: f64, detail: &str) -> Line {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id:>2} {tag} [{name}] {detail} ({secs:.2}s)");
    Line { id, pass }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn const_net(vec_in: usize, c: f64) -> Network {
    let spec = NetSpec { grid: None, vec_in, hidden: vec![2], out: 1, activation: Activation::Tanh };
    let mut net = Network::new(spec, &mut ChaCha8Rng::seed_from_u64(0));
    net.params.iter_mut().for_each(|p| *p = 0.0);
    *net.params.last_mut().unwrap() = c;
    net
}

fn const_target_learner(q1: f64, q2: f64) -> Learner {
    let cfg = LearnerConfig { gamma: 0.99, hidden: vec![2], mode: PolicyMode::Deterministic, ..Default::default() };
    let actor = Network::new(
        NetSpec { grid: None, vec_in: STATE_DIM, hidden: vec![2], out: 2, activation: Activation::Tanh },
        &mut ChaCha8Rng::seed_from_u64(1),
    );
    let t = [const_net(STATE_DIM + 2, q1), const_net(STATE_DIM + 2, q2)];
    Learner::from_parts(cfg, GuidanceConfig::default(), 100, actor, t.clone(), t, ChaCha8Rng::seed_from_u64(2))
}

fn td_target_single(q1: f64, q2: f64, r: f64, done: bool) -> f64 {
    let mut l = const_target_learner(q1, q2);
    let mut b = common::random_batch(1, 0, 0);
    b.rewards[0] = r;
    b.dones[0] = if done { 1.0 } else { 0.0 };
    l.td_target(&b, 0.0)[0]
}

fn arithmetic() -> (bool, String) {
    let mut failed: Vec<&str> = Vec::new();
    let mut check = |ok: bool, name: &'static str| {
        if !ok {
            failed.push(name);
        }
    };
    let e = 1e-9;

    check(close(td_target_single(2.0, 2.0, 1.0, false), 2.98, e), "td_target arithmetic");
    check(close(td_target_single(2.0, 7.0, 1.0, true), 1.0, e), "td_target terminal");
    check(close(td_target_single(5.0, 3.0, 0.0, false), 0.99 * 3.0, e), "td_target min head");

    check(close(td_loss([&[2.0], &[2.0]], &[2.0]), 0.0, e), "td loss zero");
    check(close(td_loss([&[3.0], &[1.0]], &[2.0]), 1.0, e), "td loss arithmetic");

    check(close(vmr_loss([&[1.2], &[1.2]], [&[1.0], &[1.0]], &[1.0], 0.5), 2.0 * 0.09, e), "vmr per head");
    check(vmr_loss([&[1.2, 9.0], &[0.3, 4.0]], [&[1.0, 2.0], &[1.0, 0.0]], &[0.0, 0.0], 0.5) == 0.0, "vmr mask");

    check(close(critic_total(2.0, 4.0, 0.25), 3.0, e), "critic total");
    check(close(critic_total(2.0, 4.0, 1.0), 6.0, e), "critic total at start");
    let lam_end = cosine_coeff(1000, 1.0, 0.0, 1000, 2.0).unwrap();
    check(critic_total(2.0, 4.0, lam_end) == 2.0, "critic total after horizon");

    check(close(actor_base_loss([&[1.5, 1.5], &[1.5, 1.5]], 1.0), -1.5, e), "base loss constant");
    check(close(awag_scale(&[4.0, -4.0, 4.0], 1.0, 0.0), 0.25, e), "lambda arithmetic");

    check(awag_advantage((1.0, 1.0), (1.0, 1.0)) == (0.0, false), "advantage tie");
    check(awag_advantage((3.0, 3.0), (1.0, 1.0)) == (2.0, true), "advantage simple");
    check(awag_advantage((5.0, 3.0), (2.0, 4.0)) == (1.0, true), "advantage per-action min");

    check(close(awag_weight(0.0, 2.0, 20.0), 1.0, e), "weight at zero");
    check(close(awag_weight(2.0, 2.0, 20.0), std::f64::consts::E, e), "weight e");
    check(close(awag_weight(20.0, 2.0, 20.0), 20.0, e), "weight clip");

    check(close(awag_loss(&[1.0], &[true], &[2.0], &[-1.5]), 3.0, e), "awag loss arithmetic");
    check(awag_loss(&[1.0, 1.0], &[false, false], &[3.0, 4.0], &[-1.0, -2.0]) == 0.0, "awag closed gates");
    check(close(actor_total(-1.0, 2.0, 0.5), 0.0, e), "actor total");

    check(cosine_coeff(0, 1.0, 0.0, 100, 1.0).unwrap() == 1.0, "schedule start");
    check(cosine_coeff(100, 1.0, 0.0, 100, 1.0).unwrap() == 0.0, "schedule end");
    check(close(cosine_coeff(50, 1.0, 0.0, 100, 1.0).unwrap(), 0.5, e), "schedule midpoint");

    let model = EmbeddingModel::new(64, 0.7, 3).unwrap();
    let lib = PromptLibrary::build(&model).unwrap();
    let ctx = Context::new(mentor_drive::env::Command::FollowLane, SpeedBin::Moderate);
    let flat = score(&lib, &model.embed_image(ctx, SemanticAction::from_index(4), 0.3, &mut ChaCha8Rng::seed_from_u64(0)), ctx, 0.0).unwrap();
    check(flat.iter().all(|p| close(*p, 1.0 / 30.0, e)), "score uniform");
    check(close(flat.iter().sum::<f64>(), 1.0, 1e-6), "score sum");
    let truth = SemanticAction::from_index(11);
    let exact = score(&lib, &model.embed_image(ctx, truth, 0.0, &mut ChaCha8Rng::seed_from_u64(0)), ctx, 100.0).unwrap();
    let top = (0..NUM_ACTIONS).max_by(|a, b| exact[*a].total_cmp(&exact[*b])).unwrap();
    check(top == truth.index(), "score argmax");

    let mut masks = [0u32; NUM_ACTIONS];
    for (i, m) in masks.iter_mut().enumerate() {
        *m = 1 << i;
    }
    masks[0] |= 1 << 1;
    masks[1] |= 1;
    let sets = NeighborSets::from_masks(masks).unwrap();
    let mut p = [0.0; NUM_ACTIONS];
    p[0] = 0.4;
    p[2] = 0.4;
    check(margin(&p, SemanticAction::from_index(0), &sets).unwrap() == 0.0, "margin tie");
    p[0] = 0.5;
    p[1] = 0.6;
    p[2] = 0.2;
    check(close(margin(&p, SemanticAction::from_index(0), &sets).unwrap(), 0.3, e), "margin neighbor excluded");

    let mut f = RmsFilter::new(1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        f.update(rng.gen_range(0.0..1.0));
    }
    let mu = f.mean();
    let (v, fin) = normalize_and_shape(mu, 0.7, &mut f, 0.5);
    check(close(v, 0.0, e) && close(fin, 0.7, e), "shaping centered");
    let far = f.mean() + 10.0 * f.std();
    let (v, _) = normalize_and_shape(far, 0.0, &mut f, 0.5);
    check(v == 1.0, "shaping clip");
    let (_, fin) = normalize_and_shape(0.9, -2.0, &mut f, 0.0);
    check(fin == -2.0, "shaping disabled");

    (failed.is_empty(), if failed.is_empty() { "all worked examples reproduced".into() } else { format!("failed: {failed:?}") })
}

fn schedule() -> (bool, String) {
    let t = 10_000u64;
    let mut ok = true;
    for k in [0.5, 1.0, 2.0, 3.0] {
        ok &= cosine_coeff(0, 0.8, 0.1, t, k).unwrap() == 0.8;
        ok &= cosine_coeff(t, 0.8, 0.1, t, k).unwrap() == 0.1;
        let mut prev = f64::INFINITY;
        for s in 0..=t {
            let c = cosine_coeff(s, 0.8, 0.1, t, k).unwrap();
            ok &= c <= prev;
            prev = c;
        }
    }
    (ok, format!("endpoints exact, nonincreasing on {} points x 4 exponents", t + 1))
}

fn gradients() -> (bool, String) {
    let mut worst = 0.0f64;
    let mut ok = true;
    let mut gates = 0;
    for seed in 0..5 {
        let r = common::gradient_checks(seed);
        worst = worst.max(r.td).max(r.vmr).max(r.base).max(r.awag);
        ok &= r.params_actor <= 64 && r.params_critic <= 64;
        ok &= r.vmr_data_path > 1e-3 && r.base_scale_leak < 1e-12 && r.awag_masked_norm == 0.0;
        gates += r.open_gates;
    }
    ok &= worst < 1e-4 && gates > 0;
    (ok, format!("max relative error {worst:.2e} (< 1e-4), detached paths zero, {gates} open gates"))
}

fn vmr_direction() -> (bool, String) {
    let (before, after, delta) = common::vmr_directional(200, 3);
    (after >= delta / 2.0, format!("mean Q(o,a_vlm)-Q(o,a): {before:.4} -> {after:.4}, needs >= {:.3}", delta / 2.0))
}

fn batcher() -> (bool, String) {
    let env = EnvConfig { grid_size: 0, ..Default::default() };
    let r = common::batcher_fuzz(100_000, 16, BatcherConfig::default(), &env, 0);
    let ok = r.mismatches == 0 && r.max_batch <= r.b_max && r.all_resolved() && r.ratio() >= 0.9;
    (
        ok,
        format!(
            "{} requests, mismatches {}, max batch {}/{}, resolved {}, throughput ratio {:.3} (>= 0.9)",
            r.requests,
            r.mismatches,
            r.max_batch,
            r.b_max,
            r.all_resolved(),
            r.ratio()
        ),
    )
}

fn table_speed(v: f64) -> SpeedBin {
    if v < 0.1 {
        SpeedBin::Stopped
    } else if v < 2.0 {
        SpeedBin::Slow
    } else if v < 4.5 {
        SpeedBin::Moderate
    } else {
        SpeedBin::High
    }
}

fn table_longitudinal(t: f64, b: f64) -> Longitudinal {
    if b > 0.5 {
        Longitudinal::BrakingHard
    } else if b > 0.05 {
        Longitudinal::Braking
    } else if t > 0.8 {
        Longitudinal::AcceleratingFast
    } else if t > 0.3 {
        Longitudinal::Accelerating
    } else if t > 0.05 {
        Longitudinal::AcceleratingGently
    } else {
        Longitudinal::Idling
    }
}

fn table_lateral(s: f64) -> Lateral {
    if s.abs() < 0.05 {
        Lateral::GoingStraight
    } else if s > 0.3 {
        Lateral::TurningRightSharply
    } else if s >= 0.05 {
        Lateral::TurningRight
    } else if s < -0.3 {
        Lateral::TurningLeftSharply
    } else {
        Lateral::TurningLeft
    }
}

fn around(points: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut out: Vec<f64> = points.iter().flat_map(|p| [p - 1e-6, *p, p + 1e-6]).filter(|x| (lo..=hi).contains(x)).collect();
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

fn library() -> (bool, String) {
    let model = EmbeddingModel::new(64, 0.7, 3).unwrap();
    let lib = PromptLibrary::build(&model).unwrap();
    let mut ok = lib.len() == 720;
    let contexts: Vec<Context> = Context::all().collect();
    ok &= contexts.len() == 24;
    ok &= contexts.iter().all(|c| lib.slice(*c).len() == 30 && lib.slice(*c).iter().all(|e| e.context == *c));
    let mut texts: Vec<&str> = lib.entries().iter().map(|e| e.text.as_str()).collect();
    texts.sort_unstable();
    texts.dedup();
    ok &= texts.len() == 720;

    let mut cases = 0;
    for v in around(&[0.0, 0.1, 2.0, 4.5, 10.0], 0.0, f64::MAX) {
        ok &= discretize_speed(v).unwrap() == table_speed(v);
        cases += 1;
    }
    let lon = around(&[0.0, 0.05, 0.3, 0.5, 0.8, 1.0], 0.0, 1.0);
    for t in &lon {
        for b in &lon {
            ok &= discretize_longitudinal(*t, *b).unwrap() == table_longitudinal(*t, *b);
            cases += 1;
        }
    }
    for s in around(&[-1.0, -0.3, -0.05, 0.0, 0.05, 0.3, 1.0], -1.0, 1.0) {
        ok &= discretize_lateral(s).unwrap() == table_lateral(s);
        cases += 1;
    }
    ok &= discretize_speed(-1e-6).is_err() && discretize_lateral(1.0 + 1e-6).is_err();
    (ok, format!("720 prompts, 24 x 30 slices, all distinct; {cases} boundary cases match"))
}

fn margin_and_rms() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut ok = true;
    let mut checked = 0;
    for _ in 0..10_000 {
        let mut p: Vec<f64> = (0..NUM_ACTIONS).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        let density = rng.gen_range(0.0..0.3);
        let mut masks = [0u32; NUM_ACTIONS];
        for i in 0..NUM_ACTIONS {
            masks[i] |= 1 << i;
            for j in 0..i {
                if rng.gen_bool(density) {
                    masks[i] |= 1 << j;
                    masks[j] |= 1 << i;
                }
            }
        }
        let sets = NeighborSets::from_masks(masks).unwrap();
        let e = rng.gen_range(0..NUM_ACTIONS);
        let negatives: Vec<f64> = (0..NUM_ACTIONS).filter(|j| masks[e] & (1 << j) == 0).map(|j| p[j]).collect();
        let got = margin(&p, SemanticAction::from_index(e), &sets);
        if negatives.is_empty() {
            ok &= got.is_err();
        } else {
            let best = negatives.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ok &= got.unwrap() == (p[e] - best).max(0.0);
            checked += 1;
        }
    }

    let dist = Normal::new(3.0, 2.0).unwrap();
    let xs: Vec<f64> = (0..100_000).map(|_| dist.sample(&mut rng)).collect();
    let mut f = RmsFilter::new(1e-8);
    let mut worst = 0.0f64;
    for (n, x) in xs.iter().enumerate() {
        f.update(*x);
        if (n + 1) % 1000 == 0 || n < 100 {
            let pre = &xs[..=n];
            let mean = pre.iter().sum::<f64>() / pre.len() as f64;
            let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / pre.len() as f64;
            worst = worst.max((f.mean() - mean).abs() / mean.abs().max(1e-12));
            if var > 0.0 {
                worst = worst.max((f.variance() - var).abs() / var);
            }
        }
    }
    ok &= worst < 1e-9;
    (ok, format!("{checked} margins equal enumeration; RMS worst relative error {worst:.1e} over 1e5 values"))
}

fn learning_cfg(variant: &str) -> RunConfig {
    let mut c = RunConfig::compact();
    match variant {
        "vmr" => c.guidance.vmr_enabled = true,
        "awag" => {
            c.guidance.awag_enabled = true;
            c.guidance.horizon = 10_000;
        }
        "shaping" => c.shaping.enabled = true,
        _ => {}
    }
    c
}

fn run_seeds(variant: &str, seeds: std::ops::Range<u64>, root: &Path) -> Vec<TrainOutcome> {
    let cfg = learning_cfg(variant);
    seeds.map(|s| train_seed(&cfg, s, &root.join(format!("{variant}-{s}"))).expect("training run")).collect()
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

fn fmt_steps(v: u64) -> String {
    if v == u64::MAX {
        "never".into()
    } else {
        v.to_string()
    }
}

struct Learning {
    threshold: f64,
    base: Vec<u64>,
    vmr: Vec<u64>,
    awag: Vec<u64>,
    availability: Vec<f64>,
    margin_pairs: Vec<(f64, f64)>,
}

fn learning(root: &Path) -> Learning {
    let expert = evaluate_expert(&RunConfig::compact(), 10).unwrap();
    let threshold = 0.6 * expert.iter().map(|r| r.ret).sum::<f64>() / expert.len() as f64;
    let hits = |runs: &[TrainOutcome]| -> Vec<u64> {
        runs.iter().map(|o| o.steps_to_threshold(threshold).unwrap_or(u64::MAX)).collect()
    };
    let base = run_seeds("base", SEEDS, root);
    let vmr = run_seeds("vmr", SEEDS, root);
    let awag = run_seeds("awag", SEEDS, root);
    let shaping = run_seeds("shaping", SHAPING_SEEDS, root);
    let availability = vmr.iter().chain(&awag).chain(&shaping).filter_map(TrainOutcome::availability).collect();
    let total = RunConfig::compact().total_steps;
    let margin_pairs = shaping
        .iter()
        .map(|o| {
            let mean_in = |lo: u64, hi: u64| {
                let v: Vec<f64> = o.margins.iter().filter(|(s, _)| *s >= lo && *s < hi).map(|m| m.1).collect();
                v.iter().sum::<f64>() / v.len().max(1) as f64
            };
            (mean_in(0, total / 10), mean_in(total - total / 10, total))
        })
        .collect();
    Learning { threshold, base: hits(&base), vmr: hits(&vmr), awag: hits(&awag), availability, margin_pairs }
}

fn sample_efficiency(l: &Learning) -> (bool, String) {
    let reached = l.base.iter().filter(|s| **s != u64::MAX).count();
    let (mb, mv, ma) = (median(l.base.clone()), median(l.vmr.clone()), median(l.awag.clone()));
    let ratio = |m: u64| if mb == u64::MAX || m == u64::MAX { f64::INFINITY } else { m as f64 / mb as f64 };
    let ok = reached >= 3 && ratio(mv) <= 0.7 && ratio(ma) <= 0.7;
    (
        ok,
        format!(
            "threshold {:.1}; median steps base {} (reached on {reached}/{}), vmr {} ({:.2}x), awag {} ({:.2}x)",
            l.threshold,
            fmt_steps(mb),
            l.base.len(),
            fmt_steps(mv),
            ratio(mv),
            fmt_steps(ma),
            ratio(ma)
        ),
    )
}

fn margin_trend(l: &Learning) -> (bool, String) {
    let d: Vec<f64> = l.margin_pairs.iter().map(|(a, b)| b - a).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    let p = 1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t);
    let first = l.margin_pairs.iter().map(|x| x.0).sum::<f64>() / n;
    let last = l.margin_pairs.iter().map(|x| x.1).sum::<f64>() / n;
    (p < 0.05, format!("mean margin first 10% {first:.4} -> last 10% {last:.4}, paired t={t:.2}, one-sided p={p:.1e}"))
}

fn availability(l: &Learning) -> (bool, String) {
    let min = l.availability.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = l.availability.iter().sum::<f64>() / l.availability.len() as f64;
    (min >= 0.95, format!("{} guided runs, availability min {min:.4}, mean {mean:.4}", l.availability.len()))
}

fn static_obstacle_collisions(episodes: u64) -> (u32, usize) {
    let cfg = EnvConfig { grid_size: 0, vehicles: 0, pedestrians: 0, mode: EnvMode::Eval, ..Default::default() };
    let expert = Expert::new(ExpertConfig::for_env(&cfg));
    let gen = RouteGenerator::curvy(150.0);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut collisions, mut stopped) = (0, 0);
    for ep in 0..episodes {
        let mut env = KineticEnv::new(cfg.clone()).unwrap();
        let route = gen.generate(1000 + ep);
        env.reset(ep, &route, false).unwrap();
        let s = rng.gen_range(30.0..120.0);
        let lat = rng.gen_range(-1.0..1.0);
        let (p, h) = (route.point_at(s), route.heading_at(s));
        env.set_obstacles(vec![Obstacle {
            position: Point::new(p.x - lat * h.sin(), p.y + lat * h.cos()),
            velocity: Point::new(0.0, 0.0),
            radius: 1.0,
            kind: ObstacleKind::Vehicle,
        }]);
        let mut obs = env.observe();
        loop {
            let (next, _, done, _, info) = env.step(expert.act_2d(&obs.state_vec)).unwrap();
            collisions += info.infractions.collision_vehicle + info.infractions.collision_pedestrian;
            obs = next;
            if done {
                stopped += (env.ego().speed < 0.1) as usize;
                break;
            }
        }
    }
    (collisions, stopped)
}

fn expert() -> (bool, String) {
    let completion = |cfg: RunConfig| {
        let recs = evaluate_expert(&cfg, 20).unwrap();
        AggregateMetrics::from_records(&recs, &cfg.infractions).route_completion.mean
    };
    let mut clear = RunConfig::default();
    clear.env.vehicles = 0;
    clear.env.pedestrians = 0;
    let clear_rc = completion(clear);
    let traffic_rc = completion(RunConfig::default());
    let (collisions, stopped) = static_obstacle_collisions(20);
    (
        clear_rc >= 0.9 && collisions == 0,
        format!(
            "route completion {clear_rc:.3} over 20 obstacle-free episodes ({traffic_rc:.3} with traffic); \
             static-obstacle suite: {collisions} collisions, {stopped}/20 stopped short"
        ),
    )
}

fn determinism(root: &Path) -> (bool, String) {
    let mut c = RunConfig::compact();
    c.total_steps = 3_000;
    c.guidance.vmr_enabled = true;
    c.shaping.enabled = true;
    let (a, b) = (root.join("det-a"), root.join("det-b"));
    train_seed(&c, 4, &a).unwrap();
    train_seed(&c, 4, &b).unwrap();
    let mut bytes = 0;
    let mut ok = true;
    for f in [METRICS_CSV, EPISODES_CSV, EVAL_CSV] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        ok &= x == y && !x.is_empty();
        bytes += x.len();
    }
    (ok, format!("metrics, episodes and eval CSVs identical ({bytes} bytes)"))
}

#[test]
fn acceptance_criteria() {
    let root = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();

    let (r, s) = timed(arithmetic);
    lines.push(emit(1, "arithmetic", r.0 && s < 1.0, s, &r.1));
    let (r, s) = timed(schedule);
    lines.push(emit(2, "schedule", r.0 && s < 1.0, s, &r.1));
    let (r, s) = timed(gradients);
    lines.push(emit(3, "gradients", r.0 && s < 10.0, s, &r.1));
    let (r, s) = timed(vmr_direction);
    lines.push(emit(4, "vmr direction", r.0 && s < 30.0, s, &r.1));
    let (r, s) = timed(batcher);
    lines.push(emit(5, "batcher fuzz", r.0 && s < 120.0, s, &r.1));
    let (r, s) = timed(library);
    lines.push(emit(6, "library", r.0 && s < 1.0, s, &r.1));
    let (r, s) = timed(margin_and_rms);
    lines.push(emit(7, "margin/rms oracle", r.0 && s < 10.0, s, &r.1));

    let (l, s9) = timed(|| learning(root.path()));
    let (r, _) = timed(|| availability(&l));
    lines.push(emit(8, "availability", r.0, s9, &r.1));
    let r = sample_efficiency(&l);
    lines.push(emit(9, "sample efficiency", r.0 && s9 < 1800.0, s9, &r.1));
    let r = margin_trend(&l);
    lines.push(emit(10, "margin trend", r.0, s9, &r.1));

    let (r, s) = timed(expert);
    lines.push(emit(11, "expert", r.0 && s < 60.0, s, &r.1));
    let (r, s) = timed(|| determinism(root.path()));
    lines.push(emit(12, "determinism", r.0 && s < 120.0, s, &r.1));

    let failed: Vec<u8> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    let _ = writeln!(std::io::stderr(), "acceptance: {}/{} passed", lines.len() - failed.len(), lines.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
