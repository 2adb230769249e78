mod common;

use mentor_drive::env::Action2D;
use mentor_drive::guidance::{awag_weight, cosine_coeff};
use mentor_drive::infer::prompt::{build_prompt, MentorTask, PromptMeta, RuleState, MAX_PAYLOAD};
use mentor_drive::mentor::{map_3d_to_2d, Action3D};
use mentor_drive::replay::{AugmentedTransition, ReplayBuffer, TransitionKey};
use mentor_drive::shaping::{
    discretize_lateral, discretize_longitudinal, executed_action, margin, normalize_and_shape, NeighborSets, RmsFilter,
    SemanticAction, NUM_ACTIONS,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn symmetric_masks(raw: &[u32]) -> [u32; NUM_ACTIONS] {
    let mut m = [0u32; NUM_ACTIONS];
    for i in 0..NUM_ACTIONS {
        m[i] |= 1 << i;
        for j in 0..NUM_ACTIONS {
            if raw[i] & (1 << j) != 0 {
                m[i] |= 1 << j;
                m[j] |= 1 << i;
            }
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn schedule_stays_between_endpoints(step in 0u64..20_000, t in 1u64..10_000, start in 0.0f64..5.0, frac in 0.0f64..1.0, k in 0.25f64..4.0) {
        let end = start * frac;
        let c = cosine_coeff(step, start, end, t, k).unwrap();
        prop_assert!(c <= start + 1e-12 && c >= end - 1e-12);
        prop_assert!(cosine_coeff(step + 1, start, end, t, k).unwrap() <= c + 1e-12);
    }

    #[test]
    fn weight_is_capped_and_monotone(a in -50.0f64..50.0, b in 0.1f64..10.0, w in 1.0f64..100.0) {
        let x = awag_weight(a, b, w);
        prop_assert!(x > 0.0 && x <= w);
        prop_assert!(awag_weight(a + 0.5, b, w) >= x);
    }

    #[test]
    fn margin_matches_enumeration(p in prop::collection::vec(0.0f64..1.0, NUM_ACTIONS), raw in prop::collection::vec(any::<u32>(), NUM_ACTIONS), sparsity in 0u32..4, e in 0usize..NUM_ACTIONS) {
        let sum: f64 = p.iter().sum::<f64>() + 1e-12;
        let p: Vec<f64> = p.iter().map(|x| x / sum).collect();
        // Sparsify the random neighbor relation so both empty and dense sets occur.
        let raw: Vec<u32> = raw.iter().map(|r| (0..sparsity).fold(*r, |acc, _| acc & acc.rotate_left(7))).collect();
        let masks = symmetric_masks(&raw);
        let sets = NeighborSets::from_masks(masks).unwrap();
        let exec = SemanticAction::from_index(e);
        let mut best = None::<f64>;
        for j in 0..NUM_ACTIONS {
            if masks[e] & (1 << j) == 0 {
                best = Some(best.map_or(p[j], |b| b.max(p[j])));
            }
        }
        match (margin(&p, exec, &sets), best) {
            (Ok(m), Some(b)) => {
                prop_assert_eq!(m, (p[e] - b).max(0.0));
                prop_assert!((0.0..=1.0).contains(&m));
            }
            (Err(_), None) => {}
            (got, want) => prop_assert!(false, "margin {:?} vs enumeration {:?}", got, want),
        }
    }

    #[test]
    fn rms_filter_matches_two_pass(xs in prop::collection::vec(-100.0f64..100.0, 1..400)) {
        let mut f = RmsFilter::new(1e-4);
        for (n, x) in xs.iter().enumerate() {
            f.update(*x);
            let prefix = &xs[..=n];
            let mean = prefix.iter().sum::<f64>() / prefix.len() as f64;
            let var = prefix.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / prefix.len() as f64;
            prop_assert!((f.mean() - mean).abs() <= 1e-9 * mean.abs().max(1.0));
            prop_assert!((f.variance() - var).abs() <= 1e-9 * var.max(1.0));
        }
    }

    #[test]
    fn shaped_reward_bounds(raws in prop::collection::vec(0.0f64..1.0, 1..200), r_env in -5.0f64..5.0, w in 0.0f64..2.0) {
        let mut f = RmsFilter::new(1e-4);
        for r in raws {
            let (v, fin) = normalize_and_shape(r, r_env, &mut f, w);
            prop_assert!((-1.0..=1.0).contains(&v) && v.is_finite());
            prop_assert!((fin - (r_env + w * v)).abs() < 1e-12);
        }
    }

    #[test]
    fn discretizers_are_total(t in 0.0f64..=1.0, b in 0.0f64..=1.0, s in -1.0f64..=1.0, x in -3.0f64..3.0, y in -3.0f64..3.0) {
        prop_assert!(discretize_longitudinal(t, b).is_ok());
        prop_assert!(discretize_lateral(s).is_ok());
        let a = executed_action(Action2D::new(x, y));
        prop_assert!(a.index() < NUM_ACTIONS);
    }

    #[test]
    fn map_3d_to_2d_is_total_and_idempotent(t in -2.0f64..2.0, s in -2.0f64..2.0, b in -2.0f64..2.0) {
        let a = map_3d_to_2d(Action3D::new(t, s, b));
        prop_assert!(a.longitudinal.abs() <= 1.0 && a.steer.abs() <= 1.0);
        prop_assert_eq!(a.clamped(), a);
        let back = Action3D::new(a.longitudinal.max(0.0), a.steer, (-a.longitudinal).max(0.0));
        prop_assert_eq!(map_3d_to_2d(back), a);
    }

    #[test]
    fn replay_conserves_and_keeps_mask_invariant(cap in 1usize..40, ops in prop::collection::vec((0u8..3, 0u64..120), 1..300)) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut buf = ReplayBuffer::new(cap).unwrap();
        let mut pushed = 0u64;
        for (op, k) in ops {
            match op {
                0 => {
                    let t = AugmentedTransition::new(TransitionKey::new(0, pushed), common::random_obs(&mut rng), Action2D::new(0.1, 0.0), 0.0, common::random_obs(&mut rng), false);
                    buf.push(t).unwrap();
                    pushed += 1;
                }
                1 => { buf.attach_feedback(TransitionKey::new(0, k), Action2D::new(0.2, 0.1)); }
                _ => {
                    if buf.len() >= 2 {
                        let s = buf.sample(2, k).unwrap();
                        prop_assert_eq!(s.len(), 2);
                        prop_assert_ne!(s.indices[0], s.indices[1]);
                    }
                }
            }
            let c = buf.counters();
            prop_assert_eq!(c.pushed, pushed);
            prop_assert_eq!(buf.len() as u64 + c.evicted, pushed);
            prop_assert!(buf.iter().all(|t| t.mask == t.vlm_feedback.is_some()));
        }
    }

    #[test]
    fn prompts_are_bounded_and_stable(v in prop::collection::vec(-1.0e6f64..1.0e6, 10), speed in 0.0f64..1.0e4) {
        let mut obs = (*common::random_obs(&mut ChaCha8Rng::seed_from_u64(0))).clone();
        obs.state_vec.copy_from_slice(&v);
        let meta = PromptMeta { speed, command: mentor_drive::env::Command::TurnLeft, rule: RuleState::Clear };
        let p = build_prompt(&obs, &meta, MentorTask::Both);
        prop_assert!(p.len() <= MAX_PAYLOAD);
        prop_assert_eq!(p, build_prompt(&obs, &meta, MentorTask::Both));
    }
}
