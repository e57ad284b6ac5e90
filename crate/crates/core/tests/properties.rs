use std::collections::BTreeSet;

use proptest::prelude::*;

use factorshift::analysis::{classify_interaction, drops, holm, paired_test, AccuracyRow, AccuracyTable};
use factorshift::driving_sim::{generate_route, Observation, SimParams, HORIZON};
use factorshift::factor_space::{
    enumerate_space, format_tag, hamming, parse_tag, shell, EnvConfig, IdSupport, TimeOfDay, Weather, SPACE_SIZE,
};
use factorshift::policies::{build_window, ClipSpec, Driver, Expert, Policy, PolicyKind};
use factorshift::rollout_eval::{evaluate, run_episode, EvalOptions, InfractionKind};
use factorshift::split_builder::{build_suite, check_leakage};
use factorshift::trainer::split_traces;

fn config(i: usize) -> EnvConfig {
    enumerate_space()[i]
}

fn support_strategy() -> impl Strategy<Value = IdSupport> {
    prop::collection::btree_set(0..SPACE_SIZE, 1..6)
        .prop_map(|ids| IdSupport::new(ids.into_iter().map(config).collect()).unwrap())
}

fn p_values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![0.0..=1.0f64, 0.0..0.01f64], 1..25)
}

proptest! {
    #[test]
    fn shells_partition_the_space(support in support_strategy()) {
        let mut seen = BTreeSet::new();
        let mut total = 0;
        for k in 0..=5 {
            for c in shell(&support, k) {
                prop_assert_eq!(support.distance(&c), k);
                prop_assert!(seen.insert(c.tag()), "{} in two shells", c);
                total += 1;
            }
        }
        prop_assert_eq!(total, SPACE_SIZE);
        let zero: BTreeSet<String> = shell(&support, 0).iter().map(|c| c.tag()).collect();
        let members: BTreeSet<String> = support.members().iter().map(|c| c.tag()).collect();
        prop_assert_eq!(zero, members);
    }

    #[test]
    fn codec_round_trips(i in 0..SPACE_SIZE) {
        let c = config(i);
        let t = format_tag(&c);
        prop_assert_eq!(parse_tag(&t).unwrap(), c);
        prop_assert_eq!(format_tag(&parse_tag(&t).unwrap()), t);
    }

    #[test]
    fn suites_are_deterministic_and_leak_free(support in support_strategy(), seed in any::<u64>(), budget in 1usize..6) {
        let a = build_suite(&support, &[0, 1, 2, 3], budget, seed).unwrap();
        let b = build_suite(&support, &[0, 1, 2, 3], budget, seed).unwrap();
        prop_assert_eq!(a.to_json(), b.to_json());
        prop_assert!(check_leakage(&a).is_clean());
        let slots = a.slots();
        prop_assert_eq!(slots.len(), a.config_count() * budget);
        let seeds: BTreeSet<u64> = slots.iter().map(|s| s.seed).collect();
        prop_assert_eq!(seeds.len(), slots.len());
        for (k, c) in a.configs() {
            prop_assert_eq!(support.distance(c), k);
        }
    }

    #[test]
    fn holm_lies_between_bonferroni_and_uncorrected(p in p_values(), alpha in 0.001..0.2f64) {
        let m = p.len() as f64;
        let flags = holm(&p, alpha).unwrap();
        for (pi, r) in p.iter().zip(&flags) {
            if *pi <= alpha / m {
                prop_assert!(*r);
            }
            if *r {
                prop_assert!(*pi <= alpha);
            }
        }
    }

    #[test]
    fn paired_test_is_symmetric(pairs in prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), 1..40)) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let ab = paired_test(&a, &b).unwrap();
        prop_assert_eq!(ab, paired_test(&b, &a).unwrap());
        prop_assert!(ab > 0.0 && ab <= 1.0);
    }

    #[test]
    fn classification_ignores_singles_order(
        singles in prop::collection::vec(0.0..100.0f64, 2..6),
        combo in 0.0..100.0f64,
        rot in 0usize..6,
    ) {
        let base = classify_interaction(&singles, combo, 1.0).unwrap();
        let mut rotated = singles.clone();
        rotated.rotate_left(rot % singles.len());
        prop_assert_eq!(classify_interaction(&rotated, combo, 1.0).unwrap(), base);
        let mut reversed = singles.clone();
        reversed.reverse();
        prop_assert_eq!(classify_interaction(&reversed, combo, 1.0).unwrap(), base);
    }

    #[test]
    fn drop_is_baseline_minus_value(values in prop::collection::vec(0.0..=100.0f64, SPACE_SIZE)) {
        let rows = enumerate_space()
            .into_iter()
            .zip(&values)
            .map(|(c, v)| AccuracyRow { policy: "p".into(), config: c, k: hamming(&c, &config(0)), accuracy: *v })
            .collect();
        let report = drops(&AccuracyTable { rows }, &config(0)).unwrap();
        for r in &report.rows {
            prop_assert_eq!(r.drop, r.baseline - r.value);
            prop_assert_eq!(r.baseline, values[0]);
        }
        for m in &report.per_k {
            let shell_values: Vec<f64> = report.rows.iter().filter(|r| r.k == m.k).map(|r| r.value).collect();
            let mean = shell_values.iter().sum::<f64>() / shell_values.len() as f64;
            prop_assert!((m.mean_accuracy - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn window_front_pads_with_zeros(frames in 1usize..6, stride in 1usize..4, t in 0usize..20) {
        let clip = ClipSpec::new(frames, stride).unwrap();
        let history: Vec<Observation> = (0..=t)
            .map(|i| {
                let mut o = Observation::zeros();
                o.speed_norm = 1.0 + i as f64;
                o
            })
            .collect();
        let w = build_window(&history, t, clip);
        prop_assert_eq!(w.len(), frames);
        for (pos, o) in w.iter().enumerate() {
            let back = (frames - 1 - pos) * stride;
            if back > t {
                prop_assert_eq!(*o, Observation::zeros());
            } else {
                prop_assert_eq!(o.speed_norm, 1.0 + (t - back) as f64);
            }
        }
    }

    #[test]
    fn trace_split_is_disjoint(n in 2usize..40, fraction in 0.0..1.0f64, seed in any::<u64>()) {
        let (train, val) = split_traces(n, fraction, seed);
        prop_assert!(!train.is_empty() && !val.is_empty());
        prop_assert!(train.iter().all(|t| !val.contains(t)));
        prop_assert_eq!(train.len() + val.len(), n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn controls_are_always_admissible(
        kind in prop_oneof![Just(PolicyKind::Linear), Just(PolicyKind::Mlp), Just(PolicyKind::Recurrent)],
        seed in any::<u64>(),
        scale in prop_oneof![Just(1.0), Just(1e3), Just(1e12), Just(f64::INFINITY), Just(f64::NAN)],
    ) {
        let clip = if kind == PolicyKind::Recurrent { ClipSpec::new(3, 2).unwrap() } else { ClipSpec::SINGLE };
        let mut policy = Policy::new(kind, clip, None, seed).unwrap();
        let params: Vec<f64> = policy.params.iter().map(|p| p * scale).collect();
        policy.set_params(params).unwrap();
        let sim = SimParams::default();
        let c = config((seed % SPACE_SIZE as u64) as usize);
        let route = generate_route(seed, c.scene, &sim);
        let run = run_episode(&policy, &c, &route, seed, 40, &sim).unwrap();
        for r in &run.log {
            prop_assert!(r.steer.abs() <= 0.2 && r.throttle.abs() <= 1.0);
        }
    }

    #[test]
    fn episodes_replay_bit_exactly(i in 0..SPACE_SIZE, route_seed in any::<u64>(), seed in any::<u64>()) {
        let sim = SimParams::default();
        let c = config(i);
        let policy = Policy::new(PolicyKind::Mlp, ClipSpec::SINGLE, None, 1).unwrap();
        let route = generate_route(route_seed, c.scene, &sim);
        for driver in [&policy as &dyn Driver, &Expert] {
            let mut a = run_episode(driver, &c, &route, seed, HORIZON, &sim).unwrap();
            let mut b = run_episode(driver, &c, &route, seed, HORIZON, &sim).unwrap();
            a.result.wall_time_ms = 0.0;
            b.result.wall_time_ms = 0.0;
            prop_assert_eq!(a.result, b.result);
            prop_assert_eq!(a.log, b.log);
        }
    }

    #[test]
    fn eval_rows_are_consistent_and_pinned(support in support_strategy(), seed in any::<u64>()) {
        let suite = build_suite(&support, &[0, 1], 2, seed).unwrap();
        let policy = Policy::new(PolicyKind::Linear, ClipSpec::SINGLE, None, seed).unwrap();
        let opts = EvalOptions { jobs: 1, ..EvalOptions::default() };
        let learned = evaluate(&policy, &suite, &opts).unwrap();
        let expert = evaluate(&Expert, &suite, &opts).unwrap();
        for (a, b) in learned.rows.iter().zip(&expert.rows) {
            prop_assert_eq!(a.n, suite.episodes_per_config);
            prop_assert!(a.success_rate <= a.completion_mean + 1e-12 && a.completion_mean <= 1.0);
            for kind in InfractionKind::ALL {
                let flagged = a.episodes.iter().filter(|e| e.infractions.get(kind)).count();
                prop_assert_eq!(a.infraction_count(kind), flagged);
            }
            for e in &a.episodes {
                prop_assert!(e.steps_traveled <= e.horizon);
                prop_assert_eq!(e.terminated_early, e.steps_traveled < e.horizon);
                prop_assert_eq!(e.terminated_early, e.termination_event.is_some());
            }
            let key = |r: &factorshift::rollout_eval::EvalRow| -> Vec<(String, usize, u64, u64)> {
                r.episodes.iter().map(|e| (e.tag.clone(), e.episode, e.seed, e.route_seed)).collect()
            };
            prop_assert_eq!(key(a), key(b));
        }
    }
}

#[test]
fn hamming_is_a_metric() {
    let space = enumerate_space();
    for a in &space {
        for b in &space {
            let d = hamming(a, b);
            assert_eq!(d == 0, a == b);
            assert_eq!(d, hamming(b, a));
            for c in &space {
                assert!(hamming(a, c) <= d + hamming(b, c));
            }
        }
    }
}

#[test]
fn factor_effects_are_ordered() {
    let sim = SimParams::default();
    for c in enumerate_space() {
        let with_weather = |w| EnvConfig { weather: w, ..c };
        assert!(sim.noise_std(&with_weather(Weather::Dry)) < sim.noise_std(&with_weather(Weather::Rain)));
        assert!(sim.noise_std(&with_weather(Weather::Rain)) < sim.noise_std(&with_weather(Weather::Snow)));
        let with_time = |t| EnvConfig { time: t, ..c };
        assert!(sim.ray_gain(&with_time(TimeOfDay::Night)) < sim.ray_gain(&with_time(TimeOfDay::Day)));
    }
}
