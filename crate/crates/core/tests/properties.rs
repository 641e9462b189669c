//! Invariants over random instances, episodes and solver runs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use strip_pack::autograd::Tape;
use strip_pack::dataset::{format_instance, generate_instance, parse_instances, Distribution, InstanceSpec, MIN_SIDE_FRACTION};
use strip_pack::env::{validate_packing, EnvConfig, Mode, PackingEnv};
use strip_pack::eval::{EvalReport, Method};
use strip_pack::geometry::{BinSpec, Dim, Placement};
use strip_pack::heuristics::{heuristic, replay, solver_env_config};
use strip_pack::meta::{ga_solve, sa_solve, SearchConfig};
use strip_pack::model::{Choice, Model, ModelConfig, Norm, PositionHead};
use strip_pack::train::random_action;

const EPS: f64 = 1e-9;

fn bin(dim: Dim, slots: usize) -> BinSpec {
    match dim {
        Dim::Three => BinSpec::cube(10.0, slots),
        Dim::Two => BinSpec::strip(10.0, slots),
    }
}

fn dims() -> impl Strategy<Value = Dim> {
    prop_oneof![Just(Dim::Two), Just(Dim::Three)]
}

fn modes() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::Offline), Just(Mode::Online)]
}

fn distributions() -> impl Strategy<Value = Distribution> {
    prop_oneof![Just(Distribution::Plain), Just(Distribution::Hard)]
}

fn footprints_overlap(a: &Placement, b: &Placement) -> bool {
    a.x < b.x + b.dims.w && b.x < a.x + a.dims.w && a.y < b.y + b.dims.l && b.y < a.y + a.dims.l
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_episodes_stay_contained_supported_and_disjoint(
        dim in dims(), mode in modes(), dist in distributions(), n in 1usize..30, seed in any::<u64>(), n_p in 1usize..8, n_u in 1usize..5,
    ) {
        let b = bin(dim, 16);
        let inst = generate_instance(&InstanceSpec { n_boxes: n, distribution: dist, bin: b, seed }).unwrap();
        let cfg = EnvConfig::new(b, mode).with_capacities(n_p, n_u);
        let mut env = PackingEnv::reset(&inst.boxes, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total_reward = 0.0;
        while !env.is_done() {
            let before = env.history().to_vec();
            let out = env.step(&random_action(&env, &mut rng)).unwrap();
            let p = out.placement;
            total_reward += out.reward;

            prop_assert!(p.x >= -EPS && p.x + p.dims.w <= b.width + EPS);
            prop_assert!(p.y >= -EPS && p.y + p.dims.l <= b.length + EPS);
            // resting on the floor or on the top of a box directly below
            let support = before.iter().filter(|q| footprints_overlap(&p, q)).map(Placement::top).fold(0.0, f64::max);
            prop_assert!((p.z - support).abs() <= EPS);

            let hist = env.history();
            let keep = hist.len().min(n_p);
            prop_assert_eq!(env.state().packed.iter().copied().collect::<Vec<_>>(), hist[hist.len() - keep..].to_vec());
        }
        prop_assert!(validate_packing(&b, env.history()).is_ok());
        // rewards telescope to minus the final gap
        prop_assert!((total_reward + env.state().gap).abs() <= 1e-9 * (1.0 + env.state().gap.abs()));
        let g = env.gap_ratio().unwrap();
        // percent
        prop_assert!(g > -EPS && g < 100.0);
    }

    #[test]
    fn generated_instances_are_deterministic_bounded_and_round_trip(
        dim in dims(), dist in distributions(), n in 1usize..60, seed in any::<u64>(),
    ) {
        let b = bin(dim, 128);
        let spec = InstanceSpec { n_boxes: n, distribution: dist, bin: b, seed };
        let inst = generate_instance(&spec).unwrap();
        prop_assert_eq!(&inst, &generate_instance(&spec).unwrap());
        prop_assert_eq!(inst.boxes.len(), n);
        let upper = match dist {
            Distribution::Plain => b.width,
            Distribution::Hard => b.width / 4.0,
        };
        for d in &inst.boxes {
            let sides: &[f64] = match dim {
                Dim::Three => &[d.w, d.l, d.h],
                Dim::Two => &[d.w, d.h],
            };
            for s in sides {
                prop_assert!(*s > MIN_SIDE_FRACTION * b.width && *s <= upper);
            }
            if dim == Dim::Two {
                prop_assert_eq!(d.l, b.length);
            }
        }
        let line = format_instance(&inst);
        let back = parse_instances(line.as_bytes()).unwrap();
        prop_assert_eq!(back, vec![inst]);
    }

    #[test]
    fn heuristic_solutions_replay_to_valid_packings(
        dim in dims(), mode in modes(), dist in distributions(), n in 1usize..40, seed in any::<u64>(),
    ) {
        let b = bin(dim, 32);
        let inst = generate_instance(&InstanceSpec { n_boxes: n, distribution: dist, bin: b, seed }).unwrap();
        let actions = heuristic(&inst, b, mode).unwrap();
        prop_assert_eq!(actions.len(), n);
        let env = replay(&inst.boxes, solver_env_config(b, mode, n), &actions).unwrap();
        prop_assert!(env.is_done());
        prop_assert!(validate_packing(&b, env.history()).is_ok());
    }

    #[test]
    fn report_orders_worst_average_best(
        runs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..12), 1..4),
    ) {
        let n = runs.iter().map(Vec::len).min().unwrap();
        let runs: Vec<Vec<f64>> = runs.into_iter().map(|r| r[..n].to_vec()).collect();
        for method in [Method::Heuristic, Method::Rcql] {
            let r = EvalReport::from_runs(method, "d".into(), 3, Mode::Offline, &runs, vec![0.0; n]);
            prop_assert!(r.worst + EPS >= r.average && r.average + EPS >= r.best);
            prop_assert!(r.variance >= 0.0);
            prop_assert_eq!(r.gap_ratios.len(), n);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn search_traces_never_get_worse_and_repeat_under_a_seed(
        dim in dims(), n in 2usize..10, seed in any::<u64>(),
    ) {
        let b = bin(dim, 32);
        let inst = generate_instance(&InstanceSpec { n_boxes: n, distribution: Distribution::Plain, bin: b, seed }).unwrap();
        let cfg = SearchConfig { ga_population: 8, ga_generations: 6, sa_iterations: 60, seed, ..SearchConfig::default() };
        for solve in [ga_solve, sa_solve] {
            let r = solve(&inst.boxes, &b, &cfg).unwrap();
            prop_assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
            prop_assert_eq!(*r.trace.last().unwrap(), r.score);
            let again = solve(&inst.boxes, &b, &cfg).unwrap();
            prop_assert_eq!(&again.genome, &r.genome);
            prop_assert_eq!(again.trace, r.trace);
            let env = replay(&inst.boxes, solver_env_config(b, Mode::Offline, n), &r.actions).unwrap();
            prop_assert!(validate_packing(&b, env.history()).is_ok());
        }
    }

    #[test]
    fn policy_distributions_are_normalized_and_masked(
        dim in dims(), mode in modes(), joint in any::<bool>(), n in 1usize..12, seed in any::<u64>(), warmup in 0usize..6,
    ) {
        let cfg = ModelConfig {
            d_h: 16,
            d_ff: 32,
            n_heads: 2,
            n_enc_layers: 1,
            recur_len: 4,
            n_p: 4,
            n_u: 3,
            n_s: 8,
            position_head: if joint { PositionHead::Joint } else { PositionHead::Factored },
            init_seed: seed,
            ..ModelConfig::small(dim)
        };
        let model = Model::new(cfg.clone()).unwrap();
        let b = bin(dim, cfg.n_s);
        let inst = generate_instance(&InstanceSpec { n_boxes: n, distribution: Distribution::Plain, bin: b, seed }).unwrap();
        let mut env = PackingEnv::reset(&inst.boxes, cfg.env_config(b, mode).unwrap()).unwrap();
        let mut cache = model.new_cache().actor;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in 0..=warmup.min(n - 1) {
            let mut tape = Tape::new();
            let (step, _) = model.policy_step(&mut tape, &[&env], &[&cache], Choice::Sample(&mut rng), Norm::Running).unwrap();
            let out = &step.outputs[0];
            let close = |v: &[f64]| (v.iter().sum::<f64>() - 1.0).abs() < 1e-9;

            match (&out.select_probs, mode) {
                (Some(sel), Mode::Offline) => {
                    prop_assert!(close(sel));
                    for (p, m) in sel.iter().zip(env.mask()) {
                        prop_assert!(m || *p == 0.0);
                    }
                }
                (None, Mode::Online) => prop_assert_eq!(out.sub_log_probs[0], 0.0),
                _ => prop_assert!(false, "select head present only offline"),
            }
            prop_assert!(close(&out.rotate_probs));
            for (p, m) in out.rotate_probs.iter().zip(env.rotation_mask(out.action.select)) {
                prop_assert!(m || *p == 0.0);
            }
            for p in &out.position_probs {
                prop_assert!(close(p));
            }
            prop_assert_eq!(out.log_prob, out.sub_log_probs.iter().sum::<f64>());
            prop_assert!(out.entropy >= 0.0, "step {}", t);

            if let Some(u) = step.cache_updates[0].clone() {
                cache.push(u);
            }
            let action = out.action;
            env.step(&action).unwrap();
        }
    }
}
