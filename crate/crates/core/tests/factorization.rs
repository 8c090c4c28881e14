//! Forward-backward factorizations: SVD optimum, gap reports and training.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srlab::fb::GapContext;
use srlab::harness::random_task;
use srlab::mdp::{GridLayout, MdpClass};
use srlab::*;

fn uniform_sr(mdp: &TabularMdp, k: usize, gamma: f64) -> SuccessorMatrix {
    let op = repeat_operator(mdp, &Policy::uniform(mdp.n_states(), mdp.n_actions()), k).unwrap();
    sr_closed_form(&op, gamma).unwrap()
}

fn random_fb(ns: usize, na: usize, d: usize, seed: u64) -> FbRepresentation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |r, c| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
    let f = m(ns * na, d);
    let b = m(ns * na, d);
    FbRepresentation::new(vec![f], b, vec![DVector::from_element(d, 1.0)], na).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn realization_error_is_non_negative(ns in 1usize..6, na in 1usize..4, seed in 0u64..500, k in 1usize..4, gamma in 0.1f64..0.95) {
        let mdp = random_mdp(ns, na, seed, MdpClass::General, gamma).unwrap();
        let sr = uniform_sr(&mdp, k, gamma);
        for d in 1..=ns * na {
            let opt = fb_from_svd(&sr, d, na).unwrap();
            let e = realization_error(&opt, 0, &sr).unwrap();
            prop_assert!((-1e-8..=1e-8).contains(&e), "SVD optimum: {}", e);
            prop_assert!(realization_error(&random_fb(ns, na, d, seed), 0, &sr).unwrap() >= -1e-8);
        }
    }

    #[test]
    fn full_rank_factorization_reproduces_q(ns in 1usize..6, na in 1usize..4, seed in 0u64..500, gamma in 0.1f64..0.95) {
        let mdp = random_mdp(ns, na, seed, MdpClass::General, gamma).unwrap();
        let sr = uniform_sr(&mdp, 1, gamma);
        let fb = fb_from_svd(&sr, ns * na, na).unwrap();
        let task = random_task(ns * na, seed);
        let q = fb_q(&fb, 0, &reward_embedding(&fb, &task).unwrap()).unwrap();
        prop_assert!((q - q_from_sr(&sr, &task).unwrap()).amax() <= 1e-8);
    }

    #[test]
    fn greedy_policy_ignores_positive_scaling(ns in 1usize..8, na in 1usize..5, d in 1usize..6, seed in 0u64..500) {
        let fb = random_fb(ns, na, d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
        let z = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let base = greedy_policy_from_f(&fb, 0, &z).unwrap();
        for c in [0.1, 1.0, 10.0] {
            prop_assert_eq!(&greedy_policy_from_f(&fb, 0, &(&z * c)).unwrap(), &base);
        }
    }

    #[test]
    fn gap_certificate_holds(ns in 1usize..6, na in 1usize..4, seed in 0u64..500, k in 1usize..3) {
        let gamma = 0.9;
        let mdp = random_mdp(ns, na, seed, MdpClass::General, gamma).unwrap();
        let task = random_task(ns * na, seed);
        let ctx = GapContext::new(&mdp, &task, k, gamma).unwrap();
        let sr = uniform_sr(&mdp, k, gamma);
        for d in 1..=ns * na {
            for fb in [fb_from_svd(&sr, d, na).unwrap(), random_fb(ns, na, d, seed)] {
                let r = ctx.report(&fb, 0).unwrap();
                prop_assert!(r.certificate_lhs <= r.certificate_rhs * (1.0 + 1e-12) + 1e-12);
                prop_assert!(r.approx_bound.is_finite());
                prop_assert!(r.decomposed_bound.is_finite() || r.decomposed_bound_vacuous);
            }
        }
    }

    #[test]
    fn decomposed_bound_covers_proven_instances(ns in 1usize..6, na in 1usize..4, seed in 0u64..500, k in 1usize..3, lazy in any::<bool>()) {
        let gamma = 0.9;
        let class = if lazy { MdpClass::Lazy } else { MdpClass::DoublyStochastic };
        let mdp = random_mdp(ns, na, seed, class, gamma).unwrap();
        let task = random_task(ns * na, seed);
        let ctx = GapContext::new(&mdp, &task, k, gamma).unwrap();
        let sr = uniform_sr(&mdp, k, gamma);
        for d in 1..=ns * na {
            let r = ctx.report(&fb_from_svd(&sr, d, na).unwrap(), 0).unwrap();
            prop_assert!(r.decomposed_bound_covers(), "d={} gap {} rhs {}", d, r.measured_gap, r.decomposed_bound);
        }
    }
}

#[test]
fn goal_embedding_selects_the_goal_column_of_b() {
    let layout = GridLayout::builtin("maze9").unwrap();
    let mdp = build_gridworld(&layout, 0.9, 0.0).unwrap();
    let sr = uniform_sr(&mdp, 1, 0.9);
    let fb = fb_from_svd(&sr, 8, 4).unwrap();
    let goal = 5;
    let task = RewardTask::goal(goal, mdp.n_states(), 4).unwrap();
    let z = reward_embedding(&fb, &task).unwrap();
    let expected = (0..4).fold(DVector::zeros(8), |acc, a| acc + fb.backward.row(goal * 4 + a).transpose());
    assert!((z - expected).amax() <= 1e-12);
}

#[test]
fn svd_optimum_has_smaller_bellman_error_than_noise() {
    let mdp = random_mdp(5, 2, 3, MdpClass::General, 0.8).unwrap();
    let op = repeat_operator(&mdp, &Policy::uniform(5, 2), 1).unwrap();
    let sr = sr_closed_form(&op, 0.8).unwrap();
    let exact = fb_from_svd(&sr, 10, 2).unwrap();
    assert!(fb_bellman_error(&exact, 0, &op, 0.8).unwrap() <= 1e-10);
    assert!(fb_bellman_error(&random_fb(5, 2, 10, 1), 0, &op, 0.8).unwrap() > 0.1);
}

#[test]
fn artifact_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fb.json");
    let mut fb = random_fb(4, 3, 5, 8);
    fb.backward[(0, 0)] = 0.1 + 0.2;
    fb.save_json(&path).unwrap();
    let back = FbRepresentation::load_json(&path).unwrap();
    assert_eq!(back, fb);
    assert_eq!(back.backward[(0, 0)].to_bits(), (0.1f64 + 0.2).to_bits());
    std::fs::write(&path, "{\"forward\": []}").unwrap();
    assert!(FbRepresentation::load_json(&path).is_err());
}

#[test]
fn training_reduces_bellman_error_on_a_small_grid() {
    let layout = srlab::parse_layout("#####\n#...#\n#.#.#\n#...#\n#####\n").unwrap();
    let mdp = build_gridworld(&layout, 0.9, 0.0).unwrap();
    let cfg = TrainConfig {
        d: 8,
        gamma: 0.9,
        steps: 2000,
        ..TrainConfig::default()
    };
    let out = fb_td_train(&mdp, &cfg).unwrap();
    let first = out.traces.initial_bellman().unwrap();
    let last = out.traces.final_bellman().unwrap();
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert!(out.traces.loss.iter().all(|l| l.is_finite()));
    assert_eq!(out.traces.loss.len(), 2000);
    let again = fb_td_train(&mdp, &cfg).unwrap();
    assert_eq!(again.fb, out.fb);
    assert_eq!(again.traces, out.traces);
}

#[test]
fn greedy_family_trains_on_repeated_actions() {
    let layout = GridLayout::builtin("corridor_turn").unwrap();
    let mdp = build_gridworld(&layout, 0.9, 0.0).unwrap();
    let cfg = TrainConfig {
        d: 6,
        gamma: 0.9,
        k: 2,
        steps: 1000,
        policy: PolicyFamily::EpsilonGreedy { eps: 0.2 },
        ..TrainConfig::default()
    };
    let out = fb_td_train(&mdp, &cfg).unwrap();
    assert_eq!(out.fb.forward.len(), cfg.n_dictionary);
    assert!(out.traces.final_bellman().unwrap() < out.traces.initial_bellman().unwrap());
    let reference = out.reference_sr(&mdp).unwrap();
    assert_eq!(reference.repeat_k, 2);
    assert!(realization_error(&out.fb, 0, &reference).unwrap().is_finite());
}
