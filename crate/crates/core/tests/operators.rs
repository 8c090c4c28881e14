//! Transition operators, successor matrices and value functions.

use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use srlab::mdp::{commutation_matrix, policy_operator, repetition_block, GridLayout, MdpClass};
use srlab::successor::{greedy_policy, q_from_sr};
use srlab::*;

fn class() -> impl Strategy<Value = MdpClass> {
    prop_oneof![
        Just(MdpClass::General),
        Just(MdpClass::DoublyStochastic),
        Just(MdpClass::Lazy)
    ]
}

fn random_policy(ns: usize, na: usize, seed: u64) -> Policy {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut p = DMatrix::from_fn(ns, na, |_, _| rng.gen_range(0.0..1.0) + 1e-3);
    for mut row in p.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    Policy::new(p).unwrap()
}

/// P̃[(s,a),(s',a')] built entry by entry from k explicit one-step moves.
fn naive_k_step(mdp: &TabularMdp, policy: &Policy, k: usize) -> DMatrix<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut out = DMatrix::zeros(ns * na, ns * na);
    for s in 0..ns {
        for a in 0..na {
            let mut dist = vec![0.0; ns];
            dist[s] = 1.0;
            for _ in 0..k {
                let mut next = vec![0.0; ns];
                for (from, &mass) in dist.iter().enumerate() {
                    for (to, slot) in next.iter_mut().enumerate() {
                        *slot += mass * mdp.transition(a)[(from, to)];
                    }
                }
                dist = next;
            }
            for s2 in 0..ns {
                for a2 in 0..na {
                    out[(s * na + a, s2 * na + a2)] = dist[s2] * policy.probs()[(s2, a2)];
                }
            }
        }
    }
    out
}

/// Iterative policy evaluation on state-action values.
fn evaluate(p_pi: &DMatrix<f64>, r: &DVector<f64>, gamma: f64) -> DVector<f64> {
    let mut q = DVector::zeros(r.len());
    for _ in 0..20_000 {
        let next = r + gamma * (p_pi * &q);
        let done = (&next - &q).amax() < 1e-14;
        q = next;
        if done {
            break;
        }
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transitions_are_row_stochastic(ns in 1usize..9, na in 1usize..4, seed in 0u64..1000, c in class()) {
        let mdp = random_mdp(ns, na, seed, c, 0.9).unwrap();
        for p in mdp.transitions() {
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            for row in p.row_iter() {
                prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn doubly_stochastic_actions_have_unit_norm(ns in 1usize..9, na in 1usize..4, seed in 0u64..1000) {
        let mdp = random_mdp(ns, na, seed, MdpClass::DoublyStochastic, 0.9).unwrap();
        for p in mdp.transitions() {
            let s1 = srlab::linalg::spectral_norm(p).unwrap();
            prop_assert!((s1 - 1.0).abs() <= 1e-9, "σ_1 = {}", s1);
        }
    }

    #[test]
    fn commutation_round_trip(ns in 1usize..51, na in 1usize..51) {
        let k = commutation_matrix(ns, na);
        prop_assert!(k.compose(&k.transpose()).is_identity());
        prop_assert!(k.transpose().compose(&k).is_identity());
        for s in [0, ns - 1] {
            for a in [0, na - 1] {
                prop_assert_eq!(k.apply(s * na + a), a * ns + s);
            }
        }
    }

    #[test]
    fn factorization_is_exact(ns in 1usize..7, na in 1usize..4, seed in 0u64..1000, k in 1usize..5, c in class()) {
        let mdp = random_mdp(ns, na, seed, c, 0.9).unwrap();
        let policy = random_policy(ns, na, seed);
        let op = repeat_operator(&mdp, &policy, k).unwrap();
        prop_assert!(op.factorization_residual() <= 1e-12);
        let naive = naive_k_step(&mdp, &policy, k);
        prop_assert!(srlab::linalg::max_abs_diff(&op.p_pi, &naive) <= 1e-12);
        for row in op.p_pi.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn repeat_operator_matches_repeat_mdp(ns in 1usize..7, na in 1usize..4, seed in 0u64..1000, k in 1usize..5, c in class()) {
        let mdp = random_mdp(ns, na, seed, c, 0.9).unwrap();
        let policy = random_policy(ns, na, seed + 1);
        let a = repeat_operator(&mdp, &policy, k).unwrap();
        let b = policy_operator(&repeat_mdp(&mdp, k).unwrap(), &policy).unwrap();
        prop_assert!(srlab::linalg::max_abs_diff(&a.p_pi, &b.p_pi) <= 1e-12);
        prop_assert_eq!(repetition_block(&mdp, k).unwrap().shape(), (ns * na, ns));
    }

    #[test]
    fn successor_identities(ns in 1usize..7, na in 1usize..4, seed in 0u64..1000, k in 1usize..4, gamma in 0.1f64..0.99, horizon in 0usize..60) {
        let mdp = random_mdp(ns, na, seed, MdpClass::General, gamma).unwrap();
        let op = repeat_operator(&mdp, &random_policy(ns, na, seed), k).unwrap();
        let sr = sr_closed_form(&op, gamma).unwrap();
        prop_assert!(sr.bellman_residual(&op.p_pi) <= 1e-8);
        prop_assert!(sr.m.iter().all(|&x| x >= -1e-12));
        for row in sr.m.row_iter() {
            prop_assert!((row.sum() - 1.0 / (1.0 - gamma)).abs() <= 1e-8);
        }
        let neumann = sr_neumann(&op, gamma, horizon).unwrap();
        let tail = gamma.powi(horizon as i32 + 1) / (1.0 - gamma);
        prop_assert!(srlab::linalg::max_abs_diff(&sr.m, &neumann.m) <= tail * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn q_from_sr_matches_policy_evaluation(ns in 1usize..7, na in 1usize..4, seed in 0u64..1000, gamma in 0.1f64..0.95) {
        let mdp = random_mdp(ns, na, seed, MdpClass::General, gamma).unwrap();
        let op = policy_operator(&mdp, &random_policy(ns, na, seed)).unwrap();
        let sr = sr_closed_form(&op, gamma).unwrap();
        let task = srlab::harness::random_task(ns * na, seed);
        let q = q_from_sr(&sr, &task).unwrap();
        prop_assert!((q - evaluate(&op.p_pi, &task.r, gamma)).amax() <= 1e-8);
    }

    #[test]
    fn one_step_repeat_error_is_within_tolerance(ns in 1usize..7, na in 1usize..4, seed in 0u64..1000, c in class()) {
        let tol = 1e-9;
        let mdp = random_mdp(ns, na, seed, c, 0.9).unwrap();
        let task = srlab::harness::random_task(ns * na, seed);
        prop_assert!(repeat_value_error(&mdp, &task, 1, tol).unwrap() <= 2.0 * tol);
    }

    #[test]
    fn discount_round_trip(gamma in 0.01f64..0.999, k in 1usize..20) {
        let nominal = nominal_discount(gamma, k).unwrap();
        prop_assert!((effective_discount(nominal, k).unwrap() - gamma).abs() <= 1e-12);
    }
}

#[test]
fn optimal_q_is_a_fixed_point_and_greedy_policy_is_optimal() {
    let layout = GridLayout::builtin("maze9").unwrap();
    let mdp = build_gridworld(&layout, 0.9, 0.1).unwrap();
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let goal = ns - 1;
    let task = RewardTask::goal(goal, ns, na).unwrap();
    let (q, policy) = optimal_q(&mdp, &task, 1e-11, 100_000).unwrap();
    // Evaluate the greedy policy exactly; it must attain Q*.
    let op = policy_operator(&mdp, &policy).unwrap();
    let q_pi = q_from_sr(&sr_closed_form(&op, 0.9).unwrap(), &task).unwrap();
    assert!((&q_pi - &q).amax() <= 1e-9);
    assert_eq!(greedy_policy(&q, ns, na).unwrap(), policy);
}

#[test]
fn corridor_repeat_without_overshoot() {
    // 1×4 corridor, goal at the right end, k = 3: repeated moves stop at the
    // wall, so the repeat MDP can reach the goal from everywhere in one macro
    // step. Values from exhaustive hand enumeration: with γ = 0.5 the
    // original V*(s) = 2·0.5^(3−s), the repeat MDP has V*(goal) = 1/(1−0.125).
    let mdp = build_gridworld(&srlab::parse_layout("######\n#....#\n######\n").unwrap(), 0.5, 0.0).unwrap();
    let task = RewardTask::goal(3, 4, 4).unwrap();
    let (q, _) = optimal_q(&mdp, &task, 1e-12, 10_000).unwrap();
    let (q3, _) = optimal_q(&repeat_mdp(&mdp, 3).unwrap(), &task, 1e-12, 10_000).unwrap();
    let v = |q: &DVector<f64>, s: usize| (0..4).map(|a| q[s * 4 + a]).fold(f64::MIN, f64::max);
    for s in 0..4 {
        assert_abs_diff_eq!(v(&q, s), 2.0 * 0.5f64.powi(3 - s as i32), epsilon = 1e-10);
    }
    let v3_goal = 1.0 / (1.0 - 0.125);
    assert_abs_diff_eq!(v(&q3, 3), v3_goal, epsilon = 1e-10);
    for s in 0..3 {
        assert_abs_diff_eq!(v(&q3, s), 0.125 * v3_goal, epsilon = 1e-10);
    }
    let expected = (0..16).map(|i| (q[i] - q3[i]).abs()).fold(0.0, f64::max);
    assert_abs_diff_eq!(repeat_value_error(&mdp, &task, 3, 1e-12).unwrap(), expected, epsilon = 1e-10);
}

#[test]
fn turn_makes_repetition_lossy() {
    let layout = GridLayout::builtin("corridor_turn").unwrap();
    let mdp = build_gridworld(&layout, 0.9, 0.0).unwrap();
    let goal = layout.state_at(3, 5).unwrap();
    let task = RewardTask::goal(goal, mdp.n_states(), 4).unwrap();
    assert!(repeat_value_error(&mdp, &task, 2, 1e-10).unwrap() > 0.0);
}

#[test]
fn reward_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    std::fs::write(&path, "state_index,action_index,reward\n0,1,0.5\n2,0,-1\n").unwrap();
    let task = RewardTask::from_csv(&path, 3, 2).unwrap();
    assert_eq!(task.r.as_slice(), &[0.0, 0.5, 0.0, 0.0, -1.0, 0.0]);
    assert!(RewardTask::from_csv(dir.path().join("missing.csv"), 3, 2).is_err());
}
