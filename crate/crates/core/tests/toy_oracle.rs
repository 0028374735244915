use highway_irl::env::rollout;
use highway_irl::features::{discounted_feature_sum, MuVector, WeightVector};
use highway_irl::irl::{IrlConfig, StopReason};
use highway_irl::rng::derive_seed;
use highway_irl::toy::*;
use highway_irl::Error;
use rand::{Rng, SeedableRng};

fn chain_with_transition_reward() -> (TabularMdp, Vec<Vec<f64>>) {
    let mdp = shipped("chain2").unwrap();
    // Reward 1 for taking a1 in s0, everything else 0.
    let rewards = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
    (mdp, rewards)
}

#[test]
fn zero_reward_gives_zero_q_and_lowest_actions() {
    for name in SHIPPED {
        let mdp = shipped(name).unwrap();
        let vi = value_iteration(&mdp, &WeightVector::zeros(mdp.feature_dim()), 1e-10).unwrap();
        assert!(vi.q.iter().flatten().all(|&q| q == 0.0));
        assert!(vi.policy.iter().all(|&a| a == 0), "{name}");
    }
}

#[test]
fn chain_fixed_point() {
    let (mdp, rewards) = chain_with_transition_reward();
    let vi = value_iteration_with_rewards(&mdp, &rewards, 1e-12).unwrap();
    assert!((vi.q[0][1] - 1.0).abs() < 1e-9);
    assert!((vi.q[0][0] - 0.9).abs() < 1e-9);
    assert_eq!(vi.policy[0], 1);
    assert!(vi.values[1].abs() < 1e-12);
}

fn random_mdp(n: usize, k: usize, d: usize, seed: u64) -> TabularMdp {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let transitions = (0..n)
        .map(|_| {
            (0..k)
                .map(|_| {
                    let a = rng.gen_range(0..n);
                    let b = rng.gen_range(0..n);
                    let p: f64 = rng.gen_range(0.1..0.9);
                    if a == b {
                        vec![(a, 1.0)]
                    } else {
                        vec![(a, p), (b, 1.0 - p)]
                    }
                })
                .collect()
        })
        .collect();
    let features = (0..n).map(|_| (0..d).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect()).collect();
    TabularMdp {
        name: "random".into(),
        n_states: n,
        n_actions: k,
        transitions,
        features,
        start: 0,
        gamma: 0.9,
        planted: None,
    }
}

#[test]
fn random_mdp_bellman_residual_and_contraction() {
    let mdp = random_mdp(50, 4, 8, 17);
    mdp.validate().unwrap();
    let w = WeightVector(vec![0.3, -1.0, 0.5, 0.0, 2.0, -0.25, 0.1, 1.0]);
    let tol = 1e-8;
    let vi = value_iteration(&mdp, &w, tol).unwrap();
    let r: Vec<f64> = mdp.features.iter().map(|f| f.iter().zip(&w.0).map(|(a, b)| a * b).sum()).collect();
    let mut residual = 0.0f64;
    for (s, row) in mdp.transitions.iter().enumerate() {
        for (a, next) in row.iter().enumerate() {
            let backup: f64 = next
                .iter()
                .map(|&(t, p)| p * mdp.gamma * vi.q[t].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .sum::<f64>()
                + r[s];
            residual = residual.max((backup - vi.q[s][a]).abs());
        }
    }
    assert!(residual < tol, "residual {residual}");
    for pair in vi.deltas.windows(2) {
        assert!(pair[1] <= mdp.gamma * pair[0] + 1e-12, "{pair:?}");
    }
}

#[test]
fn absorbing_start_state() {
    let mdp = shipped("chain2").unwrap();
    // a0 keeps s0 forever.
    let stay = TabularPolicy::deterministic(&[0, 0], 2);
    let mu = exact_feature_expectations(&mdp, &stay, Horizon::Infinite).unwrap();
    assert!((mu.0[0] - 10.0).abs() < 1e-10);
    assert!(mu.0[1].abs() < 1e-10);
}

#[test]
fn alternator_parity_split() {
    let mdp = shipped("alternator2").unwrap();
    let p = TabularPolicy::deterministic(&[0, 0], 1);
    let mu = exact_feature_expectations(&mdp, &p, Horizon::Infinite).unwrap();
    let g: f64 = 0.9;
    assert!((mu.0[0] - 1.0 / (1.0 - g * g)).abs() < 1e-10);
    assert!((mu.0[1] - g / (1.0 - g * g)).abs() < 1e-10);
    assert!((mu.0[0] - 5.263157894736842).abs() < 1e-9);
    assert!((mu.0[1] - 4.736842105263158).abs() < 1e-9);

    // Finite horizon by explicit summation.
    let h = 7;
    let fin = exact_feature_expectations(&mdp, &p, Horizon::Finite(h)).unwrap();
    let even: f64 = (0..h).filter(|t| t % 2 == 0).map(|t| g.powi(t as i32)).sum();
    let odd: f64 = (0..h).filter(|t| t % 2 == 1).map(|t| g.powi(t as i32)).sum();
    assert!((fin.0[0] - even).abs() < 1e-12);
    assert!((fin.0[1] - odd).abs() < 1e-12);
}

fn policies_for(mdp: &TabularMdp) -> Vec<(&'static str, TabularPolicy)> {
    let mut out = vec![("uniform", TabularPolicy::uniform(mdp.n_states, mdp.n_actions))];
    if let Some(w) = &mdp.planted {
        let vi = value_iteration(mdp, w, 1e-12).unwrap();
        out.push(("optimal", TabularPolicy::deterministic(&vi.policy, mdp.n_actions)));
    }
    out
}

#[test]
fn linear_value_equals_policy_evaluation() {
    for name in SHIPPED {
        let mdp = shipped(name).unwrap();
        let w = mdp.planted.clone().unwrap_or_else(|| WeightVector(vec![1.0; mdp.feature_dim()]));
        for (label, p) in policies_for(&mdp) {
            let mu = exact_feature_expectations(&mdp, &p, Horizon::Infinite).unwrap();
            let v = start_value(&mdp, &p, &w).unwrap();
            assert!((linear_value(&w, &mu) - v).abs() < 1e-8, "{name} {label}");
        }
    }
}

fn monte_carlo(mdp: &TabularMdp, policy: &TabularPolicy, n: usize, seed: u64) -> (MuVector, Vec<f64>) {
    let env = ToyEnv::new(mdp.clone());
    let d = mdp.feature_dim();
    let (mut sum, mut sq) = (vec![0.0; d], vec![0.0; d]);
    for k in 0..n {
        let ro = rollout(&env, policy, derive_seed(seed, k as u64)).unwrap();
        let mu = discounted_feature_sum(&ro.features, mdp.gamma).unwrap();
        for i in 0..d {
            sum[i] += mu.0[i];
            sq[i] += mu.0[i] * mu.0[i];
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let se = (0..d).map(|i| ((sq[i] / n as f64 - mean[i] * mean[i]).max(0.0) / n as f64).sqrt()).collect();
    (MuVector(mean), se)
}

#[test]
fn monte_carlo_within_four_standard_errors() {
    for name in SHIPPED {
        let mdp = shipped(name).unwrap();
        for (label, p) in policies_for(&mdp) {
            let exact = exact_feature_expectations(&mdp, &p, Horizon::Infinite).unwrap();
            let (mc, se) = monte_carlo(&mdp, &p, 10_000, 2024);
            for (i, (e, m)) in exact.0.iter().zip(&mc.0).enumerate() {
                let err = (e - m).abs();
                assert!(err <= 4.0 * se[i] + 1e-8, "{name} {label} feature {i}: error {err}, se {}", se[i]);
            }
        }
    }
}

#[test]
fn planted_recovery() {
    let mdp = shipped("planted4").unwrap();
    let planted = mdp.planted.clone().unwrap();
    let vi = value_iteration(&mdp, &planted, 1e-12).unwrap();
    let expert = TabularPolicy::deterministic(&vi.policy, mdp.n_actions);
    let cfg = IrlConfig { epsilon_stop: 1e-6, max_iterations: 10, ..IrlConfig::default() };
    let r = run_irl_exact(&mdp, &expert, &cfg).unwrap();
    assert_eq!(r.stop, StopReason::Converged);
    let t = &r.state.t_history;
    assert!(*t.last().unwrap() < 1e-6, "{t:?}");
    for pair in t.windows(2) {
        assert!(pair[1] < pair[0], "{t:?}");
    }
    let w = r.policy_weights.unwrap();
    let learned = value_iteration(&mdp, &w, 1e-12).unwrap();
    assert_eq!(learned.policy, vi.policy);
}

#[test]
fn fixture_round_trip_and_errors() {
    for name in SHIPPED {
        let mdp = shipped(name).unwrap();
        assert_eq!(TabularMdp::parse(&mdp.to_fixture()).unwrap(), mdp);
    }
    assert!(matches!(shipped("nope"), Err(Error::InvalidArgument(_))));
    let future = shipped("chain2").unwrap().to_fixture().replacen("toymdp 1", "toymdp 9", 1);
    assert!(matches!(TabularMdp::parse(&future), Err(Error::Version { found: 9, .. })));
    let bad_row = shipped("chain2").unwrap().to_fixture().replace("T 0 1 1 1", "T 0 1 1 0.5");
    assert!(TabularMdp::parse(&bad_row).is_err());
}
