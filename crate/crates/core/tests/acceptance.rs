//! One test per headline requirement, each at its stated tolerance.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use highway_irl::commands::*;
use highway_irl::dqn::{LossKind, QNetwork, Sample, TrainSchedule};
use highway_irl::env::rollout;
use highway_irl::eval::EvalReport;
use highway_irl::expert::ingest_demonstration;
use highway_irl::features::{discounted_feature_sum, feature_index, MuVector, FEATURE_DIM};
use highway_irl::persist::{list_trajectories, read_mu, read_weights};
use highway_irl::rng::{derive_seed, rng_from_seed};
use highway_irl::sim::{WorldConfig, NUM_BINS, NUM_SENSORS};
use highway_irl::toy::*;
use rand::Rng;

const FRONT_SENSOR: usize = 0;

/// Value of `policy` from the start state by repeated Bellman backups,
/// independent of the linear solve used by the library.
fn iterative_start_value(mdp: &TabularMdp, policy: &TabularPolicy, w: &highway_irl::features::WeightVector) -> f64 {
    let r: Vec<f64> = mdp.features.iter().map(|f| f.iter().zip(&w.0).map(|(a, b)| a * b).sum()).collect();
    let actions = policy.actions().expect("deterministic policy");
    let mut v = vec![0.0; mdp.n_states];
    for _ in 0..2000 {
        v = (0..mdp.n_states)
            .map(|s| r[s] + mdp.gamma * mdp.transitions[s][actions[s]].iter().map(|&(t, p)| p * v[t]).sum::<f64>())
            .collect();
    }
    v[mdp.start]
}

fn planted_expert(mdp: &TabularMdp) -> (TabularPolicy, Vec<usize>) {
    let vi = value_iteration(mdp, mdp.planted.as_ref().unwrap(), 1e-12).unwrap();
    (TabularPolicy::deterministic(&vi.policy, mdp.n_actions), vi.policy)
}

fn exact_loop(mdp: &TabularMdp) -> highway_irl::irl::IrlResult<TabularPolicy> {
    let (expert, _) = planted_expert(mdp);
    let cfg = highway_irl::irl::IrlConfig { epsilon_stop: 1e-6, max_iterations: 10, ..Default::default() };
    run_irl_exact(mdp, &expert, &cfg).unwrap()
}

#[test]
fn exact_loop_recovers_the_planted_policy() {
    let mdp = shipped("planted4").unwrap();
    let (_, expert_actions) = planted_expert(&mdp);
    let start = Instant::now();
    let result = exact_loop(&mdp);
    let elapsed = start.elapsed();

    let t = &result.state.t_history;
    assert!(result.records.len() <= 10);
    assert!(*t.last().unwrap() < 1e-6, "final margin {t:?}");
    for pair in t.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-9, "margin increased: {t:?}");
    }
    let learned = value_iteration(&mdp, result.policy_weights.as_ref().unwrap(), 1e-12).unwrap();
    let matching = learned.policy.iter().zip(&expert_actions).filter(|(a, b)| a == b).count();
    assert_eq!(matching, mdp.n_states, "learned {:?} vs expert {:?}", learned.policy, expert_actions);
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
}

#[test]
fn learned_policy_value_is_within_one_percent_of_the_expert() {
    let mdp = shipped("planted4").unwrap();
    let planted = mdp.planted.clone().unwrap();
    let (expert, _) = planted_expert(&mdp);
    let result = exact_loop(&mdp);
    let learned = result.policy.unwrap();
    let v_e = iterative_start_value(&mdp, &expert, &planted);
    let v_l = iterative_start_value(&mdp, &learned, &planted);
    assert!((v_l - v_e).abs() <= 0.01 * v_e.abs(), "V_learned {v_l} vs V_expert {v_e}");
}

fn random_one_hot(rng: &mut highway_irl::rng::SimRng) -> Vec<f64> {
    let mut v = vec![0.0; FEATURE_DIM];
    for s in 0..NUM_SENSORS {
        v[feature_index(s, rng.gen_range(0..NUM_BINS))] = 1.0;
    }
    v
}

/// Batch loss recomputed from the raw parameters, plus which side of every
/// kink the batch sits on: the sign of each hidden pre-activation and
/// whether each residual is inside the Huber band.
fn loss_and_kinks(net: &QNetwork, samples: &[Sample<'_>], kind: LossKind) -> (f64, Vec<bool>) {
    let mut pattern = vec![];
    let mut total = 0.0;
    for s in samples {
        let mut cur = s.input.to_vec();
        for (k, layer) in net.layers.iter().enumerate() {
            let mut z = layer.bias.clone();
            for (i, &x) in cur.iter().enumerate().filter(|(_, &x)| x != 0.0) {
                let row = &layer.weights[i * layer.outputs..(i + 1) * layer.outputs];
                for (zj, w) in z.iter_mut().zip(row) {
                    *zj += x * w;
                }
            }
            if k + 1 < net.layers.len() {
                pattern.extend(z.iter().map(|&v| v > 0.0));
                cur = z.into_iter().map(|v| v.max(0.0)).collect();
            } else {
                let e = z[s.action] - s.target;
                pattern.push(e.abs() <= 1.0);
                total += match kind {
                    LossKind::Mse => e * e,
                    LossKind::Huber if e.abs() <= 1.0 => 0.5 * e * e,
                    LossKind::Huber => e.abs() - 0.5,
                };
            }
        }
    }
    (total / samples.len() as f64, pattern)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let start = Instant::now();
    let sizes = TrainSchedule::default().layer_sizes(FEATURE_DIM, 3);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let (mut checked, mut straddling) = (0usize, 0usize);
    for batch_index in 0..20u64 {
        let mut rng = rng_from_seed(derive_seed(314, batch_index));
        let mut net = QNetwork::init_all_layers(&sizes, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..10).map(|_| random_one_hot(&mut rng)).collect();
        let samples: Vec<Sample> = inputs
            .iter()
            .map(|x| Sample { input: x, action: rng.gen_range(0..3), target: rng.gen_range(-2.0..2.0) })
            .collect();
        let loss_kind = if batch_index % 2 == 0 { LossKind::Mse } else { LossKind::Huber };
        let (_, grad) = net.loss_and_gradient(&samples, loss_kind);
        let (_, base) = loss_and_kinks(&net, &samples, loss_kind);
        let n_tensors = net.tensors().len();
        for ti in 0..n_tensors {
            let len = net.tensors()[ti].len();
            // Small tensors in full, large ones by random sample.
            let picks: Vec<usize> =
                if len <= 200 { (0..len).collect() } else { (0..60).map(|_| rng.gen_range(0..len)).collect() };
            for pi in picks {
                let analytic = grad.tensors()[ti][pi];
                let orig = net.tensors()[ti][pi];
                net.tensors_mut()[ti][pi] = orig + h;
                let (plus, plus_pattern) = loss_and_kinks(&net, &samples, loss_kind);
                net.tensors_mut()[ti][pi] = orig - h;
                let (minus, minus_pattern) = loss_and_kinks(&net, &samples, loss_kind);
                net.tensors_mut()[ti][pi] = orig;
                if plus_pattern != base || minus_pattern != base {
                    // The difference quotient spans a kink and measures no derivative.
                    straddling += 1;
                    continue;
                }
                checked += 1;
                let numeric = (plus - minus) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(worst <= 1e-4, "max relative error {worst}");
    assert!(straddling * 100 <= checked, "{straddling} of {} coordinates straddle a kink", checked + straddling);
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
}

#[test]
fn monte_carlo_feature_expectations_match_exact_values() {
    for name in SHIPPED {
        let mdp = shipped(name).unwrap();
        let policy = match &mdp.planted {
            Some(_) => planted_expert(&mdp).0,
            None => TabularPolicy::uniform(mdp.n_states, mdp.n_actions),
        };
        let exact = exact_feature_expectations(&mdp, &policy, Horizon::Infinite).unwrap();
        let env = ToyEnv::new(mdp.clone());
        let n = 10_000;
        let mut mean = vec![0.0; mdp.feature_dim()];
        for k in 0..n {
            let ro = rollout(&env, &policy, derive_seed(2024, k as u64)).unwrap();
            let mu = discounted_feature_sum(&ro.features, mdp.gamma).unwrap();
            for (m, v) in mean.iter_mut().zip(&mu.0) {
                *m += v / n as f64;
            }
        }
        for (i, (e, m)) in exact.0.iter().zip(&mean).enumerate() {
            assert!((e - m).abs() <= 0.02, "{name} feature {i}: exact {e}, Monte Carlo {m}");
        }
    }
}

// ---------------------------------------------------------------------------
// Highway pipeline, shared between the tests below.

struct PipelineRun {
    demos: PathBuf,
    run: PathBuf,
    report: EvalReport,
    elapsed: Duration,
    _root: tempfile::TempDir,
}

const RECORD_SEED: u64 = 7;
const EVAL_SEED: u64 = 0;

fn train_args(demos: &Path, out: &Path) -> TrainArgs {
    TrainArgs {
        demo_dir: Some(demos.to_path_buf()),
        config: TrainConfig::default(),
        out_dir: out.to_path_buf(),
        rl: RlKind::Dqn,
        env: EnvKind::Highway,
    }
}

fn pipeline() -> &'static PipelineRun {
    static RUN: OnceLock<PipelineRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let demos = root.path().join("demos");
        let run = root.path().join("run");
        let start = Instant::now();
        let cfg = WorldConfig::default();
        cmd_record(90, RECORD_SEED, &demos, &cfg).unwrap();
        cmd_train(&train_args(&demos, &run)).unwrap();
        let report = cmd_evaluate(&EvaluateArgs {
            checkpoint: run.join("final.ckpt"),
            weights: Some(run.join("final_weights.csv")),
            n: 50,
            seed: EVAL_SEED,
            out_dir: root.path().join("eval"),
            demo_dir: None,
            world: cfg,
            gamma: TrainConfig::default().irl.gamma,
        })
        .unwrap();
        PipelineRun { demos, run, report, elapsed: start.elapsed(), _root: root }
    })
}

#[test]
fn end_to_end_highway_run_matches_the_expert() {
    let p = pipeline();
    let r = &p.report;
    let summary = format!(
        "collision_rate {}, lane_keeping {}, mu_diff mean {} max {}, runtime {:?}",
        r.collision_rate,
        r.lane_keeping_ratio,
        r.mu_diff_table.mean(),
        r.mu_diff_table.max(),
        p.elapsed
    );
    assert_eq!(r.scenarios_evaluated, 50);
    assert!(r.collision_rate == 0.0, "{summary}");
    assert!(r.lane_keeping_ratio >= 0.90, "{summary}");
    assert!(r.mu_diff_table.mean() <= 0.25, "{summary}");
    assert!(r.mu_diff_table.max() <= 0.35, "{summary}");
    assert!(p.elapsed <= Duration::from_secs(15 * 60), "{summary}");
}

#[test]
fn recovered_weights_are_interpretable() {
    let p = pipeline();
    let weights = read_weights(&p.run.join("final_weights.csv")).unwrap();
    let mut observed: Vec<MuVector> = vec![read_mu(&p.run.join("mu_expert.csv")).unwrap()];
    let state = load_run_state(&p.run).unwrap();
    observed.extend(state.mu_history.iter().cloned());
    let mut unvisited = 0;
    for i in 0..FEATURE_DIM {
        if observed.iter().all(|m| m.0[i] == 0.0) {
            unvisited += 1;
            assert_eq!(weights.0[i], 0.0, "feature {i} was never observed but has weight {}", weights.0[i]);
        }
    }
    assert!(unvisited > 0, "every feature was visited; the zero-weight property is vacuous");
    let front: Vec<f64> = (0..NUM_BINS).map(|b| weights.0[feature_index(FRONT_SENSOR, b)]).collect();
    let argmax = argmax_low(&front);
    assert!((8..NUM_BINS).contains(&argmax), "front sensor weights peak at bin {argmax}: {front:?}");
}

fn dir_contents(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn training_is_byte_for_byte_reproducible() {
    let p = pipeline();
    let again = tempfile::tempdir().unwrap();
    cmd_train(&train_args(&p.demos, again.path())).unwrap();
    let first = dir_contents(&p.run);
    let second = dir_contents(again.path());
    let names: Vec<_> = first.iter().map(|(n, _)| n.clone()).collect();
    for required in ["manifest.toml", "final_weights.csv", "t_history.csv"] {
        assert!(names.contains(&PathBuf::from(required)), "{required} missing");
    }
    assert_eq!(names, second.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    for ((name, a), (_, b)) in first.iter().zip(&second) {
        assert!(a == b, "{} differs between runs", name.display());
    }
}

#[test]
fn recorded_demonstrations_replay_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = WorldConfig::default();
    cmd_record(90, RECORD_SEED, dir.path(), &cfg).unwrap();
    let files = list_trajectories(dir.path()).unwrap();
    assert_eq!(files.len(), 90);
    for f in &files {
        if let Err(e) = ingest_demonstration(f, &cfg) {
            panic!("{} failed replay: {e}", f.display());
        }
    }
}
