//! Evaluation of a driving policy against the expert: feature-expectation
//! difference tables, collision and lane-keeping rates, lateral jerk.

use std::fmt::Write as _;

use crate::env::{rollout, HighwayEnv, Policy};
use crate::error::{Error, Result};
use crate::expert::{avoidance_trigger, demo_feature_sum, drive, scripted_expert_action, DemoSource};
use crate::features::{check_dim, discounted_feature_sum, feature_index, MuVector, WeightVector, FEATURE_DIM};
use crate::rng::derive_seed;
use crate::sim::{Scenario, Terminal, WorldConfig, NUM_BINS, NUM_SENSORS};

/// Lateral tolerance for lane keeping.
pub const LANE_TOLERANCE: f64 = 1.0;
/// Steps on either side of an avoidance trigger left out of lane keeping.
pub const AVOIDANCE_WINDOW: usize = 10;

/// `|mu_E - mu_A|` laid out as `[sensor][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MuDiffTable(pub [[f64; NUM_BINS]; NUM_SENSORS]);

impl MuDiffTable {
    pub fn get(&self, sensor: usize, bin: usize) -> f64 {
        self.0[sensor][bin]
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().flatten().copied()
    }

    pub fn mean(&self) -> f64 {
        self.values().sum::<f64>() / FEATURE_DIM as f64
    }

    pub fn max(&self) -> f64 {
        self.values().fold(0.0, f64::max)
    }
}

pub fn mu_diff_table(mu_e: &MuVector, mu_a: &MuVector) -> Result<MuDiffTable> {
    check_dim(FEATURE_DIM, mu_e.len())?;
    check_dim(FEATURE_DIM, mu_a.len())?;
    let mut t = [[0.0; NUM_BINS]; NUM_SENSORS];
    for (s, row) in t.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            let i = feature_index(s, b);
            *cell = (mu_e.0[i] - mu_a.0[i]).abs();
        }
    }
    Ok(MuDiffTable(t))
}

/// Mean squared second difference of lateral position.
pub fn jerk_proxy(ys: &[f64]) -> Result<f64> {
    if ys.len() < 3 {
        return Err(Error::InvalidArgument(format!("jerk proxy needs at least 3 samples, got {}", ys.len())));
    }
    let n = ys.len() - 2;
    Ok(ys.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).powi(2)).sum::<f64>() / n as f64)
}

/// `(kept, counted)` timesteps: counted excludes steps within
/// [`AVOIDANCE_WINDOW`] of any avoidance trigger; kept are the counted steps
/// within [`LANE_TOLERANCE`] of the nearest lane centre.
pub fn lane_keeping_counts(states: &[Scenario], cfg: &WorldConfig) -> (usize, usize) {
    let triggers: Vec<usize> =
        states.iter().enumerate().filter(|(_, s)| avoidance_trigger(s, cfg)).map(|(i, _)| i).collect();
    let mut kept = 0;
    let mut counted = 0;
    for (t, s) in states.iter().enumerate() {
        if triggers.iter().any(|&k| k.abs_diff(t) <= AVOIDANCE_WINDOW) {
            continue;
        }
        counted += 1;
        let y = s.ego.y;
        if (y - cfg.lane_center(cfg.nearest_lane(y))).abs() <= LANE_TOLERANCE {
            kept += 1;
        }
    }
    (kept, counted)
}

/// Per-row export of a weight vector: `(sensor, bin, weight)`.
pub fn export_weights(w: &WeightVector) -> Result<Vec<(usize, usize, f64)>> {
    check_dim(FEATURE_DIM, w.len())?;
    Ok((0..NUM_SENSORS)
        .flat_map(|s| (0..NUM_BINS).map(move |b| (s, b)))
        .map(|(s, b)| (s, b, w.0[feature_index(s, b)]))
        .collect())
}

/// Seed of evaluation scenario `k`.
pub fn eval_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, k as u64)
}

/// Outcome of running one policy over a batch of scenarios.
#[derive(Debug, Clone)]
pub struct PolicyRuns {
    pub mu: MuVector,
    pub collisions: usize,
    pub terminals: Vec<Terminal>,
    pub lane_kept: usize,
    pub lane_counted: usize,
    pub mean_jerk: f64,
    pub episodes: usize,
}

impl PolicyRuns {
    pub fn collision_rate(&self) -> f64 {
        self.collisions as f64 / self.episodes as f64
    }

    pub fn lane_keeping_ratio(&self) -> f64 {
        if self.lane_counted == 0 {
            1.0
        } else {
            self.lane_kept as f64 / self.lane_counted as f64
        }
    }
}

fn summarize(trajectories: Vec<(Vec<Scenario>, MuVector)>, cfg: &WorldConfig) -> Result<PolicyRuns> {
    let n = trajectories.len();
    let mut mu = vec![0.0; FEATURE_DIM];
    let mut out = PolicyRuns {
        mu: MuVector::zeros(FEATURE_DIM),
        collisions: 0,
        terminals: vec![],
        lane_kept: 0,
        lane_counted: 0,
        mean_jerk: 0.0,
        episodes: n,
    };
    let mut jerk_sum = 0.0;
    let mut jerk_n = 0;
    for (states, m) in trajectories {
        for (a, b) in mu.iter_mut().zip(&m.0) {
            *a += b / n as f64;
        }
        let last = states.last().map(|s| s.terminal).unwrap_or(Terminal::Running);
        if last.is_collision() {
            out.collisions += 1;
        }
        out.terminals.push(last);
        let (k, c) = lane_keeping_counts(&states, cfg);
        out.lane_kept += k;
        out.lane_counted += c;
        let ys: Vec<f64> = states.iter().map(|s| s.ego.y).collect();
        if ys.len() >= 3 {
            jerk_sum += jerk_proxy(&ys)?;
            jerk_n += 1;
        }
    }
    out.mu = MuVector(mu);
    out.mean_jerk = if jerk_n > 0 { jerk_sum / jerk_n as f64 } else { 0.0 };
    Ok(out)
}

/// Rolls `policy` out on scenarios `eval_seed(seed, 0..n)`.
pub fn run_policy<P>(policy: &P, n: usize, seed: u64, cfg: &WorldConfig, gamma: f64) -> Result<PolicyRuns>
where
    P: Policy<Scenario> + ?Sized,
{
    if n == 0 {
        return Err(Error::InvalidArgument("at least one evaluation scenario is required".into()));
    }
    let env = HighwayEnv::new(cfg.clone());
    let mut trajectories = Vec::with_capacity(n);
    for k in 0..n {
        let ro = rollout(&env, policy, eval_seed(seed, k))?;
        let mu = discounted_feature_sum(&ro.features, gamma)?;
        trajectories.push((ro.states, mu));
    }
    summarize(trajectories, cfg)
}

/// The scripted expert on the same scenarios.
pub fn run_expert(n: usize, seed: u64, cfg: &WorldConfig, gamma: f64) -> Result<PolicyRuns> {
    if n == 0 {
        return Err(Error::InvalidArgument("at least one evaluation scenario is required".into()));
    }
    let mut trajectories = Vec::with_capacity(n);
    for k in 0..n {
        let s = eval_seed(seed, k);
        let demo = drive(s, cfg, DemoSource::Scripted, |sc| scripted_expert_action(sc, cfg))?;
        let mu = demo_feature_sum(&demo, gamma);
        let states = crate::expert::replay(s, &demo.actions(), cfg)?;
        trajectories.push((states, mu));
    }
    summarize(trajectories, cfg)
}

/// Fraction of scenarios `eval_seed(seed, 0..n)` ending in a collision.
pub fn collision_rate<P>(policy: &P, n: usize, seed: u64, cfg: &WorldConfig) -> Result<f64>
where
    P: Policy<Scenario> + ?Sized,
{
    Ok(run_policy(policy, n, seed, cfg, 0.9)?.collision_rate())
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mu_diff_table: MuDiffTable,
    pub collision_rate: f64,
    pub lane_keeping_ratio: f64,
    pub mean_jerk_proxy: f64,
    pub scenarios_evaluated: usize,
    pub expert_collision_rate: f64,
    pub expert_lane_keeping_ratio: f64,
    pub expert_mean_jerk_proxy: f64,
    pub mu_agent: MuVector,
    pub mu_expert: MuVector,
}

impl EvalReport {
    pub fn build(agent: &PolicyRuns, mu_expert: MuVector, expert: Option<&PolicyRuns>) -> Result<Self> {
        Ok(Self {
            mu_diff_table: mu_diff_table(&mu_expert, &agent.mu)?,
            collision_rate: agent.collision_rate(),
            lane_keeping_ratio: agent.lane_keeping_ratio(),
            mean_jerk_proxy: agent.mean_jerk,
            scenarios_evaluated: agent.episodes,
            expert_collision_rate: expert.map_or(f64::NAN, |e| e.collision_rate()),
            expert_lane_keeping_ratio: expert.map_or(f64::NAN, |e| e.lane_keeping_ratio()),
            expert_mean_jerk_proxy: expert.map_or(f64::NAN, |e| e.mean_jerk),
            mu_agent: agent.mu.clone(),
            mu_expert,
        })
    }

    /// TOML-style report with the difference table as rows of 16 values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenarios_evaluated = {}", self.scenarios_evaluated);
        let _ = writeln!(s, "collision_rate = {:?}", self.collision_rate);
        let _ = writeln!(s, "lane_keeping_ratio = {:?}", self.lane_keeping_ratio);
        let _ = writeln!(s, "mean_jerk_proxy = {:?}", self.mean_jerk_proxy);
        if !self.expert_collision_rate.is_nan() {
            let _ = writeln!(s, "expert_collision_rate = {:?}", self.expert_collision_rate);
            let _ = writeln!(s, "expert_lane_keeping_ratio = {:?}", self.expert_lane_keeping_ratio);
            let _ = writeln!(s, "expert_mean_jerk_proxy = {:?}", self.expert_mean_jerk_proxy);
        }
        let _ = writeln!(s, "mu_diff_mean = {:?}", self.mu_diff_table.mean());
        let _ = writeln!(s, "mu_diff_max = {:?}", self.mu_diff_table.max());
        s.push_str("\n# |mu_E - mu_A|, one row per sensor, bins 0..15\nmu_diff_table = [\n");
        for row in &self.mu_diff_table.0 {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
            let _ = writeln!(s, "  [{}],", cells.join(", "));
        }
        s.push_str("]\n");
        s
    }
}
