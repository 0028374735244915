//! Exact tabular machinery: value iteration, exact policy evaluation and
//! closed-form discounted feature expectations on small MDPs.
//!
//! These are the brute-force oracles for the Monte Carlo estimator and for
//! the projection loop. Rewards are state rewards `R(s) = w . phi(s)` and
//! values count the start state: `V(s0) = E[sum_t gamma^t R(s_t)]`.
//!
//! # Fixture format
//!
//! Toy MDPs ship as plain text, one directive per line, `#` comments:
//!
//! ```text
//! toymdp 1                  # magic + format version
//! name planted4
//! states 4
//! actions 2
//! features 3
//! gamma 0.9
//! start 0
//! T <s> <a> <s'> <p>        # one line per successor with p > 0
//! F <s> <phi_0> ... <phi_d-1>
//! W <w_0> ... <w_d-1>       # optional planted reward weights
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::env::{EnvStep, Environment, EpisodeStatus, Policy};
use crate::error::{Error, Result};
use crate::features::{check_dim, dot, MuVector, WeightVector};
use crate::irl::{run_irl, IrlConfig, IrlResult, RlSolver};
use crate::rng::SimRng;

pub const FIXTURE_VERSION: u32 = 1;
const MAX_STATES: usize = 1_000;
const MAX_ACTIONS: usize = 5;
const MAX_FEATURES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub name: String,
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a]` lists `(successor, probability)`.
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    pub features: Vec<Vec<f64>>,
    pub start: usize,
    pub gamma: f64,
    pub planted: Option<WeightVector>,
}

impl TabularMdp {
    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("toy mdp {}: {m}", self.name)));
        if self.n_states == 0 || self.n_states > MAX_STATES || self.n_actions == 0 || self.n_actions > MAX_ACTIONS {
            return bad(format!("{} states / {} actions out of bounds", self.n_states, self.n_actions));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if self.start >= self.n_states {
            return bad("start state out of range".into());
        }
        let d = self.feature_dim();
        if d == 0
            || d > MAX_FEATURES
            || self.features.len() != self.n_states
            || self.features.iter().any(|f| f.len() != d)
        {
            return bad("feature table has the wrong shape".into());
        }
        if self.features.iter().flatten().any(|&x| x != 0.0 && x != 1.0) {
            return bad("features must be binary".into());
        }
        if self.transitions.len() != self.n_states || self.transitions.iter().any(|row| row.len() != self.n_actions) {
            return bad("transition table has the wrong shape".into());
        }
        for (s, row) in self.transitions.iter().enumerate() {
            for (a, succ) in row.iter().enumerate() {
                let total: f64 = succ.iter().map(|&(_, p)| p).sum();
                if (total - 1.0).abs() > 1e-12 || succ.iter().any(|&(t, p)| t >= self.n_states || !(p > 0.0)) {
                    return bad(format!("T[{s}][{a}] is not a distribution"));
                }
            }
        }
        if let Some(w) = &self.planted {
            if w.len() != d {
                return bad("planted weights have the wrong length".into());
            }
        }
        Ok(())
    }

    /// `R[s][a] = w . phi(s)`.
    pub fn state_rewards(&self, w: &WeightVector) -> Result<Vec<Vec<f64>>> {
        check_dim(self.feature_dim(), w.len())?;
        Ok(self.features.iter().map(|phi| vec![w.dot(phi); self.n_actions]).collect())
    }

    fn expected_next(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        self.transitions[s][a].iter().map(|&(t, p)| p * values[t]).sum()
    }

    /// State-to-state matrix of a (possibly stochastic) policy.
    fn policy_matrix(&self, policy: &TabularPolicy) -> DMatrix<f64> {
        let n = self.n_states;
        let mut p = DMatrix::zeros(n, n);
        for s in 0..n {
            for (a, &pa) in policy.probs[s].iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for &(t, pt) in &self.transitions[s][a] {
                    p[(s, t)] += pa * pt;
                }
            }
        }
        p
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut name = String::from("unnamed");
        let (mut n_states, mut n_actions, mut n_features) = (None, None, None);
        let (mut gamma, mut start) = (None, None);
        let mut version_seen = false;
        let mut t_lines = vec![];
        let mut f_lines = vec![];
        let mut planted = None;

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tok = line.split_whitespace();
            let key = tok.next().unwrap_or_default();
            let rest: Vec<&str> = tok.collect();
            if !version_seen {
                if key != "toymdp" || rest.len() != 1 {
                    return Err(Error::parse(line_no, "expected `toymdp <version>` header"));
                }
                let v: u32 = rest[0].parse().map_err(|_| Error::parse(line_no, "bad version"))?;
                if v != FIXTURE_VERSION {
                    return Err(Error::Version { found: v, expected: FIXTURE_VERSION });
                }
                version_seen = true;
                continue;
            }
            let one = || -> Result<&str> {
                match rest.as_slice() {
                    [x] => Ok(x),
                    _ => Err(Error::parse(line_no, format!("`{key}` takes one value"))),
                }
            };
            let usize_of =
                |s: &str| s.parse::<usize>().map_err(|_| Error::parse(line_no, format!("bad integer `{s}`")));
            let f64_of = |s: &str| s.parse::<f64>().map_err(|_| Error::parse(line_no, format!("bad number `{s}`")));
            match key {
                "name" => name = one()?.to_string(),
                "states" => n_states = Some(usize_of(one()?)?),
                "actions" => n_actions = Some(usize_of(one()?)?),
                "features" => n_features = Some(usize_of(one()?)?),
                "gamma" => gamma = Some(f64_of(one()?)?),
                "start" => start = Some(usize_of(one()?)?),
                "T" => {
                    if rest.len() != 4 {
                        return Err(Error::parse(line_no, "`T s a s' p`"));
                    }
                    t_lines.push((
                        line_no,
                        usize_of(rest[0])?,
                        usize_of(rest[1])?,
                        usize_of(rest[2])?,
                        f64_of(rest[3])?,
                    ));
                }
                "F" => {
                    let (s, vals) = rest.split_first().ok_or_else(|| Error::parse(line_no, "`F s phi...`"))?;
                    let vals = vals.iter().map(|v| f64_of(v)).collect::<Result<Vec<_>>>()?;
                    f_lines.push((line_no, usize_of(s)?, vals));
                }
                "W" => planted = Some(WeightVector(rest.iter().map(|v| f64_of(v)).collect::<Result<Vec<_>>>()?)),
                other => return Err(Error::parse(line_no, format!("unknown directive `{other}`"))),
            }
        }
        if !version_seen {
            return Err(Error::parse(0, "empty fixture"));
        }
        let missing = |what: &str| Error::parse(0, format!("missing `{what}`"));
        let n_states = n_states.ok_or_else(|| missing("states"))?;
        let n_actions = n_actions.ok_or_else(|| missing("actions"))?;
        let n_features = n_features.ok_or_else(|| missing("features"))?;
        if n_states > MAX_STATES || n_actions > MAX_ACTIONS {
            return Err(Error::parse(0, "table too large"));
        }
        let mut transitions = vec![vec![Vec::new(); n_actions]; n_states];
        for (line_no, s, a, t, p) in t_lines {
            if s >= n_states || a >= n_actions || t >= n_states {
                return Err(Error::parse(line_no, "index out of range"));
            }
            transitions[s][a].push((t, p));
        }
        let mut features = vec![Vec::new(); n_states];
        for (line_no, s, vals) in f_lines {
            if s >= n_states || vals.len() != n_features {
                return Err(Error::parse(line_no, "feature row out of range or wrong length"));
            }
            features[s] = vals;
        }
        let mdp = TabularMdp {
            name,
            n_states,
            n_actions,
            transitions,
            features,
            start: start.ok_or_else(|| missing("start"))?,
            gamma: gamma.ok_or_else(|| missing("gamma"))?,
            planted,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn to_fixture(&self) -> String {
        let mut out = format!(
            "toymdp {FIXTURE_VERSION}\nname {}\nstates {}\nactions {}\nfeatures {}\ngamma {}\nstart {}\n",
            self.name,
            self.n_states,
            self.n_actions,
            self.feature_dim(),
            self.gamma,
            self.start
        );
        for (s, row) in self.transitions.iter().enumerate() {
            for (a, succ) in row.iter().enumerate() {
                for &(t, p) in succ {
                    out += &format!("T {s} {a} {t} {p}\n");
                }
            }
        }
        for (s, phi) in self.features.iter().enumerate() {
            let vals: Vec<String> = phi.iter().map(|x| x.to_string()).collect();
            out += &format!("F {s} {}\n", vals.join(" "));
        }
        if let Some(w) = &self.planted {
            let vals: Vec<String> = w.0.iter().map(|x| x.to_string()).collect();
            out += &format!("W {}\n", vals.join(" "));
        }
        out
    }
}

pub const SHIPPED: [&str; 4] = ["chain2", "alternator2", "planted4", "grid5"];

/// One of the bundled toy instances by name.
pub fn shipped(name: &str) -> Result<TabularMdp> {
    let text = match name {
        "chain2" => include_str!("../fixtures/chain2.mdp"),
        "alternator2" => include_str!("../fixtures/alternator2.mdp"),
        "planted4" => include_str!("../fixtures/planted4.mdp"),
        "grid5" => include_str!("../fixtures/grid5.mdp"),
        other => return Err(Error::InvalidArgument(format!("unknown toy mdp `{other}`"))),
    };
    TabularMdp::parse(text)
}

/// Per-state action distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let probs = actions.iter().map(|&a| (0..n_actions).map(|b| if a == b { 1.0 } else { 0.0 }).collect()).collect();
        Self { probs }
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states] }
    }

    /// The chosen action per state when the policy is deterministic.
    pub fn actions(&self) -> Option<Vec<usize>> {
        self.probs.iter().map(|row| row.iter().position(|&p| p == 1.0)).collect()
    }
}

impl Policy<usize> for TabularPolicy {
    fn act(&self, state: &usize, _features: &[f64], rng: &mut SimRng) -> usize {
        let row = &self.probs[*state];
        let mut u: f64 = rng.gen();
        for (a, &p) in row.iter().enumerate() {
            if u < p {
                return a;
            }
            u -= p;
        }
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct ValueIterationResult {
    pub q: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    pub sweeps: usize,
    /// Sup-norm change of each sweep.
    pub deltas: Vec<f64>,
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn value_iteration(mdp: &TabularMdp, w: &WeightVector, tol: f64) -> Result<ValueIterationResult> {
    let rewards = mdp.state_rewards(w)?;
    value_iteration_with_rewards(mdp, &rewards, tol)
}

/// Bellman optimality sweeps `Q(s,a) = R(s,a) + gamma * E[V(s')]` until the
/// sup-norm change drops below `tol`.
pub fn value_iteration_with_rewards(mdp: &TabularMdp, rewards: &[Vec<f64>], tol: f64) -> Result<ValueIterationResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    check_dim(mdp.n_states, rewards.len())?;
    let mut q = vec![vec![0.0; mdp.n_actions]; mdp.n_states];
    let mut values = vec![0.0; mdp.n_states];
    let mut deltas = vec![];
    loop {
        let mut delta: f64 = 0.0;
        let mut next = q.clone();
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                next[s][a] = rewards[s][a] + mdp.gamma * mdp.expected_next(s, a, &values);
                delta = delta.max((next[s][a] - q[s][a]).abs());
            }
        }
        q = next;
        values = q.iter().map(|row| row[argmax_low(row)]).collect();
        deltas.push(delta);
        if delta < tol || !delta.is_finite() {
            break;
        }
    }
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("value iteration diverged".into()));
    }
    let policy = q.iter().map(|row| argmax_low(row)).collect();
    Ok(ValueIterationResult { q, values, policy, sweeps: deltas.len(), deltas })
}

/// Exact `V^pi` for state rewards by solving `(I - gamma P_pi) V = R`.
pub fn policy_evaluation(mdp: &TabularMdp, policy: &TabularPolicy, w: &WeightVector) -> Result<Vec<f64>> {
    check_dim(mdp.feature_dim(), w.len())?;
    let n = mdp.n_states;
    let a = DMatrix::identity(n, n) - mdp.policy_matrix(policy) * mdp.gamma;
    let r = DVector::from_iterator(n, mdp.features.iter().map(|phi| w.dot(phi)));
    let v = a.lu().solve(&r).ok_or_else(|| Error::NonFinite("singular evaluation system".into()))?;
    Ok(v.iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Infinite,
    Finite(usize),
}

/// `mu(pi) = Phi^T d` where `d` are the discounted state-visitation
/// frequencies from the start state.
pub fn exact_feature_expectations(mdp: &TabularMdp, policy: &TabularPolicy, horizon: Horizon) -> Result<MuVector> {
    check_dim(mdp.n_states, policy.probs.len())?;
    let n = mdp.n_states;
    let p = mdp.policy_matrix(policy);
    let mut start = DVector::zeros(n);
    start[mdp.start] = 1.0;
    let visits = match horizon {
        Horizon::Infinite => {
            let a = DMatrix::identity(n, n) - p.transpose() * mdp.gamma;
            a.lu().solve(&start).ok_or_else(|| Error::NonFinite("singular flow system".into()))?
        }
        Horizon::Finite(h) => {
            let pt = p.transpose();
            let mut occupancy = start;
            let mut total = DVector::zeros(n);
            let mut g = 1.0;
            for _ in 0..h {
                total += &occupancy * g;
                occupancy = &pt * occupancy;
                g *= mdp.gamma;
            }
            total
        }
    };
    let d = mdp.feature_dim();
    let mut mu = vec![0.0; d];
    for s in 0..n {
        for (m, &phi) in mu.iter_mut().zip(&mdp.features[s]) {
            *m += visits[s] * phi;
        }
    }
    Ok(MuVector(mu))
}

/// Monte Carlo view of a tabular MDP. Episodes are truncated after
/// `horizon` actions.
#[derive(Debug, Clone)]
pub struct ToyEnv {
    pub mdp: TabularMdp,
    pub horizon: usize,
}

impl ToyEnv {
    /// Truncation long enough that the discounted tail is below `1e-9`.
    pub fn new(mdp: TabularMdp) -> Self {
        let horizon = if mdp.gamma == 0.0 { 1 } else { (1e-9f64.ln() / mdp.gamma.ln()).ceil() as usize };
        Self { mdp, horizon }
    }
}

impl Environment for ToyEnv {
    type State = usize;

    fn num_actions(&self) -> usize {
        self.mdp.n_actions
    }

    fn feature_dim(&self) -> usize {
        self.mdp.feature_dim()
    }

    fn reset(&self, _seed: u64) -> usize {
        self.mdp.start
    }

    fn features(&self, state: &usize) -> Result<Vec<f64>> {
        Ok(self.mdp.features[*state].clone())
    }

    fn step(&self, state: &usize, action: usize, rng: &mut SimRng) -> Result<EnvStep<usize>> {
        let succ = self
            .mdp
            .transitions
            .get(*state)
            .and_then(|row| row.get(action))
            .ok_or_else(|| Error::InvalidArgument(format!("action {action} in state {state}")))?;
        let mut u: f64 = rng.gen();
        let mut next = succ.last().map(|&(t, _)| t).unwrap_or(*state);
        for &(t, p) in succ {
            if u < p {
                next = t;
                break;
            }
            u -= p;
        }
        Ok(EnvStep { state: next, features: self.mdp.features[next].clone(), status: EpisodeStatus::Continue })
    }

    fn max_episode_steps(&self) -> usize {
        self.horizon
    }
}

/// RL step solved exactly: value iteration for the policy, linear solve for
/// its feature expectations.
#[derive(Debug, Clone)]
pub struct ExactSolver<'a> {
    pub mdp: &'a TabularMdp,
    pub tol: f64,
}

impl<'a> ExactSolver<'a> {
    pub fn new(mdp: &'a TabularMdp) -> Self {
        Self { mdp, tol: 1e-12 }
    }
}

impl RlSolver for ExactSolver<'_> {
    type Policy = TabularPolicy;

    fn initial_feature_expectations(&mut self) -> Result<MuVector> {
        let uniform = TabularPolicy::uniform(self.mdp.n_states, self.mdp.n_actions);
        exact_feature_expectations(self.mdp, &uniform, Horizon::Infinite)
    }

    fn solve(&mut self, w: &WeightVector, _iteration: usize) -> Result<TabularPolicy> {
        let vi = value_iteration(self.mdp, w, self.tol)?;
        Ok(TabularPolicy::deterministic(&vi.policy, self.mdp.n_actions))
    }

    fn feature_expectations(&mut self, policy: &TabularPolicy, _iteration: usize) -> Result<MuVector> {
        exact_feature_expectations(self.mdp, policy, Horizon::Infinite)
    }
}

/// The projection loop with the exact solver; `mu_E` is computed exactly
/// from `expert`.
pub fn run_irl_exact(mdp: &TabularMdp, expert: &TabularPolicy, config: &IrlConfig) -> Result<IrlResult<TabularPolicy>> {
    mdp.validate()?;
    let mu_expert = exact_feature_expectations(mdp, expert, Horizon::Infinite)?;
    let mut solver = ExactSolver::new(mdp);
    run_irl(mu_expert, config, &mut solver, |_, _, _| Ok(()))
}

/// Exact `V(s0)` of `policy` under weights `w`, also equal to `w . mu(pi)`.
pub fn start_value(mdp: &TabularMdp, policy: &TabularPolicy, w: &WeightVector) -> Result<f64> {
    Ok(policy_evaluation(mdp, policy, w)?[mdp.start])
}

/// Convenience used by the oracle tests: `w . mu`.
pub fn linear_value(w: &WeightVector, mu: &MuVector) -> f64 {
    dot(&w.0, &mu.0)
}
