//! Projection-based apprenticeship learning.
//!
//! Starting from the feature expectations of a random policy, each round
//! trains a policy on the reward `w . phi`, measures its feature
//! expectations `mu`, projects `mu_E` onto the line through the previous
//! `mu_bar` and the new `mu`, and sets `w = mu_E - mu_bar`. The loop stops
//! once the margin `t = |w|` falls to `epsilon_stop` or the round budget is
//! spent.
//!
//! Rounds are numbered from 1: round `i` trains with `w^(i)` and yields
//! `pi^(i)`, `mu^(i)`, then `mu_bar^(i)`, `w^(i+1)` and `t^(i+1)`.

use serde::{Deserialize, Serialize};

use crate::dqn::TrainSchedule;
use crate::error::{Error, Result};
use crate::features::{check_dim, dot, MuVector, WeightVector};

/// Projection directions shorter than this are treated as degenerate.
pub const DEGENERATE_DIRECTION: f64 = 1e-12;
/// Slack allowed before a margin increase is reported.
pub const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrlConfig {
    pub epsilon_stop: f64,
    /// Maximum number of RL rounds.
    pub max_iterations: usize,
    pub rollouts_per_mu: usize,
    pub gamma: f64,
    pub master_seed: u64,
    pub dqn: TrainSchedule,
}

impl Default for IrlConfig {
    fn default() -> Self {
        Self {
            epsilon_stop: 0.1,
            max_iterations: 6,
            rollouts_per_mu: 50,
            gamma: 0.9,
            master_seed: 0,
            dqn: TrainSchedule::default(),
        }
    }
}

impl IrlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        if self.rollouts_per_mu == 0 {
            return Err(Error::InvalidArgument("rollouts_per_mu must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if self.epsilon_stop.is_nan() || self.epsilon_stop < 0.0 {
            return Err(Error::InvalidArgument("epsilon_stop must be non-negative".into()));
        }
        self.dqn.validate()
    }
}

/// The RL step of the loop: turn weights into a policy and measure it.
pub trait RlSolver {
    type Policy;

    /// `mu^(0)` of the initial (uniformly random) policy.
    fn initial_feature_expectations(&mut self) -> Result<MuVector>;

    /// Best policy for the reward `w . phi` in round `iteration`.
    fn solve(&mut self, w: &WeightVector, iteration: usize) -> Result<Self::Policy>;

    fn feature_expectations(&mut self, policy: &Self::Policy, iteration: usize) -> Result<MuVector>;
}

/// Everything needed to continue the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrlState {
    /// Round that will train with `weights`.
    pub iteration: usize,
    /// `w^(iteration)`.
    pub weights: WeightVector,
    /// `t^(iteration) = |mu_E - mu_bar|`.
    pub margin: f64,
    pub mu_bar: MuVector,
    pub mu_expert: MuVector,
    /// `mu^(0), mu^(1), ...`
    pub mu_history: Vec<MuVector>,
    /// `t^(1), t^(2), ...`
    pub t_history: Vec<f64>,
    /// `w^(1), w^(2), ...`
    pub w_history: Vec<WeightVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Weights the round trained with.
    pub weights: WeightVector,
    pub mu: MuVector,
    pub mu_bar: MuVector,
    /// Margin after this round's projection.
    pub margin: f64,
    pub margin_increased: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `mu^(0)` already equals `mu_E`.
    AlreadyMatched,
    Converged,
    MaxIterations,
    DegenerateProjection,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::AlreadyMatched => "already_matched",
            StopReason::Converged => "converged",
            StopReason::MaxIterations => "max_iterations",
            StopReason::DegenerateProjection => "degenerate_projection",
        }
    }
}

#[derive(Debug, Clone)]
pub struct IrlResult<P> {
    pub state: IrlState,
    pub records: Vec<IterationRecord>,
    /// Policy of the last round, if any round ran.
    pub policy: Option<P>,
    /// Weights that policy was trained with.
    pub policy_weights: Option<WeightVector>,
    pub stop: StopReason,
    pub monotonicity_violations: usize,
}

/// `mu_bar_prev + [(d . (mu_E - mu_bar_prev)) / (d . d)] d` with
/// `d = mu_prev - mu_bar_prev`: the foot of `mu_E` on the line through
/// `mu_bar_prev` and `mu_prev`, unclamped.
pub fn project_mu_bar(mu_bar_prev: &MuVector, mu_prev: &MuVector, mu_expert: &MuVector) -> Result<MuVector> {
    check_dim(mu_bar_prev.len(), mu_prev.len())?;
    check_dim(mu_bar_prev.len(), mu_expert.len())?;
    let d: Vec<f64> = mu_prev.0.iter().zip(&mu_bar_prev.0).map(|(a, b)| a - b).collect();
    let to_expert: Vec<f64> = mu_expert.0.iter().zip(&mu_bar_prev.0).map(|(a, b)| a - b).collect();
    let dd = dot(&d, &d);
    if dd.sqrt() <= DEGENERATE_DIRECTION {
        return Err(Error::DegenerateProjection(dd.sqrt()));
    }
    let scale = dot(&d, &to_expert) / dd;
    Ok(MuVector(mu_bar_prev.0.iter().zip(&d).map(|(b, di)| b + scale * di).collect()))
}

/// `w = mu_E - mu_bar` and `t = |w|_2`.
pub fn update_weights(mu_expert: &MuVector, mu_bar: &MuVector) -> Result<(WeightVector, f64)> {
    check_dim(mu_expert.len(), mu_bar.len())?;
    let w = WeightVector(mu_expert.0.iter().zip(&mu_bar.0).map(|(e, b)| e - b).collect());
    let t = w.norm();
    Ok((w, t))
}

/// Measures the random initial policy and sets `w^(1) = mu_E - mu^(0)`.
pub fn init_irl<S: RlSolver + ?Sized>(mu_expert: MuVector, config: &IrlConfig, solver: &mut S) -> Result<IrlState> {
    config.validate()?;
    if !mu_expert.is_finite() {
        return Err(Error::NonFinite("expert feature expectations".into()));
    }
    let mu0 = solver.initial_feature_expectations()?;
    let (w, t) = update_weights(&mu_expert, &mu0)?;
    Ok(IrlState {
        iteration: 1,
        weights: w.clone(),
        margin: t,
        mu_bar: mu0.clone(),
        mu_expert,
        mu_history: vec![mu0],
        t_history: vec![t],
        w_history: vec![w],
    })
}

pub fn run_irl<S, F>(
    mu_expert: MuVector,
    config: &IrlConfig,
    solver: &mut S,
    observer: F,
) -> Result<IrlResult<S::Policy>>
where
    S: RlSolver + ?Sized,
    F: FnMut(&IrlState, &IterationRecord, &S::Policy) -> Result<()>,
{
    let state = init_irl(mu_expert, config, solver)?;
    resume_irl(state, config, solver, observer)
}

/// Continues the loop from a saved state. `observer` runs after every
/// completed round with the updated state.
pub fn resume_irl<S, F>(
    mut state: IrlState,
    config: &IrlConfig,
    solver: &mut S,
    mut observer: F,
) -> Result<IrlResult<S::Policy>>
where
    S: RlSolver + ?Sized,
    F: FnMut(&IrlState, &IterationRecord, &S::Policy) -> Result<()>,
{
    config.validate()?;
    let mut result = IrlResult {
        state: state.clone(),
        records: vec![],
        policy: None,
        policy_weights: None,
        stop: StopReason::MaxIterations,
        monotonicity_violations: 0,
    };
    if state.iteration == 1 && state.margin == 0.0 {
        result.stop = StopReason::AlreadyMatched;
        return Ok(result);
    }
    let stop = loop {
        if state.iteration > config.max_iterations {
            break StopReason::MaxIterations;
        }
        let i = state.iteration;
        let policy = solver.solve(&state.weights, i)?;
        let mu = solver.feature_expectations(&policy, i)?;
        if !mu.is_finite() {
            return Err(Error::NonFinite(format!("feature expectations of round {i}")));
        }
        state.mu_history.push(mu.clone());
        let mu_bar = match project_mu_bar(&state.mu_bar, &mu, &state.mu_expert) {
            Ok(b) => b,
            Err(Error::DegenerateProjection(norm)) => {
                log::warn!(
                    "round {i}: degenerate projection (|mu - mu_bar| = {norm:e}), stopping at t = {}",
                    state.margin
                );
                result.policy = Some(policy);
                result.policy_weights = Some(state.weights.clone());
                break StopReason::DegenerateProjection;
            }
            Err(e) => return Err(e),
        };
        let (w, t) = update_weights(&state.mu_expert, &mu_bar)?;
        let increased = t > state.margin + MONOTONE_SLACK;
        if increased {
            result.monotonicity_violations += 1;
            log::warn!("round {i}: margin increased from {} to {t}", state.margin);
        }
        log::info!("round {i}: t = {t}");
        let record = IterationRecord {
            iteration: i,
            weights: state.weights.clone(),
            mu,
            mu_bar: mu_bar.clone(),
            margin: t,
            margin_increased: increased,
        };
        state.mu_bar = mu_bar;
        state.weights = w.clone();
        state.margin = t;
        state.t_history.push(t);
        state.w_history.push(w);
        state.iteration += 1;
        observer(&state, &record, &policy)?;
        result.policy_weights = Some(record.weights.clone());
        result.policy = Some(policy);
        result.records.push(record);
        if t <= config.epsilon_stop {
            break StopReason::Converged;
        }
    };
    result.stop = stop;
    result.state = state;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mu(v: &[f64]) -> MuVector {
        MuVector(v.to_vec())
    }

    /// Independent projection: the objective |mu_bar_prev + s d - mu_E|^2 is
    /// a parabola in `s`; fit it through s = -1, 0, 1 and take its vertex.
    fn projection_by_search(bar: &[f64], m: &[f64], e: &[f64]) -> Vec<f64> {
        let at =
            |s: f64| -> f64 { bar.iter().zip(m).zip(e).map(|((b, mi), ei)| (b + s * (mi - b) - ei).powi(2)).sum() };
        let (fm, f0, fp) = (at(-1.0), at(0.0), at(1.0));
        let a = (fp + fm - 2.0 * f0) / 2.0;
        let b = (fp - fm) / 2.0;
        let s = -b / (2.0 * a);
        bar.iter().zip(m).map(|(b, mi)| b + s * (mi - b)).collect()
    }

    #[test]
    fn projection_examples() {
        let p = project_mu_bar(&mu(&[0.0, 0.0]), &mu(&[1.0, 1.0]), &mu(&[1.0, 0.0])).unwrap();
        assert_eq!(p.0, vec![0.5, 0.5]);
        let oracle = projection_by_search(&[0.0, 0.0], &[1.0, 1.0], &[1.0, 0.0]);
        assert!((oracle[0] - 0.5).abs() < 1e-9 && (oracle[1] - 0.5).abs() < 1e-9);

        let beyond = project_mu_bar(&mu(&[0.0, 0.0]), &mu(&[1.0, 0.0]), &mu(&[3.0, 0.0])).unwrap();
        assert_eq!(beyond.0, vec![3.0, 0.0]);

        let base = project_mu_bar(&mu(&[0.2, 0.4]), &mu(&[1.0, 0.0]), &mu(&[0.2, 0.4])).unwrap();
        assert_eq!(base.0, vec![0.2, 0.4]);
    }

    #[test]
    fn degenerate_direction_is_an_error() {
        let e = project_mu_bar(&mu(&[1.0, 2.0]), &mu(&[1.0, 2.0]), &mu(&[0.0, 0.0]));
        assert!(matches!(e, Err(Error::DegenerateProjection(_))));
        assert!(project_mu_bar(&mu(&[1.0]), &mu(&[1.0, 2.0]), &mu(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn weight_update_examples() {
        let (w, t) = update_weights(&mu(&[1.0, 0.0]), &mu(&[1.0, 0.0])).unwrap();
        assert_eq!(w.0, vec![0.0, 0.0]);
        assert_eq!(t, 0.0);
        let (w, t) = update_weights(&mu(&[1.0, 0.0]), &mu(&[0.5, 0.5])).unwrap();
        assert_eq!(w.0, vec![0.5, -0.5]);
        assert!((t - 0.5f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn projection_is_orthogonal(
            bar in proptest::collection::vec(-5.0..5.0f64, 6),
            m in proptest::collection::vec(-5.0..5.0f64, 6),
            e in proptest::collection::vec(-5.0..5.0f64, 6),
        ) {
            let d: Vec<f64> = m.iter().zip(&bar).map(|(a, b)| a - b).collect();
            prop_assume!(dot(&d, &d).sqrt() > 1e-3);
            let p = project_mu_bar(&mu(&bar), &mu(&m), &mu(&e)).unwrap();
            let resid: Vec<f64> = p.0.iter().zip(&e).map(|(a, b)| a - b).collect();
            let scale = dot(&resid, &resid).sqrt() * dot(&d, &d).sqrt();
            prop_assert!(dot(&resid, &d).abs() <= 1e-9 * scale.max(1.0));
            let oracle = projection_by_search(&bar, &m, &e);
            let s = dot(&d, &e.iter().zip(&bar).map(|(a, b)| a - b).collect::<Vec<_>>()) / dot(&d, &d);
            prop_assume!(s.abs() < 1e3);
            for (a, b) in p.0.iter().zip(&oracle) {
                prop_assert!((a - b).abs() < 1e-6 * (1.0 + s.abs()));
            }
        }

        #[test]
        fn norm_axioms(e in proptest::collection::vec(-5.0..5.0f64, 5), b in proptest::collection::vec(-5.0..5.0f64, 5)) {
            let (w, t) = update_weights(&mu(&e), &mu(&b)).unwrap();
            prop_assert!(t >= 0.0);
            prop_assert_eq!(t == 0.0, w.0.iter().all(|&x| x == 0.0));
            prop_assert_eq!(w.norm(), t);
        }
    }

    /// Scripted solver: returns canned feature expectations.
    struct Canned {
        initial: MuVector,
        rounds: Vec<MuVector>,
    }

    impl RlSolver for Canned {
        type Policy = usize;
        fn initial_feature_expectations(&mut self) -> Result<MuVector> {
            Ok(self.initial.clone())
        }
        fn solve(&mut self, _w: &WeightVector, iteration: usize) -> Result<usize> {
            Ok(iteration)
        }
        fn feature_expectations(&mut self, p: &usize, _iteration: usize) -> Result<MuVector> {
            Ok(self.rounds[(*p - 1) % self.rounds.len()].clone())
        }
    }

    #[test]
    fn matched_expert_stops_immediately() {
        let mut s = Canned { initial: mu(&[1.0, 2.0]), rounds: vec![mu(&[0.0, 0.0])] };
        let r = run_irl(mu(&[1.0, 2.0]), &IrlConfig::default(), &mut s, |_, _, _| Ok(())).unwrap();
        assert_eq!(r.stop, StopReason::AlreadyMatched);
        assert_eq!(r.state.t_history, vec![0.0]);
        assert!(r.records.is_empty());
    }

    #[test]
    fn infinite_epsilon_runs_one_projection() {
        let mut s = Canned { initial: mu(&[0.0, 0.0]), rounds: vec![mu(&[1.0, 1.0])] };
        let cfg = IrlConfig { epsilon_stop: f64::INFINITY, ..IrlConfig::default() };
        let r = run_irl(mu(&[1.0, 0.0]), &cfg, &mut s, |_, _, _| Ok(())).unwrap();
        assert_eq!(r.stop, StopReason::Converged);
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.state.t_history.len(), 2);
        assert_eq!(r.state.mu_bar.0, vec![0.5, 0.5]);
        assert_eq!(r.policy, Some(1));
    }

    #[test]
    fn max_iterations_caps_rounds_and_repeats_degenerate() {
        let mut s =
            Canned { initial: mu(&[0.0, 0.0]), rounds: vec![mu(&[1.0, 1.0]), mu(&[2.0, -2.0]), mu(&[0.0, 3.0])] };
        let cfg = IrlConfig { epsilon_stop: 0.0, max_iterations: 3, ..IrlConfig::default() };
        let mut seen = vec![];
        let r = run_irl(mu(&[1.0, 0.0]), &cfg, &mut s, |st, rec, _| {
            seen.push((st.iteration, rec.iteration));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![(2, 1), (3, 2), (4, 3)]);
        assert_eq!(r.stop, StopReason::MaxIterations);
        for (k, rec) in r.records.iter().enumerate() {
            assert_eq!(rec.margin, r.state.t_history[k + 1]);
            assert_eq!(r.state.w_history[k + 1].norm(), rec.margin);
        }

        // Reproducing the current mu_bar exactly is degenerate.
        let mut stuck = Canned { initial: mu(&[0.0, 0.0]), rounds: vec![mu(&[0.0, 0.0])] };
        let r = run_irl(mu(&[1.0, 0.0]), &IrlConfig::default(), &mut stuck, |_, _, _| Ok(())).unwrap();
        assert_eq!(r.stop, StopReason::DegenerateProjection);
        assert_eq!(r.state.t_history, vec![1.0]);
        assert_eq!(r.policy, Some(1));
    }

    #[test]
    fn unvisited_features_keep_zero_weight() {
        let mut s = Canned { initial: mu(&[0.0, 1.0, 0.0]), rounds: vec![mu(&[2.0, 0.5, 0.0]), mu(&[0.3, 0.1, 0.0])] };
        let cfg = IrlConfig { epsilon_stop: 0.0, max_iterations: 4, ..IrlConfig::default() };
        let r = run_irl(mu(&[1.0, 0.2, 0.0]), &cfg, &mut s, |_, _, _| Ok(())).unwrap();
        for w in &r.state.w_history {
            assert_eq!(w.0[2], 0.0);
        }
    }
}
