//! Deep Q-learning: a dense Q-network trained from experience replay
//! against a periodically refreshed target copy.

pub mod network;
pub mod optim;
pub mod replay;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use network::{Dense, LossKind, QNetwork, Sample};
pub use optim::Adam;
pub use replay::{ReplayBuffer, Transition};

use crate::env::{Environment, EpisodeStatus, Policy, UniformRandomPolicy};
use crate::error::{Error, Result};
use crate::features::{check_dim, estimate_feature_expectations, MuVector, WeightVector};
use crate::irl::RlSolver;
use crate::rng::{derive_seed, rng_from_seed, stream, RngState, SimRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    /// Environment steps per training run; one gradient step each after warmup.
    pub inner_iterations: usize,
    /// Gradient steps between target-network refreshes.
    pub target_update_period: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Transitions collected before the first gradient step.
    pub warmup: usize,
    pub loss: LossKind,
    /// Start each IRL round from the previous round's network.
    pub warm_start: bool,
    pub hidden: Vec<usize>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            inner_iterations: 3000,
            target_update_period: 100,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_decay_steps: 2000,
            learning_rate: 1e-3,
            batch_size: 32,
            replay_capacity: 10_000,
            warmup: 500,
            loss: LossKind::Mse,
            warm_start: false,
            hidden: vec![160, 160],
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.target_update_period == 0 {
            return bad("target_update_period must be at least 1");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("batch_size and replay_capacity must be positive");
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return bad("epsilon values must lie in [0, 1]");
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end` over
    /// `epsilon_decay_steps`, constant afterwards.
    pub fn epsilon_at(&self, step: usize) -> f64 {
        if step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    pub fn layer_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(&self.hidden);
        sizes.push(output);
        sizes
    }
}

/// Index of the largest value, ties to the lowest index.
pub fn greedy_action(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy choice over `q`.
pub fn select_action(q: &[f64], epsilon: f64, rng: &mut SimRng) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        greedy_action(q)
    }
}

pub fn td_target(reward: f64, gamma: f64, q_next_target: &[f64], terminal: bool) -> f64 {
    if terminal {
        reward
    } else {
        reward + gamma * q_next_target.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Online and target networks plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub online: QNetwork,
    pub target: QNetwork,
    pub adam: Adam,
    pub gamma: f64,
    pub loss: LossKind,
    pub target_update_period: usize,
    pub train_steps: u64,
}

impl Learner {
    pub fn new(online: QNetwork, schedule: &TrainSchedule, gamma: f64) -> Self {
        Self {
            target: online.clone(),
            adam: Adam::new(&online, schedule.learning_rate),
            online,
            gamma,
            loss: schedule.loss,
            target_update_period: schedule.target_update_period,
            train_steps: 0,
        }
    }

    pub fn update_target(&mut self) {
        self.target = self.online.clone();
    }

    /// One optimizer step on the batch. Returns the loss before the step.
    pub fn train_step(&mut self, batch: &[&Transition]) -> Result<f64> {
        let targets: Vec<f64> = batch
            .iter()
            .map(|t| {
                let q_next = if t.terminal { Vec::new() } else { self.target.forward(&t.phi_next) };
                td_target(t.reward, self.gamma, &q_next, t.terminal)
            })
            .collect();
        let samples: Vec<Sample> =
            batch.iter().zip(&targets).map(|(t, &target)| Sample { input: &t.phi, action: t.action, target }).collect();
        let (loss, grad) = self.online.loss_and_gradient(&samples, self.loss);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("TD loss {loss} at train step {}", self.train_steps)));
        }
        self.adam.apply(&mut self.online, &grad);
        self.train_steps += 1;
        if self.train_steps.is_multiple_of(self.target_update_period as u64) {
            self.online.check_finite()?;
            self.update_target();
        }
        Ok(loss)
    }
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainedDqn {
    pub learner: Learner,
    /// Generator position at the end of training.
    pub rng: RngState,
    /// Pre-step loss of every gradient step.
    pub losses: Vec<f64>,
    pub episodes: usize,
}

impl TrainedDqn {
    pub fn greedy(&self) -> GreedyPolicy<'_> {
        GreedyPolicy { net: &self.learner.online }
    }
}

impl<S> Policy<S> for TrainedDqn {
    fn act(&self, _state: &S, features: &[f64], _rng: &mut SimRng) -> usize {
        greedy_action(&self.learner.online.forward(features))
    }
}

/// Acts greedily with respect to a network's action values.
#[derive(Debug, Clone, Copy)]
pub struct GreedyPolicy<'a> {
    pub net: &'a QNetwork,
}

impl<S> Policy<S> for GreedyPolicy<'_> {
    fn act(&self, _state: &S, features: &[f64], _rng: &mut SimRng) -> usize {
        greedy_action(&self.net.forward(features))
    }
}

impl<S> Policy<S> for QNetwork {
    fn act(&self, _state: &S, features: &[f64], _rng: &mut SimRng) -> usize {
        greedy_action(&self.forward(features))
    }
}

/// Trains a Q-network for the reward `w . phi(s')` collected on arrival in
/// `s'`. Episodes restart from `env.reset(derive_seed(seed, k))`.
pub fn train_dqn<E: Environment>(
    w: &WeightVector,
    env: &E,
    schedule: &TrainSchedule,
    gamma: f64,
    seed: u64,
    init: Option<&QNetwork>,
) -> Result<TrainedDqn> {
    schedule.validate()?;
    check_dim(env.feature_dim(), w.len())?;
    if !w.is_finite() {
        return Err(Error::NonFinite("reward weights".into()));
    }
    let mut rng = rng_from_seed(seed);
    let sizes = schedule.layer_sizes(env.feature_dim(), env.num_actions());
    let net = match init {
        Some(n) => {
            if n.sizes() != sizes {
                return Err(Error::DimensionMismatch { expected: sizes.len(), found: n.sizes().len() });
            }
            n.clone()
        }
        None => QNetwork::init(&sizes, &mut rng),
    };
    let mut learner = Learner::new(net, schedule, gamma);
    let mut replay = ReplayBuffer::new(schedule.replay_capacity);
    let mut losses = Vec::new();

    let mut episodes = 0usize;
    let mut state = env.reset(derive_seed(seed, 0));
    let mut phi = env.features(&state)?;
    let mut ep_len = 0usize;
    for t in 0..schedule.inner_iterations {
        let q = learner.online.forward(&phi);
        let action = select_action(&q, schedule.epsilon_at(t), &mut rng);
        let step = env.step(&state, action, &mut rng)?;
        let reward = w.dot(&step.features);
        let terminal = step.status == EpisodeStatus::Terminated;
        ep_len += 1;
        let done = step.status != EpisodeStatus::Continue || ep_len >= env.max_episode_steps();
        replay.push(Transition {
            phi: std::mem::take(&mut phi),
            action,
            reward,
            phi_next: step.features.clone(),
            terminal,
        });
        if done {
            episodes += 1;
            ep_len = 0;
            state = env.reset(derive_seed(seed, episodes as u64));
            phi = env.features(&state)?;
        } else {
            state = step.state;
            phi = step.features;
        }

        if replay.total_pushed() as usize >= schedule.warmup.max(1) {
            let batch = replay.sample(schedule.batch_size, &mut rng);
            losses.push(learner.train_step(&batch)?);
        }
    }
    learner.online.check_finite()?;
    Ok(TrainedDqn { learner, rng: RngState::capture(&rng), losses, episodes })
}

/// DQN as the RL step of the IRL loop. Round `i` trains with seed
/// `derive_seed(master, DQN + i)` and measures `mu` with
/// `derive_seed(master, MU_ESTIMATE + i)`.
pub struct DqnSolver<E: Environment> {
    pub env: E,
    pub schedule: TrainSchedule,
    pub gamma: f64,
    pub rollouts_per_mu: usize,
    pub master_seed: u64,
    previous: Option<QNetwork>,
}

impl<E: Environment> DqnSolver<E> {
    pub fn new(env: E, schedule: TrainSchedule, gamma: f64, rollouts_per_mu: usize, master_seed: u64) -> Self {
        Self { env, schedule, gamma, rollouts_per_mu, master_seed, previous: None }
    }

    pub fn from_config(env: E, config: &crate::irl::IrlConfig) -> Self {
        Self::new(env, config.dqn.clone(), config.gamma, config.rollouts_per_mu, config.master_seed)
    }

    /// Network to warm start the next round from, when enabled.
    pub fn set_previous(&mut self, net: Option<QNetwork>) {
        self.previous = net;
    }
}

impl<E: Environment> RlSolver for DqnSolver<E> {
    type Policy = TrainedDqn;

    fn initial_feature_expectations(&mut self) -> Result<MuVector> {
        let policy = UniformRandomPolicy { num_actions: self.env.num_actions() };
        let seed = derive_seed(self.master_seed, stream::INITIAL_MU);
        estimate_feature_expectations(&policy, &self.env, self.rollouts_per_mu, self.gamma, seed)
    }

    fn solve(&mut self, w: &WeightVector, iteration: usize) -> Result<TrainedDqn> {
        let seed = derive_seed(self.master_seed, stream::DQN + iteration as u64);
        let init = if self.schedule.warm_start { self.previous.as_ref() } else { None };
        let trained = train_dqn(w, &self.env, &self.schedule, self.gamma, seed, init)?;
        log::info!(
            "round {iteration}: {} episodes, final loss {:.4e}",
            trained.episodes,
            trained.losses.last().copied().unwrap_or(0.0)
        );
        if self.schedule.warm_start {
            self.previous = Some(trained.learner.online.clone());
        }
        Ok(trained)
    }

    fn feature_expectations(&mut self, policy: &TrainedDqn, iteration: usize) -> Result<MuVector> {
        let seed = derive_seed(self.master_seed, stream::MU_ESTIMATE + iteration as u64);
        estimate_feature_expectations(policy, &self.env, self.rollouts_per_mu, self.gamma, seed)
    }
}
