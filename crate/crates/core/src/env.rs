//! Episode interface shared by the highway simulator and the tabular toys,
//! so that Monte Carlo estimation and DQN training run on either.

use rand::Rng;

use crate::error::Result;
use crate::features::featurize;
use crate::rng::{derive_seed, rng_from_seed, SimRng};
use crate::sim::{sensor_readings, spawn_scenario, step_world, Scenario, SteerAction, Terminal, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeStatus {
    Continue,
    /// Absorbing end: nothing follows, no bootstrapping.
    Terminated,
    /// Time limit: the episode stops but the state still has a future.
    Truncated,
}

#[derive(Debug, Clone)]
pub struct EnvStep<S> {
    pub state: S,
    pub features: Vec<f64>,
    pub status: EpisodeStatus,
}

pub trait Environment {
    type State: Clone;

    fn num_actions(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Start state of the episode identified by `seed`.
    fn reset(&self, seed: u64) -> Self::State;
    fn features(&self, state: &Self::State) -> Result<Vec<f64>>;
    fn step(&self, state: &Self::State, action: usize, rng: &mut SimRng) -> Result<EnvStep<Self::State>>;
    /// Hard cap on episode length (number of actions taken).
    fn max_episode_steps(&self) -> usize;
}

pub trait Policy<S> {
    fn act(&self, state: &S, features: &[f64], rng: &mut SimRng) -> usize;
}

impl<S, F> Policy<S> for F
where
    F: Fn(&S, &[f64]) -> usize,
{
    fn act(&self, state: &S, features: &[f64], _rng: &mut SimRng) -> usize {
        self(state, features)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UniformRandomPolicy {
    pub num_actions: usize,
}

impl<S> Policy<S> for UniformRandomPolicy {
    fn act(&self, _state: &S, _features: &[f64], rng: &mut SimRng) -> usize {
        rng.gen_range(0..self.num_actions)
    }
}

#[derive(Debug, Clone)]
pub struct Rollout<S> {
    /// Visited states, start state first; one longer than `actions`.
    pub states: Vec<S>,
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub final_status: EpisodeStatus,
}

/// Runs one episode from `env.reset(seed)`. Stochasticity in the policy or
/// the transitions draws from a stream derived from the same seed.
pub fn rollout<E, P>(env: &E, policy: &P, seed: u64) -> Result<Rollout<E::State>>
where
    E: Environment,
    P: Policy<E::State> + ?Sized,
{
    let mut rng = rng_from_seed(derive_seed(seed, 0xB0B));
    let mut state = env.reset(seed);
    let mut phi = env.features(&state)?;
    let mut out = Rollout { states: vec![], features: vec![], actions: vec![], final_status: EpisodeStatus::Truncated };
    for _ in 0..env.max_episode_steps() {
        let a = policy.act(&state, &phi, &mut rng);
        let step = env.step(&state, a, &mut rng)?;
        out.states.push(std::mem::replace(&mut state, step.state));
        out.features.push(std::mem::replace(&mut phi, step.features));
        out.actions.push(a);
        if step.status != EpisodeStatus::Continue {
            out.final_status = step.status;
            break;
        }
    }
    out.states.push(state);
    out.features.push(phi);
    Ok(out)
}

/// The highway as an [`Environment`]; states are [`Scenario`]s and features
/// the dense 208-vector.
#[derive(Debug, Clone, Default)]
pub struct HighwayEnv {
    pub cfg: WorldConfig,
}

impl HighwayEnv {
    pub fn new(cfg: WorldConfig) -> Self {
        Self { cfg }
    }
}

impl Environment for HighwayEnv {
    type State = Scenario;

    fn num_actions(&self) -> usize {
        SteerAction::ALL.len()
    }

    fn feature_dim(&self) -> usize {
        crate::features::FEATURE_DIM
    }

    fn reset(&self, seed: u64) -> Scenario {
        spawn_scenario(seed, &self.cfg)
    }

    fn features(&self, state: &Scenario) -> Result<Vec<f64>> {
        Ok(featurize(&sensor_readings(state, &self.cfg), &self.cfg)?.to_dense())
    }

    fn step(&self, state: &Scenario, action: usize, _rng: &mut SimRng) -> Result<EnvStep<Scenario>> {
        let action = SteerAction::from_ordinal(action)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("action ordinal {action}")))?;
        let out = step_world(state, action, &self.cfg)?;
        let features = featurize(&out.sensor_readings, &self.cfg)?.to_dense();
        let status = match out.terminal {
            Terminal::Running => EpisodeStatus::Continue,
            Terminal::CollisionWall | Terminal::CollisionCar => EpisodeStatus::Terminated,
            Terminal::EndOfRoad | Terminal::HorizonReached => EpisodeStatus::Truncated,
        };
        Ok(EnvStep { state: out.next, features, status })
    }

    fn max_episode_steps(&self) -> usize {
        self.cfg.horizon
    }
}
