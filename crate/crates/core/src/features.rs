//! Binned sensor features, linear rewards and discounted feature
//! expectations.
//!
//! Every sensor reading falls into one of 16 equal-width distance bins and
//! activates exactly one indicator, so a highway state is a 208-bit vector
//! with 13 ones laid out as `sensor * 16 + bin`.

use serde::{Deserialize, Serialize};

use crate::env::{rollout, Environment, Policy};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sim::{SensorReadings, WorldConfig, NUM_BINS, NUM_SENSORS};

pub const FEATURE_DIM: usize = NUM_SENSORS * NUM_BINS;

pub fn feature_index(sensor: usize, bin: usize) -> usize {
    sensor * NUM_BINS + bin
}

/// Compact one-hot-per-sensor feature vector: one bin index per sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureVector {
    pub bins: [u8; NUM_SENSORS],
}

impl FeatureVector {
    pub fn from_bins(bins: [u8; NUM_SENSORS]) -> Result<Self> {
        if let Some(&b) = bins.iter().find(|&&b| b as usize >= NUM_BINS) {
            return Err(Error::InvalidArgument(format!("bin index {b} out of range")));
        }
        Ok(Self { bins })
    }

    pub fn active_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bins.iter().enumerate().map(|(k, &b)| feature_index(k, b as usize))
    }

    pub fn bit(&self, index: usize) -> bool {
        index < FEATURE_DIM && self.bins[index / NUM_BINS] as usize == index % NUM_BINS
    }

    pub fn popcount(&self) -> usize {
        (0..FEATURE_DIM).filter(|&i| self.bit(i)).count()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; FEATURE_DIM];
        for i in self.active_indices() {
            out[i] = 1.0;
        }
        out
    }
}

/// Anything that can be summed into a feature-expectation vector.
pub trait Features {
    fn dim(&self) -> usize;
    fn add_scaled_to(&self, out: &mut [f64], scale: f64);
}

impl Features for FeatureVector {
    fn dim(&self) -> usize {
        FEATURE_DIM
    }

    fn add_scaled_to(&self, out: &mut [f64], scale: f64) {
        for i in self.active_indices() {
            out[i] += scale;
        }
    }
}

impl Features for Vec<f64> {
    fn dim(&self) -> usize {
        self.len()
    }

    fn add_scaled_to(&self, out: &mut [f64], scale: f64) {
        for (o, &x) in out.iter_mut().zip(self) {
            *o += scale * x;
        }
    }
}

/// Reward weights `w`; the reward of a state is `w . phi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub Vec<f64>);

/// Discounted feature expectations (`mu`, `mu_E`, `mu_bar`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuVector(pub Vec<f64>);

macro_rules! vector_ops {
    ($t:ident) => {
        impl $t {
            pub fn zeros(dim: usize) -> Self {
                Self(vec![0.0; dim])
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn norm(&self) -> f64 {
                dot(&self.0, &self.0).sqrt()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|x| x.is_finite())
            }
        }
    };
}

vector_ops!(WeightVector);
vector_ops!(MuVector);

impl WeightVector {
    /// `w . phi` for a dense feature slice.
    pub fn dot(&self, phi: &[f64]) -> f64 {
        dot(&self.0, phi)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// Bin of a reading: `min(floor(d / bin_width), 15)`.
pub fn bin_index(distance: f64, cfg: &WorldConfig) -> Result<usize> {
    if !(0.0..=cfg.sensor_range).contains(&distance) {
        return Err(Error::DistanceOutOfRange(distance));
    }
    Ok(((distance / cfg.bin_width()).floor() as usize).min(NUM_BINS - 1))
}

pub fn featurize(readings: &SensorReadings, cfg: &WorldConfig) -> Result<FeatureVector> {
    let mut bins = [0u8; NUM_SENSORS];
    for (b, &r) in bins.iter_mut().zip(readings) {
        *b = bin_index(r, cfg)? as u8;
    }
    Ok(FeatureVector { bins })
}

/// `w . phi` as the sum of the 13 selected weights.
pub fn reward(w: &WeightVector, phi: &FeatureVector) -> Result<f64> {
    check_dim(FEATURE_DIM, w.len())?;
    Ok(phi.active_indices().map(|i| w.0[i]).sum())
}

/// `sum_t gamma^t phi_t` with `t` starting at 0.
pub fn discounted_feature_sum<F: Features>(trajectory: &[F], gamma: f64) -> Result<MuVector> {
    let first = trajectory.first().ok_or_else(|| Error::InvalidArgument("empty trajectory".into()))?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("discount {gamma} outside [0, 1)")));
    }
    let mut out = vec![0.0; first.dim()];
    let mut discount = 1.0;
    for phi in trajectory {
        check_dim(out.len(), phi.dim())?;
        phi.add_scaled_to(&mut out, discount);
        discount *= gamma;
    }
    Ok(MuVector(out))
}

/// Mean of per-episode discounted sums. Episodes are accumulated in the
/// given order so the result is bit-reproducible.
pub fn mean_feature_sums<F: Features>(episodes: &[Vec<F>], gamma: f64) -> Result<MuVector> {
    let first = episodes.first().ok_or_else(|| Error::InvalidArgument("no episodes".into()))?;
    let mut acc = discounted_feature_sum(first, gamma)?;
    for ep in &episodes[1..] {
        let mu = discounted_feature_sum(ep, gamma)?;
        check_dim(acc.len(), mu.len())?;
        for (a, m) in acc.0.iter_mut().zip(&mu.0) {
            *a += m;
        }
    }
    let n = episodes.len() as f64;
    acc.0.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Monte Carlo estimate of `mu(policy)` from `n_rollouts` episodes whose
/// seeds derive from `seed`.
pub fn estimate_feature_expectations<E, P>(
    policy: &P,
    env: &E,
    n_rollouts: usize,
    gamma: f64,
    seed: u64,
) -> Result<MuVector>
where
    E: Environment,
    P: Policy<E::State> + ?Sized,
{
    if n_rollouts == 0 {
        return Err(Error::InvalidArgument("n_rollouts must be at least 1".into()));
    }
    let mut acc = MuVector::zeros(env.feature_dim());
    for k in 0..n_rollouts {
        let ro = rollout(env, policy, derive_seed(seed, k as u64))?;
        let mu = discounted_feature_sum(&ro.features, gamma)?;
        for (a, m) in acc.0.iter_mut().zip(&mu.0) {
            *a += m;
        }
    }
    acc.0.iter_mut().for_each(|a| *a /= n_rollouts as f64);
    Ok(acc)
}
