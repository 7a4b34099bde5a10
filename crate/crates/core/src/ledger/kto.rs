//! KTO loss and trajectory log-probabilities, generic over the float type.

use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KtoParams<T> {
    pub lambda_d: T,
    pub lambda_u: T,
    pub beta: T,
    /// Reference KL point, supplied by the trainer.
    pub z0: T,
}

impl<T: Float> Default for KtoParams<T> {
    fn default() -> Self {
        Self {
            lambda_d: T::one(),
            lambda_u: T::one(),
            beta: T::from(0.1).expect("0.1 is representable"),
            z0: T::zero(),
        }
    }
}

impl<T: Float> KtoParams<T> {
    pub fn with_z0(mut self, z0: T) -> Self {
        self.z0 = z0;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.lambda_d > T::zero() && self.lambda_u > T::zero() && self.beta > T::zero() && self.z0.is_finite()
    }
}

/// Numerically stable `1 / (1 + e^-x)`.
pub fn logistic<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `1 - logistic(beta * u)`.
pub fn default_value<T: Float>(beta: T, u: T) -> T {
    logistic(-(beta * u))
}

/// KTO loss of one sample with log-ratio `r`, using `value` as the value
/// function. `value` must map into `[0, 1]`.
pub fn kto_loss_with<T: Float>(r: T, desirable: bool, params: &KtoParams<T>, value: impl Fn(T) -> T) -> T {
    if desirable {
        params.lambda_d * value(r - params.z0)
    } else {
        params.lambda_u * value(params.z0 - r)
    }
}

/// KTO loss with the default value function.
pub fn kto_loss<T: Float>(r: T, desirable: bool, params: &KtoParams<T>) -> T {
    kto_loss_with(r, desirable, params, |u| default_value(params.beta, u))
}

/// Summed log-probabilities of the policy-owned parts of a trajectory.
/// Observation terms belong to the environment and are left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobBundle<T> {
    pub initial_config: T,
    pub stage_traces: Vec<T>,
    pub reconfigs: Vec<T>,
}

impl<T: Float> LogprobBundle<T> {
    pub fn total(&self) -> T {
        self.stage_traces
            .iter()
            .chain(&self.reconfigs)
            .fold(self.initial_config, |acc, &x| acc + x)
    }

    pub fn components(&self) -> usize {
        1 + self.stage_traces.len() + self.reconfigs.len()
    }
}
