//! Samplable distributions for arrivals, service times, and network delay.
//!
//! Service-time distributions are parameterized by their mean so swapping
//! the shape (deterministic / exponential / lognormal) keeps the offered
//! load identical; the lognormal additionally takes a coefficient of
//! variation.

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

/// Prompt arrival process for one user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    /// Poisson process: exponential inter-arrival times with the given rate.
    Poisson { rate: f64 },
    /// Evenly spaced arrivals every 1/rate seconds.
    Deterministic { rate: f64 },
    /// No autonomous arrivals (prompts are injected externally).
    None,
}

impl ArrivalProcess {
    /// Sample the gap to the next arrival, or `None` if the process is off.
    pub fn next_gap(&self, rng: &mut impl Rng) -> Option<f64> {
        match *self {
            ArrivalProcess::Poisson { rate } => {
                Some(Exp::new(rate).expect("rate > 0").sample(rng))
            }
            ArrivalProcess::Deterministic { rate } => Some(1.0 / rate),
            ArrivalProcess::None => None,
        }
    }

    pub fn rate(&self) -> Option<f64> {
        match *self {
            ArrivalProcess::Poisson { rate } | ArrivalProcess::Deterministic { rate } => Some(rate),
            ArrivalProcess::None => None,
        }
    }
}

/// Service-time (inference-time) distribution with a given mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceDist {
    Deterministic { mean: f64 },
    Exponential { mean: f64 },
    /// Lognormal with the given mean and coefficient of variation (std/mean).
    LogNormal { mean: f64, cv: f64 },
}

impl ServiceDist {
    pub fn mean(&self) -> f64 {
        match *self {
            ServiceDist::Deterministic { mean }
            | ServiceDist::Exponential { mean }
            | ServiceDist::LogNormal { mean, .. } => mean,
        }
    }

    /// Same shape, different mean (lognormal keeps its cv).
    pub fn with_mean(&self, mean: f64) -> ServiceDist {
        match *self {
            ServiceDist::Deterministic { .. } => ServiceDist::Deterministic { mean },
            ServiceDist::Exponential { .. } => ServiceDist::Exponential { mean },
            ServiceDist::LogNormal { cv, .. } => ServiceDist::LogNormal { mean, cv },
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            ServiceDist::Deterministic { mean } => mean,
            ServiceDist::Exponential { mean } => {
                Exp::new(1.0 / mean).expect("mean > 0").sample(rng)
            }
            ServiceDist::LogNormal { mean, cv } => {
                // Mean-preserving parameterization: sigma^2 = ln(1 + cv^2),
                // mu = ln(mean) - sigma^2 / 2.
                let sigma2 = (1.0 + cv * cv).ln();
                let mu = mean.ln() - sigma2 / 2.0;
                LogNormal::new(mu, sigma2.sqrt())
                    .expect("finite parameters")
                    .sample(rng)
            }
        }
    }
}

/// Network transit delay applied to task dispatches and response returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayDist {
    Zero,
    Deterministic { mean: f64 },
    Exponential { mean: f64 },
}

impl DelayDist {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            DelayDist::Zero => 0.0,
            DelayDist::Deterministic { mean } => mean,
            DelayDist::Exponential { mean } => {
                Exp::new(1.0 / mean).expect("mean > 0").sample(rng)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, DelayDist::Zero)
    }
}
