//! Closed-form rate accounting and stability analysis for the MoA network.
//!
//! Each node's queue sees its own user's prompts plus proposal work gossiped
//! in by the other nodes; in expectation the per-node input rate is
//! `((k+1)M + 1) * lambda` against a service rate of `1/alpha`. The network
//! is stable iff that load is strictly below one. With heterogeneous nodes
//! the slowest node governs.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueingError {
    #[error("service profile must list at least one node")]
    EmptyProfile,
    #[error("mean inference time must be positive, got {0}")]
    NonPositiveAlpha(String),
}

/// Per-node mean inference times, indexed by node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServiceProfile {
    pub alphas: Vec<f64>,
}

impl ServiceProfile {
    pub fn new(alphas: Vec<f64>) -> Result<Self, QueueingError> {
        if alphas.is_empty() {
            return Err(QueueingError::EmptyProfile);
        }
        // NaN-safe: rejects NaN along with zero and negatives.
        if let Some(bad) = alphas
            .iter()
            .find(|a| (**a).partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater))
        {
            return Err(QueueingError::NonPositiveAlpha(bad.to_string()));
        }
        Ok(ServiceProfile { alphas })
    }

    pub fn homogeneous(alpha: f64, n: usize) -> Result<Self, QueueingError> {
        Self::new(vec![alpha; n.max(1)])
    }

    /// Mean inference time of the slowest node; the binding constraint.
    pub fn alpha_max(&self) -> f64 {
        self.alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// All the per-node rates implied by (λ, k, M, α), plus the stability verdict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateSummary {
    /// Per-user prompt arrival rate (prompts/s).
    pub lambda: f64,
    /// Mean inference time (s); the slowest node's for heterogeneous fleets.
    pub alpha: f64,
    /// Proposal arrivals per node within one layer: (k+1)λ.
    pub r_prop_in: f64,
    /// Proposal arrivals per node across all M layers: (k+1)Mλ.
    pub r_layer_in: f64,
    /// Total inference arrivals per node: ((k+1)M + 1)λ.
    pub r_in: f64,
    /// Service rate per node: 1/α.
    pub r_out: f64,
    /// Offered load ρ = r_in · α.
    pub utilization: f64,
    /// True iff ρ < 1 strictly.
    pub stable: bool,
}

/// Prompt arrival rate each proposer sees within a single layer: (k+1)λ.
pub fn proposer_input_rate(lambda: f64, k: u32) -> f64 {
    f64::from(k + 1) * lambda
}

/// Total inference arrival rate at each node: ((k+1)M + 1)λ.
pub fn node_input_rate(lambda: f64, k: u32, m: u32) -> f64 {
    (f64::from(k + 1) * f64::from(m) + 1.0) * lambda
}

/// Evaluate the stability condition α((k+1)M+1)λ < 1 (strict) and report all
/// implied rates. Load exactly 1 counts as unstable.
pub fn is_stable(lambda: f64, k: u32, m: u32, alpha: f64) -> RateSummary {
    let r_prop_in = proposer_input_rate(lambda, k);
    let r_in = node_input_rate(lambda, k, m);
    let utilization = r_in * alpha;
    RateSummary {
        lambda,
        alpha,
        r_prop_in,
        r_layer_in: r_prop_in * f64::from(m),
        r_in,
        r_out: 1.0 / alpha,
        utilization,
        stable: utilization < 1.0,
    }
}

/// Heterogeneous fleet: the slowest node binds, so this is `is_stable` with
/// α = max α_i.
pub fn is_stable_heterogeneous(
    lambda: f64,
    k: u32,
    m: u32,
    profile: &ServiceProfile,
) -> Result<RateSummary, QueueingError> {
    if profile.alphas.is_empty() {
        return Err(QueueingError::EmptyProfile);
    }
    Ok(is_stable(lambda, k, m, profile.alpha_max()))
}

/// Supremum of stable per-user arrival rates: 1/(α((k+1)M+1)).
pub fn max_stable_lambda(k: u32, m: u32, alpha: f64) -> f64 {
    1.0 / (alpha * (f64::from(k + 1) * f64::from(m) + 1.0))
}
