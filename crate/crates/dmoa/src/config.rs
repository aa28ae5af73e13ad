//! Run configuration: a single TOML file describing topology, rates,
//! distributions, horizon, and (for live mode) per-node backends.
//!
//! Parsing is strict — unknown keys are rejected, and every invariant
//! violation names the offending field — and the canonical emitter
//! round-trips: `parse(emit(cfg))` reproduces an equivalent configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendSpec, HttpSpec, MockSpec};
use crate::dist::{DelayDist, ServiceDist};
use crate::live::{LiveConfig, LiveNodeConfig};
use crate::protocol::ProtocolParams;
use crate::sim::{ArrivalKind, MoAConfig};

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_QUEUE_GUARD: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

impl From<toml::de::Error> for ConfigError {
    // Collapse toml's multi-line caret rendering to one line: the location
    // header plus the bare message.
    fn from(e: toml::de::Error) -> Self {
        let location = e
            .to_string()
            .lines()
            .next()
            .unwrap_or("TOML parse error")
            .to_string();
        ConfigError::Syntax(format!("{location}: {}", e.message()))
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Simulate,
    Live,
}

/// Service-time distribution shape; per-node means come from alpha/alphas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceShape {
    Exponential,
    Deterministic,
    Lognormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawArrival {
    Poisson,
    Deterministic,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawDelay {
    Zero,
    Deterministic,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawBackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: usize,
    backend: RawBackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    base_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    timeout: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_retries: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    backoff_base: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mock_delay_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

/// The on-disk schema, with optional fields still optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<Mode>,
    n: u32,
    k: u32,
    #[serde(rename = "M", alias = "m", alias = "layers")]
    layers: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alphas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    arrival: Option<RawArrival>,
    #[serde(skip_serializing_if = "Option::is_none")]
    service: Option<ServiceShape>,
    #[serde(skip_serializing_if = "Option::is_none")]
    service_cv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    network_delay: Option<RawDelay>,
    #[serde(skip_serializing_if = "Option::is_none")]
    network_delay_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    horizon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    warmup: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    queue_guard: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    replications: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nodes: Option<Vec<RawNode>>,
}

/// A fully validated run configuration with defaults applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfigFile {
    pub mode: Mode,
    pub params: ProtocolParams,
    /// Required for simulate; optional for live (live has no arrival clock).
    pub lambda: Option<f64>,
    pub arrival: ArrivalKind,
    pub service_shape: ServiceShape,
    pub service_cv: f64,
    /// Per-node mean inference times (length n).
    pub alphas: Vec<f64>,
    pub network_delay: DelayDist,
    pub horizon: Option<f64>,
    pub warmup: Option<f64>,
    pub seed: u64,
    pub queue_guard: u64,
    pub replications: usize,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    /// Per-node backends (length n); nodes not listed default to mock.
    pub nodes: Vec<LiveNodeConfig>,
}

pub fn parse_config(path: &Path) -> Result<RunConfigFile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfigFile, ConfigError> {
    let raw: RawConfig = toml::from_str(text)?;
    resolve(raw)
}

fn positive(field: &str, value: f64) -> Result<f64, ConfigError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(invalid(field, format!("must be positive and finite, got {value}")))
    }
}

fn resolve(raw: RawConfig) -> Result<RunConfigFile, ConfigError> {
    let mode = raw.mode.unwrap_or(Mode::Simulate);
    if raw.n < 2 {
        return Err(invalid("n", format!("must be at least 2, got {}", raw.n)));
    }
    if raw.k > raw.n - 1 {
        return Err(invalid(
            "k",
            format!("k={} exceeds the n-1={} other nodes", raw.k, raw.n - 1),
        ));
    }
    let params = ProtocolParams::new(raw.n, raw.k, raw.layers)
        .map_err(|e| invalid("k", e.to_string()))?;
    let n = raw.n as usize;

    let alphas = match (raw.alpha, raw.alphas) {
        (Some(_), Some(_)) => {
            return Err(invalid("alpha", "set either alpha or alphas, not both"))
        }
        (Some(a), None) => vec![positive("alpha", a)?; n],
        (None, Some(list)) => {
            if list.len() != n {
                return Err(invalid(
                    "alphas",
                    format!("must list one mean per node ({n}), got {}", list.len()),
                ));
            }
            for a in &list {
                positive("alphas", *a)?;
            }
            list
        }
        (None, None) => {
            if mode == Mode::Simulate {
                return Err(invalid("alpha", "required for simulate mode"));
            }
            vec![1.0; n]
        }
    };

    let lambda = raw.lambda.map(|l| positive("lambda", l)).transpose()?;
    let horizon = raw.horizon.map(|h| positive("horizon", h)).transpose()?;
    if mode == Mode::Simulate {
        if lambda.is_none() {
            return Err(invalid("lambda", "required for simulate mode"));
        }
        if horizon.is_none() {
            return Err(invalid("horizon", "required for simulate mode"));
        }
    }
    let warmup = match (raw.warmup, horizon) {
        (Some(w), Some(h)) => {
            if !(w >= 0.0 && w < h) {
                return Err(invalid(
                    "warmup",
                    format!("must satisfy 0 <= warmup < horizon, got {w} vs horizon {h}"),
                ));
            }
            Some(w)
        }
        (Some(w), None) => {
            if w < 0.0 {
                return Err(invalid("warmup", format!("must be nonnegative, got {w}")));
            }
            Some(w)
        }
        (None, Some(h)) => Some(h * 0.1),
        (None, None) => None,
    };

    let service_shape = raw.service.unwrap_or(ServiceShape::Exponential);
    let service_cv = raw.service_cv.unwrap_or(1.0);
    if raw.service_cv.is_some() && service_shape != ServiceShape::Lognormal {
        return Err(invalid(
            "service_cv",
            "only meaningful for service = \"lognormal\"",
        ));
    }
    if !(service_cv.is_finite() && service_cv >= 0.0) {
        return Err(invalid(
            "service_cv",
            format!("must be nonnegative and finite, got {service_cv}"),
        ));
    }

    let network_delay = match raw.network_delay.unwrap_or(RawDelay::Zero) {
        RawDelay::Zero => {
            if raw.network_delay_mean.is_some() {
                return Err(invalid(
                    "network_delay_mean",
                    "meaningless when network_delay is \"zero\"",
                ));
            }
            DelayDist::Zero
        }
        RawDelay::Deterministic => DelayDist::Deterministic {
            mean: positive(
                "network_delay_mean",
                raw.network_delay_mean
                    .ok_or_else(|| invalid("network_delay_mean", "required for nonzero delay"))?,
            )?,
        },
        RawDelay::Exponential => DelayDist::Exponential {
            mean: positive(
                "network_delay_mean",
                raw.network_delay_mean
                    .ok_or_else(|| invalid("network_delay_mean", "required for nonzero delay"))?,
            )?,
        },
    };

    let arrival = match raw.arrival.unwrap_or(RawArrival::Poisson) {
        RawArrival::Poisson => ArrivalKind::Poisson,
        RawArrival::Deterministic => ArrivalKind::Deterministic,
        RawArrival::Off => ArrivalKind::Off,
    };

    let replications = raw.replications.unwrap_or(1);
    if replications == 0 {
        return Err(invalid("replications", "must be at least 1"));
    }
    let temperature = raw.temperature.unwrap_or(DEFAULT_TEMPERATURE);
    if !(temperature.is_finite() && temperature >= 0.0) {
        return Err(invalid(
            "temperature",
            format!("must be nonnegative and finite, got {temperature}"),
        ));
    }
    let queue_guard = raw.queue_guard.unwrap_or(DEFAULT_QUEUE_GUARD);
    if queue_guard == 0 {
        return Err(invalid("queue_guard", "must be at least 1"));
    }
    let seed = raw.seed.unwrap_or(0);

    // Per-node backends: listed nodes are validated, everything else
    // defaults to a seeded mock whose delay mean is that node's alpha.
    let mut nodes: Vec<Option<LiveNodeConfig>> = vec![None; n];
    if let Some(raw_nodes) = &raw.nodes {
        for rn in raw_nodes {
            if rn.id >= n {
                return Err(invalid(
                    "nodes.id",
                    format!("node id {} out of range for n={}", rn.id, raw.n),
                ));
            }
            if nodes[rn.id].is_some() {
                return Err(invalid(
                    "nodes.id",
                    format!("duplicate node id {}", rn.id),
                ));
            }
            let backend = match rn.backend {
                RawBackendKind::Mock => {
                    for (field, set) in [
                        ("nodes.base_url", rn.base_url.is_some()),
                        ("nodes.model", rn.model.is_some()),
                        ("nodes.timeout", rn.timeout.is_some()),
                        ("nodes.max_retries", rn.max_retries.is_some()),
                        ("nodes.backoff_base", rn.backoff_base.is_some()),
                    ] {
                        if set {
                            return Err(invalid(field, "only meaningful for backend = \"http\""));
                        }
                    }
                    BackendSpec::Mock(MockSpec {
                        node: rn.id,
                        delay: ServiceDist::Exponential {
                            mean: positive(
                                "nodes.mock_delay_mean",
                                rn.mock_delay_mean.unwrap_or(alphas[rn.id]),
                            )?,
                        },
                        seed,
                    })
                }
                RawBackendKind::Http => {
                    if rn.mock_delay_mean.is_some() {
                        return Err(invalid(
                            "nodes.mock_delay_mean",
                            "only meaningful for backend = \"mock\"",
                        ));
                    }
                    let defaults = HttpSpec::default();
                    BackendSpec::Http(HttpSpec {
                        base_url: rn.base_url.clone(),
                        model: rn
                            .model
                            .clone()
                            .ok_or_else(|| invalid("nodes.model", "required for http backends"))?,
                        timeout: positive(
                            "nodes.timeout",
                            rn.timeout.unwrap_or(defaults.timeout),
                        )?,
                        max_retries: rn.max_retries.unwrap_or(defaults.max_retries),
                        backoff_base: rn.backoff_base.unwrap_or(defaults.backoff_base),
                    })
                }
            };
            nodes[rn.id] = Some(LiveNodeConfig {
                backend,
                temperature: rn.temperature.unwrap_or(temperature),
                max_tokens: rn.max_tokens.or(raw.max_tokens),
            });
        }
    }
    let nodes: Vec<LiveNodeConfig> = nodes
        .into_iter()
        .enumerate()
        .map(|(id, slot)| {
            slot.unwrap_or_else(|| LiveNodeConfig {
                backend: BackendSpec::Mock(MockSpec {
                    node: id,
                    delay: ServiceDist::Exponential { mean: alphas[id] },
                    seed,
                }),
                temperature,
                max_tokens: raw.max_tokens,
            })
        })
        .collect();

    Ok(RunConfigFile {
        mode,
        params,
        lambda,
        arrival,
        service_shape,
        service_cv,
        alphas,
        network_delay,
        horizon,
        warmup,
        seed,
        queue_guard,
        replications,
        temperature,
        max_tokens: raw.max_tokens,
        nodes,
    })
}

impl RunConfigFile {
    fn service_dists(&self) -> Vec<ServiceDist> {
        self.alphas
            .iter()
            .map(|&mean| match self.service_shape {
                ServiceShape::Exponential => ServiceDist::Exponential { mean },
                ServiceShape::Deterministic => ServiceDist::Deterministic { mean },
                ServiceShape::Lognormal => ServiceDist::LogNormal {
                    mean,
                    cv: self.service_cv,
                },
            })
            .collect()
    }

    /// Materialize the simulation config; `seed_override` wins over the file.
    pub fn to_sim_config(&self, seed_override: Option<u64>) -> Result<MoAConfig, ConfigError> {
        let lambda = self
            .lambda
            .ok_or_else(|| invalid("lambda", "required for simulate mode"))?;
        let horizon = self
            .horizon
            .ok_or_else(|| invalid("horizon", "required for simulate mode"))?;
        let cfg = MoAConfig {
            params: self.params,
            lambda,
            arrival_dist: self.arrival,
            service: self.service_dists(),
            network_delay: self.network_delay,
            horizon,
            warmup: self.warmup.unwrap_or(horizon * 0.1),
            seed: seed_override.unwrap_or(self.seed),
            queue_guard: Some(self.queue_guard),
            injected: Vec::new(),
        };
        cfg.validate()
            .map_err(|e| invalid("config", e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_live_config(&self, seed_override: Option<u64>, validate: bool) -> LiveConfig {
        LiveConfig {
            params: self.params,
            nodes: self.nodes.clone(),
            seed: seed_override.unwrap_or(self.seed),
            validate,
        }
    }

    /// Emit the canonical TOML form; `parse_config_str` on the result
    /// reproduces an equivalent configuration.
    pub fn canonical_toml(&self) -> String {
        let raw_nodes: Vec<RawNode> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| match &node.backend {
                BackendSpec::Mock(m) => RawNode {
                    id,
                    backend: RawBackendKind::Mock,
                    base_url: None,
                    model: None,
                    timeout: None,
                    max_retries: None,
                    backoff_base: None,
                    mock_delay_mean: Some(m.delay.mean()),
                    temperature: Some(node.temperature),
                    max_tokens: node.max_tokens,
                },
                BackendSpec::Http(h) => RawNode {
                    id,
                    backend: RawBackendKind::Http,
                    base_url: h.base_url.clone(),
                    model: Some(h.model.clone()),
                    timeout: Some(h.timeout),
                    max_retries: Some(h.max_retries),
                    backoff_base: Some(h.backoff_base),
                    mock_delay_mean: None,
                    temperature: Some(node.temperature),
                    max_tokens: node.max_tokens,
                },
            })
            .collect();
        let raw = RawConfig {
            mode: Some(self.mode),
            n: self.params.n,
            k: self.params.k,
            layers: self.params.layers,
            lambda: self.lambda,
            alpha: None,
            alphas: Some(self.alphas.clone()),
            arrival: Some(match self.arrival {
                ArrivalKind::Poisson => RawArrival::Poisson,
                ArrivalKind::Deterministic => RawArrival::Deterministic,
                ArrivalKind::Off => RawArrival::Off,
            }),
            service: Some(self.service_shape),
            service_cv: if self.service_shape == ServiceShape::Lognormal {
                Some(self.service_cv)
            } else {
                None
            },
            network_delay: Some(match self.network_delay {
                DelayDist::Zero => RawDelay::Zero,
                DelayDist::Deterministic { .. } => RawDelay::Deterministic,
                DelayDist::Exponential { .. } => RawDelay::Exponential,
            }),
            network_delay_mean: match self.network_delay {
                DelayDist::Zero => None,
                DelayDist::Deterministic { mean } | DelayDist::Exponential { mean } => Some(mean),
            },
            horizon: self.horizon,
            warmup: self.warmup,
            seed: Some(self.seed),
            queue_guard: Some(self.queue_guard),
            replications: Some(self.replications),
            temperature: Some(self.temperature),
            max_tokens: self.max_tokens,
            nodes: Some(raw_nodes),
        };
        toml::to_string(&raw).expect("canonical config serializes")
    }
}
