//! Discrete-event simulation of the MoA network: configuration, the
//! deterministic engine, exact time-integrated metrics, and replication.

mod engine;
pub mod event;
pub mod metrics;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dist::{ArrivalProcess, DelayDist, ServiceDist};
use crate::protocol::ProtocolParams;

/// A prompt injected at a fixed time, for isolated-job experiments and
/// deterministic traces; runs with `arrival_dist = Off` see only these.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedPrompt {
    pub at: f64,
    pub origin: usize,
    pub text: String,
}

/// Shape of the per-user arrival process; the rate is `MoAConfig::lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalKind {
    Poisson,
    Deterministic,
    /// No autonomous arrivals; only injected prompts run.
    Off,
}

/// Full description of one simulation experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct MoAConfig {
    pub params: ProtocolParams,
    /// Per-user prompt arrival rate (prompts/s). Every user generates
    /// prompts at this rate — not a network-wide rate split across users.
    pub lambda: f64,
    pub arrival_dist: ArrivalKind,
    /// Per-node service-time distributions; length must equal `params.n`.
    pub service: Vec<ServiceDist>,
    pub network_delay: DelayDist,
    pub horizon: f64,
    pub warmup: f64,
    pub seed: u64,
    /// Abort the run when this many tasks sit in queues/service at once;
    /// bounds the runtime of deliberately unstable runs.
    pub queue_guard: Option<u64>,
    pub injected: Vec<InjectedPrompt>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimConfigError {
    #[error("invalid protocol parameters: {0}")]
    Params(#[from] crate::protocol::ProtocolError),
    #[error("lambda must be positive and finite, got {0}")]
    BadLambda(f64),
    #[error("service must list one distribution per node ({expected}), got {got}")]
    ServiceLength { expected: usize, got: usize },
    #[error("service mean must be positive and finite, got {0} at node {1}")]
    BadServiceMean(f64, usize),
    #[error("lognormal cv must be nonnegative and finite, got {0} at node {1}")]
    BadServiceCv(f64, usize),
    #[error("network delay mean must be positive and finite, got {0}")]
    BadDelayMean(f64),
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("warmup must satisfy 0 <= warmup < horizon, got warmup={warmup} horizon={horizon}")]
    BadWarmup { warmup: f64, horizon: f64 },
    #[error("queue_guard must be at least 1")]
    BadGuard,
    #[error("injected prompt {index}: origin {origin} out of range for n={n}")]
    BadInjectedOrigin { index: usize, origin: usize, n: u32 },
    #[error("injected prompt {index}: time {at} must be nonnegative and finite")]
    BadInjectedTime { index: usize, at: f64 },
    #[error("nothing to simulate: arrivals are off and no prompts are injected")]
    NoWork,
    #[error("replications must be at least 1")]
    BadReplications,
}

impl MoAConfig {
    pub fn validate(&self) -> Result<(), SimConfigError> {
        self.params.validate()?;
        let n = self.params.n as usize;
        if self.arrival_dist != ArrivalKind::Off && !(self.lambda > 0.0 && self.lambda.is_finite())
        {
            return Err(SimConfigError::BadLambda(self.lambda));
        }
        if self.service.len() != n {
            return Err(SimConfigError::ServiceLength {
                expected: n,
                got: self.service.len(),
            });
        }
        for (i, s) in self.service.iter().enumerate() {
            let mean = s.mean();
            if !(mean > 0.0 && mean.is_finite()) {
                return Err(SimConfigError::BadServiceMean(mean, i));
            }
            if let ServiceDist::LogNormal { cv, .. } = s {
                if !(cv.is_finite() && *cv >= 0.0) {
                    return Err(SimConfigError::BadServiceCv(*cv, i));
                }
            }
        }
        match self.network_delay {
            DelayDist::Zero => {}
            DelayDist::Deterministic { mean } | DelayDist::Exponential { mean } => {
                if !(mean > 0.0 && mean.is_finite()) {
                    return Err(SimConfigError::BadDelayMean(mean));
                }
            }
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SimConfigError::BadHorizon(self.horizon));
        }
        if !(self.warmup >= 0.0 && self.warmup < self.horizon) {
            return Err(SimConfigError::BadWarmup {
                warmup: self.warmup,
                horizon: self.horizon,
            });
        }
        if self.queue_guard == Some(0) {
            return Err(SimConfigError::BadGuard);
        }
        for (index, p) in self.injected.iter().enumerate() {
            if p.origin >= n {
                return Err(SimConfigError::BadInjectedOrigin {
                    index,
                    origin: p.origin,
                    n: self.params.n,
                });
            }
            if !(p.at >= 0.0 && p.at.is_finite()) {
                return Err(SimConfigError::BadInjectedTime { index, at: p.at });
            }
        }
        if self.arrival_dist == ArrivalKind::Off && self.injected.is_empty() {
            return Err(SimConfigError::NoWork);
        }
        Ok(())
    }

    pub(crate) fn arrival_process(&self) -> ArrivalProcess {
        match self.arrival_dist {
            ArrivalKind::Poisson => ArrivalProcess::Poisson { rate: self.lambda },
            ArrivalKind::Deterministic => ArrivalProcess::Deterministic { rate: self.lambda },
            ArrivalKind::Off => ArrivalProcess::None,
        }
    }

    /// Homogeneous convenience constructor used widely in tests.
    pub fn homogeneous(
        params: ProtocolParams,
        lambda: f64,
        service: ServiceDist,
        horizon: f64,
        seed: u64,
    ) -> Self {
        let n = params.n as usize;
        MoAConfig {
            params,
            lambda,
            arrival_dist: ArrivalKind::Poisson,
            service: vec![service; n],
            network_delay: DelayDist::Zero,
            horizon,
            warmup: horizon * 0.1,
            seed,
            queue_guard: Some(1_000_000),
            injected: Vec::new(),
        }
    }
}

/// Stability diagnosis of one run; a heuristic, not a proof.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "stable-looking")]
    StableLooking,
    #[serde(rename = "growing")]
    Growing,
    #[serde(rename = "aborted-by-guard")]
    AbortedByGuard,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::StableLooking => "stable-looking",
            Verdict::Growing => "growing",
            Verdict::AbortedByGuard => "aborted-by-guard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeReport {
    pub node: usize,
    /// Time-averaged number of tasks waiting (excluding the one in service).
    pub time_avg_queue_waiting: f64,
    /// Time-averaged number of tasks waiting or in service.
    pub time_avg_in_system: f64,
    /// Fraction of the measurement window the server was busy.
    pub utilization_measured: f64,
    /// Tasks whose service completed inside the measurement window.
    pub tasks_served: u64,
    /// Tasks enqueued per second over the measurement window.
    pub input_rate_measured: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverallReport {
    /// Mean over nodes of time-averaged waiting count.
    pub avg_queue_size: f64,
    /// Mean end-to-end latency over jobs created after warmup and completed
    /// by the horizon; absent when no job qualifies.
    pub mean_latency: Option<f64>,
    pub latency_p50: Option<f64>,
    pub latency_p95: Option<f64>,
    pub completed_jobs: u64,
    pub generated_jobs: u64,
    /// Least-squares slope (tasks/s) of the outstanding-inference backlog
    /// over the measurement window; the growth diagnostic.
    pub growth_slope: f64,
    /// Completed jobs whose inference count differed from (k+1)M+1.
    pub conservation_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub per_node: Vec<NodeReport>,
    pub overall: OverallReport,
    pub verdict: Verdict,
    /// End of the measurement window: the horizon, or the abort time for
    /// guard-aborted runs.
    pub measured_until: f64,
}

/// One line of the optional event trace (newline-delimited records).
#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub time: f64,
    pub seq: u64,
    pub kind: &'static str,
    pub node: usize,
    pub job: Option<u64>,
    pub task: Option<u64>,
}

pub(crate) type TraceSink<'a> = Option<&'a mut dyn FnMut(TraceRecord)>;

/// Execute one simulation run; bit-identical output for identical config.
pub fn run_simulation(config: &MoAConfig) -> Result<SimReport, SimConfigError> {
    config.validate()?;
    Ok(engine::Engine::new(config, None).run())
}

/// As [`run_simulation`], streaming one [`TraceRecord`] per processed event.
pub fn run_simulation_traced(
    config: &MoAConfig,
    sink: &mut dyn FnMut(TraceRecord),
) -> Result<SimReport, SimConfigError> {
    config.validate()?;
    Ok(engine::Engine::new(config, Some(sink)).run())
}

/// Mean and standard error of one metric across replications; the standard
/// error is absent for a single replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: Option<f64>,
}

impl MeanSe {
    fn from_samples(samples: &[f64]) -> MeanSe {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var =
                samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            Some((var / n as f64).sqrt())
        } else {
            None
        };
        MeanSe { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateSummary {
    pub replications: usize,
    pub avg_queue_size: MeanSe,
    /// Aggregated over replications that completed at least one job.
    pub mean_latency: Option<MeanSe>,
    /// Grand mean over nodes of per-node time-averaged in-system count.
    pub time_avg_in_system: MeanSe,
    pub time_avg_queue_waiting: MeanSe,
    pub growth_slope: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicatedReport {
    pub per_run: Vec<SimReport>,
    pub summary: ReplicateSummary,
}

/// Run `replications` independent copies with seeds `seed, seed+1, …` (in
/// parallel; the aggregation order is the seed order, so results are
/// deterministic) and aggregate the headline metrics.
pub fn replicate(
    config: &MoAConfig,
    replications: usize,
) -> Result<ReplicatedReport, SimConfigError> {
    if replications == 0 {
        return Err(SimConfigError::BadReplications);
    }
    config.validate()?;
    let per_run: Vec<SimReport> = (0..replications)
        .into_par_iter()
        .map(|i| {
            let mut cfg = config.clone();
            cfg.seed = config.seed.wrapping_add(i as u64);
            engine::Engine::new(&cfg, None).run()
        })
        .collect();

    let node_mean = |f: &dyn Fn(&NodeReport) -> f64, run: &SimReport| -> f64 {
        run.per_node.iter().map(f).sum::<f64>() / run.per_node.len() as f64
    };
    let queue_sizes: Vec<f64> = per_run.iter().map(|r| r.overall.avg_queue_size).collect();
    let in_system: Vec<f64> = per_run
        .iter()
        .map(|r| node_mean(&|n| n.time_avg_in_system, r))
        .collect();
    let waiting: Vec<f64> = per_run
        .iter()
        .map(|r| node_mean(&|n| n.time_avg_queue_waiting, r))
        .collect();
    let slopes: Vec<f64> = per_run.iter().map(|r| r.overall.growth_slope).collect();
    let latencies: Vec<f64> = per_run
        .iter()
        .filter_map(|r| r.overall.mean_latency)
        .collect();

    let summary = ReplicateSummary {
        replications,
        avg_queue_size: MeanSe::from_samples(&queue_sizes),
        mean_latency: if latencies.is_empty() {
            None
        } else {
            Some(MeanSe::from_samples(&latencies))
        },
        time_avg_in_system: MeanSe::from_samples(&in_system),
        time_avg_queue_waiting: MeanSe::from_samples(&waiting),
        growth_slope: MeanSe::from_samples(&slopes),
    };
    Ok(ReplicatedReport { per_run, summary })
}
