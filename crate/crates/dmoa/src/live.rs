//! Live execution: the same fork-join protocol, but against real (or
//! fixture) inference backends with wall-clock timing.
//!
//! One worker thread per node consumes that node's task channel in FIFO
//! order — the live analogue of the device FCFS queue — and a coordinator
//! owns all job state, advancing fork-joins as responses come back. A
//! backend error fails the whole affected job; the run continues with the
//! remaining jobs.

use std::collections::HashMap;
use std::io::BufRead;
use std::sync::mpsc;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::backend::{Backend, BackendError, BackendSpec, InferenceRequest};
use crate::protocol::{
    advance_job, spawn_job, InferenceTask, JobId, Prompt, ProtocolParams, ResponseMsg, TaskIdGen,
    TaskKind,
};
use crate::rng::{substream, Stream};

/// Per-node live settings: the backend identity plus sampling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveNodeConfig {
    pub backend: BackendSpec,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiveConfig {
    pub params: ProtocolParams,
    /// One entry per node, index = node id.
    pub nodes: Vec<LiveNodeConfig>,
    /// Drives neighbor selection only.
    pub seed: u64,
    /// Health-check every backend before accepting work.
    pub validate: bool,
}

/// One row of the prompts file: which user issues which prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEntry {
    pub origin: usize,
    pub text: String,
}

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("invalid protocol parameters: {0}")]
    Params(#[from] crate::protocol::ProtocolError),
    #[error("nodes must list one backend per node ({expected}), got {got}")]
    NodesLength { expected: usize, got: usize },
    #[error("node {node}: backend failed to build: {source}")]
    Build { node: usize, source: BackendError },
    #[error("node {node}: backend unhealthy: {detail}")]
    Unhealthy { node: usize, detail: String },
    #[error("prompt {index}: origin {origin} out of range for n={n}")]
    BadOrigin { index: usize, origin: usize, n: u32 },
    #[error("prompts file line {line}: {reason}")]
    BadPromptLine { line: usize, reason: String },
    #[error("no prompts to run")]
    NoPrompts,
    #[error("worker for node {node} stopped unexpectedly")]
    WorkerLost { node: usize },
}

/// Timing of one inference stage of a job.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub task: u64,
    pub stage: String,
    pub node: usize,
    pub backend_id: String,
    /// Wall-clock seconds spent in the backend call.
    pub inference_latency: f64,
    /// Seconds from run start when the response was accepted.
    pub completed_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum LiveStatus {
    Completed,
    Failed { stage: String, node: usize, error: String },
}

/// Final record for one prompt: the aggregated response (on success) plus
/// end-to-end latency and per-stage timings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiveOutcome {
    pub job: u64,
    pub origin: usize,
    pub prompt: String,
    #[serde(flatten)]
    pub status: LiveStatus,
    pub final_text: Option<String>,
    pub end_to_end_latency: Option<f64>,
    pub stages: Vec<StageTiming>,
}

fn stage_label(kind: TaskKind) -> String {
    match kind {
        TaskKind::Direct => "direct".to_string(),
        TaskKind::Proposal { layer } => format!("proposal-{layer}"),
        TaskKind::Aggregation => "aggregation".to_string(),
    }
}

enum WorkerReply {
    Done {
        node: usize,
        task: InferenceTask,
        text: String,
        backend_id: String,
        inference_latency: f64,
    },
    Failed {
        node: usize,
        task: InferenceTask,
        error: BackendError,
    },
}

/// Parse a newline-delimited prompts file: each line is
/// `origin<TAB>prompt text`; blank lines and `#` comments are skipped.
pub fn parse_prompts(reader: impl BufRead) -> Result<Vec<PromptEntry>, LiveError> {
    let mut prompts = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LiveError::BadPromptLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let trimmed = line.trim_end();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (origin, text) = trimmed.split_once('\t').ok_or(LiveError::BadPromptLine {
            line: i + 1,
            reason: "expected `origin<TAB>prompt text`".to_string(),
        })?;
        let origin: usize = origin.trim().parse().map_err(|e| LiveError::BadPromptLine {
            line: i + 1,
            reason: format!("origin is not a node index: {e}"),
        })?;
        if text.is_empty() {
            return Err(LiveError::BadPromptLine {
                line: i + 1,
                reason: "prompt text is empty".to_string(),
            });
        }
        prompts.push(PromptEntry {
            origin,
            text: text.to_string(),
        });
    }
    Ok(prompts)
}

struct JobRun {
    outcome_slot: usize,
    stages: Vec<StageTiming>,
    created_at: f64,
}

/// Execute every prompt through the full MoA protocol against the
/// configured backends. Outcomes come back in prompt order.
pub fn run_live(cfg: &LiveConfig, prompts: &[PromptEntry]) -> Result<Vec<LiveOutcome>, LiveError> {
    cfg.params.validate()?;
    let n = cfg.params.n as usize;
    if cfg.nodes.len() != n {
        return Err(LiveError::NodesLength {
            expected: n,
            got: cfg.nodes.len(),
        });
    }
    if prompts.is_empty() {
        return Err(LiveError::NoPrompts);
    }
    for (index, p) in prompts.iter().enumerate() {
        if p.origin >= n {
            return Err(LiveError::BadOrigin {
                index,
                origin: p.origin,
                n: cfg.params.n,
            });
        }
    }

    let backends: Vec<Box<dyn Backend>> = cfg
        .nodes
        .iter()
        .enumerate()
        .map(|(node, nc)| {
            nc.backend
                .build()
                .map_err(|source| LiveError::Build { node, source })
        })
        .collect::<Result<_, _>>()?;
    if cfg.validate {
        for (node, backend) in backends.iter().enumerate() {
            let health = backend.validate();
            if !health.healthy {
                return Err(LiveError::Unhealthy {
                    node,
                    detail: health.detail,
                });
            }
        }
    }

    let epoch = Instant::now();
    let (reply_tx, reply_rx) = mpsc::channel::<WorkerReply>();
    let mut task_txs = Vec::with_capacity(n);
    let mut workers = Vec::with_capacity(n);
    for (node, backend) in backends.into_iter().enumerate() {
        let (tx, rx) = mpsc::channel::<InferenceTask>();
        task_txs.push(tx);
        let reply_tx = reply_tx.clone();
        let node_cfg = cfg.nodes[node].clone();
        let model = match &node_cfg.backend {
            BackendSpec::Http(h) => h.model.clone(),
            BackendSpec::Mock(_) => "mock".to_string(),
        };
        workers.push(std::thread::spawn(move || {
            // FIFO consumption of this channel realizes the node's FCFS queue
            for task in rx {
                let reply = InferenceRequest::from_bundle(
                    &task.payload,
                    model.clone(),
                    node_cfg.temperature,
                    node_cfg.max_tokens,
                )
                .and_then(|request| backend.infer(&request));
                let message = match reply {
                    Ok(result) => WorkerReply::Done {
                        node,
                        task,
                        text: result.text,
                        backend_id: result.backend_id,
                        inference_latency: result.measured_latency,
                    },
                    Err(error) => WorkerReply::Failed { node, task, error },
                };
                if reply_tx.send(message).is_err() {
                    return; // coordinator is gone; shut down
                }
            }
        }));
    }
    drop(reply_tx);

    let mut neighbors_rng = substream(cfg.seed, Stream::Neighbors, 0);
    let mut ids = TaskIdGen::new();
    let mut jobs = HashMap::new();
    let mut runs: HashMap<u64, JobRun> = HashMap::new();
    let mut outcomes: Vec<LiveOutcome> = Vec::with_capacity(prompts.len());
    let mut unresolved = 0usize;

    for (slot, entry) in prompts.iter().enumerate() {
        let created_at = epoch.elapsed().as_secs_f64();
        let prompt = Prompt {
            id: JobId(slot as u64),
            origin: entry.origin,
            text: entry.text.clone(),
            created_at,
        };
        outcomes.push(LiveOutcome {
            job: slot as u64,
            origin: entry.origin,
            prompt: entry.text.clone(),
            status: LiveStatus::Completed, // overwritten on resolution
            final_text: None,
            end_to_end_latency: None,
            stages: Vec::new(),
        });
        let (job, dispatches) = spawn_job(prompt, &cfg.params, &mut neighbors_rng, &mut ids);
        runs.insert(
            job.job_id.0,
            JobRun {
                outcome_slot: slot,
                stages: Vec::new(),
                created_at,
            },
        );
        jobs.insert(job.job_id.0, job);
        unresolved += 1;
        for task in dispatches {
            let node = task.assigned_node;
            task_txs[node]
                .send(task)
                .map_err(|_| LiveError::WorkerLost { node })?;
        }
    }

    while unresolved > 0 {
        let reply = reply_rx.recv().map_err(|_| LiveError::WorkerLost { node: 0 })?;
        match reply {
            WorkerReply::Done {
                node,
                task,
                text,
                backend_id,
                inference_latency,
            } => {
                let job_key = task.job_id.0;
                let Some(job) = jobs.get_mut(&job_key) else {
                    continue; // job already failed; drop the late response
                };
                let now = epoch.elapsed().as_secs_f64();
                let run = runs.get_mut(&job_key).expect("run exists for live job");
                run.stages.push(StageTiming {
                    task: task.task_id.0,
                    stage: stage_label(task.kind),
                    node,
                    backend_id,
                    inference_latency,
                    completed_at: now,
                });
                let response = ResponseMsg {
                    task_id: task.task_id,
                    job_id: task.job_id,
                    producer_node: node,
                    text,
                    produced_at: now,
                };
                let dispatches = advance_job(
                    job,
                    response,
                    now,
                    &cfg.params,
                    &mut neighbors_rng,
                    &mut ids,
                )
                .expect("protocol violation in live run");
                if job.completed_at.is_some() {
                    let run = runs.remove(&job_key).expect("run exists");
                    let job = jobs.remove(&job_key).expect("job exists");
                    let outcome = &mut outcomes[run.outcome_slot];
                    outcome.status = LiveStatus::Completed;
                    outcome.final_text = job.final_response().map(|r| r.text.clone());
                    outcome.end_to_end_latency = Some(now - run.created_at);
                    outcome.stages = run.stages;
                    unresolved -= 1;
                } else {
                    for task in dispatches {
                        let node = task.assigned_node;
                        task_txs[node]
                            .send(task)
                            .map_err(|_| LiveError::WorkerLost { node })?;
                    }
                }
            }
            WorkerReply::Failed { node, task, error } => {
                let job_key = task.job_id.0;
                if jobs.remove(&job_key).is_none() {
                    continue; // already failed via another branch
                }
                let run = runs.remove(&job_key).expect("run exists");
                let outcome = &mut outcomes[run.outcome_slot];
                outcome.status = LiveStatus::Failed {
                    stage: stage_label(task.kind),
                    node,
                    error: error.to_string(),
                };
                outcome.stages = run.stages;
                unresolved -= 1;
            }
        }
    }

    drop(task_txs);
    for worker in workers {
        let _ = worker.join();
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::ServiceDist;
    use std::io::Cursor;

    fn mock_node(node: usize) -> LiveNodeConfig {
        LiveNodeConfig {
            backend: BackendSpec::Mock(crate::backend::MockSpec {
                node,
                delay: ServiceDist::Deterministic { mean: 1e-4 },
                seed: 71,
            }),
            temperature: 0.7,
            max_tokens: None,
        }
    }

    fn mock_cfg(n: u32, k: u32, layers: u32) -> LiveConfig {
        LiveConfig {
            params: ProtocolParams::new(n, k, layers).unwrap(),
            nodes: (0..n as usize).map(mock_node).collect(),
            seed: 5,
            validate: true,
        }
    }

    #[test]
    fn prompts_parse_tab_separated_lines() {
        let input = "0\thello world\n# comment\n\n2\tsecond prompt\n";
        let prompts = parse_prompts(Cursor::new(input)).unwrap();
        assert_eq!(
            prompts,
            vec![
                PromptEntry {
                    origin: 0,
                    text: "hello world".into()
                },
                PromptEntry {
                    origin: 2,
                    text: "second prompt".into()
                },
            ]
        );
    }

    #[test]
    fn prompts_parse_rejects_malformed_lines() {
        assert!(matches!(
            parse_prompts(Cursor::new("no tab here")),
            Err(LiveError::BadPromptLine { line: 1, .. })
        ));
        assert!(matches!(
            parse_prompts(Cursor::new("x\ttext")),
            Err(LiveError::BadPromptLine { line: 1, .. })
        ));
        assert!(matches!(
            parse_prompts(Cursor::new("1\t")),
            Err(LiveError::BadPromptLine { line: 1, .. })
        ));
    }

    #[test]
    fn single_direct_job_passes_through_mock() {
        let cfg = mock_cfg(2, 0, 0);
        let outcomes = run_live(
            &cfg,
            &[PromptEntry {
                origin: 1,
                text: "ping".into(),
            }],
        )
        .unwrap();
        assert_eq!(outcomes.len(), 1);
        assert_eq!(outcomes[0].status, LiveStatus::Completed);
        assert_eq!(outcomes[0].stages.len(), 1);
        assert_eq!(outcomes[0].stages[0].stage, "direct");
        let text = outcomes[0].final_text.as_deref().unwrap();
        assert!(text.starts_with("MOCK[1]:"), "got {text}");
        assert!(outcomes[0].end_to_end_latency.unwrap() > 0.0);
    }

    #[test]
    fn fork_join_produces_all_stage_timings() {
        let cfg = mock_cfg(4, 1, 1);
        let outcomes = run_live(
            &cfg,
            &[PromptEntry {
                origin: 0,
                text: "q".into(),
            }],
        )
        .unwrap();
        let o = &outcomes[0];
        assert_eq!(o.status, LiveStatus::Completed);
        // (k+1)M + 1 = 3 stages
        assert_eq!(o.stages.len(), 3);
        let stages: Vec<&str> = o.stages.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(stages.iter().filter(|s| **s == "proposal-1").count(), 2);
        assert_eq!(stages.last().copied(), Some("aggregation"));
        // the aggregation ran at the origin and saw both proposals
        let agg = o.stages.last().unwrap();
        assert_eq!(agg.node, 0);
        let text = o.final_text.as_deref().unwrap();
        assert!(text.contains(":responses=2"), "got {text}");
    }

    #[test]
    fn mismatched_node_list_is_rejected() {
        let mut cfg = mock_cfg(4, 1, 1);
        cfg.nodes.pop();
        let err = run_live(
            &cfg,
            &[PromptEntry {
                origin: 0,
                text: "q".into(),
            }],
        )
        .expect_err("must fail");
        assert!(matches!(
            err,
            LiveError::NodesLength {
                expected: 4,
                got: 3
            }
        ));
    }

    #[test]
    fn out_of_range_origin_is_rejected() {
        let cfg = mock_cfg(2, 0, 0);
        let err = run_live(
            &cfg,
            &[PromptEntry {
                origin: 5,
                text: "q".into(),
            }],
        )
        .expect_err("must fail");
        assert!(matches!(err, LiveError::BadOrigin { origin: 5, .. }));
    }

    #[test]
    fn many_prompts_all_complete_in_order() {
        let cfg = mock_cfg(4, 1, 1);
        let prompts: Vec<PromptEntry> = (0..10)
            .map(|i| PromptEntry {
                origin: i % 4,
                text: format!("prompt {i}"),
            })
            .collect();
        let outcomes = run_live(&cfg, &prompts).unwrap();
        assert_eq!(outcomes.len(), 10);
        for (i, o) in outcomes.iter().enumerate() {
            assert_eq!(o.job, i as u64, "outcomes keep prompt order");
            assert_eq!(o.origin, i % 4);
            assert_eq!(o.status, LiveStatus::Completed);
            assert_eq!(o.stages.len(), 3);
        }
    }
}
