//! The distributed MoA protocol: uniform neighbor gossip, layered
//! proposal/aggregation prompt construction, and the per-job fork-join state
//! machine.
//!
//! Everything here is pure over explicit state: randomness is injected, task
//! ids come from an injected allocator, and time is passed in. The simulator
//! and the live runner both drive these functions, so protocol behavior is
//! identical in both modes.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

/// Instruction handed to an LLM whenever its input carries prior responses:
/// every proposer from the second layer onward and the final aggregator.
pub const AGGREGATOR_SYSTEM_PROMPT: &str = "You have been provided with a set of responses from various open-source models to the latest user query. Your task is to synthesize these responses into a single, high-quality response. It is crucial to critically evaluate the information provided in these responses, recognizing that some of it may be biased or incorrect. Your response should not simply replicate the given answers but should offer a refined, accurate, and comprehensive reply to the instruction. Ensure your response is well-structured, coherent, and adheres to the highest standards of accuracy and reliability. Do not add any additional comments about how you created these responses. Just synthesize these responses as instructed.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct JobId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TaskId(pub u64);

/// Monotone task-id allocator; one per run.
#[derive(Debug, Default)]
pub struct TaskIdGen(u64);

impl TaskIdGen {
    pub fn new() -> Self {
        TaskIdGen(0)
    }

    pub fn next_id(&mut self) -> TaskId {
        let id = TaskId(self.0);
        self.0 += 1;
        id
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("fan-out k={k} exceeds the n-1={max} other nodes")]
    FanOutTooLarge { k: u32, max: u32 },
    #[error("node count n={n} must be at least 2")]
    TooFewNodes { n: u32 },
    #[error("job {job}: response for unknown or already-collected task {task}")]
    UnknownTask { job: u64, task: u64 },
    #[error("job {job} is already complete")]
    JobComplete { job: u64 },
    #[error("{stage} input requires at least one collected response")]
    EmptyResponses { stage: &'static str },
}

/// Topology and fan-out parameters: `n` devices, `k` neighbors gossiped to
/// per layer, `layers` proposal rounds before the final aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProtocolParams {
    pub n: u32,
    pub k: u32,
    pub layers: u32,
}

impl ProtocolParams {
    pub fn new(n: u32, k: u32, layers: u32) -> Result<Self, ProtocolError> {
        let p = ProtocolParams { n, k, layers };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.n < 2 {
            return Err(ProtocolError::TooFewNodes { n: self.n });
        }
        if self.k > self.n - 1 {
            return Err(ProtocolError::FanOutTooLarge {
                k: self.k,
                max: self.n - 1,
            });
        }
        Ok(())
    }

    /// Inferences a single job consumes end to end: `(k+1)*layers + 1`.
    pub fn total_inferences(&self) -> u64 {
        u64::from(self.k + 1) * u64::from(self.layers) + 1
    }
}

/// Total inferences one original prompt triggers under `params`.
pub fn total_inferences(params: &ProtocolParams) -> u64 {
    params.total_inferences()
}

/// An original user prompt entering the system.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub id: JobId,
    pub origin: usize,
    pub text: String,
    pub created_at: f64,
}

/// What kind of inference a queued task asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TaskKind {
    /// Plain single-LLM inference; only occurs when `layers == 0`.
    Direct,
    /// Proposal in the given layer (1-based).
    Proposal { layer: u32 },
    /// Final synthesis at the origin node.
    Aggregation,
}

impl TaskKind {
    fn stage_name(self) -> &'static str {
        match self {
            TaskKind::Direct => "direct",
            TaskKind::Proposal { .. } => "proposal",
            TaskKind::Aggregation => "aggregation",
        }
    }
}

/// The rendered input for one inference call.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageBundle {
    /// Present exactly when the input carries prior responses
    /// (aggregation, or proposals in layer >= 2).
    pub system_text: Option<String>,
    pub user_text: String,
}

/// One unit of LLM work waiting in (or headed for) a node's FCFS queue.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTask {
    pub task_id: TaskId,
    pub job_id: JobId,
    pub kind: TaskKind,
    pub assigned_node: usize,
    pub payload: MessageBundle,
    /// Time the task entered its node's queue; initialized to the dispatch
    /// time and overwritten by the transport on actual enqueue.
    pub enqueued_at: f64,
    pub origin: usize,
}

/// A completed inference traveling back to the job's origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMsg {
    pub task_id: TaskId,
    pub job_id: JobId,
    pub producer_node: usize,
    pub text: String,
    pub produced_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobPhase {
    AwaitingLayer(u32),
    AwaitingAggregation,
    AwaitingDirect,
    Completed,
}

/// Fork-join state for one original prompt.
///
/// In `AwaitingLayer(l)` the pending set plus collected responses always
/// account for the k+1 proposals of layer `l`; in the awaiting-aggregation
/// and awaiting-direct phases exactly one task is pending.
#[derive(Debug, Clone, PartialEq)]
pub struct JobState {
    pub job_id: JobId,
    pub origin: usize,
    pub original_prompt: Prompt,
    pub phase: JobPhase,
    pub pending: Vec<TaskId>,
    pub collected: Vec<ResponseMsg>,
    /// Freshly resampled k-subset used at each layer, for auditability.
    pub layer_neighbor_sets: Vec<Vec<usize>>,
    pub inference_count: u64,
    pub completed_at: Option<f64>,
    /// Arrival order keys (arrival time, task id) for `collected`, so
    /// simultaneous arrivals concatenate in a defined order.
    arrival_keys: Vec<(f64, u64)>,
}

impl JobState {
    /// Final synthesized answer, once the job has completed.
    pub fn final_response(&self) -> Option<&ResponseMsg> {
        match self.phase {
            JobPhase::Completed => self.collected.last(),
            _ => None,
        }
    }

    /// Insert a response keeping `collected` ordered by (arrival time,
    /// task id). Arrivals come in nondecreasing time order, so only the
    /// equal-time tail can need reordering.
    fn collect(&mut self, arrived_at: f64, resp: ResponseMsg) {
        let key = (arrived_at, resp.task_id.0);
        let mut pos = self.collected.len();
        while pos > 0 {
            let prev = self.arrival_keys[pos - 1];
            if prev.0 == key.0 && prev.1 > key.1 {
                pos -= 1;
            } else {
                break;
            }
        }
        self.collected.insert(pos, resp);
        self.arrival_keys.insert(pos, key);
    }

    fn take_collected(&mut self) -> Vec<ResponseMsg> {
        self.arrival_keys.clear();
        std::mem::take(&mut self.collected)
    }
}

/// Draw a uniformly random k-subset of the other n-1 nodes.
///
/// Returns a sorted list of distinct node indices, never containing
/// `self_id`. Deterministic given the rng state.
pub fn select_neighbors(self_id: usize, params: &ProtocolParams, rng: &mut impl Rng) -> Vec<usize> {
    let n = params.n as usize;
    let k = params.k as usize;
    debug_assert!(self_id < n);
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, n - 1, k)
        .into_iter()
        .map(|i| if i < self_id { i } else { i + 1 })
        .collect();
    picked.sort_unstable();
    picked
}

fn numbered_responses(original: &Prompt, responses: &[ResponseMsg]) -> String {
    let mut text = String::with_capacity(
        original.text.len() + responses.iter().map(|r| r.text.len() + 32).sum::<usize>(),
    );
    text.push_str(&original.text);
    for (i, r) in responses.iter().enumerate() {
        text.push_str("\n\n");
        text.push_str(&format!(
            "Response {} (from node {}):\n{}",
            i + 1,
            r.producer_node,
            r.text
        ));
    }
    text
}

/// Render the inference input for a protocol stage.
///
/// First-layer proposals and direct inference see the bare prompt; deeper
/// layers and the aggregation see the system prompt plus the original prompt
/// followed by the numbered responses of the previous layer.
pub fn build_layer_prompt(
    original: &Prompt,
    responses: &[ResponseMsg],
    stage: TaskKind,
) -> Result<MessageBundle, ProtocolError> {
    let needs_responses = match stage {
        TaskKind::Direct | TaskKind::Proposal { layer: 1 } => false,
        TaskKind::Proposal { .. } | TaskKind::Aggregation => true,
    };
    if needs_responses {
        if responses.is_empty() {
            return Err(ProtocolError::EmptyResponses {
                stage: stage.stage_name(),
            });
        }
        Ok(MessageBundle {
            system_text: Some(AGGREGATOR_SYSTEM_PROMPT.to_string()),
            user_text: numbered_responses(original, responses),
        })
    } else {
        Ok(MessageBundle {
            system_text: None,
            user_text: original.text.clone(),
        })
    }
}

fn fan_out(
    job: &mut JobState,
    kind: TaskKind,
    payload: &MessageBundle,
    targets: impl IntoIterator<Item = usize>,
    now: f64,
    ids: &mut TaskIdGen,
) -> Vec<InferenceTask> {
    let tasks: Vec<InferenceTask> = targets
        .into_iter()
        .map(|node| InferenceTask {
            task_id: ids.next_id(),
            job_id: job.job_id,
            kind,
            assigned_node: node,
            payload: payload.clone(),
            enqueued_at: now,
            origin: job.origin,
        })
        .collect();
    job.pending = tasks.iter().map(|t| t.task_id).collect();
    tasks
}

/// Start the fork-join for a fresh prompt.
///
/// With layers >= 1 this dispatches k+1 first-layer proposals (origin first,
/// then k sampled neighbors); with layers == 0 it dispatches a single direct
/// inference at the origin.
pub fn spawn_job(
    prompt: Prompt,
    params: &ProtocolParams,
    rng: &mut impl Rng,
    ids: &mut TaskIdGen,
) -> (JobState, Vec<InferenceTask>) {
    let now = prompt.created_at;
    let mut job = JobState {
        job_id: prompt.id,
        origin: prompt.origin,
        original_prompt: prompt,
        phase: if params.layers == 0 {
            JobPhase::AwaitingDirect
        } else {
            JobPhase::AwaitingLayer(1)
        },
        pending: Vec::new(),
        collected: Vec::new(),
        layer_neighbor_sets: Vec::new(),
        inference_count: 0,
        completed_at: None,
        arrival_keys: Vec::new(),
    };
    let origin = job.origin;
    let dispatches = if params.layers == 0 {
        let payload = build_layer_prompt(&job.original_prompt, &[], TaskKind::Direct)
            .expect("direct stage takes no responses");
        fan_out(&mut job, TaskKind::Direct, &payload, [origin], now, ids)
    } else {
        let neighbors = select_neighbors(job.origin, params, rng);
        job.layer_neighbor_sets.push(neighbors.clone());
        let payload = build_layer_prompt(&job.original_prompt, &[], TaskKind::Proposal { layer: 1 })
            .expect("first layer takes no responses");
        let targets: Vec<usize> = std::iter::once(origin).chain(neighbors).collect();
        fan_out(
            &mut job,
            TaskKind::Proposal { layer: 1 },
            &payload,
            targets,
            now,
            ids,
        )
    };
    (job, dispatches)
}

/// Feed one returned response into a job's fork-join state machine.
///
/// When a layer's k+1 responses are all in: layers below `layers` fan out
/// k+1 next-layer proposals to the origin plus freshly resampled neighbors;
/// the last layer dispatches the single aggregation task to the origin.
/// An aggregation or direct response completes the job. Unknown or duplicate
/// task ids and advances on completed jobs are protocol violations and leave
/// the state untouched.
pub fn advance_job(
    job: &mut JobState,
    incoming: ResponseMsg,
    now: f64,
    params: &ProtocolParams,
    rng: &mut impl Rng,
    ids: &mut TaskIdGen,
) -> Result<Vec<InferenceTask>, ProtocolError> {
    if job.phase == JobPhase::Completed {
        return Err(ProtocolError::JobComplete { job: job.job_id.0 });
    }
    if incoming.job_id != job.job_id {
        return Err(ProtocolError::UnknownTask {
            job: job.job_id.0,
            task: incoming.task_id.0,
        });
    }
    let pos = job
        .pending
        .iter()
        .position(|t| *t == incoming.task_id)
        .ok_or(ProtocolError::UnknownTask {
            job: job.job_id.0,
            task: incoming.task_id.0,
        })?;
    job.pending.swap_remove(pos);
    job.inference_count += 1;
    job.collect(now, incoming);

    match job.phase {
        JobPhase::AwaitingLayer(layer) => {
            if !job.pending.is_empty() {
                return Ok(Vec::new());
            }
            let responses = job.take_collected();
            debug_assert_eq!(responses.len(), params.k as usize + 1);
            if layer < params.layers {
                let next = TaskKind::Proposal { layer: layer + 1 };
                let payload = build_layer_prompt(&job.original_prompt, &responses, next)?;
                let neighbors = select_neighbors(job.origin, params, rng);
                job.layer_neighbor_sets.push(neighbors.clone());
                let targets: Vec<usize> = std::iter::once(job.origin).chain(neighbors).collect();
                job.phase = JobPhase::AwaitingLayer(layer + 1);
                Ok(fan_out(job, next, &payload, targets, now, ids))
            } else {
                let payload =
                    build_layer_prompt(&job.original_prompt, &responses, TaskKind::Aggregation)?;
                let origin = job.origin;
                job.phase = JobPhase::AwaitingAggregation;
                Ok(fan_out(
                    job,
                    TaskKind::Aggregation,
                    &payload,
                    [origin],
                    now,
                    ids,
                ))
            }
        }
        JobPhase::AwaitingAggregation | JobPhase::AwaitingDirect => {
            job.phase = JobPhase::Completed;
            job.completed_at = Some(now);
            debug_assert_eq!(job.inference_count, params.total_inferences());
            Ok(Vec::new())
        }
        JobPhase::Completed => unreachable!("checked above"),
    }
}
