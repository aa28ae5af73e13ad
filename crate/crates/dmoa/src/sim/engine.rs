//! The single-threaded discrete-event loop: renewal arrivals per user,
//! FCFS single-server nodes, network transit, and the fork-join protocol
//! driven through `protocol::spawn_job` / `protocol::advance_job`.
//!
//! Determinism: all randomness comes from named ChaCha8 substreams of the
//! master seed (arrivals and service per node, one stream for neighbor
//! selection, one for network delay), events fire in strict (time, seq)
//! order, and no container iteration order ever feeds a computation.

use std::collections::{HashMap, VecDeque};

use rand_chacha::ChaCha8Rng;

use crate::backend::mock_transform;
use crate::dist::{ArrivalProcess, DelayDist, ServiceDist};
use crate::protocol::{
    advance_job, spawn_job, InferenceTask, JobId, JobState, Prompt, ResponseMsg, TaskId, TaskIdGen,
};
use crate::queueing::node_input_rate;
use crate::rng::{substream, Stream};
use crate::sim::event::{EventKind, EventQueue};
use crate::sim::metrics::{LatencyAccum, TimeIntegrator};
use crate::sim::{
    MoAConfig, NodeReport, OverallReport, SimReport, TraceRecord, TraceSink, Verdict,
};

/// A device: one FCFS queue, one LLM server, per-purpose RNG substreams,
/// and exact time-integrated occupancy statistics.
struct NodeSim {
    queue: VecDeque<InferenceTask>,
    /// Task in service and its scheduled completion time.
    in_service: Option<(InferenceTask, f64)>,
    service: ServiceDist,
    service_rng: ChaCha8Rng,
    arrival_rng: ChaCha8Rng,
    waiting: TimeIntegrator,
    in_system: TimeIntegrator,
    busy: TimeIntegrator,
    tasks_served_window: u64,
    enqueued_window: u64,
}

impl NodeSim {
    fn record_occupancy(&mut self, now: f64) {
        let waiting = self.queue.len() as f64;
        let in_service = if self.in_service.is_some() { 1.0 } else { 0.0 };
        self.waiting.set(now, waiting);
        self.in_system.set(now, waiting + in_service);
        self.busy.set(now, in_service);
    }
}

pub(crate) struct Engine<'a> {
    cfg: &'a MoAConfig,
    arrival: ArrivalProcess,
    delay: DelayDist,
    now: f64,
    end: f64,
    events: EventQueue,
    nodes: Vec<NodeSim>,
    jobs: HashMap<u64, JobState>,
    ids: TaskIdGen,
    next_job_id: u64,
    neighbors_rng: ChaCha8Rng,
    delay_rng: ChaCha8Rng,
    /// Outstanding committed inferences: every accepted prompt immediately
    /// commits (k+1)M+1 inferences; each service completion retires one.
    /// This is the growth signal — in overload its fluid rate is exactly
    /// n·(R_in − 1/α), unlike the physically-enqueued count, which the
    /// fork-join joins throttle below that rate.
    backlog: TimeIntegrator,
    /// Tasks physically present in queues or in service, for the guard.
    tasks_in_system: u64,
    latency: LatencyAccum,
    generated_jobs: u64,
    completed_jobs: u64,
    conservation_violations: u64,
    aborted: bool,
    trace: TraceSink<'a>,
}

impl<'a> Engine<'a> {
    pub(crate) fn new(cfg: &'a MoAConfig, trace: TraceSink<'a>) -> Self {
        let n = cfg.params.n as usize;
        let nodes = (0..n)
            .map(|i| NodeSim {
                queue: VecDeque::new(),
                in_service: None,
                service: cfg.service[i],
                service_rng: substream(cfg.seed, Stream::Service, i as u64),
                arrival_rng: substream(cfg.seed, Stream::Arrivals, i as u64),
                waiting: TimeIntegrator::new(cfg.warmup, cfg.horizon),
                in_system: TimeIntegrator::new(cfg.warmup, cfg.horizon),
                busy: TimeIntegrator::new(cfg.warmup, cfg.horizon),
                tasks_served_window: 0,
                enqueued_window: 0,
            })
            .collect();
        Engine {
            cfg,
            arrival: cfg.arrival_process(),
            delay: cfg.network_delay,
            now: 0.0,
            end: cfg.horizon,
            events: EventQueue::new(),
            nodes,
            jobs: HashMap::new(),
            ids: TaskIdGen::new(),
            next_job_id: 0,
            neighbors_rng: substream(cfg.seed, Stream::Neighbors, 0),
            delay_rng: substream(cfg.seed, Stream::NetworkDelay, 0),
            backlog: TimeIntegrator::new(cfg.warmup, cfg.horizon),
            tasks_in_system: 0,
            latency: LatencyAccum::default(),
            generated_jobs: 0,
            completed_jobs: 0,
            conservation_violations: 0,
            aborted: false,
            trace,
        }
    }

    pub(crate) fn run(mut self) -> SimReport {
        for p in &self.cfg.injected {
            self.events.schedule(
                p.at,
                EventKind::InjectedArrival {
                    node: p.origin,
                    text: p.text.clone(),
                },
            );
        }
        if !matches!(self.arrival, ArrivalProcess::None) {
            for node in 0..self.nodes.len() {
                let gap = self
                    .arrival
                    .next_gap(&mut self.nodes[node].arrival_rng)
                    .expect("arrival process is on");
                self.events.schedule(gap, EventKind::Arrival { node });
            }
        }

        while let Some(ev) = self.events.pop() {
            if ev.time > self.end {
                break;
            }
            debug_assert!(ev.time >= self.now, "event clock went backwards");
            self.now = ev.time;
            match ev.kind {
                EventKind::Arrival { node } => self.on_arrival(node, ev.seq),
                EventKind::InjectedArrival { node, text } => {
                    self.on_injected(node, text, ev.seq)
                }
                EventKind::Delivery { node, task } => self.on_delivery(node, task, ev.seq),
                EventKind::ServiceComplete { node, task_id } => {
                    self.on_service_complete(node, task_id, ev.seq)
                }
                EventKind::ResponseDelivery { node, response } => {
                    self.on_response(node, response, ev.seq)
                }
            }
            if self.aborted {
                break;
            }
        }

        self.finish()
    }

    fn emit(&mut self, seq: u64, kind: &'static str, node: usize, job: Option<u64>, task: Option<u64>) {
        if let Some(sink) = self.trace.as_mut() {
            sink(TraceRecord {
                time: self.now,
                seq,
                kind,
                node,
                job,
                task,
            });
        }
    }

    fn accept_prompt(&mut self, origin: usize, text: String, seq: u64) {
        let prompt = Prompt {
            id: JobId(self.next_job_id),
            origin,
            text,
            created_at: self.now,
        };
        self.next_job_id += 1;
        self.generated_jobs += 1;
        self.backlog
            .add(self.now, self.cfg.params.total_inferences() as f64);
        self.emit(seq, "arrival", origin, Some(prompt.id.0), None);
        let (job, dispatches) =
            spawn_job(prompt, &self.cfg.params, &mut self.neighbors_rng, &mut self.ids);
        self.jobs.insert(job.job_id.0, job);
        for task in dispatches {
            self.dispatch(task);
        }
    }

    fn on_arrival(&mut self, node: usize, seq: u64) {
        let text = format!("prompt {} from user {}", self.next_job_id, node);
        self.accept_prompt(node, text, seq);
        let gap = self
            .arrival
            .next_gap(&mut self.nodes[node].arrival_rng)
            .expect("arrival process is on");
        self.events.schedule(self.now + gap, EventKind::Arrival { node });
    }

    fn on_injected(&mut self, node: usize, text: String, seq: u64) {
        self.accept_prompt(node, text, seq);
    }

    /// Send a task toward its node: network delay applies only when the
    /// task actually crosses the network (origin != destination).
    fn dispatch(&mut self, task: InferenceTask) {
        let delay = if task.assigned_node == task.origin {
            0.0
        } else {
            self.delay.sample(&mut self.delay_rng)
        };
        self.events.schedule(
            self.now + delay,
            EventKind::Delivery {
                node: task.assigned_node,
                task,
            },
        );
    }

    fn in_window(&self, t: f64) -> bool {
        t >= self.cfg.warmup && t <= self.end
    }

    fn on_delivery(&mut self, node_id: usize, mut task: InferenceTask, seq: u64) {
        self.emit(
            seq,
            "delivery",
            node_id,
            Some(task.job_id.0),
            Some(task.task_id.0),
        );
        task.enqueued_at = self.now;
        self.tasks_in_system += 1;
        if self.in_window(self.now) {
            self.nodes[node_id].enqueued_window += 1;
        }
        self.nodes[node_id].queue.push_back(task);
        if self.nodes[node_id].in_service.is_none() {
            self.start_service(node_id);
        }
        self.nodes[node_id].record_occupancy(self.now);
        if let Some(guard) = self.cfg.queue_guard {
            if self.tasks_in_system > guard {
                self.aborted = true;
            }
        }
    }

    fn start_service(&mut self, node_id: usize) {
        let node = &mut self.nodes[node_id];
        let task = node.queue.pop_front().expect("queue nonempty");
        let duration = node.service.sample(&mut node.service_rng);
        let done_at = self.now + duration;
        let task_id = task.task_id;
        node.in_service = Some((task, done_at));
        self.events
            .schedule(done_at, EventKind::ServiceComplete { node: node_id, task_id });
    }

    fn on_service_complete(&mut self, node_id: usize, task_id: TaskId, seq: u64) {
        let (task, done_at) = self.nodes[node_id]
            .in_service
            .take()
            .expect("service completion without a task in service");
        debug_assert_eq!(task.task_id, task_id);
        debug_assert_eq!(done_at, self.now);
        self.emit(
            seq,
            "service_complete",
            node_id,
            Some(task.job_id.0),
            Some(task_id.0),
        );
        self.tasks_in_system -= 1;
        if self.in_window(self.now) {
            self.nodes[node_id].tasks_served_window += 1;
        }
        self.backlog.add(self.now, -1.0);
        if !self.nodes[node_id].queue.is_empty() {
            self.start_service(node_id);
        }
        self.nodes[node_id].record_occupancy(self.now);

        let response = ResponseMsg {
            task_id,
            job_id: task.job_id,
            producer_node: node_id,
            text: mock_transform(node_id, &task.payload),
            produced_at: self.now,
        };
        let origin = task.origin;
        let delay = if node_id == origin {
            0.0
        } else {
            self.delay.sample(&mut self.delay_rng)
        };
        self.events.schedule(
            self.now + delay,
            EventKind::ResponseDelivery {
                node: origin,
                response,
            },
        );
    }

    fn on_response(&mut self, node_id: usize, response: ResponseMsg, seq: u64) {
        self.emit(
            seq,
            "response_delivery",
            node_id,
            Some(response.job_id.0),
            Some(response.task_id.0),
        );
        let job_key = response.job_id.0;
        let job = self
            .jobs
            .get_mut(&job_key)
            .expect("response for unknown job");
        let dispatches = advance_job(
            job,
            response,
            self.now,
            &self.cfg.params,
            &mut self.neighbors_rng,
            &mut self.ids,
        )
        .expect("protocol violation inside simulation");
        if job.completed_at.is_some() {
            let created = job.original_prompt.created_at;
            if job.inference_count != self.cfg.params.total_inferences() {
                self.conservation_violations += 1;
            }
            self.completed_jobs += 1;
            if created >= self.cfg.warmup && self.now <= self.end {
                self.latency.record(self.now - created);
            }
            self.jobs.remove(&job_key);
        }
        for task in dispatches {
            self.dispatch(task);
        }
    }

    fn finish(mut self) -> SimReport {
        let truncated = self.aborted;
        let measured_until = if truncated { self.now } else { self.end };
        for node in &mut self.nodes {
            if truncated {
                node.waiting.finish_truncated(measured_until);
                node.in_system.finish_truncated(measured_until);
                node.busy.finish_truncated(measured_until);
            } else {
                node.waiting.finish(measured_until);
                node.in_system.finish(measured_until);
                node.busy.finish(measured_until);
            }
        }
        if truncated {
            self.backlog.finish_truncated(measured_until);
        } else {
            self.backlog.finish(measured_until);
        }

        let window_len = self.backlog.window_len();
        let per_node: Vec<NodeReport> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| NodeReport {
                node: i,
                time_avg_queue_waiting: node.waiting.time_average(),
                time_avg_in_system: node.in_system.time_average(),
                utilization_measured: node.busy.time_average(),
                tasks_served: node.tasks_served_window,
                input_rate_measured: if window_len > 0.0 {
                    node.enqueued_window as f64 / window_len
                } else {
                    0.0
                },
            })
            .collect();

        let avg_queue_size = per_node
            .iter()
            .map(|r| r.time_avg_queue_waiting)
            .sum::<f64>()
            / per_node.len() as f64;
        let growth_slope = self.backlog.ls_slope();

        let verdict = if truncated {
            Verdict::AbortedByGuard
        } else {
            self.diagnose(growth_slope)
        };

        SimReport {
            per_node,
            overall: OverallReport {
                avg_queue_size,
                mean_latency: self.latency.mean(),
                latency_p50: self.latency.percentile(0.50),
                latency_p95: self.latency.percentile(0.95),
                completed_jobs: self.completed_jobs,
                generated_jobs: self.generated_jobs,
                growth_slope,
                conservation_violations: self.conservation_violations,
            },
            verdict,
            measured_until,
        }
    }

    /// Growth diagnostic (not a proof): "growing" needs the backlog trend to
    /// exceed a rate threshold and the final backlog to dwarf its warmup
    /// value. The threshold is 5% of the theoretical fluid accumulation rate
    /// n·(R_in − 1/α_max), floored at a small positive rate so stable
    /// configurations (where that expression is negative) are judged purely
    /// against noise.
    fn diagnose(&self, growth_slope: f64) -> Verdict {
        let Some(lambda) = self.arrival.rate() else {
            return Verdict::StableLooking;
        };
        let n = f64::from(self.cfg.params.n);
        let alpha_max = self
            .cfg
            .service
            .iter()
            .map(|s| s.mean())
            .fold(f64::NEG_INFINITY, f64::max);
        let r_in = node_input_rate(lambda, self.cfg.params.k, self.cfg.params.layers);
        let overload_rate = n * (r_in - 1.0 / alpha_max);
        let slope_threshold = (0.05 * overload_rate).max(1e-3 * n / alpha_max);
        let final_backlog = self.backlog.value();
        let warmup_backlog = self.backlog.value_at_window_start().max(1.0);
        if growth_slope > slope_threshold && final_backlog > 4.0 * warmup_backlog {
            Verdict::Growing
        } else {
            Verdict::StableLooking
        }
    }
}
