//! Distributed mixture-of-agents (MoA) engine: protocol state machine,
//! queueing stability analysis, discrete-event simulator, and pluggable
//! inference backends (seeded mock and OpenAI-compatible HTTP).
//!
//! The crate separates pure protocol logic ([`protocol`]) and closed-form
//! queueing theory ([`queueing`]) from the event-driven simulator ([`sim`])
//! and the wall-clock live runner ([`live`]), so the same fork-join state
//! machine drives both simulated and real inference.

pub mod backend;
pub mod cli;
pub mod config;
pub mod dist;
pub mod live;
pub mod protocol;
pub mod queueing;
pub mod rng;
pub mod sim;
pub mod sweep;
