//! Elastic shared-memory socket transport for co-located processing units.
//!
//! The library provides four cooperating pieces:
//!
//! * [`gshm`] — a named shared-memory segment carved into page-aligned
//!   records, with per-principal access permissions and a fault signalling
//!   path to the broker.
//! * [`arena`] + [`broker`] — per-worker free-record arenas with speculative
//!   (broker-free) claiming, broker-side commit/rollback under an allocation
//!   policy, and release back to the free list.
//! * [`channel`] + [`unapi`] — a stream-socket-like data path over record
//!   chains, established over the ordinary network stack, with adaptive
//!   interrupt/poll notification.
//! * [`netns`] — a port reverse-mapping table, per-PU forwarding-rule
//!   generation, the idempotent rule-splitting transform, and a deterministic
//!   packet-pipeline simulator used to validate rule placements.
//!
//! [`bench`] reproduces the latency / throughput / pinned-memory comparisons
//! between a plain loopback-socket baseline, fixed per-connection reserved
//! buffers, and the elastic record transport.

pub mod arena;
pub mod bench;
pub mod broker;
pub mod channel;
pub mod config;
pub mod gshm;
pub mod netns;
pub mod unapi;

mod ids;

pub use ids::{BrokerId, ChannelId, PrincipalId, RecordId, WorkerId};
