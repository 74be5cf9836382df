//! Benchmark harness: latency (ping-pong), throughput (streaming), and
//! pinned-memory accounting over three transports.
//!
//! * `baseline` — ordinary loopback TCP sockets.
//! * `reserve(N)` — two fixed N-byte shared-memory rings per connection,
//!   pinned for the connection's lifetime (message-atomic admission; see
//!   [`transport::ReserveRing`]).
//! * `elastic` — the channel data path: per-connection local records plus
//!   per-worker shared arenas with speculative claiming.

pub mod config;
pub mod report;
pub mod run;
pub mod transport;

use std::fmt;

use thiserror::Error;

use crate::arena::AllocationPolicy;
use crate::channel::NotifyPreference;

pub use config::{parse_suite, Assertion, SuiteConfig};
pub use report::BenchReport;
pub use run::{run_latency, run_suite, run_throughput, SuiteExec, SuiteResult};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("transport setup failed: {0}")]
    Setup(String),
    #[error("worker thread panicked")]
    WorkerPanic,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Baseline,
    Reserve(u64),
    Elastic,
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportKind::Baseline => write!(f, "baseline"),
            TransportKind::Reserve(n) => write!(f, "reserve({n})"),
            TransportKind::Elastic => write!(f, "elastic"),
        }
    }
}

impl TransportKind {
    pub fn label(&self) -> String {
        match self {
            TransportKind::Baseline => "baseline".into(),
            TransportKind::Reserve(n) => format!("reserve{n}"),
            TransportKind::Elastic => "elastic".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Latency { iters: u64 },
    Throughput { duration_ms: u64 },
}

/// One benchmark scenario; `echo()` serializes it bit-exactly back into the
/// suite-config line format.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub mode: BenchMode,
    pub transport: TransportKind,
    pub msg_size: usize,
    pub conns: usize,
    pub notify: NotifyPreference,
    pub warmup_iters: u64,
    pub policy: AllocationPolicy,
}

impl Scenario {
    pub fn latency(id: &str, transport: TransportKind, msg_size: usize, iters: u64) -> Scenario {
        Scenario {
            id: id.to_string(),
            mode: BenchMode::Latency { iters },
            transport,
            msg_size,
            conns: 1,
            notify: NotifyPreference::Adaptive,
            warmup_iters: 1000,
            policy: AllocationPolicy::default(),
        }
    }

    pub fn throughput(
        id: &str,
        transport: TransportKind,
        msg_size: usize,
        conns: usize,
        duration_ms: u64,
    ) -> Scenario {
        Scenario {
            id: id.to_string(),
            mode: BenchMode::Throughput { duration_ms },
            transport,
            msg_size,
            conns,
            notify: NotifyPreference::Blocking,
            warmup_iters: 1000,
            policy: AllocationPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.msg_size == 0 {
            return Err(BenchError::InvalidScenario("msg_size must be >= 1".into()));
        }
        if self.conns == 0 {
            return Err(BenchError::InvalidScenario("conns must be >= 1".into()));
        }
        if self.id.is_empty() || self.id.contains(char::is_whitespace) {
            return Err(BenchError::InvalidScenario(
                "scenario id must be non-empty without whitespace".into(),
            ));
        }
        if let TransportKind::Reserve(n) = self.transport {
            if n == 0 {
                return Err(BenchError::InvalidScenario("reserve size must be >= 1".into()));
            }
        }
        self.policy
            .validate()
            .map_err(BenchError::InvalidScenario)?;
        Ok(())
    }

    pub fn notify_label(&self) -> &'static str {
        match self.notify {
            NotifyPreference::Blocking => "blocking",
            NotifyPreference::NonBlocking => "nonblocking",
            NotifyPreference::Adaptive => "adaptive",
        }
    }

    /// Canonical scenario line (the config echo).
    pub fn echo(&self) -> String {
        let mut out = format!("scenario {} ", self.id);
        match self.mode {
            BenchMode::Latency { iters } => {
                out.push_str(&format!("lat iters={iters} "));
            }
            BenchMode::Throughput { duration_ms } => {
                out.push_str(&format!("bw duration_ms={duration_ms} "));
            }
        }
        match self.transport {
            TransportKind::Baseline => out.push_str("transport=baseline "),
            TransportKind::Reserve(n) => out.push_str(&format!("transport=reserve reserve={n} ")),
            TransportKind::Elastic => out.push_str("transport=elastic "),
        }
        out.push_str(&format!(
            "msg={} conns={} notify={} warmup={} record={} arena={} local={} max_chan={} max_proc={}",
            self.msg_size,
            self.conns,
            self.notify_label(),
            self.warmup_iters,
            self.policy.record_size_bytes,
            self.policy.arena_size_bytes,
            self.policy.local_record_bytes,
            self.policy.max_records_per_channel,
            self.policy.max_records_per_process,
        ));
        out
    }
}
