//! Shared per-channel state: two directional record chains plus counters and
//! wait/wake bookkeeping. One `ChannelShared` is referenced by both endpoint
//! handles and by every broker governing one of its endpoints.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::arena::Chain;
use crate::{ChannelId, PrincipalId, RecordId, WorkerId};

/// Channel lifecycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelState {
    Handshaking,
    Active,
    Draining,
    Closed,
}

impl ChannelState {
    fn from_raw(raw: u8) -> ChannelState {
        match raw {
            0 => ChannelState::Handshaking,
            1 => ChannelState::Active,
            2 => ChannelState::Draining,
            _ => ChannelState::Closed,
        }
    }

    fn raw(self) -> u8 {
        match self {
            ChannelState::Handshaking => 0,
            ChannelState::Active => 1,
            ChannelState::Draining => 2,
            ChannelState::Closed => 3,
        }
    }
}

/// Generation-counted condition variable used for fault-retry waits: load the
/// generation before the access attempt, and wait for it to move if the
/// access faulted. The broker bumps it whenever it resolves anything that
/// could unblock the accessor, so a resolution that lands before the wait
/// starts is never lost.
#[derive(Default)]
pub struct ProgressSignal {
    generation: Mutex<u64>,
    cv: Condvar,
}

impl ProgressSignal {
    pub fn current(&self) -> u64 {
        *self.generation.lock().expect("progress poisoned")
    }

    pub fn bump(&self) {
        {
            let mut g = self.generation.lock().expect("progress poisoned");
            *g += 1;
        }
        self.cv.notify_all();
    }

    /// Wait until the generation differs from `seen`; returns the new value.
    pub fn wait_past(&self, seen: u64, timeout: Duration) -> u64 {
        let mut g = self.generation.lock().expect("progress poisoned");
        let deadline = std::time::Instant::now() + timeout;
        while *g == seen {
            let now = std::time::Instant::now();
            if now >= deadline {
                break;
            }
            let (guard, _) = self
                .cv
                .wait_timeout(g, deadline - now)
                .expect("progress poisoned");
            g = guard;
        }
        *g
    }
}

/// One direction of a channel: a FIFO record chain written by `sender` and
/// consumed by `receiver`. The local record circulates inside the chain; the
/// rest is claimed from the sender's arena on demand.
pub struct DirectionState {
    pub local_record: RecordId,
    pub sender: PrincipalId,
    pub receiver: PrincipalId,
    pub sender_worker: WorkerId,
    pub receiver_worker: WorkerId,
    pub chain: Mutex<Chain>,
    /// The drained local record waits here when the chain tail is still
    /// partially written: re-chaining it immediately would strand the bytes
    /// of the partial record mid-chain. The writer re-attaches it at the next
    /// record boundary. Guarded by the chain lock.
    pub local_parked: AtomicBool,
    pub written_total: AtomicU64,
    pub read_total: AtomicU64,
    /// Armed read-interest (sync waiters and async tokens) on this
    /// direction's receiver; writers send a readable status when set.
    pub reader_waiting: AtomicU32,
    /// Armed write-interest on this direction's sender; readers send a
    /// writable status when set.
    pub writer_waiting: AtomicU32,
    /// Data-path waiters parked on the progress signal; the opposite side
    /// bumps it when they are set.
    pub reader_parked: AtomicU32,
    pub writer_parked: AtomicU32,
    /// The sender's current write position: the first record in the chain
    /// with space, paired with its claim seq for staleness detection. Only
    /// the writer stores it.
    pub write_rec: AtomicU32,
    pub write_rec_seq: AtomicU64,
    pub progress: ProgressSignal,
}

impl DirectionState {
    pub fn readable(&self) -> bool {
        self.written_total.load(Ordering::Acquire) > self.read_total.load(Ordering::Acquire)
    }

    pub fn drained(&self) -> bool {
        self.written_total.load(Ordering::Acquire) == self.read_total.load(Ordering::Acquire)
    }

    /// Bytes written but not yet consumed.
    pub fn occupancy(&self) -> u64 {
        self.written_total
            .load(Ordering::Acquire)
            .saturating_sub(self.read_total.load(Ordering::Acquire))
    }
}

/// Control block shared by both endpoints and their brokers.
pub struct ChannelShared {
    pub id: ChannelId,
    state: AtomicU8,
    pub dirs: [DirectionState; 2],
    /// Arena records claimed or committed for this channel (both directions);
    /// the per-channel rate-limit counter.
    pub outstanding: Arc<AtomicU32>,
    /// Committed arena records currently held by this channel.
    pub committed: AtomicU32,
    /// Rollback error events delivered by the broker, surfaced on the next
    /// write.
    pub rollback_events: AtomicU32,
    /// Pre-rewrite destination recorded by the namespace plane, if any.
    pub orig_dst: Mutex<Option<SocketAddr>>,
    pub peer_addr: [Mutex<Option<SocketAddr>>; 2],
}

impl ChannelShared {
    pub fn new(id: ChannelId, dirs: [DirectionState; 2]) -> Arc<ChannelShared> {
        Arc::new(ChannelShared {
            id,
            state: AtomicU8::new(ChannelState::Handshaking.raw()),
            dirs,
            outstanding: Arc::new(AtomicU32::new(0)),
            committed: AtomicU32::new(0),
            rollback_events: AtomicU32::new(0),
            orig_dst: Mutex::new(None),
            peer_addr: [Mutex::new(None), Mutex::new(None)],
        })
    }

    pub fn state(&self) -> ChannelState {
        ChannelState::from_raw(self.state.load(Ordering::Acquire))
    }

    pub fn set_state(&self, state: ChannelState) {
        self.state.store(state.raw(), Ordering::Release);
    }

    /// CAS used to make close/teardown once-only.
    pub fn try_set_state(&self, from: ChannelState, to: ChannelState) -> bool {
        self.state
            .compare_exchange(from.raw(), to.raw(), Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    pub fn dir(&self, index: usize) -> &DirectionState {
        &self.dirs[index]
    }

    pub fn is_open(&self) -> bool {
        matches!(self.state(), ChannelState::Active | ChannelState::Handshaking)
    }

    /// Wake every waiter on both directions.
    pub fn wake_all(&self) {
        for dir in &self.dirs {
            dir.progress.bump();
        }
    }
}
