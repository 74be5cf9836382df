//! Socket-like channels over shared-memory record chains.
//!
//! The control path (establishment, close, metadata) runs over an ordinary
//! TCP socket; the data path runs over GShm record chains when the allowlist
//! permits and both sides run the library, and falls back to the socket
//! otherwise. Steady-state GShm transfers make no data-path syscalls; only
//! the fault and notify paths involve the broker.

pub mod allowlist;
pub mod handshake;
pub mod state;

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::arena::{ArenaError, ClaimGuard};
use crate::broker::{BrokerError, BrokerMsg, StatusChange, StatusKind, Worker};
use crate::gshm::{monotonic_nanos, AccessGate, AccessKind, GshmError};
use crate::unapi::{
    forced_mode, NotifyEvent, NotifyMask, NotifyMode, NotifyToken, PollController, PollMode,
    TokenCell, TokenKind, UnapiError,
};
use crate::RecordId;
use allowlist::Allowlist;
use handshake::{Frame, NakReason, PeekOutcome};
use state::{ChannelShared, ChannelState, DirectionState};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("channel is closed")]
    Closed,
    #[error("operation would block")]
    WouldBlock,
    #[error("claim was rate-limited")]
    RateLimited,
    #[error("unknown metadata key {0:?}")]
    UnknownMetadataKey(String),
    #[error("metadata {0:?} is not available on this channel")]
    MetadataUnavailable(&'static str),
    #[error("operation requires a shared-memory channel")]
    NotGshm,
    #[error(transparent)]
    Unapi(#[from] UnapiError),
    #[error(transparent)]
    Gshm(#[from] GshmError),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error("broker: {0}")]
    Broker(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<BrokerError> for ChannelError {
    fn from(e: BrokerError) -> ChannelError {
        match e {
            BrokerError::Arena(a) => ChannelError::Arena(a),
            BrokerError::Gshm(g) => ChannelError::Gshm(g),
            BrokerError::Unapi(u) => ChannelError::Unapi(u),
            other => ChannelError::Broker(other.to_string()),
        }
    }
}

/// How the data path waits when it cannot make progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NotifyPreference {
    /// Always block via a sync notify token.
    Blocking,
    /// Never wait: short writes and `WouldBlock`.
    NonBlocking,
    /// Poll while traffic flows, switch to notification when idle.
    Adaptive,
}

#[derive(Clone)]
pub struct ChannelConfig {
    pub allowlist: Arc<Allowlist>,
    pub notify: NotifyPreference,
    pub handshake_timeout: Duration,
    /// Pre-rewrite destination recorded by the namespace plane for redirected
    /// connections; conveyed to the acceptor during the handshake.
    pub orig_dst: Option<SocketAddr>,
    /// Post a yield hint to the broker after each speculative claim (commit
    /// point); disabling models a worker that never yields, leaving the
    /// receiver fault as the only commit trigger besides the tick.
    pub hint_claims: bool,
}

impl Default for ChannelConfig {
    fn default() -> ChannelConfig {
        ChannelConfig {
            allowlist: Arc::new(Allowlist::deny_all()),
            notify: NotifyPreference::Adaptive,
            handshake_timeout: Duration::from_millis(100),
            orig_dst: None,
            hint_claims: true,
        }
    }
}

impl ChannelConfig {
    pub fn permissive() -> ChannelConfig {
        ChannelConfig {
            allowlist: Arc::new(Allowlist::allow_all()),
            ..ChannelConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FallbackReason {
    /// Allowlist denied the shared-memory path (silent fallback).
    Denied,
    /// Peer never spoke the handshake protocol.
    PeerNotHandshaking,
    /// Handshake timed out.
    Timeout,
    /// Peer refused: version/segment mismatch or its own allowlist.
    Refused(NakReason),
    /// Handshake succeeded but the peer runtime is unreachable in-process.
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetadataValue {
    Addr(SocketAddr),
    Count(u64),
    Text(String),
}

/// Wall-clock time spent in poll loops vs blocked in notify waits.
#[derive(Default)]
pub struct WaitStats {
    pub poll_ns: AtomicU64,
    pub intr_ns: AtomicU64,
}

enum DataPath {
    Gshm(Arc<ChannelShared>),
    Fallback,
}

enum WaitOutcome {
    Ready,
    WouldBlock,
    Closed,
}

/// One endpoint of a channel.
pub struct ChannelEnd {
    worker: Worker,
    side: usize,
    path: DataPath,
    control: TcpStream,
    peer: SocketAddr,
    cfg: ChannelConfig,
    gate: Option<AccessGate>,
    claim_guard: Option<ClaimGuard>,
    controller: Mutex<PollController>,
    orig_dst: Option<SocketAddr>,
    fallback_reason: Option<FallbackReason>,
    stats: Arc<WaitStats>,
    data_syscalls: Arc<AtomicU64>,
    closed_local: bool,
}

impl ChannelEnd {
    fn new_gshm(
        worker: Worker,
        side: usize,
        ctl: Arc<ChannelShared>,
        control: TcpStream,
        peer: SocketAddr,
        cfg: ChannelConfig,
        orig_dst: Option<SocketAddr>,
    ) -> ChannelEnd {
        let runtime = worker.runtime.clone();
        let gate = AccessGate::new(
            runtime.segment().clone(),
            runtime.permissions().clone(),
            runtime.fault_sink(),
        );
        let claim_guard = worker.claim_guard(ctl.outstanding.clone());
        let controller = PollController::new(&runtime.shared().unapi);
        ChannelEnd {
            worker,
            side,
            path: DataPath::Gshm(ctl),
            control,
            peer,
            cfg,
            gate: Some(gate),
            claim_guard: Some(claim_guard),
            controller: Mutex::new(controller),
            orig_dst,
            fallback_reason: None,
            stats: Arc::new(WaitStats::default()),
            data_syscalls: Arc::new(AtomicU64::new(0)),
            closed_local: false,
        }
    }

    fn new_fallback(
        worker: Worker,
        side: usize,
        control: TcpStream,
        peer: SocketAddr,
        cfg: ChannelConfig,
        reason: FallbackReason,
    ) -> Result<ChannelEnd, ChannelError> {
        control.set_read_timeout(None)?;
        if cfg.notify == NotifyPreference::NonBlocking {
            control.set_nonblocking(true)?;
        }
        let controller = PollController::new(&worker.runtime.shared().unapi);
        Ok(ChannelEnd {
            worker,
            side,
            path: DataPath::Fallback,
            control,
            peer,
            cfg: cfg.clone(),
            gate: None,
            claim_guard: None,
            controller: Mutex::new(controller),
            orig_dst: cfg.orig_dst,
            fallback_reason: Some(reason),
            stats: Arc::new(WaitStats::default()),
            data_syscalls: Arc::new(AtomicU64::new(0)),
            closed_local: false,
        })
    }

    pub fn is_gshm(&self) -> bool {
        matches!(self.path, DataPath::Gshm(_))
    }

    pub fn fallback_reason(&self) -> Option<FallbackReason> {
        self.fallback_reason
    }

    pub fn channel_id(&self) -> Option<crate::ChannelId> {
        match &self.path {
            DataPath::Gshm(ctl) => Some(ctl.id),
            DataPath::Fallback => None,
        }
    }

    pub fn state(&self) -> ChannelState {
        match &self.path {
            DataPath::Gshm(ctl) => ctl.state(),
            DataPath::Fallback => {
                if self.closed_local {
                    ChannelState::Closed
                } else {
                    ChannelState::Active
                }
            }
        }
    }

    pub fn principal(&self) -> crate::PrincipalId {
        self.worker.principal
    }

    pub fn wait_stats(&self) -> &Arc<WaitStats> {
        &self.stats
    }

    /// Data-path syscalls made so far (zero on GShm channels outside the
    /// fault/notify paths).
    pub fn data_path_syscalls(&self) -> u64 {
        self.data_syscalls.load(Ordering::Acquire)
    }

    fn shared(&self) -> Option<&Arc<ChannelShared>> {
        match &self.path {
            DataPath::Gshm(ctl) => Some(ctl),
            DataPath::Fallback => None,
        }
    }

    fn outbound(&self) -> usize {
        self.side
    }

    fn inbound(&self) -> usize {
        1 - self.side
    }

    // -- data path ----------------------------------------------------------

    pub fn write(&mut self, buf: &[u8]) -> Result<usize, ChannelError> {
        if buf.is_empty() {
            return Ok(0);
        }
        match &self.path {
            DataPath::Gshm(ctl) => self.write_gshm(ctl.clone(), buf),
            DataPath::Fallback => self.write_fallback(buf),
        }
    }

    pub fn read(&mut self, buf: &mut [u8]) -> Result<usize, ChannelError> {
        if buf.is_empty() {
            return Ok(0);
        }
        match &self.path {
            DataPath::Gshm(ctl) => self.read_gshm(ctl.clone(), buf),
            DataPath::Fallback => self.read_fallback(buf),
        }
    }

    fn write_gshm(&self, ctl: Arc<ChannelShared>, buf: &[u8]) -> Result<usize, ChannelError> {
        let dir_idx = self.outbound();
        let dir = &ctl.dirs[dir_idx];
        let segment = self.worker.runtime.segment().clone();
        let record_size = self.worker.arena.record_size() as usize;
        let mut written = 0usize;
        loop {
            if ctl.state() != ChannelState::Active {
                if written > 0 {
                    return Ok(written);
                }
                return Err(ChannelError::Closed);
            }
            if ctl.rollback_events.swap(0, Ordering::AcqRel) > 0 {
                return Err(ChannelError::RateLimited);
            }

            let target = {
                let mut chain = dir.chain.lock().expect("chain poisoned");
                if chain.is_empty() {
                    // torn down under us
                    if written > 0 {
                        return Ok(written);
                    }
                    return Err(ChannelError::Closed);
                }
                let mut cur = self.write_position(&ctl, dir, &chain);
                // skip past filled records
                let mut meta = segment.meta(cur)?;
                while meta.write_cursor() == meta.capacity() {
                    match meta.next_record() {
                        Some(next) => {
                            cur = next;
                            meta = segment.meta(cur)?;
                        }
                        None => break,
                    }
                }
                if meta.write_cursor() < meta.capacity() {
                    dir.write_rec.store(cur.0, Ordering::Release);
                    dir.write_rec_seq.store(meta.seq(), Ordering::Release);
                    let wcur = meta.write_cursor();
                    Some((cur, wcur, (meta.capacity() - wcur) as usize))
                } else if dir.local_parked.swap(false, Ordering::AcqRel) {
                    // the drained local record re-enters at this boundary
                    chain.push_tail(&segment, dir.local_record);
                    let meta = segment.meta(dir.local_record)?;
                    dir.write_rec.store(dir.local_record.0, Ordering::Release);
                    dir.write_rec_seq.store(meta.seq(), Ordering::Release);
                    Some((dir.local_record, 0, meta.capacity() as usize))
                } else {
                    // one claim batch covers the rest of this write call
                    let remaining = buf.len() - written;
                    let desired = remaining.div_ceil(record_size).clamp(1, 16);
                    let guard = self.claim_guard.as_ref().expect("gshm end has guard");
                    let mut claimed = None;
                    for n in [desired, 1] {
                        match self.worker.arena.speculative_claim_chained(
                            ctl.id,
                            n,
                            guard,
                            &mut chain,
                        ) {
                            Ok(recs) => {
                                claimed = Some(recs);
                                break;
                            }
                            Err(ArenaError::ArenaExhausted { .. })
                            | Err(ArenaError::RateLimited { .. }) => {
                                if n == 1 {
                                    break;
                                }
                            }
                            Err(e) => return Err(e.into()),
                        }
                    }
                    match claimed {
                        Some(recs) => {
                            let first = recs[0];
                            let meta = segment.meta(first)?;
                            dir.write_rec.store(first.0, Ordering::Release);
                            dir.write_rec_seq.store(meta.seq(), Ordering::Release);
                            let cap = meta.capacity() as usize;
                            drop(chain);
                            if self.cfg.hint_claims
                                && !self.worker.hint_pending().swap(true, Ordering::AcqRel)
                            {
                                // commit point: yield hint so the broker
                                // ratifies the claims before the receiver
                                // usually reaches them
                                let _ = self
                                    .worker
                                    .broker
                                    .sender()
                                    .send(BrokerMsg::ClaimHint(self.worker.arena.worker()));
                            }
                            Some((first, 0, cap))
                        }
                        None => None,
                    }
                }
            };

            match target {
                Some((rec, wcur, space)) => {
                    self.gated(&ctl, dir, rec, AccessKind::Write)?;
                    let n = space.min(buf.len() - written);
                    segment.write_record(rec, wcur, &buf[written..written + n])?;
                    segment.meta(rec)?.advance_write_cursor(n as u32);
                    let prev = dir.written_total.fetch_add(n as u64, Ordering::Release);
                    written += n;
                    // wake on the empty→nonempty edge; a reader parking later
                    // re-checks the condition after registering
                    let was_empty = prev == dir.read_total.load(Ordering::Acquire);
                    if was_empty && dir.reader_parked.load(Ordering::Acquire) > 0 {
                        dir.progress.bump();
                    }
                    if dir.reader_waiting.load(Ordering::Acquire) > 0 {
                        self.send_status(&ctl, dir_idx, StatusKind::Readable);
                    }
                    if written == buf.len() {
                        return Ok(written);
                    }
                }
                None => {
                    if self.cfg.notify == NotifyPreference::NonBlocking {
                        if written > 0 {
                            return Ok(written);
                        }
                        return Err(ChannelError::WouldBlock);
                    }
                    match self.wait_dir(&ctl, dir_idx, NotifyMask::W)? {
                        WaitOutcome::Ready => continue,
                        WaitOutcome::WouldBlock => {
                            if written > 0 {
                                return Ok(written);
                            }
                            return Err(ChannelError::WouldBlock);
                        }
                        WaitOutcome::Closed => {
                            if written > 0 {
                                return Ok(written);
                            }
                            return Err(ChannelError::Closed);
                        }
                    }
                }
            }
        }
    }

    fn read_gshm(&self, ctl: Arc<ChannelShared>, buf: &mut [u8]) -> Result<usize, ChannelError> {
        let dir_idx = self.inbound();
        let dir = &ctl.dirs[dir_idx];
        let segment = self.worker.runtime.segment().clone();
        let mut got = 0usize;
        let mut to_release: Vec<crate::RecordId> = Vec::new();
        let result = loop {
            let head = {
                let chain = dir.chain.lock().expect("chain poisoned");
                chain.head()
            };
            let Some(rec) = head else {
                // torn down while we were between iterations
                break Ok(got);
            };
            let (rcur, wcur, cap) = {
                let meta = segment.meta(rec)?;
                (meta.read_cursor(), meta.write_cursor(), meta.capacity())
            };

            if rcur < wcur {
                if got > 0 {
                    // never block with bytes already in hand
                    if self
                        .worker
                        .runtime
                        .permissions()
                        .check_access(self.worker.principal, rec, AccessKind::Read)
                        .is_err()
                    {
                        break Ok(got);
                    }
                } else {
                    self.flush_releases(&ctl, &mut to_release)?;
                    self.gated(&ctl, dir, rec, AccessKind::Read)?;
                }
                let n = ((wcur - rcur) as usize).min(buf.len() - got);
                segment.read_record(rec, rcur, &mut buf[got..got + n])?;
                segment.meta(rec)?.advance_read_cursor(n as u32);
                dir.read_total.fetch_add(n as u64, Ordering::Release);
                got += n;
                if rcur + n as u32 == cap {
                    if let Some(freed) = self.roll_head(&ctl, dir_idx, rec)? {
                        to_release.push(freed);
                    }
                    // a roll opens write space (recycled local or a release
                    // about to land); wake a parked writer
                    if dir.writer_parked.load(Ordering::Acquire) > 0 {
                        dir.progress.bump();
                    }
                }
                if dir.writer_waiting.load(Ordering::Acquire) > 0 {
                    self.send_status(&ctl, dir_idx, StatusKind::Writable);
                }
                if got == buf.len() {
                    break Ok(got);
                }
                continue;
            }

            // fully consumed full record left as head (e.g. reader stopped
            // exactly at the boundary): roll it and retry
            if rcur == cap && wcur == cap {
                if let Some(freed) = self.roll_head(&ctl, dir_idx, rec)? {
                    to_release.push(freed);
                }
                continue;
            }

            if got > 0 {
                break Ok(got);
            }
            match ctl.state() {
                ChannelState::Closed => break Ok(0),
                ChannelState::Draining => {
                    if dir.drained() {
                        self.flush_releases(&ctl, &mut to_release)?;
                        self.maybe_finalize(&ctl)?;
                        break Ok(0);
                    }
                    // writer bytes are still in flight; retry
                    std::hint::spin_loop();
                }
                ChannelState::Active | ChannelState::Handshaking => {
                    // return claimable records before sleeping
                    self.flush_releases(&ctl, &mut to_release)?;
                    match self.wait_dir(&ctl, dir_idx, NotifyMask::R)? {
                        WaitOutcome::Ready => {}
                        WaitOutcome::WouldBlock => break Err(ChannelError::WouldBlock),
                        WaitOutcome::Closed => {}
                    }
                }
            }
        };
        self.flush_releases(&ctl, &mut to_release)?;
        result
    }

    /// Hand fully consumed arena records back to their home arenas in one
    /// broker call per arena.
    fn flush_releases(
        &self,
        ctl: &Arc<ChannelShared>,
        pending: &mut Vec<crate::RecordId>,
    ) -> Result<(), ChannelError> {
        if pending.is_empty() {
            return Ok(());
        }
        let segment = self.worker.runtime.segment();
        while let Some(&first) = pending.first() {
            let home = segment.meta(first)?.home_arena();
            let batch: Vec<crate::RecordId> = {
                let mut batch = Vec::new();
                pending.retain(|rec| {
                    let same = segment
                        .meta(*rec)
                        .ok()
                        .and_then(|m| m.home_arena())
                        == home;
                    if same {
                        batch.push(*rec);
                    }
                    !same
                });
                batch
            };
            let broker = home
                .and_then(|w| self.worker.runtime.broker_for_worker(w))
                .unwrap_or_else(|| self.worker.broker.clone());
            broker.release_unchained(ctl.id, &batch)?;
        }
        Ok(())
    }

    /// Pop a fully consumed full record off the chain head: the local record
    /// is recycled (re-chained at a record boundary, or parked until the
    /// writer reaches one); an arena record is returned for release.
    fn roll_head(
        &self,
        ctl: &Arc<ChannelShared>,
        dir_idx: usize,
        rec: crate::RecordId,
    ) -> Result<Option<crate::RecordId>, ChannelError> {
        let dir = &ctl.dirs[dir_idx];
        let segment = self.worker.runtime.segment();
        let mut chain = dir.chain.lock().expect("chain poisoned");
        if chain.head() != Some(rec) {
            return Ok(None);
        }
        let meta = segment.meta(rec)?;
        if meta.read_cursor() != meta.capacity() || meta.read_cursor() != meta.write_cursor() {
            return Ok(None);
        }
        chain.pop_head(segment);
        // a popped record is no longer a valid write position
        if dir.write_rec.load(Ordering::Acquire) == rec.0 {
            dir.write_rec.store(crate::RecordId::NONE_RAW, Ordering::Release);
        }
        let released = if rec == dir.local_record {
            meta.reset_cursors();
            dir.local_parked.store(true, Ordering::Release);
            None
        } else {
            Some(rec)
        };
        // Re-attach the parked local record only at a record boundary: an
        // empty chain or a full tail. Appending it behind a partially written
        // tail would strand those bytes, since the writer walks forward.
        if dir.local_parked.load(Ordering::Acquire) {
            let boundary = match chain.tail() {
                None => true,
                Some(tail) => {
                    let t = segment.meta(tail)?;
                    t.write_cursor() == t.capacity()
                }
            };
            if boundary {
                dir.local_parked.store(false, Ordering::Release);
                chain.push_tail(segment, dir.local_record);
            }
        }
        debug_assert!(!chain.is_empty(), "chain left empty by roll");
        Ok(released)
    }

    /// Check one record access through the gate. A fault is routed to the
    /// broker and is itself a commit point: the accessor immediately drives a
    /// commit of the record's home arena under the broker's serialization
    /// (granting read on newly committed records), then rechecks. Faults the
    /// commit cannot resolve (notify-on-RW revocations) wait for the broker
    /// loop to restore access.
    fn gated(
        &self,
        ctl: &Arc<ChannelShared>,
        dir: &DirectionState,
        rec: crate::RecordId,
        kind: AccessKind,
    ) -> Result<(), ChannelError> {
        let gate = self.gate.as_ref().expect("gshm end has gate");
        let mut seen = dir.progress.current();
        if gate.check(self.worker.principal, rec, kind)?.is_ok() {
            return Ok(());
        }
        let perms = self.worker.runtime.permissions();
        let segment = self.worker.runtime.segment();
        if let Some(home) = segment.meta(rec)?.home_arena() {
            if let Some(broker) = self.worker.runtime.broker_for_worker(home) {
                let _ = broker.commit_worker(home);
                if perms.check_access(self.worker.principal, rec, kind).is_ok() {
                    return Ok(());
                }
            }
        }
        loop {
            seen = dir.progress.wait_past(seen, crate::broker::FAULT_RETRY_WAIT);
            if perms.check_access(self.worker.principal, rec, kind).is_ok() {
                return Ok(());
            }
            if ctl.state() == ChannelState::Closed {
                return Err(ChannelError::Closed);
            }
        }
    }

    fn send_status(&self, ctl: &Arc<ChannelShared>, dir_idx: usize, kind: StatusKind) {
        let dir = &ctl.dirs[dir_idx];
        let target = match kind {
            StatusKind::Readable => dir.receiver_worker,
            StatusKind::Writable => dir.sender_worker,
            StatusKind::Closed => dir.receiver_worker,
        };
        self.worker.runtime.shared().route_to_worker(
            target,
            BrokerMsg::Status(StatusChange {
                channel: ctl.id,
                dir: dir_idx,
                kind,
            }),
        );
    }

    /// Where the writer resumes: the stored write position when it is still
    /// this channel's, still the same claim incarnation, and not the parked
    /// local record; otherwise the chain head. Caller holds the chain lock.
    fn write_position(
        &self,
        ctl: &Arc<ChannelShared>,
        dir: &DirectionState,
        chain: &crate::arena::Chain,
    ) -> RecordId {
        let segment = self.worker.runtime.segment();
        let raw = dir.write_rec.load(Ordering::Acquire);
        let cur = RecordId(raw);
        let parked_local =
            cur == dir.local_record && dir.local_parked.load(Ordering::Acquire);
        let valid = raw != crate::RecordId::NONE_RAW
            && !parked_local
            && segment.meta(cur).is_ok_and(|m| {
                m.owner_channel() == Some(ctl.id)
                    && m.seq() == dir.write_rec_seq.load(Ordering::Acquire)
            });
        if valid {
            cur
        } else {
            chain.head().unwrap_or(dir.local_record)
        }
    }

    /// Cheap condition probe used by the wait loops.
    fn probe(&self, ctl: &Arc<ChannelShared>, dir_idx: usize, mask: NotifyMask) -> bool {
        if ctl.state() != ChannelState::Active {
            return true;
        }
        let dir = &ctl.dirs[dir_idx];
        if mask.contains_r() {
            return dir.readable();
        }
        // writable: space ahead of the write position, the parked local
        // record, or a claimable record
        if dir.local_parked.load(Ordering::Acquire) {
            return true;
        }
        let segment = self.worker.runtime.segment();
        {
            let chain = dir.chain.lock().expect("chain poisoned");
            if chain.is_empty() {
                return true; // torn down: caller rechecks state
            }
            let mut meta = segment
                .meta(self.write_position(ctl, dir, &chain))
                .expect("chain record");
            loop {
                if meta.write_cursor() < meta.capacity() {
                    return true;
                }
                match meta.next_record() {
                    Some(next) => meta = segment.meta(next).expect("chain record"),
                    None => break,
                }
            }
        }
        let guard = self.claim_guard.as_ref().expect("gshm end has guard");
        self.worker.arena.free_count() > 0
            && ctl.outstanding.load(Ordering::Acquire) < guard.max_per_channel
            && self.worker.process_outstanding() < guard.max_per_process
    }

    fn wait_dir(
        &self,
        ctl: &Arc<ChannelShared>,
        dir_idx: usize,
        mask: NotifyMask,
    ) -> Result<WaitOutcome, ChannelError> {
        match self.cfg.notify {
            NotifyPreference::NonBlocking => Ok(WaitOutcome::WouldBlock),
            NotifyPreference::Blocking => Ok(self.park_until(ctl, dir_idx, mask)),
            NotifyPreference::Adaptive => match forced_mode() {
                Some(PollMode::Interrupt) => Ok(self.park_until(ctl, dir_idx, mask)),
                Some(PollMode::Polling) => Ok(self.spin_until(ctl, dir_idx, mask, false)),
                None => {
                    let mode = self.controller.lock().expect("controller poisoned").mode();
                    match mode {
                        PollMode::Interrupt => {
                            let out = self.park_until(ctl, dir_idx, mask);
                            self.controller
                                .lock()
                                .expect("controller poisoned")
                                .step(true, monotonic_nanos());
                            Ok(out)
                        }
                        PollMode::Polling => Ok(self.spin_until(ctl, dir_idx, mask, true)),
                    }
                }
            },
        }
    }

    /// Busy-poll the condition. With `adaptive` set, the controller counts
    /// idle spins and budget exhaustion hands over to the parked wait.
    fn spin_until(
        &self,
        ctl: &Arc<ChannelShared>,
        dir_idx: usize,
        mask: NotifyMask,
        adaptive: bool,
    ) -> WaitOutcome {
        let start = Instant::now();
        let mut spins = 0u64;
        loop {
            if self.probe(ctl, dir_idx, mask) {
                self.stats
                    .poll_ns
                    .fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
                if adaptive {
                    self.controller
                        .lock()
                        .expect("controller poisoned")
                        .step(true, monotonic_nanos());
                }
                return if ctl.state() == ChannelState::Active {
                    WaitOutcome::Ready
                } else {
                    WaitOutcome::Closed
                };
            }
            spins += 1;
            std::hint::spin_loop();
            if spins.is_multiple_of(64) {
                std::thread::yield_now();
            }
            if adaptive {
                let flip = self
                    .controller
                    .lock()
                    .expect("controller poisoned")
                    .step(false, monotonic_nanos());
                if flip == Some(PollMode::Interrupt) {
                    self.stats
                        .poll_ns
                        .fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
                    return self.park_until(ctl, dir_idx, mask);
                }
            }
        }
    }

    /// Interrupt-style wait on the direction's progress signal: register as
    /// parked, re-check the condition against a generation read beforehand,
    /// and sleep until the opposite side (or the broker) bumps it.
    fn park_until(&self, ctl: &Arc<ChannelShared>, dir_idx: usize, mask: NotifyMask) -> WaitOutcome {
        let dir = &ctl.dirs[dir_idx];
        let counter = if mask.contains_r() {
            &dir.reader_parked
        } else {
            &dir.writer_parked
        };
        counter.fetch_add(1, Ordering::AcqRel);
        let start = Instant::now();
        let outcome = loop {
            let seen = dir.progress.current();
            if self.probe(ctl, dir_idx, mask) {
                break if ctl.state() == ChannelState::Active {
                    WaitOutcome::Ready
                } else {
                    WaitOutcome::Closed
                };
            }
            dir.progress.wait_past(seen, Duration::from_millis(25));
        };
        counter.fetch_sub(1, Ordering::AcqRel);
        self.stats
            .intr_ns
            .fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        outcome
    }

    // -- fallback data path ---------------------------------------------------

    fn write_fallback(&mut self, buf: &[u8]) -> Result<usize, ChannelError> {
        if self.closed_local {
            return Err(ChannelError::Closed);
        }
        self.data_syscalls.fetch_add(1, Ordering::Relaxed);
        match self.control.write(buf) {
            Ok(0) => Err(ChannelError::WouldBlock),
            Ok(n) => Ok(n),
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => Err(ChannelError::WouldBlock),
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Err(ChannelError::Closed),
            Err(e) => Err(e.into()),
        }
    }

    fn read_fallback(&mut self, buf: &mut [u8]) -> Result<usize, ChannelError> {
        self.data_syscalls.fetch_add(1, Ordering::Relaxed);
        match self.control.read(buf) {
            Ok(n) => Ok(n),
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => Err(ChannelError::WouldBlock),
            Err(e) => Err(e.into()),
        }
    }

    // -- lifecycle -------------------------------------------------------------

    /// Initiate channel-wide close. With residue, the channel drains first;
    /// once both directions are consumed (or on crash teardown) every chain
    /// record is released, local records return to the pool, and permissions
    /// are revoked. Idempotent.
    pub fn close(&mut self) -> Result<(), ChannelError> {
        if self.closed_local {
            return Ok(());
        }
        self.closed_local = true;
        match &self.path {
            DataPath::Gshm(ctl) => {
                let ctl = ctl.clone();
                if ctl.try_set_state(ChannelState::Active, ChannelState::Draining)
                    || ctl.try_set_state(ChannelState::Handshaking, ChannelState::Draining)
                {
                    for dir_idx in 0..2 {
                        self.send_status(&ctl, dir_idx, StatusKind::Closed);
                    }
                    self.worker.broker.channel_closing(ctl.id);
                    ctl.wake_all();
                }
                self.maybe_finalize(&ctl)?;
                let _ = self.control.shutdown(Shutdown::Both);
            }
            DataPath::Fallback => {
                let _ = self.control.shutdown(Shutdown::Both);
            }
        }
        Ok(())
    }

    fn maybe_finalize(&self, ctl: &Arc<ChannelShared>) -> Result<(), ChannelError> {
        if ctl.state() == ChannelState::Draining
            && ctl.dirs.iter().all(|d| d.drained())
            && ctl.try_set_state(ChannelState::Draining, ChannelState::Closed)
        {
            self.worker.runtime.teardown_channel_all(ctl.id, false)?;
        }
        Ok(())
    }

    // -- control path ------------------------------------------------------------

    /// Control-path metadata queries; never touches the data path.
    pub fn get_metadata(&self, key: &str) -> Result<MetadataValue, ChannelError> {
        match key {
            "peer_addr" => Ok(MetadataValue::Addr(self.peer)),
            "original_dst" => {
                let from_ctl = self
                    .shared()
                    .and_then(|ctl| *ctl.orig_dst.lock().expect("orig_dst poisoned"));
                from_ctl
                    .or(self.orig_dst)
                    .map(MetadataValue::Addr)
                    .ok_or(ChannelError::MetadataUnavailable("original_dst"))
            }
            "occupancy" => match self.shared() {
                Some(ctl) => Ok(MetadataValue::Count(
                    ctl.dirs[self.outbound()].occupancy(),
                )),
                None => Err(ChannelError::MetadataUnavailable("occupancy")),
            },
            "transport" => Ok(MetadataValue::Text(
                if self.is_gshm() { "gshm" } else { "fallback" }.to_string(),
            )),
            other => Err(ChannelError::UnknownMetadataKey(other.to_string())),
        }
    }

    // -- notification API -----------------------------------------------------------

    /// Register interest in the masked conditions. `Sync` blocks until one
    /// holds (returning the fired token); `Async` returns immediately and the
    /// dispatcher fires the token later.
    pub fn enable_notify(
        &self,
        mode: NotifyMode,
        mask: NotifyMask,
    ) -> Result<NotifyToken, ChannelError> {
        self.enable_notify_inner(mode, mask, None)
    }

    /// Async registration with a callback invoked by the dispatcher.
    pub fn enable_notify_callback(
        &self,
        mask: NotifyMask,
        callback: Box<dyn Fn(NotifyEvent) + Send + Sync>,
    ) -> Result<NotifyToken, ChannelError> {
        self.enable_notify_inner(NotifyMode::Async, mask, Some(callback))
    }

    fn enable_notify_inner(
        &self,
        mode: NotifyMode,
        mask: NotifyMask,
        callback: Option<Box<dyn Fn(NotifyEvent) + Send + Sync>>,
    ) -> Result<NotifyToken, ChannelError> {
        if mask.is_empty() {
            return Err(UnapiError::EmptyMask.into());
        }
        match &self.path {
            DataPath::Gshm(ctl) => {
                let cell = TokenCell::new(
                    self.worker.runtime.shared().next_token_id(),
                    ctl.id,
                    self.worker.principal,
                    mode,
                    mask,
                    TokenKind::Condition,
                    callback,
                );
                self.worker.broker.arm_token(cell.clone())?;
                self.worker.broker.try_complete_ready(ctl);
                let token = NotifyToken::new(cell.clone());
                if mode == NotifyMode::Sync {
                    let start = Instant::now();
                    let _ = cell.wait(None);
                    self.stats
                        .intr_ns
                        .fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
                }
                Ok(token)
            }
            DataPath::Fallback => self.notify_fallback(mode, mask, callback),
        }
    }

    /// Fallback channels wait on the socket itself.
    fn notify_fallback(
        &self,
        mode: NotifyMode,
        mask: NotifyMask,
        callback: Option<Box<dyn Fn(NotifyEvent) + Send + Sync>>,
    ) -> Result<NotifyToken, ChannelError> {
        let cell = TokenCell::new(
            self.worker.runtime.shared().next_token_id(),
            crate::ChannelId(0),
            self.worker.principal,
            mode,
            mask,
            TokenKind::Condition,
            callback,
        );
        let token = NotifyToken::new(cell.clone());
        match mode {
            NotifyMode::Sync => {
                let event = poll_socket(&self.control, mask, None)?;
                cell.fire(event);
            }
            NotifyMode::Async => {
                let sock = self.control.try_clone()?;
                std::thread::spawn(move || {
                    if let Ok(event) = poll_socket(&sock, mask, None) {
                        if cell.fire(event) {
                            cell.run_callback(event);
                        }
                    }
                });
            }
        }
        Ok(token)
    }

    /// Disable a token: no delivery fires afterwards; a Notify-on-RW arming
    /// has its revoked permissions restored.
    pub fn disable_notify(&self, token: &NotifyToken) {
        token.cell().disable();
        self.worker.broker.finish_token(token.cell());
        self.worker.broker.restore_norw(token.id());
    }

    /// Tell the peer's broker about a status change it may be blocked on.
    pub fn proactive_notify(&self, kind: StatusKind) {
        let Some(ctl) = self.shared().cloned() else {
            return;
        };
        match kind {
            StatusKind::Readable => self.send_status(&ctl, self.outbound(), kind),
            StatusKind::Writable => self.send_status(&ctl, self.inbound(), kind),
            StatusKind::Closed => {
                self.send_status(&ctl, 0, kind);
                self.send_status(&ctl, 1, kind);
            }
        }
    }

    /// Notify-on-RW: revoke the peer's access so its next touch faults and
    /// completes the returned token; permissions are restored on completion
    /// (or on `disable_notify`).
    pub fn notify_on_rw(&self, mask: NotifyMask) -> Result<NotifyToken, ChannelError> {
        let ctl = self.shared().cloned().ok_or(ChannelError::NotGshm)?;
        let cell = TokenCell::new(
            self.worker.runtime.shared().next_token_id(),
            ctl.id,
            self.worker.principal,
            NotifyMode::Sync,
            mask,
            TokenKind::PeerAccess,
            None,
        );
        self.worker.broker.arm_notify_on_rw(&ctl, cell.clone())?;
        Ok(NotifyToken::new(cell))
    }
}

impl Drop for ChannelEnd {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

fn poll_socket(
    sock: &TcpStream,
    mask: NotifyMask,
    timeout: Option<Duration>,
) -> Result<NotifyEvent, ChannelError> {
    use std::os::fd::AsRawFd;
    let mut events: libc::c_short = 0;
    if mask.contains_r() {
        events |= libc::POLLIN;
    }
    if mask.contains_w() {
        events |= libc::POLLOUT;
    }
    let mut fds = libc::pollfd {
        fd: sock.as_raw_fd(),
        events,
        revents: 0,
    };
    let ms = timeout.map(|t| t.as_millis() as libc::c_int).unwrap_or(-1);
    // SAFETY: plain poll(2) on a valid fd.
    let rc = unsafe { libc::poll(&mut fds, 1, ms) };
    if rc < 0 {
        return Err(std::io::Error::last_os_error().into());
    }
    if fds.revents & (libc::POLLHUP | libc::POLLERR) != 0 {
        return Ok(NotifyEvent::Closed);
    }
    if fds.revents & libc::POLLIN != 0 {
        return Ok(NotifyEvent::Readable);
    }
    Ok(NotifyEvent::Writable)
}

// ---------------------------------------------------------------------------
// Establishment
// ---------------------------------------------------------------------------

/// Connect to `remote`. The ordinary socket is always established; the GShm
/// data path activates only when the allowlist permits and the peer completes
/// the handshake within the timeout, otherwise the returned channel runs on
/// the socket (the fallback reason is queryable).
pub fn connect(
    remote: SocketAddr,
    worker: &Worker,
    cfg: ChannelConfig,
) -> Result<ChannelEnd, ChannelError> {
    let mut stream = TcpStream::connect(remote)?;
    stream.set_nodelay(true)?;
    if !cfg.allowlist.permits(&remote.ip().to_string(), remote.port()) {
        return ChannelEnd::new_fallback(
            worker.clone(),
            0,
            stream,
            remote,
            cfg,
            FallbackReason::Denied,
        );
    }
    let runtime = worker.runtime.clone();
    handshake::send_frame(
        &mut stream,
        &Frame::Hello {
            version: handshake::PROTOCOL_VERSION,
            segment: runtime.segment().name().to_string(),
            principal: worker.principal,
            worker: worker.id,
            orig_dst: cfg.orig_dst,
        },
    )?;
    match handshake::peek_frame(&mut stream, cfg.handshake_timeout)? {
        PeekOutcome::Frame(Frame::Ack { channel, .. }) => {
            match runtime.take_pending_channel(channel) {
                Some(ctl) => {
                    handshake::send_frame(&mut stream, &Frame::Ready { channel })?;
                    stream.set_read_timeout(None)?;
                    ctl.set_state(ChannelState::Active);
                    *ctl.peer_addr[0].lock().expect("peer addr poisoned") = Some(remote);
                    let orig = cfg.orig_dst;
                    Ok(ChannelEnd::new_gshm(
                        worker.clone(),
                        0,
                        ctl,
                        stream,
                        remote,
                        cfg,
                        orig,
                    ))
                }
                None => ChannelEnd::new_fallback(
                    worker.clone(),
                    0,
                    stream,
                    remote,
                    cfg,
                    FallbackReason::Unavailable,
                ),
            }
        }
        PeekOutcome::Frame(Frame::Nak { reason }) => ChannelEnd::new_fallback(
            worker.clone(),
            0,
            stream,
            remote,
            cfg,
            FallbackReason::Refused(reason),
        ),
        PeekOutcome::Frame(_) => ChannelEnd::new_fallback(
            worker.clone(),
            0,
            stream,
            remote,
            cfg,
            FallbackReason::PeerNotHandshaking,
        ),
        PeekOutcome::NotHandshake => ChannelEnd::new_fallback(
            worker.clone(),
            0,
            stream,
            remote,
            cfg,
            FallbackReason::PeerNotHandshaking,
        ),
        PeekOutcome::TimedOut => ChannelEnd::new_fallback(
            worker.clone(),
            0,
            stream,
            remote,
            cfg,
            FallbackReason::Timeout,
        ),
    }
}

/// Accepting side of channel establishment.
pub struct ChannelListener {
    tcp: TcpListener,
    worker: Worker,
    cfg: ChannelConfig,
}

impl ChannelListener {
    pub fn bind(
        addr: SocketAddr,
        worker: &Worker,
        cfg: ChannelConfig,
    ) -> Result<ChannelListener, ChannelError> {
        let tcp = TcpListener::bind(addr)?;
        Ok(ChannelListener {
            tcp,
            worker: worker.clone(),
            cfg,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, ChannelError> {
        Ok(self.tcp.local_addr()?)
    }

    pub fn accept(&self) -> Result<ChannelEnd, ChannelError> {
        let (mut stream, peer) = self.tcp.accept()?;
        stream.set_nodelay(true)?;
        let worker = &self.worker;
        let runtime = worker.runtime.clone();
        let cfg = self.cfg.clone();

        match handshake::peek_frame(&mut stream, cfg.handshake_timeout)? {
            PeekOutcome::Frame(Frame::Hello {
                version,
                segment,
                principal: conn_principal,
                worker: conn_worker,
                orig_dst,
            }) => {
                let local_port = self.tcp.local_addr()?.port();
                let reason = if version != handshake::PROTOCOL_VERSION {
                    Some(NakReason::VersionMismatch)
                } else if segment != runtime.segment().name() {
                    Some(NakReason::SegmentMismatch)
                } else if !cfg.allowlist.permits(&peer.ip().to_string(), local_port) {
                    Some(NakReason::Denied)
                } else {
                    None
                };
                if let Some(reason) = reason {
                    handshake::send_frame(&mut stream, &Frame::Nak { reason })?;
                    return ChannelEnd::new_fallback(
                        worker.clone(),
                        1,
                        stream,
                        peer,
                        cfg,
                        FallbackReason::Refused(reason),
                    );
                }

                let id = runtime.next_channel_id();
                let ctl = runtime.build_channel(
                    id,
                    (conn_principal, conn_worker),
                    (worker.principal, worker.id),
                )?;
                if let Some(od) = orig_dst {
                    *ctl.orig_dst.lock().expect("orig_dst poisoned") = Some(od);
                }
                *ctl.peer_addr[1].lock().expect("peer addr poisoned") = Some(peer);
                runtime.register_channel_all(&ctl);
                runtime.stash_pending_channel(ctl.clone());
                handshake::send_frame(
                    &mut stream,
                    &Frame::Ack {
                        channel: id,
                        principal: worker.principal,
                        worker: worker.id,
                        tx_local: ctl.dirs[0].local_record,
                        rx_local: ctl.dirs[1].local_record,
                    },
                )?;
                match handshake::peek_frame(&mut stream, cfg.handshake_timeout)? {
                    PeekOutcome::Frame(Frame::Ready { channel }) if channel == id => {
                        stream.set_read_timeout(None)?;
                        ctl.set_state(ChannelState::Active);
                        let orig = *ctl.orig_dst.lock().expect("orig_dst poisoned");
                        Ok(ChannelEnd::new_gshm(
                            worker.clone(),
                            1,
                            ctl,
                            stream,
                            peer,
                            cfg,
                            orig,
                        ))
                    }
                    _ => {
                        // connector went away or could not attach
                        runtime.take_pending_channel(id);
                        runtime.teardown_channel_all(id, true)?;
                        ChannelEnd::new_fallback(
                            worker.clone(),
                            1,
                            stream,
                            peer,
                            cfg,
                            FallbackReason::Timeout,
                        )
                    }
                }
            }
            PeekOutcome::Frame(_) | PeekOutcome::NotHandshake => ChannelEnd::new_fallback(
                worker.clone(),
                1,
                stream,
                peer,
                cfg,
                FallbackReason::PeerNotHandshaking,
            ),
            PeekOutcome::TimedOut => ChannelEnd::new_fallback(
                worker.clone(),
                1,
                stream,
                peer,
                cfg,
                FallbackReason::Timeout,
            ),
        }
    }
}
