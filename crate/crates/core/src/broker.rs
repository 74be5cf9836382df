//! The kernel stand-in: a single authority per worker group that ratifies
//! speculative claims, owns all permission and record-state mutations (except
//! the speculative Free→Claimed step), routes fault events, and completes
//! notification tokens.
//!
//! A [`Runtime`] owns one segment plus one or more brokers. Each worker is
//! governed by exactly one broker; in the cross-PU profile two brokers share
//! the segment and forward events to each other through the fault/status
//! router, mirroring two kernels cooperating over one interconnect.
//!
//! Commit points: a receiver fault, an explicit claim/yield hint from a
//! worker, and a periodic tick.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::arena::{AllocationPolicy, Arena, ArenaError, ClaimGuard};
use crate::channel::state::{ChannelShared, ChannelState, DirectionState, ProgressSignal};
use crate::gshm::{
    AccessKind, Authority, FaultEvent, FaultSink, GshmError, PermissionMap, RecordState, Segment,
    PERM_READ, PERM_WRITE,
};
use crate::unapi::{NotifyEvent, NotifyMode, TokenCell, UnapiConfig};
use crate::{BrokerId, ChannelId, PrincipalId, RecordId, WorkerId};

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("worker {0} is not registered with this broker")]
    UnknownWorker(WorkerId),
    #[error("channel {0} is not registered with this broker")]
    UnknownChannel(ChannelId),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Gshm(#[from] GshmError),
    #[error(transparent)]
    Unapi(#[from] crate::unapi::UnapiError),
}

/// Messages on a broker's inbound many-producer queue.
pub enum BrokerMsg {
    Fault(FaultEvent),
    Status(StatusChange),
    /// Worker yield / claim notification: commit this worker's pending claims.
    ClaimHint(WorkerId),
    Shutdown,
}

#[derive(Debug, Clone, Copy)]
pub struct StatusChange {
    pub channel: ChannelId,
    pub dir: usize,
    pub kind: StatusKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatusKind {
    Readable,
    Writable,
    Closed,
}

/// Outcome of a commit pass over one arena's claim log.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct CommitReport {
    pub committed: Vec<(ChannelId, RecordId)>,
    pub rolled_back: Vec<(ChannelId, RecordId)>,
}

impl CommitReport {
    pub fn is_empty(&self) -> bool {
        self.committed.is_empty() && self.rolled_back.is_empty()
    }

    fn merge(&mut self, other: CommitReport) {
        self.committed.extend(other.committed);
        self.rolled_back.extend(other.rolled_back);
    }
}

/// Arena-conservation and consistency audit.
#[derive(Debug, Default)]
pub struct AuditReport {
    pub arenas: Vec<ArenaAudit>,
    pub problems: Vec<String>,
}

#[derive(Debug)]
pub struct ArenaAudit {
    pub worker: WorkerId,
    pub free: u32,
    pub chained: u32,
    pub total: u32,
}

impl AuditReport {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

struct NoRwArm {
    cell: Arc<TokenCell>,
    channel: ChannelId,
    revoked: Vec<(PrincipalId, RecordId, AccessKind)>,
}

struct RouterState {
    by_worker: HashMap<WorkerId, Sender<BrokerMsg>>,
    default: Option<Sender<BrokerMsg>>,
}

struct DispatchJob {
    cell: Arc<TokenCell>,
    event: NotifyEvent,
}

/// Segment-wide state shared by every broker of a runtime.
pub struct RuntimeShared {
    pub segment: Arc<Segment>,
    pub perms: Arc<PermissionMap>,
    pub policy: AllocationPolicy,
    pub unapi: UnapiConfig,
    next_worker: AtomicU32,
    next_principal: AtomicU32,
    next_channel: AtomicU64,
    next_token: AtomicU64,
    router: RwLock<RouterState>,
    broker_refs: RwLock<HashMap<WorkerId, std::sync::Weak<Broker>>>,
    fault_count: AtomicU64,
    norw: Mutex<HashMap<u64, NoRwArm>>,
    pending_channels: Mutex<HashMap<ChannelId, Arc<ChannelShared>>>,
    local_pool: Mutex<HashMap<u32, Vec<RecordId>>>,
    dispatch_tx: Mutex<Option<Sender<DispatchJob>>>,
}

impl RuntimeShared {
    pub fn next_token_id(&self) -> u64 {
        self.next_token.fetch_add(1, Ordering::Relaxed)
    }

    /// Total fault events routed since runtime creation.
    pub fn fault_count(&self) -> u64 {
        self.fault_count.load(Ordering::Relaxed)
    }

    fn dispatch(&self, cell: Arc<TokenCell>, event: NotifyEvent) {
        let tx = self.dispatch_tx.lock().expect("dispatch poisoned");
        if let Some(tx) = tx.as_ref() {
            let _ = tx.send(DispatchJob { cell, event });
        }
    }

    /// Queue a message at the broker governing `worker`.
    pub(crate) fn route_to_worker(&self, worker: WorkerId, msg: BrokerMsg) {
        let router = self.router.read().expect("router poisoned");
        let target = router
            .by_worker
            .get(&worker)
            .or(router.default.as_ref());
        if let Some(tx) = target {
            let _ = tx.send(msg);
        }
    }

    fn route_default(&self, msg: BrokerMsg) {
        let router = self.router.read().expect("router poisoned");
        if let Some(tx) = router.default.as_ref() {
            let _ = tx.send(msg);
        }
    }
}

/// Routes fault events to the broker governing the record's home arena.
struct RouterSink {
    shared: Arc<RuntimeShared>,
}

impl FaultSink for RouterSink {
    fn deliver(&self, fault: FaultEvent) {
        self.shared.fault_count.fetch_add(1, Ordering::Relaxed);
        let home = self
            .shared
            .segment
            .meta(fault.record)
            .ok()
            .and_then(|m| m.home_arena());
        match home {
            Some(worker) => self
                .shared
                .route_to_worker(worker, BrokerMsg::Fault(fault)),
            None => self.shared.route_default(BrokerMsg::Fault(fault)),
        }
    }
}

struct ArenaReg {
    arena: Arc<Arena>,
    principal: PrincipalId,
    process_outstanding: Arc<AtomicU32>,
    hint_pending: Arc<std::sync::atomic::AtomicBool>,
    /// Committed records currently claimed from this arena (the per-process
    /// bound under the worker-as-process stand-in).
    committed: AtomicU32,
    /// One ratification pass per arena at a time; keeps the claim log's seq
    /// order intact through a commit.
    commit_gate: Mutex<()>,
    alive: std::sync::atomic::AtomicBool,
}

type TokenKey = (ChannelId, PrincipalId, u8);

/// The broker state machine. All record-state and permission mutations
/// except the speculative claim happen inside these methods; serialization
/// is per resource (per-arena commit gate, per-direction chain locks, the
/// token table mutex) rather than one global lock, so data-path calls from
/// many workers do not convoy.
struct BrokerCore {
    id: BrokerId,
    shared: Arc<RuntimeShared>,
    arenas: RwLock<BTreeMap<WorkerId, Arc<ArenaReg>>>,
    channels: RwLock<BTreeMap<ChannelId, Arc<ChannelShared>>>,
    tokens: Mutex<HashMap<TokenKey, Arc<TokenCell>>>,
}

impl BrokerCore {
    fn arena(&self, worker: WorkerId) -> Result<Arc<ArenaReg>, BrokerError> {
        self.arenas
            .read()
            .expect("arena registry poisoned")
            .get(&worker)
            .cloned()
            .ok_or(BrokerError::UnknownWorker(worker))
    }

    fn channel(&self, id: ChannelId) -> Option<Arc<ChannelShared>> {
        self.channels
            .read()
            .expect("channel registry poisoned")
            .get(&id)
            .cloned()
    }

    /// Drain and ratify one arena's claim log in seq order. Claims that keep
    /// the channel and worker within policy bounds are committed (record
    /// `Committed`, receiver granted read); the rest are unchained, freed
    /// back to the free-list tail, and reported rolled back.
    fn commit_worker(&self, worker: WorkerId) -> Result<CommitReport, BrokerError> {
        let reg = self.arena(worker)?;
        let _gate = reg.commit_gate.lock().expect("commit gate poisoned");
        // accept a fresh hint for claims made after this drain
        reg.hint_pending.store(false, Ordering::Release);
        let entries = reg.arena.drain_claims();
        let mut report = CommitReport::default();
        if entries.is_empty() {
            return Ok(report);
        }
        let policy = &self.shared.policy;
        let segment = self.shared.segment.clone();

        let mut grants: Vec<(PrincipalId, RecordId, u8)> = Vec::new();
        let mut last_seq = 0;
        for entry in entries {
            debug_assert!(entry.seq > last_seq, "claim log out of seq order");
            last_seq = entry.seq;

            let meta = segment.meta(entry.record)?;
            // Stale entries (already released or torn down) are skipped.
            if meta.state() != RecordState::Claimed
                || meta.seq() != entry.seq
                || meta.owner_channel() != Some(entry.channel)
            {
                continue;
            }

            let ctl = self.channel(entry.channel);
            // Atomic bound enforcement: charge first, roll back on overrun.
            let proc_prev = reg.committed.fetch_add(1, Ordering::AcqRel);
            let chan_prev = ctl
                .as_ref()
                .map(|c| c.committed.fetch_add(1, Ordering::AcqRel));
            let within_bounds = proc_prev < policy.max_records_per_process
                && chan_prev.is_none_or(|p| p < policy.max_records_per_channel);

            if within_bounds {
                meta.transition(RecordState::Claimed, RecordState::Committed, Authority::Broker)
                    .expect("claimed record changed state outside broker");
                if let Some(ctl) = &ctl {
                    if let Some(dir) =
                        find_dir_with_record(ctl, &segment, reg.principal, entry.record)
                    {
                        grants.push((ctl.dirs[dir].receiver, entry.record, PERM_READ));
                    }
                }
                report.committed.push((entry.channel, entry.record));
            } else {
                reg.committed.fetch_sub(1, Ordering::AcqRel);
                if let Some(ctl) = &ctl {
                    ctl.committed.fetch_sub(1, Ordering::AcqRel);
                }
                // Roll back: unchain, zero, free to the tail.
                if let Some(ctl) = &ctl {
                    for dir in &ctl.dirs {
                        let mut chain = dir.chain.lock().expect("chain poisoned");
                        if chain.remove(&segment, entry.record) {
                            if dir.write_rec.load(Ordering::Acquire) == entry.record.0 {
                                dir.write_rec
                                    .store(crate::ids::RecordId::NONE_RAW, Ordering::Release);
                            }
                            break;
                        }
                    }
                    ctl.outstanding.fetch_sub(1, Ordering::AcqRel);
                    ctl.rollback_events.fetch_add(1, Ordering::AcqRel);
                }
                reg.process_outstanding.fetch_sub(1, Ordering::AcqRel);
                meta.reset_cursors();
                meta.set_owner_channel(None);
                meta.transition(RecordState::Claimed, RecordState::Free, Authority::Broker)
                    .expect("claimed record changed state outside broker");
                self.shared
                    .perms
                    .retain_only(entry.record, reg.principal, PERM_WRITE);
                reg.arena.push_free_tail(&[entry.record]);
                report.rolled_back.push((entry.channel, entry.record));
            }
        }

        self.shared.perms.grant_batch(&grants);
        // Anything the commit unblocked: retries and armed tokens. Fault
        // waiters are woken by the fault handler itself, so the bump here is
        // only needed when someone is parked or armed.
        let mut woken: Vec<ChannelId> = Vec::new();
        for (channel, _) in report.committed.iter().chain(report.rolled_back.iter()) {
            if woken.contains(channel) {
                continue;
            }
            woken.push(*channel);
            if let Some(ctl) = self.channel(*channel) {
                let interested = ctl.dirs.iter().any(|d| {
                    d.reader_parked.load(Ordering::Acquire) > 0
                        || d.writer_parked.load(Ordering::Acquire) > 0
                        || d.reader_waiting.load(Ordering::Acquire) > 0
                        || d.writer_waiting.load(Ordering::Acquire) > 0
                });
                if interested {
                    ctl.wake_all();
                    self.complete_ready_tokens(&ctl);
                }
            }
        }
        Ok(report)
    }

    fn commit_all(&self) -> Result<CommitReport, BrokerError> {
        let workers: Vec<WorkerId> = self
            .arenas
            .read()
            .expect("arena registry poisoned")
            .keys()
            .copied()
            .collect();
        let mut report = CommitReport::default();
        for w in workers {
            report.merge(self.commit_worker(w)?);
        }
        Ok(report)
    }

    /// Release fully-consumed records back to their home arenas: revoke all
    /// permissions except the arena worker's write, zero cursors, free, and
    /// append to the free-list tail. Per-batch locking: one permission pass,
    /// one free-list append per arena, one wake.
    fn release_records(&self, channel: ChannelId, records: &[RecordId]) -> Result<(), BrokerError> {
        self.release_inner(channel, records, false)
    }

    /// Release for records the reader already popped off the chain (the data
    /// path), skipping the per-record unchain walk.
    fn release_unchained(
        &self,
        channel: ChannelId,
        records: &[RecordId],
    ) -> Result<(), BrokerError> {
        self.release_inner(channel, records, true)
    }

    fn release_inner(
        &self,
        channel: ChannelId,
        records: &[RecordId],
        already_unchained: bool,
    ) -> Result<(), BrokerError> {
        if records.is_empty() {
            return Ok(());
        }
        let segment = self.shared.segment.clone();
        let ctl = self.channel(channel);
        let mut resets: Vec<(RecordId, PrincipalId, u8)> = Vec::with_capacity(records.len());
        let mut freed_by_arena: HashMap<WorkerId, Vec<RecordId>> = HashMap::new();
        for &rec in records {
            let meta = segment.meta(rec)?;
            if meta.owner_channel() != Some(channel) {
                return Err(BrokerError::Arena(ArenaError::NotOwner {
                    record: rec,
                    channel,
                }));
            }
            if meta.read_cursor() < meta.write_cursor() {
                return Err(BrokerError::Arena(ArenaError::ReleaseUnconsumed(rec)));
            }
            let worker = meta.home_arena().ok_or(BrokerError::Arena(ArenaError::NotOwner {
                record: rec,
                channel,
            }))?;
            let reg = self.arena(worker)?;
            if let Some(ctl) = &ctl {
                if !already_unchained {
                    for dir in &ctl.dirs {
                        let mut chain = dir.chain.lock().expect("chain poisoned");
                        if chain.remove(&segment, rec) {
                            if dir.write_rec.load(Ordering::Acquire) == rec.0 {
                                dir.write_rec
                                    .store(crate::ids::RecordId::NONE_RAW, Ordering::Release);
                            }
                            break;
                        }
                    }
                }
                ctl.outstanding.fetch_sub(1, Ordering::AcqRel);
            }
            reg.process_outstanding.fetch_sub(1, Ordering::AcqRel);
            let was_committed = meta.state() == RecordState::Committed;
            meta.reset_cursors();
            meta.set_owner_channel(None);
            meta.transition(meta.state(), RecordState::Free, Authority::Broker)
                .expect("record state changed during release");
            resets.push((rec, reg.principal, PERM_WRITE));
            freed_by_arena.entry(worker).or_default().push(rec);
            if was_committed {
                reg.committed.fetch_sub(1, Ordering::AcqRel);
                if let Some(ctl) = &ctl {
                    ctl.committed.fetch_sub(1, Ordering::AcqRel);
                }
            }
        }
        self.shared.perms.retain_only_batch(&resets);
        for (worker, freed) in freed_by_arena {
            self.arena(worker)?.arena.push_free_tail(&freed);
        }
        if let Some(ctl) = &ctl {
            ctl.wake_all();
            self.complete_ready_tokens(ctl);
        }
        Ok(())
    }

    fn register_channel(&self, ctl: Arc<ChannelShared>) {
        self.channels
            .write()
            .expect("channel registry poisoned")
            .insert(ctl.id, ctl);
    }

    /// Reclaim every record of a channel. `force` skips the fully-consumed
    /// requirement (crash / abandoned-residue path).
    fn teardown_channel(&self, channel: ChannelId, force: bool) -> Result<(), BrokerError> {
        let Some(ctl) = self
            .channels
            .write()
            .expect("channel registry poisoned")
            .remove(&channel)
        else {
            return Ok(());
        };
        let segment = self.shared.segment.clone();
        for dir in &ctl.dirs {
            let records: Vec<RecordId> = {
                let mut chain = dir.chain.lock().expect("chain poisoned");
                let mut out = Vec::new();
                while let Some(rec) = chain.pop_head(&segment) {
                    out.push(rec);
                }
                if dir.local_parked.swap(false, Ordering::AcqRel) {
                    out.push(dir.local_record);
                }
                out
            };
            for rec in records {
                let meta = segment.meta(rec)?;
                if !force {
                    debug_assert_eq!(meta.read_cursor(), meta.write_cursor());
                }
                let state = meta.state();
                match meta.home_arena() {
                    Some(worker) => {
                        let reg = self.arena(worker)?;
                        reg.process_outstanding.fetch_sub(1, Ordering::AcqRel);
                        ctl.outstanding.fetch_sub(1, Ordering::AcqRel);
                        meta.reset_cursors();
                        meta.set_owner_channel(None);
                        meta.transition(state, RecordState::Free, Authority::Broker)
                            .expect("record state changed during teardown");
                        self.shared
                            .perms
                            .retain_only(rec, reg.principal, PERM_WRITE);
                        reg.arena.push_free_tail(&[rec]);
                        if state == RecordState::Committed {
                            reg.committed.fetch_sub(1, Ordering::AcqRel);
                            ctl.committed.fetch_sub(1, Ordering::AcqRel);
                        }
                    }
                    None => {
                        // Local record: back to the reuse pool.
                        meta.reset_cursors();
                        meta.set_owner_channel(None);
                        meta.transition(state, RecordState::Free, Authority::Broker)
                            .expect("record state changed during teardown");
                        self.shared.perms.retain_only(rec, PrincipalId(0), 0);
                        self.shared
                            .local_pool
                            .lock()
                            .expect("local pool poisoned")
                            .entry(meta.capacity())
                            .or_default()
                            .push(rec);
                    }
                }
            }
        }
        self.complete_all_tokens(channel, NotifyEvent::Closed);
        ctl.set_state(ChannelState::Closed);
        ctl.wake_all();
        Ok(())
    }

    /// Simulated worker death: tear down every channel it is an endpoint of
    /// (reclaiming their records), then reclaim any claims that were never
    /// chained into a channel. Only the arena's owning worker drains the
    /// claim log; attached workers sharing the arena leave it alone.
    fn crash_worker(&self, worker: WorkerId) -> Result<(), BrokerError> {
        let pending = match self.arena(worker) {
            Ok(reg) if reg.arena.worker() == worker => reg.arena.drain_claims(),
            _ => Vec::new(),
        };
        let doomed: Vec<ChannelId> = self
            .channels
            .read()
            .expect("channel registry poisoned")
            .iter()
            .filter(|(_, ctl)| {
                ctl.dirs
                    .iter()
                    .any(|d| d.sender_worker == worker || d.receiver_worker == worker)
            })
            .map(|(id, _)| *id)
            .collect();
        for id in doomed {
            self.teardown_channel(id, true)?;
        }
        // Whatever is still claimed with a matching seq was never reachable
        // through a channel chain; free it directly.
        if let Ok(reg) = self.arena(worker) {
            for entry in pending {
                let meta = self.shared.segment.meta(entry.record)?;
                if meta.state() == RecordState::Claimed && meta.seq() == entry.seq {
                    meta.reset_cursors();
                    meta.set_owner_channel(None);
                    meta.transition(RecordState::Claimed, RecordState::Free, Authority::Broker)
                        .expect("claimed record changed state outside broker");
                    self.shared
                        .perms
                        .retain_only(entry.record, reg.principal, PERM_WRITE);
                    reg.arena.push_free_tail(&[entry.record]);
                    reg.process_outstanding.fetch_sub(1, Ordering::AcqRel);
                }
            }
            reg.alive.store(false, Ordering::Release);
        }
        Ok(())
    }

    // -- tokens ------------------------------------------------------------

    /// Adjust the per-direction interest counters the data paths consult
    /// before sending wake statuses.
    fn adjust_interest(&self, cell: &Arc<TokenCell>, delta: i32) {
        if cell.kind != crate::unapi::TokenKind::Condition {
            return;
        }
        let Some(ctl) = self.channel(cell.channel) else {
            return;
        };
        for dir in &ctl.dirs {
            if cell.mask.contains_r() && dir.receiver == cell.principal {
                if delta > 0 {
                    dir.reader_waiting.fetch_add(1, Ordering::AcqRel);
                } else {
                    dir.reader_waiting.fetch_sub(1, Ordering::AcqRel);
                }
            }
            if cell.mask.contains_w() && dir.sender == cell.principal {
                if delta > 0 {
                    dir.writer_waiting.fetch_add(1, Ordering::AcqRel);
                } else {
                    dir.writer_waiting.fetch_sub(1, Ordering::AcqRel);
                }
            }
        }
    }

    fn arm_token(&self, cell: Arc<TokenCell>) -> Result<(), BrokerError> {
        let mut keys = Vec::new();
        if cell.mask.contains_r() {
            keys.push((cell.channel, cell.principal, 1u8));
        }
        if cell.mask.contains_w() {
            keys.push((cell.channel, cell.principal, 2u8));
        }
        if keys.is_empty() {
            return Err(BrokerError::Unapi(crate::unapi::UnapiError::EmptyMask));
        }
        {
            let mut tokens = self.tokens.lock().expect("token table poisoned");
            for key in &keys {
                if let Some(existing) = tokens.get(key) {
                    if existing.status() == crate::unapi::TokenStatus::Armed {
                        return Err(BrokerError::Unapi(crate::unapi::UnapiError::Conflict));
                    }
                }
            }
            for key in keys {
                tokens.insert(key, cell.clone());
            }
        }
        self.adjust_interest(&cell, 1);
        Ok(())
    }

    fn remove_token(&self, cell: &Arc<TokenCell>) {
        let removed = {
            let mut tokens = self.tokens.lock().expect("token table poisoned");
            let before = tokens.len();
            tokens.retain(|_, existing| !Arc::ptr_eq(existing, cell));
            tokens.len() != before
        };
        if removed {
            self.adjust_interest(cell, -1);
        }
    }

    fn complete_token(&self, cell: &Arc<TokenCell>, event: NotifyEvent) {
        if cell.fire(event) && cell.mode == NotifyMode::Async {
            self.shared.dispatch(cell.clone(), event);
        }
        self.remove_token(cell);
    }

    /// Evaluate every armed condition token of a channel and complete the
    /// satisfied ones. Conditions are re-evaluated here rather than trusting
    /// the notification, so spurious status messages complete nothing. The
    /// token lock is not held across condition evaluation.
    fn complete_ready_tokens(&self, ctl: &Arc<ChannelShared>) {
        let candidates: Vec<(TokenKey, Arc<TokenCell>)> = {
            let tokens = self.tokens.lock().expect("token table poisoned");
            if tokens.is_empty() {
                return;
            }
            tokens
                .iter()
                .filter(|((ch, _, _), cell)| {
                    *ch == ctl.id && cell.kind == crate::unapi::TokenKind::Condition
                })
                .map(|(k, v)| (*k, v.clone()))
                .collect()
        };
        for ((_, principal, bit), cell) in candidates {
            let event = if bit == 1 {
                if self.readable_for(ctl, principal) {
                    Some(NotifyEvent::Readable)
                } else if !ctl.is_open() {
                    Some(NotifyEvent::Closed)
                } else {
                    None
                }
            } else if !ctl.is_open() {
                Some(NotifyEvent::Closed)
            } else {
                self.writable_for(ctl, principal)
                    .then_some(NotifyEvent::Writable)
            };
            if let Some(event) = event {
                self.complete_token(&cell, event);
            }
        }
    }

    fn complete_all_tokens(&self, channel: ChannelId, event: NotifyEvent) {
        let cells: Vec<Arc<TokenCell>> = {
            let tokens = self.tokens.lock().expect("token table poisoned");
            tokens
                .iter()
                .filter(|((ch, _, _), _)| *ch == channel)
                .map(|(_, v)| v.clone())
                .collect()
        };
        for cell in cells {
            self.complete_token(&cell, event);
        }
    }

    /// Readable for a principal: the direction it receives has unread bytes.
    fn readable_for(&self, ctl: &Arc<ChannelShared>, principal: PrincipalId) -> bool {
        ctl.dirs
            .iter()
            .any(|d| d.receiver == principal && d.readable())
    }

    /// Writable for a principal: its outbound direction has tail space or a
    /// within-bounds claim could extend the chain.
    fn writable_for(&self, ctl: &Arc<ChannelShared>, principal: PrincipalId) -> bool {
        let segment = &self.shared.segment;
        let policy = &self.shared.policy;
        ctl.dirs.iter().any(|d| {
            if d.sender != principal {
                return false;
            }
            if d.local_parked.load(Ordering::Acquire) {
                return true;
            }
            let chain = d.chain.lock().expect("chain poisoned");
            if let Some(tail) = chain.tail() {
                let meta = segment.meta(tail).expect("chain record");
                if meta.write_cursor() < meta.capacity() {
                    return true;
                }
            }
            drop(chain);
            if let Ok(reg) = self.arena(d.sender_worker) {
                reg.arena.free_count() > 0
                    && ctl.outstanding.load(Ordering::Acquire) < policy.max_records_per_channel
                    && reg.process_outstanding.load(Ordering::Acquire)
                        < policy.max_records_per_process
            } else {
                false
            }
        })
    }

    // -- notify-on-rw --------------------------------------------------------

    fn arm_notify_on_rw(
        &self,
        ctl: &Arc<ChannelShared>,
        cell: Arc<TokenCell>,
    ) -> Result<(), BrokerError> {
        self.arm_token(cell.clone())?;
        let mut revoked = Vec::new();
        let segment = self.shared.segment.clone();
        // mask R: fault the peer's reads of what this principal sends;
        // mask W: fault the peer's writes toward this principal.
        for d in &ctl.dirs {
            if cell.mask.contains_r() && d.sender == cell.principal {
                let chain = d.chain.lock().expect("chain poisoned");
                for rec in chain.records(&segment) {
                    if self
                        .shared
                        .perms
                        .check_access(d.receiver, rec, AccessKind::Read)
                        .is_ok()
                    {
                        self.shared.perms.revoke(d.receiver, rec, AccessKind::Read);
                        revoked.push((d.receiver, rec, AccessKind::Read));
                    }
                }
            }
            if cell.mask.contains_w() && d.receiver == cell.principal {
                let chain = d.chain.lock().expect("chain poisoned");
                for rec in chain.records(&segment) {
                    if self
                        .shared
                        .perms
                        .check_access(d.sender, rec, AccessKind::Write)
                        .is_ok()
                    {
                        self.shared.perms.revoke(d.sender, rec, AccessKind::Write);
                        revoked.push((d.sender, rec, AccessKind::Write));
                    }
                }
            }
        }
        self.shared.norw.lock().expect("norw poisoned").insert(
            cell.token_id,
            NoRwArm {
                cell,
                channel: ctl.id,
                revoked,
            },
        );
        Ok(())
    }

    fn restore_norw(&self, token_id: u64) {
        let arm = self
            .shared
            .norw
            .lock()
            .expect("norw poisoned")
            .remove(&token_id);
        if let Some(arm) = arm {
            for (principal, rec, kind) in &arm.revoked {
                let bits = match kind {
                    AccessKind::Read => PERM_READ,
                    AccessKind::Write => PERM_WRITE,
                };
                self.shared.perms.grant(*principal, *rec, bits);
            }
            if let Some(ctl) = self.channel(arm.channel) {
                ctl.wake_all();
            }
        }
    }

    // -- event handling ------------------------------------------------------

    fn handle_fault(&self, fault: FaultEvent) -> Result<(), BrokerError> {
        // Notify-on-RW first: a fault on a deliberately revoked permission
        // completes the arming side's token and restores the permission.
        let matching: Option<u64> = {
            let norw = self.shared.norw.lock().expect("norw poisoned");
            norw.iter()
                .find(|(_, arm)| {
                    arm.revoked
                        .iter()
                        .any(|(p, r, k)| *p == fault.principal && *r == fault.record && *k == fault.kind)
                })
                .map(|(id, _)| *id)
        };
        if let Some(token_id) = matching {
            let cell = {
                let norw = self.shared.norw.lock().expect("norw poisoned");
                norw.get(&token_id).map(|arm| arm.cell.clone())
            };
            if let Some(cell) = cell {
                self.complete_token(&cell, NotifyEvent::PeerActivity(fault.kind));
            }
            self.restore_norw(token_id);
            return Ok(());
        }

        // Ordinary fault: commit the home arena's pending claims (granting
        // the receiver read on newly committed records), then wake the
        // faulter to retry.
        let segment = self.shared.segment.clone();
        let meta = segment.meta(fault.record)?;
        if let Some(worker) = meta.home_arena() {
            if self
                .arenas
                .read()
                .expect("arena registry poisoned")
                .contains_key(&worker)
            {
                self.commit_worker(worker)?;
            }
        }
        match meta.owner_channel().and_then(|id| self.channel(id)) {
            Some(ctl) => ctl.wake_all(),
            None => {
                for ctl in self
                    .channels
                    .read()
                    .expect("channel registry poisoned")
                    .values()
                {
                    ctl.wake_all();
                }
            }
        }
        Ok(())
    }

    fn handle_status(&self, status: StatusChange) -> Result<(), BrokerError> {
        let Some(ctl) = self.channel(status.channel) else {
            // status on an unknown/closed channel is dropped
            return Ok(());
        };
        if status.kind == StatusKind::Closed {
            self.complete_all_tokens(status.channel, NotifyEvent::Closed);
            ctl.wake_all();
            return Ok(());
        }
        self.complete_ready_tokens(&ctl);
        ctl.wake_all();
        Ok(())
    }

    fn tick(&self) -> Result<(), BrokerError> {
        self.commit_all()?;
        Ok(())
    }

    // -- audits ---------------------------------------------------------------

    fn audit(&self) -> AuditReport {
        let mut report = AuditReport::default();
        let segment = &self.shared.segment;
        let arenas = self.arenas.read().expect("arena registry poisoned");
        let channels = self.channels.read().expect("channel registry poisoned");

        let mut chained_by_arena: HashMap<WorkerId, u32> = HashMap::new();
        let mut seen: HashMap<RecordId, ChannelId> = HashMap::new();
        let mut committed_chan: HashMap<ChannelId, u32> = HashMap::new();
        let mut committed_worker: HashMap<WorkerId, u32> = HashMap::new();

        for (id, ctl) in channels.iter() {
            for dir in &ctl.dirs {
                let chain = dir.chain.lock().expect("chain poisoned");
                let mut recs = chain.records(segment);
                drop(chain);
                if dir.local_parked.load(Ordering::Acquire) {
                    recs.push(dir.local_record);
                }
                for rec in recs {
                    if let Some(prev) = seen.insert(rec, *id) {
                        report
                            .problems
                            .push(format!("record {rec} chained in both {prev} and {id}"));
                    }
                    let meta = segment.meta(rec).expect("chain record");
                    match meta.state() {
                        RecordState::Free => report
                            .problems
                            .push(format!("chained record {rec} is free")),
                        RecordState::Committed => {
                            if meta.home_arena().is_some()
                                && self
                                    .shared
                                    .perms
                                    .check_access(dir.receiver, rec, AccessKind::Read)
                                    .is_err()
                            {
                                report.problems.push(format!(
                                    "committed record {rec} lacks receiver read for {}",
                                    dir.receiver
                                ));
                            }
                            if let Some(worker) = meta.home_arena() {
                                *committed_chan.entry(*id).or_insert(0) += 1;
                                *committed_worker.entry(worker).or_insert(0) += 1;
                            }
                        }
                        RecordState::Claimed => {}
                    }
                    if let Some(worker) = meta.home_arena() {
                        *chained_by_arena.entry(worker).or_insert(0) += 1;
                    }
                }
            }
        }

        for (worker, reg) in arenas.iter() {
            let free_list = reg.arena.walk_free();
            for rec in &free_list {
                let meta = segment.meta(*rec).expect("arena record");
                if meta.state() != RecordState::Free {
                    report
                        .problems
                        .push(format!("free-list record {rec} not free"));
                }
                if seen.contains_key(rec) {
                    report
                        .problems
                        .push(format!("record {rec} is both free and chained"));
                }
            }
            let chained = chained_by_arena.get(worker).copied().unwrap_or(0);
            let free = free_list.len() as u32;
            let total = reg.arena.record_count();
            if free + chained != total {
                report.problems.push(format!(
                    "arena {worker} conservation broken: free={free} chained={chained} total={total}"
                ));
            }
            report.arenas.push(ArenaAudit {
                worker: *worker,
                free,
                chained,
                total,
            });
        }

        for (channel, count) in &committed_chan {
            if *count > self.shared.policy.max_records_per_channel {
                report.problems.push(format!(
                    "channel {channel} holds {count} committed records over bound"
                ));
            }
            let tracked = channels
                .get(channel)
                .map(|c| c.committed.load(Ordering::Acquire))
                .unwrap_or(0);
            if tracked != *count {
                report.problems.push(format!(
                    "channel {channel} committed count drift: tracked {tracked} actual {count}"
                ));
            }
        }
        for (worker, count) in &committed_worker {
            if *count > self.shared.policy.max_records_per_process {
                report.problems.push(format!(
                    "worker {worker} holds {count} committed records over bound"
                ));
            }
        }
        report
    }

    fn diagnostic_dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let segment = &self.shared.segment;
        let arenas = self.arenas.read().expect("arena registry poisoned");
        let channels = self.channels.read().expect("channel registry poisoned");
        writeln!(out, "broker {}", self.id).unwrap();
        for (worker, reg) in arenas.iter() {
            writeln!(
                out,
                "arena {} free={} total={} pending_claims={} committed={} alive={}",
                worker,
                reg.arena.free_count(),
                reg.arena.record_count(),
                reg.arena.pending_claims(),
                reg.committed.load(Ordering::Acquire),
                reg.alive.load(Ordering::Acquire),
            )
            .unwrap();
        }
        for (id, ctl) in channels.iter() {
            writeln!(out, "channel {} state={:?}", id, ctl.state()).unwrap();
            for (i, dir) in ctl.dirs.iter().enumerate() {
                let chain = dir.chain.lock().expect("chain poisoned");
                let recs: Vec<String> = chain
                    .records(segment)
                    .iter()
                    .map(|r| r.to_string())
                    .collect();
                writeln!(
                    out,
                    " dir{} local={} parked={} chain=[{}] written={} read={}",
                    i,
                    dir.local_record,
                    dir.local_parked.load(Ordering::Acquire),
                    recs.join(","),
                    dir.written_total.load(Ordering::Acquire),
                    dir.read_total.load(Ordering::Acquire),
                )
                .unwrap();
            }
        }
        for (p, r, bits) in self.shared.perms.snapshot() {
            let mut s = String::new();
            if bits & PERM_READ != 0 {
                s.push('r');
            }
            if bits & PERM_WRITE != 0 {
                s.push('w');
            }
            writeln!(out, "perm {p} {r} {s}").unwrap();
        }
        let mut token_lines: Vec<String> = {
            let tokens = self.tokens.lock().expect("token table poisoned");
            tokens
                .iter()
                .map(|((ch, p, bit), cell)| {
                    format!(
                        "token {ch} {p} bit={bit} mode={:?} status={:?}",
                        cell.mode,
                        cell.status()
                    )
                })
                .collect()
        };
        token_lines.sort();
        for line in token_lines {
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

fn find_dir_with_record(
    ctl: &Arc<ChannelShared>,
    segment: &Segment,
    sender: PrincipalId,
    record: RecordId,
) -> Option<usize> {
    let candidates: Vec<usize> = ctl
        .dirs
        .iter()
        .enumerate()
        .filter(|(_, d)| d.sender == sender)
        .map(|(i, _)| i)
        .collect();
    if candidates.len() == 1 {
        return Some(candidates[0]);
    }
    // same principal sends both directions: disambiguate by chain content
    let candidates = if candidates.is_empty() {
        vec![0, 1]
    } else {
        candidates
    };
    for i in candidates {
        let chain = ctl.dirs[i].chain.lock().expect("chain poisoned");
        if chain.records(segment).contains(&record) {
            return Some(i);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Broker runtime wrapper
// ---------------------------------------------------------------------------

/// One broker instance: the state machine plus its inbound queue and loop
/// thread. Worker-side calls (release, token arming, fault-driven commits)
/// run under the same per-resource serialization as the loop.
pub struct Broker {
    pub id: BrokerId,
    core: Arc<BrokerCore>,
    tx: Sender<BrokerMsg>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl Broker {
    fn spawn(shared: Arc<RuntimeShared>, id: BrokerId, tick: Duration) -> Arc<Broker> {
        let (tx, rx) = std::sync::mpsc::channel();
        let core = Arc::new(BrokerCore {
            id,
            shared,
            arenas: RwLock::new(BTreeMap::new()),
            channels: RwLock::new(BTreeMap::new()),
            tokens: Mutex::new(HashMap::new()),
        });
        let loop_core = core.clone();
        let thread = std::thread::Builder::new()
            .name(format!("broker-{}", id.0))
            .spawn(move || broker_loop(loop_core, rx, tick))
            .expect("spawn broker thread");
        Arc::new(Broker {
            id,
            core,
            tx,
            thread: Mutex::new(Some(thread)),
        })
    }

    pub fn sender(&self) -> Sender<BrokerMsg> {
        self.tx.clone()
    }

    pub(crate) fn add_arena(
        &self,
        worker: WorkerId,
        arena: Arc<Arena>,
        principal: PrincipalId,
        process_outstanding: Arc<AtomicU32>,
        hint_pending: Arc<std::sync::atomic::AtomicBool>,
    ) {
        self.core.arenas.write().expect("arena registry poisoned").insert(
            worker,
            Arc::new(ArenaReg {
                arena,
                principal,
                process_outstanding,
                hint_pending,
                committed: AtomicU32::new(0),
                commit_gate: Mutex::new(()),
                alive: std::sync::atomic::AtomicBool::new(true),
            }),
        );
    }

    /// Spec op `broker_commit`: ratify one arena's pending claims now.
    pub fn commit_worker(&self, worker: WorkerId) -> Result<CommitReport, BrokerError> {
        self.core.commit_worker(worker)
    }

    pub fn commit_all(&self) -> Result<CommitReport, BrokerError> {
        self.core.commit_all()
    }

    pub fn release_records(
        &self,
        channel: ChannelId,
        records: &[RecordId],
    ) -> Result<(), BrokerError> {
        self.core.release_records(channel, records)
    }

    pub(crate) fn release_unchained(
        &self,
        channel: ChannelId,
        records: &[RecordId],
    ) -> Result<(), BrokerError> {
        self.core.release_unchained(channel, records)
    }

    pub fn register_channel(&self, ctl: Arc<ChannelShared>) {
        self.core.register_channel(ctl);
    }

    pub fn teardown_channel(&self, channel: ChannelId, force: bool) -> Result<(), BrokerError> {
        self.core.teardown_channel(channel, force)
    }

    pub fn crash_worker(&self, worker: WorkerId) -> Result<(), BrokerError> {
        self.core.crash_worker(worker)
    }

    pub fn channel_closing(&self, channel: ChannelId) {
        self.core
            .complete_all_tokens(channel, NotifyEvent::Closed);
        if let Some(ctl) = self.core.channel(channel) {
            ctl.wake_all();
        }
    }

    pub(crate) fn arm_token(&self, cell: Arc<TokenCell>) -> Result<(), BrokerError> {
        self.core.arm_token(cell)
    }

    pub(crate) fn finish_token(&self, cell: &Arc<TokenCell>) {
        self.core.remove_token(cell);
    }

    pub(crate) fn try_complete_ready(&self, ctl: &Arc<ChannelShared>) {
        self.core.complete_ready_tokens(ctl);
    }

    pub(crate) fn arm_notify_on_rw(
        &self,
        ctl: &Arc<ChannelShared>,
        cell: Arc<TokenCell>,
    ) -> Result<(), BrokerError> {
        self.core.arm_notify_on_rw(ctl, cell)
    }

    pub(crate) fn restore_norw(&self, token_id: u64) {
        self.core.restore_norw(token_id)
    }

    pub fn audit(&self) -> AuditReport {
        self.core.audit()
    }

    pub fn diagnostic_dump(&self) -> String {
        self.core.diagnostic_dump()
    }

    /// Run one loop step synchronously over a batch of messages (test use).
    pub fn step(&self, msgs: Vec<BrokerMsg>) -> Result<(), BrokerError> {
        for msg in msgs {
            match msg {
                BrokerMsg::Fault(f) => self.core.handle_fault(f)?,
                BrokerMsg::Status(s) => self.core.handle_status(s)?,
                BrokerMsg::ClaimHint(w) => {
                    if self
                        .core
                        .arenas
                        .read()
                        .expect("arena registry poisoned")
                        .contains_key(&w)
                    {
                        self.core.commit_worker(w)?;
                    }
                }
                BrokerMsg::Shutdown => {}
            }
        }
        self.core.tick()?;
        Ok(())
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        let _ = self.tx.send(BrokerMsg::Shutdown);
        if let Some(t) = self.thread.lock().expect("thread slot poisoned").take() {
            let _ = t.join();
        }
    }
}

fn broker_loop(core: Arc<BrokerCore>, rx: Receiver<BrokerMsg>, tick: Duration) {
    let handle = |core: &BrokerCore, msg: BrokerMsg| match msg {
        BrokerMsg::Fault(f) => {
            let _ = core.handle_fault(f);
        }
        BrokerMsg::Status(s) => {
            let _ = core.handle_status(s);
        }
        BrokerMsg::ClaimHint(w) => {
            if core
                .arenas
                .read()
                .expect("arena registry poisoned")
                .contains_key(&w)
            {
                let _ = core.commit_worker(w);
            }
        }
        BrokerMsg::Shutdown => {}
    };
    loop {
        match rx.recv_timeout(tick) {
            Ok(BrokerMsg::Shutdown) => break,
            Ok(first) => {
                handle(&core, first);
                // drain whatever queued up behind the first message
                while let Ok(msg) = rx.try_recv() {
                    if matches!(msg, BrokerMsg::Shutdown) {
                        return;
                    }
                    handle(&core, msg);
                }
            }
            Err(RecvTimeoutError::Timeout) => {
                let _ = core.tick();
            }
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
}

// ---------------------------------------------------------------------------
// Runtime: segment + brokers + workers
// ---------------------------------------------------------------------------

/// Everything needed to run channels over one segment.
pub struct Runtime {
    shared: Arc<RuntimeShared>,
    brokers: Vec<Arc<Broker>>,
    dispatcher: Mutex<Option<JoinHandle<()>>>,
}

#[derive(Clone)]
pub struct RuntimeOptions {
    pub segment_name: String,
    pub segment_bytes: u64,
    pub policy: AllocationPolicy,
    pub unapi: UnapiConfig,
    pub tick: Duration,
    pub brokers: u32,
}

impl RuntimeOptions {
    pub fn small(name: &str) -> RuntimeOptions {
        RuntimeOptions {
            segment_name: name.to_string(),
            segment_bytes: 64 * 1024 * 1024,
            policy: AllocationPolicy {
                arena_size_bytes: 4 * 1024 * 1024,
                ..AllocationPolicy::default()
            },
            unapi: UnapiConfig::default(),
            tick: Duration::from_millis(1),
            brokers: 1,
        }
    }
}

impl Runtime {
    pub fn create(opts: RuntimeOptions) -> Result<Arc<Runtime>, BrokerError> {
        let segment = Arc::new(Segment::create(&opts.segment_name, opts.segment_bytes)?);
        Runtime::with_segment(segment, opts)
    }

    pub fn with_segment(
        segment: Arc<Segment>,
        opts: RuntimeOptions,
    ) -> Result<Arc<Runtime>, BrokerError> {
        let shared = Arc::new(RuntimeShared {
            segment,
            perms: Arc::new(PermissionMap::new()),
            policy: opts.policy,
            unapi: opts.unapi,
            next_worker: AtomicU32::new(0),
            next_principal: AtomicU32::new(1),
            next_channel: AtomicU64::new(1),
            next_token: AtomicU64::new(1),
            router: RwLock::new(RouterState {
                by_worker: HashMap::new(),
                default: None,
            }),
            broker_refs: RwLock::new(HashMap::new()),
            fault_count: AtomicU64::new(0),
            norw: Mutex::new(HashMap::new()),
            pending_channels: Mutex::new(HashMap::new()),
            local_pool: Mutex::new(HashMap::new()),
            dispatch_tx: Mutex::new(None),
        });

        let mut brokers = Vec::new();
        for i in 0..opts.brokers.max(1) {
            let broker = Broker::spawn(shared.clone(), BrokerId(i), opts.tick);
            if i == 0 {
                shared.router.write().expect("router poisoned").default = Some(broker.sender());
            }
            brokers.push(broker);
        }

        let (dispatch_tx, dispatch_rx) = std::sync::mpsc::channel::<DispatchJob>();
        *shared.dispatch_tx.lock().expect("dispatch poisoned") = Some(dispatch_tx);
        let dispatcher = std::thread::Builder::new()
            .name("unapi-dispatch".into())
            .spawn(move || {
                while let Ok(job) = dispatch_rx.recv() {
                    job.cell.run_callback(job.event);
                }
            })
            .expect("spawn dispatcher");

        Ok(Arc::new(Runtime {
            shared,
            brokers,
            dispatcher: Mutex::new(Some(dispatcher)),
        }))
    }

    pub fn shared(&self) -> &Arc<RuntimeShared> {
        &self.shared
    }

    pub fn segment(&self) -> &Arc<Segment> {
        &self.shared.segment
    }

    pub fn permissions(&self) -> &Arc<PermissionMap> {
        &self.shared.perms
    }

    pub fn policy(&self) -> &AllocationPolicy {
        &self.shared.policy
    }

    /// Total fault events routed on this runtime.
    pub fn fault_count(&self) -> u64 {
        self.shared.fault_count()
    }

    pub fn broker(&self, index: usize) -> &Arc<Broker> {
        &self.brokers[index]
    }

    pub fn brokers(&self) -> &[Arc<Broker>] {
        &self.brokers
    }

    /// Fault sink for access gates over this runtime's segment.
    pub fn fault_sink(self: &Arc<Runtime>) -> Arc<dyn FaultSink> {
        Arc::new(RouterSink {
            shared: self.shared.clone(),
        })
    }

    /// Register a worker with the broker at `broker_index`, carving an arena
    /// of `record_count` records of `record_size` bytes.
    pub fn register_worker(
        self: &Arc<Runtime>,
        broker_index: usize,
        record_size: u32,
        record_count: u32,
    ) -> Result<Worker, BrokerError> {
        let broker = self.brokers[broker_index].clone();
        let worker = WorkerId(self.shared.next_worker.fetch_add(1, Ordering::Relaxed));
        let principal = PrincipalId(self.shared.next_principal.fetch_add(1, Ordering::Relaxed));
        let arena = Arc::new(Arena::init(
            worker,
            principal,
            record_size,
            record_count,
            self.shared.segment.clone(),
            &self.shared.perms,
        )?);
        let process_outstanding = Arc::new(AtomicU32::new(0));
        let hint_pending = Arc::new(std::sync::atomic::AtomicBool::new(false));
        broker.add_arena(
            worker,
            arena.clone(),
            principal,
            process_outstanding.clone(),
            hint_pending.clone(),
        );
        self.shared
            .router
            .write()
            .expect("router poisoned")
            .by_worker
            .insert(worker, broker.sender());
        self.shared
            .broker_refs
            .write()
            .expect("broker refs poisoned")
            .insert(worker, Arc::downgrade(&broker));
        Ok(Worker {
            id: worker,
            principal,
            arena,
            broker,
            runtime: self.clone(),
            process_outstanding,
            hint_pending,
        })
    }

    /// Register a worker that claims from an existing worker's arena (the
    /// per-core arena topology: connection workers time-share a core-level
    /// arena; claims are serialized by the arena free-list lock). The
    /// attached worker shares the arena owner's principal so record write
    /// permission stays with exactly one principal.
    pub fn register_worker_attached(
        self: &Arc<Runtime>,
        base: &Worker,
    ) -> Result<Worker, BrokerError> {
        let worker = WorkerId(self.shared.next_worker.fetch_add(1, Ordering::Relaxed));
        self.shared
            .router
            .write()
            .expect("router poisoned")
            .by_worker
            .insert(worker, base.broker.sender());
        self.shared
            .broker_refs
            .write()
            .expect("broker refs poisoned")
            .insert(worker, Arc::downgrade(&base.broker));
        Ok(Worker {
            id: worker,
            principal: base.principal,
            arena: base.arena.clone(),
            broker: base.broker.clone(),
            runtime: self.clone(),
            process_outstanding: base.process_outstanding.clone(),
            hint_pending: base.hint_pending.clone(),
        })
    }

    /// Allocate (or reuse from the pool) a channel-local record.
    pub fn take_local_record(&self, capacity: u32) -> Result<RecordId, BrokerError> {
        let pooled = self
            .shared
            .local_pool
            .lock()
            .expect("local pool poisoned")
            .get_mut(&capacity)
            .and_then(|v| v.pop());
        match pooled {
            Some(rec) => Ok(rec),
            None => Ok(self.shared.segment.register_record(capacity)?),
        }
    }

    pub fn next_channel_id(&self) -> ChannelId {
        ChannelId(self.shared.next_channel.fetch_add(1, Ordering::Relaxed))
    }

    pub fn stash_pending_channel(&self, ctl: Arc<ChannelShared>) {
        self.shared
            .pending_channels
            .lock()
            .expect("pending poisoned")
            .insert(ctl.id, ctl);
    }

    /// Synchronous handle to the broker governing a worker.
    pub fn broker_for_worker(&self, worker: WorkerId) -> Option<Arc<Broker>> {
        self.shared
            .broker_refs
            .read()
            .expect("broker refs poisoned")
            .get(&worker)
            .and_then(|w| w.upgrade())
    }

    /// Register a channel control block with every broker of this runtime.
    pub fn register_channel_all(&self, ctl: &Arc<ChannelShared>) {
        for broker in &self.brokers {
            broker.register_channel(ctl.clone());
        }
    }

    /// Tear a channel down in every broker (the first does the record work;
    /// the rest just drop their registration).
    pub fn teardown_channel_all(&self, id: ChannelId, force: bool) -> Result<(), BrokerError> {
        for broker in &self.brokers {
            broker.teardown_channel(id, force)?;
        }
        Ok(())
    }

    pub fn take_pending_channel(&self, id: ChannelId) -> Option<Arc<ChannelShared>> {
        self.shared
            .pending_channels
            .lock()
            .expect("pending poisoned")
            .remove(&id)
    }

    /// Build the shared control block for a channel between two workers and
    /// commit its two local records: for each direction the sender gets
    /// write, the receiver gets read.
    pub fn build_channel(
        &self,
        id: ChannelId,
        connector: (PrincipalId, WorkerId),
        acceptor: (PrincipalId, WorkerId),
    ) -> Result<Arc<ChannelShared>, BrokerError> {
        let local_bytes = self.shared.policy.local_record_bytes;
        let mut dirs = Vec::with_capacity(2);
        // dir 0: connector → acceptor; dir 1: acceptor → connector
        for (sender, receiver) in [(connector, acceptor), (acceptor, connector)] {
            let rec = self.take_local_record(local_bytes)?;
            let meta = self.shared.segment.meta(rec)?;
            meta.set_owner_channel(Some(id));
            meta.transition(RecordState::Free, RecordState::Committed, Authority::Broker)
                .expect("pooled local record not free");
            self.shared.perms.retain_only(rec, sender.0, PERM_WRITE);
            self.shared.perms.grant(receiver.0, rec, PERM_READ);
            let mut chain = crate::arena::Chain::new();
            chain.push_tail(&self.shared.segment, rec);
            dirs.push(DirectionState {
                local_record: rec,
                sender: sender.0,
                receiver: receiver.0,
                sender_worker: sender.1,
                receiver_worker: receiver.1,
                chain: Mutex::new(chain),
                written_total: AtomicU64::new(0),
                read_total: AtomicU64::new(0),
                local_parked: std::sync::atomic::AtomicBool::new(false),
                reader_waiting: AtomicU32::new(0),
                writer_waiting: AtomicU32::new(0),
                reader_parked: AtomicU32::new(0),
                writer_parked: AtomicU32::new(0),
                write_rec: AtomicU32::new(rec.0),
                write_rec_seq: AtomicU64::new(0),
                progress: ProgressSignal::default(),
            });
        }
        let dir1 = dirs.pop().expect("two dirs");
        let dir0 = dirs.pop().expect("two dirs");
        Ok(ChannelShared::new(id, [dir0, dir1]))
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        *self.shared.dispatch_tx.lock().expect("dispatch poisoned") = None;
        if let Some(t) = self.dispatcher.lock().expect("dispatcher poisoned").take() {
            let _ = t.join();
        }
    }
}

/// Worker handle: principal, arena, and governing broker.
#[derive(Clone)]
pub struct Worker {
    pub id: WorkerId,
    pub principal: PrincipalId,
    pub arena: Arc<Arena>,
    pub broker: Arc<Broker>,
    pub runtime: Arc<Runtime>,
    pub(crate) process_outstanding: Arc<AtomicU32>,
    pub(crate) hint_pending: Arc<std::sync::atomic::AtomicBool>,
}

impl Worker {
    /// Claim guard wired to this worker's process counter and a channel's
    /// outstanding counter, bounded by the runtime policy.
    pub fn claim_guard(&self, channel_outstanding: Arc<AtomicU32>) -> ClaimGuard {
        let policy = &self.runtime.shared.policy;
        ClaimGuard {
            max_per_channel: policy.max_records_per_channel,
            max_per_process: policy.max_records_per_process,
            channel_outstanding,
            process_outstanding: self.process_outstanding.clone(),
        }
    }

    pub fn process_outstanding(&self) -> u32 {
        self.process_outstanding.load(Ordering::Acquire)
    }

    pub(crate) fn hint_pending(&self) -> &std::sync::atomic::AtomicBool {
        &self.hint_pending
    }
}

/// Bounded wait used in fault-retry loops.
pub(crate) const FAULT_RETRY_WAIT: Duration = Duration::from_millis(50);

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    fn unique_name(tag: &str) -> String {
        static N: AtomicUsize = AtomicUsize::new(0);
        format!(
            "test-{}-{}-{}",
            tag,
            std::process::id(),
            N.fetch_add(1, Ordering::Relaxed)
        )
    }

    fn small_runtime(brokers: u32) -> Arc<Runtime> {
        let mut opts = RuntimeOptions::small(&unique_name("broker"));
        opts.brokers = brokers;
        opts.policy = AllocationPolicy {
            max_records_per_channel: 4,
            max_records_per_process: 6,
            record_size_bytes: crate::gshm::PAGE_SIZE as u32,
            arena_size_bytes: 8 * crate::gshm::PAGE_SIZE as u64,
            local_record_bytes: crate::gshm::PAGE_SIZE as u32,
        };
        opts.segment_bytes = 4 * 1024 * 1024;
        Runtime::create(opts).unwrap()
    }

    fn make_channel(rt: &Arc<Runtime>, a: &Worker, b: &Worker) -> Arc<ChannelShared> {
        let id = rt.next_channel_id();
        let ctl = rt
            .build_channel(id, (a.principal, a.id), (b.principal, b.id))
            .unwrap();
        a.broker.register_channel(ctl.clone());
        if !Arc::ptr_eq(&a.broker, &b.broker) {
            b.broker.register_channel(ctl.clone());
        }
        ctl
    }

    #[test]
    fn register_two_workers_disjoint_arenas() {
        let rt = small_runtime(1);
        let a = rt.register_worker(0, 4096, 4).unwrap();
        let b = rt.register_worker(0, 4096, 4).unwrap();
        assert_ne!(a.id, b.id);
        let ra = a.arena.walk_free();
        let rb = b.arena.walk_free();
        assert!(ra.iter().all(|r| !rb.contains(r)));
    }

    #[test]
    fn register_beyond_capacity_fails() {
        let mut opts = RuntimeOptions::small(&unique_name("broker"));
        opts.segment_bytes = 16 * crate::gshm::PAGE_SIZE as u64;
        let rt = Runtime::create(opts).unwrap();
        assert!(rt.register_worker(0, 4096, 4).is_ok());
        assert!(rt.register_worker(0, 4096, 1000).is_err());
    }

    #[test]
    fn commit_within_bounds_grants_read() {
        let rt = small_runtime(1);
        let a = rt.register_worker(0, 4096, 8).unwrap();
        let b = rt.register_worker(0, 4096, 8).unwrap();
        let ctl = make_channel(&rt, &a, &b);

        let guard = a.claim_guard(ctl.outstanding.clone());
        let recs = {
            let mut chain = ctl.dirs[0].chain.lock().unwrap();
            a.arena
                .speculative_claim_chained(ctl.id, 2, &guard, &mut chain)
                .unwrap()
        };
        let report = a.broker.commit_worker(a.id).unwrap();
        assert_eq!(report.committed.len(), 2);
        assert!(report.rolled_back.is_empty());
        for rec in &recs {
            assert_eq!(rt.segment().meta(*rec).unwrap().state(), RecordState::Committed);
            assert!(rt
                .permissions()
                .check_access(b.principal, *rec, AccessKind::Read)
                .is_ok());
        }
        // commit idempotence: second pass is a no-op
        assert!(a.broker.commit_worker(a.id).unwrap().is_empty());
    }

    #[test]
    fn commit_over_bounds_rolls_back_to_free_tail() {
        let rt = small_runtime(1);
        let a = rt.register_worker(0, 4096, 8).unwrap();
        let b = rt.register_worker(0, 4096, 8).unwrap();
        let ctl = make_channel(&rt, &a, &b);

        // channel bound is 4; claim 6 with an unlimited guard
        let guard = ClaimGuard::unlimited();
        let recs = {
            let mut chain = ctl.dirs[0].chain.lock().unwrap();
            a.arena
                .speculative_claim_chained(ctl.id, 6, &guard, &mut chain)
                .unwrap()
        };
        ctl.outstanding.store(6, Ordering::Release);
        a.process_outstanding.store(6, Ordering::Release);
        let report = a.broker.commit_worker(a.id).unwrap();
        assert_eq!(report.committed.len(), 4);
        assert_eq!(report.rolled_back.len(), 2);
        assert_eq!(ctl.rollback_events.load(Ordering::Acquire), 2);
        // rolled back records are free and at the tail
        let free = a.arena.walk_free();
        assert_eq!(free[free.len() - 2..], recs[4..]);
        let audit = a.broker.audit();
        assert!(audit.ok(), "{:?}", audit.problems);
    }

    #[test]
    fn release_roundtrip_restores_free_count() {
        let rt = small_runtime(1);
        let a = rt.register_worker(0, 4096, 8).unwrap();
        let b = rt.register_worker(0, 4096, 8).unwrap();
        let ctl = make_channel(&rt, &a, &b);
        let before = a.arena.free_count();

        let guard = a.claim_guard(ctl.outstanding.clone());
        let recs = {
            let mut chain = ctl.dirs[0].chain.lock().unwrap();
            a.arena
                .speculative_claim_chained(ctl.id, 3, &guard, &mut chain)
                .unwrap()
        };
        a.broker.commit_worker(a.id).unwrap();
        // consume: cursors equal
        for rec in &recs {
            let meta = rt.segment().meta(*rec).unwrap();
            meta.advance_write_cursor(128);
            meta.advance_read_cursor(128);
        }
        {
            let mut chain = ctl.dirs[0].chain.lock().unwrap();
            for rec in &recs {
                chain.remove(rt.segment(), *rec);
            }
        }
        a.broker.release_records(ctl.id, &recs).unwrap();
        assert_eq!(a.arena.free_count(), before);
        assert_eq!(a.process_outstanding.load(Ordering::Acquire), 0);
        assert_eq!(ctl.outstanding.load(Ordering::Acquire), 0);
        let audit = a.broker.audit();
        assert!(audit.ok(), "{:?}", audit.problems);
    }

    #[test]
    fn release_unconsumed_is_rejected() {
        let rt = small_runtime(1);
        let a = rt.register_worker(0, 4096, 8).unwrap();
        let b = rt.register_worker(0, 4096, 8).unwrap();
        let ctl = make_channel(&rt, &a, &b);
        let guard = a.claim_guard(ctl.outstanding.clone());
        let recs = {
            let mut chain = ctl.dirs[0].chain.lock().unwrap();
            a.arena
                .speculative_claim_chained(ctl.id, 1, &guard, &mut chain)
                .unwrap()
        };
        a.broker.commit_worker(a.id).unwrap();
        rt.segment().meta(recs[0]).unwrap().advance_write_cursor(64);
        let err = a.broker.release_records(ctl.id, &recs).unwrap_err();
        assert!(matches!(
            err,
            BrokerError::Arena(ArenaError::ReleaseUnconsumed(_))
        ));
    }

    #[test]
    fn fault_triggers_commit_and_grant() {
        let rt = small_runtime(1);
        let a = rt.register_worker(0, 4096, 8).unwrap();
        let b = rt.register_worker(0, 4096, 8).unwrap();
        let ctl = make_channel(&rt, &a, &b);
        let guard = a.claim_guard(ctl.outstanding.clone());
        let recs = {
            let mut chain = ctl.dirs[0].chain.lock().unwrap();
            a.arena
                .speculative_claim_chained(ctl.id, 1, &guard, &mut chain)
                .unwrap()
        };
        // receiver read on claimed record faults; fault handling commits
        let fault = rt
            .permissions()
            .check_access(b.principal, recs[0], AccessKind::Read)
            .unwrap_err();
        a.broker.step(vec![BrokerMsg::Fault(fault)]).unwrap();
        assert!(rt
            .permissions()
            .check_access(b.principal, recs[0], AccessKind::Read)
            .is_ok());
        assert_eq!(rt.segment().meta(recs[0]).unwrap().state(), RecordState::Committed);
    }

    #[test]
    fn tick_with_empty_state_is_fixed_point() {
        let rt = small_runtime(1);
        let a = rt.register_worker(0, 4096, 4).unwrap();
        let b = rt.register_worker(0, 4096, 4).unwrap();
        let _ctl = make_channel(&rt, &a, &b);
        let dump_before = a.broker.diagnostic_dump();
        a.broker.step(vec![]).unwrap();
        let dump_after = a.broker.diagnostic_dump();
        assert_eq!(dump_before, dump_after);
    }

    #[test]
    fn worker_teardown_reclaims_uncommitted_claims() {
        let rt = small_runtime(1);
        let a = rt.register_worker(0, 4096, 8).unwrap();
        let b = rt.register_worker(0, 4096, 8).unwrap();
        let ctl = make_channel(&rt, &a, &b);
        let guard = a.claim_guard(ctl.outstanding.clone());
        {
            let mut chain = ctl.dirs[0].chain.lock().unwrap();
            a.arena
                .speculative_claim_chained(ctl.id, 3, &guard, &mut chain)
                .unwrap();
        }
        rt.segment().meta(ctl.dirs[0].local_record).unwrap().advance_write_cursor(16);
        a.broker.crash_worker(a.id).unwrap();
        assert_eq!(a.arena.free_count(), 8);
        let audit = a.broker.audit();
        assert!(audit.ok(), "{:?}", audit.problems);
        assert_eq!(ctl.state(), ChannelState::Closed);
    }

    #[test]
    fn diagnostic_dump_matches_golden_form() {
        let rt = small_runtime(1);
        let a = rt.register_worker(0, 4096, 2).unwrap();
        let b = rt.register_worker(0, 4096, 2).unwrap();
        let ctl = make_channel(&rt, &a, &b);
        ctl.set_state(ChannelState::Active);
        rt.segment()
            .meta(ctl.dirs[0].local_record)
            .unwrap()
            .advance_write_cursor(16);
        ctl.dirs[0].written_total.store(16, Ordering::Release);
        let golden = "\
broker b0
arena w0 free=2 total=2 pending_claims=0 committed=0 alive=true
arena w1 free=2 total=2 pending_claims=0 committed=0 alive=true
channel ch1 state=Active
 dir0 local=r4 parked=false chain=[r4] written=16 read=0
 dir1 local=r5 parked=false chain=[r5] written=0 read=0
perm p1 r0 w
perm p1 r1 w
perm p1 r4 w
perm p2 r2 w
perm p2 r3 w
perm p2 r4 r
perm p2 r5 w
perm p1 r5 r
";
        // permission lines sort by (principal, record); rebuild both sides
        // sorted for a stable comparison
        let mut want: Vec<&str> = golden.lines().collect();
        let dump = a.broker.diagnostic_dump();
        let mut got: Vec<&str> = dump.lines().collect();
        want.sort_unstable();
        got.sort_unstable();
        assert_eq!(got, want);
    }

    #[test]
    fn diagnostic_dump_is_stable() {
        let rt = small_runtime(1);
        let a = rt.register_worker(0, 4096, 4).unwrap();
        let b = rt.register_worker(0, 4096, 4).unwrap();
        let _ctl = make_channel(&rt, &a, &b);
        let d1 = a.broker.diagnostic_dump();
        let d2 = a.broker.diagnostic_dump();
        assert_eq!(d1, d2);
        assert!(d1.contains("broker b0"));
        assert!(d1.contains("arena w0"));
        assert!(d1.contains("channel ch1"));
    }
}
