//! Per-worker record arenas with speculative, broker-free claiming.
//!
//! An [`Arena`] owns a FIFO free list of records (claim from head, release to
//! tail) carved from the shared segment. The owning worker claims records
//! without any broker round trip; each claim is appended to a claim log that
//! the broker later drains at commit points to ratify or roll back the
//! allocation under the [`AllocationPolicy`]. All other record state
//! transitions (commit, rollback, release) are performed by the broker.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::gshm::{Authority, GshmError, PermissionMap, RecordState, Segment, PERM_WRITE};
use crate::{ChannelId, PrincipalId, RecordId, WorkerId};

#[derive(Debug, Error)]
pub enum ArenaError {
    #[error("arena exhausted: {free} free, {requested} requested")]
    ArenaExhausted { free: u32, requested: u32 },
    #[error("claim rate-limited: {scope} bound {bound} would be exceeded")]
    RateLimited { scope: &'static str, bound: u32 },
    #[error("record {0} still has unread bytes")]
    ReleaseUnconsumed(RecordId),
    #[error("record {record} is not owned by channel {channel}")]
    NotOwner { record: RecordId, channel: ChannelId },
    #[error(transparent)]
    Gshm(#[from] GshmError),
}

/// Bounds governing record usage, checked softly at claim time and
/// authoritatively by the broker at commit time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationPolicy {
    pub max_records_per_channel: u32,
    pub max_records_per_process: u32,
    pub record_size_bytes: u32,
    pub arena_size_bytes: u64,
    pub local_record_bytes: u32,
}

impl Default for AllocationPolicy {
    fn default() -> AllocationPolicy {
        AllocationPolicy {
            max_records_per_channel: 64,
            max_records_per_process: 4096,
            record_size_bytes: 64 * 1024,
            arena_size_bytes: 128 * 1024 * 1024,
            local_record_bytes: 64 * 1024,
        }
    }
}

impl AllocationPolicy {
    pub fn validate(&self) -> Result<(), String> {
        let page = crate::gshm::PAGE_SIZE as u64;
        if self.max_records_per_channel == 0 || self.max_records_per_process == 0 {
            return Err("record bounds must be positive".into());
        }
        if self.record_size_bytes == 0 || !(self.record_size_bytes as u64).is_multiple_of(page) {
            return Err(format!(
                "record_size_bytes {} must be a positive page multiple",
                self.record_size_bytes
            ));
        }
        if self.local_record_bytes == 0 || !(self.local_record_bytes as u64).is_multiple_of(page) {
            return Err(format!(
                "local_record_bytes {} must be a positive page multiple",
                self.local_record_bytes
            ));
        }
        if self.arena_size_bytes == 0 {
            return Err("arena_size_bytes must be positive".into());
        }
        Ok(())
    }

    /// Records per arena implied by the sizes.
    pub fn records_per_arena(&self) -> u32 {
        (self.arena_size_bytes / self.record_size_bytes as u64) as u32
    }
}

/// One entry of the worker→broker claim log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClaimEntry {
    pub seq: u64,
    pub channel: ChannelId,
    pub record: RecordId,
}

/// Soft claim-time bounds, tracked with worker-local atomics. The counters
/// cover claimed-or-committed records and are decremented by the broker on
/// rollback and release.
#[derive(Clone)]
pub struct ClaimGuard {
    pub max_per_channel: u32,
    pub max_per_process: u32,
    pub channel_outstanding: Arc<AtomicU32>,
    pub process_outstanding: Arc<AtomicU32>,
}

impl ClaimGuard {
    pub fn unlimited() -> ClaimGuard {
        ClaimGuard {
            max_per_channel: u32::MAX,
            max_per_process: u32::MAX,
            channel_outstanding: Arc::new(AtomicU32::new(0)),
            process_outstanding: Arc::new(AtomicU32::new(0)),
        }
    }

    fn precheck(&self, n: u32) -> Result<(), ArenaError> {
        if self.channel_outstanding.load(Ordering::Acquire) + n > self.max_per_channel {
            return Err(ArenaError::RateLimited {
                scope: "channel",
                bound: self.max_per_channel,
            });
        }
        if self.process_outstanding.load(Ordering::Acquire) + n > self.max_per_process {
            return Err(ArenaError::RateLimited {
                scope: "process",
                bound: self.max_per_process,
            });
        }
        Ok(())
    }

    fn charge(&self, n: u32) {
        self.channel_outstanding.fetch_add(n, Ordering::AcqRel);
        self.process_outstanding.fetch_add(n, Ordering::AcqRel);
    }
}

struct FreeList {
    head: Option<RecordId>,
    tail: Option<RecordId>,
    count: u32,
}

/// A per-worker free-record list plus claim log. Claims are made only by the
/// owning worker; the free-list tail is refilled by the broker on release and
/// rollback.
pub struct Arena {
    worker: WorkerId,
    principal: PrincipalId,
    record_size: u32,
    record_count: u32,
    segment: Arc<Segment>,
    free: Mutex<FreeList>,
    claim_log: Mutex<VecDeque<ClaimEntry>>,
    next_seq: AtomicU64,
}

impl Arena {
    /// Carve `record_count` records of `record_size` bytes from the segment
    /// and chain them head→tail, all `Free`, writable only by the owning
    /// worker's principal.
    pub fn init(
        worker: WorkerId,
        principal: PrincipalId,
        record_size: u32,
        record_count: u32,
        segment: Arc<Segment>,
        perms: &PermissionMap,
    ) -> Result<Arena, ArenaError> {
        if record_size == 0 || !(record_size as u64).is_multiple_of(crate::gshm::PAGE_SIZE as u64) {
            return Err(ArenaError::Gshm(GshmError::BadCapacity {
                capacity: record_size as u64,
            }));
        }
        let mut head = None;
        let mut tail: Option<RecordId> = None;
        for _ in 0..record_count {
            let rec = segment.register_record(record_size)?;
            let meta = segment.meta(rec)?;
            meta.set_home_arena(Some(worker));
            perms.grant(principal, rec, PERM_WRITE);
            if let Some(prev) = tail {
                segment.meta(prev)?.set_next_record(Some(rec));
            } else {
                head = Some(rec);
            }
            tail = Some(rec);
        }
        Ok(Arena {
            worker,
            principal,
            record_size,
            record_count,
            segment,
            free: Mutex::new(FreeList {
                head,
                tail,
                count: record_count,
            }),
            claim_log: Mutex::new(VecDeque::new()),
            next_seq: AtomicU64::new(1),
        })
    }

    pub fn worker(&self) -> WorkerId {
        self.worker
    }

    pub fn principal(&self) -> PrincipalId {
        self.principal
    }

    pub fn record_size(&self) -> u32 {
        self.record_size
    }

    pub fn record_count(&self) -> u32 {
        self.record_count
    }

    pub fn free_count(&self) -> u32 {
        self.free.lock().expect("free list poisoned").count
    }

    pub fn segment(&self) -> &Arc<Segment> {
        &self.segment
    }

    /// Remove `n` records from the free-list head, mark them `Claimed` for
    /// `channel`, and log the claims for the broker to ratify later. No
    /// broker interaction occurs. Claimed records are returned in FIFO order
    /// and still need to be chained by the caller.
    pub fn speculative_claim(
        &self,
        channel: ChannelId,
        n: usize,
        guard: &ClaimGuard,
    ) -> Result<Vec<RecordId>, ArenaError> {
        self.claim_inner(channel, n, guard, None)
    }

    /// Claim and append onto a channel chain in one step, so the broker never
    /// drains a claim-log entry whose record is not chained yet. The caller
    /// holds the chain lock of the direction being extended.
    pub fn speculative_claim_chained(
        &self,
        channel: ChannelId,
        n: usize,
        guard: &ClaimGuard,
        chain: &mut Chain,
    ) -> Result<Vec<RecordId>, ArenaError> {
        self.claim_inner(channel, n, guard, Some(chain))
    }

    fn claim_inner(
        &self,
        channel: ChannelId,
        n: usize,
        guard: &ClaimGuard,
        mut chain: Option<&mut Chain>,
    ) -> Result<Vec<RecordId>, ArenaError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let n32 = u32::try_from(n).expect("claim count");
        guard.precheck(n32)?;

        let mut claimed = Vec::with_capacity(n);
        {
            // seq assignment and the log append stay inside one critical
            // section so the log is strictly seq-ordered even when several
            // workers share the arena
            let mut free = self.free.lock().expect("free list poisoned");
            if free.count < n32 {
                return Err(ArenaError::ArenaExhausted {
                    free: free.count,
                    requested: n32,
                });
            }
            let mut log = self.claim_log.lock().expect("claim log poisoned");
            for _ in 0..n {
                let rec = free.head.expect("free count vs head mismatch");
                let meta = self.segment.meta(rec)?;
                free.head = meta.next_record();
                if free.head.is_none() {
                    free.tail = None;
                }
                free.count -= 1;
                meta.set_next_record(None);
                meta.transition(RecordState::Free, RecordState::Claimed, Authority::Worker)
                    .expect("free-list record not free");
                meta.set_owner_channel(Some(channel));
                let seq = self.next_seq.fetch_add(1, Ordering::Relaxed);
                meta.set_seq(seq);
                if let Some(chain) = chain.as_deref_mut() {
                    chain.push_tail(&self.segment, rec);
                }
                log.push_back(ClaimEntry {
                    seq,
                    channel,
                    record: rec,
                });
                claimed.push(rec);
            }
        }
        guard.charge(n32);
        Ok(claimed)
    }

    /// Broker side: take all pending claim entries, in seq order.
    pub(crate) fn drain_claims(&self) -> Vec<ClaimEntry> {
        let mut log = self.claim_log.lock().expect("claim log poisoned");
        log.drain(..).collect()
    }

    pub fn pending_claims(&self) -> usize {
        self.claim_log.lock().expect("claim log poisoned").len()
    }

    /// Broker side: append records (already `Free` with zeroed cursors) to
    /// the free-list tail.
    pub(crate) fn push_free_tail(&self, records: &[RecordId]) {
        if records.is_empty() {
            return;
        }
        let mut free = self.free.lock().expect("free list poisoned");
        for &rec in records {
            let meta = self.segment.meta(rec).expect("arena record");
            debug_assert_eq!(meta.state(), RecordState::Free);
            meta.set_next_record(None);
            match free.tail {
                Some(tail) => {
                    self.segment
                        .meta(tail)
                        .expect("arena record")
                        .set_next_record(Some(rec));
                }
                None => free.head = Some(rec),
            }
            free.tail = Some(rec);
            free.count += 1;
        }
    }

    /// Walk the free list from head, following `next_record`.
    pub fn walk_free(&self) -> Vec<RecordId> {
        let free = self.free.lock().expect("free list poisoned");
        let mut out = Vec::with_capacity(free.count as usize);
        let mut cur = free.head;
        while let Some(rec) = cur {
            out.push(rec);
            cur = self.segment.meta(rec).expect("arena record").next_record();
            if out.len() > self.record_count as usize {
                panic!("free list cycle in arena {}", self.worker);
            }
        }
        assert_eq!(out.len(), free.count as usize, "free count vs walk mismatch");
        if let (Some(last), Some(tail)) = (out.last(), free.tail) {
            assert_eq!(*last, tail, "free tail mismatch");
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Record chains
// ---------------------------------------------------------------------------

/// FIFO chain of records linked through the in-segment `next_record` field.
/// Used for the per-direction channel chains; the head is consumed by the
/// receiver while the tail is extended by the sender.
#[derive(Debug, Default)]
pub struct Chain {
    head: Option<RecordId>,
    tail: Option<RecordId>,
    len: u32,
}

impl Chain {
    pub fn new() -> Chain {
        Chain::default()
    }

    pub fn head(&self) -> Option<RecordId> {
        self.head
    }

    pub fn tail(&self) -> Option<RecordId> {
        self.tail
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push_tail(&mut self, segment: &Segment, rec: RecordId) {
        let meta = segment.meta(rec).expect("chain record");
        meta.set_next_record(None);
        match self.tail {
            Some(tail) => segment
                .meta(tail)
                .expect("chain record")
                .set_next_record(Some(rec)),
            None => self.head = Some(rec),
        }
        self.tail = Some(rec);
        self.len += 1;
    }

    pub fn pop_head(&mut self, segment: &Segment) -> Option<RecordId> {
        let head = self.head?;
        let meta = segment.meta(head).expect("chain record");
        self.head = meta.next_record();
        meta.set_next_record(None);
        if self.head.is_none() {
            self.tail = None;
        }
        self.len -= 1;
        Some(head)
    }

    /// Unlink an arbitrary record (used by broker rollback). Returns false if
    /// the record is not in the chain.
    pub fn remove(&mut self, segment: &Segment, rec: RecordId) -> bool {
        let mut prev: Option<RecordId> = None;
        let mut cur = self.head;
        while let Some(c) = cur {
            let meta = segment.meta(c).expect("chain record");
            if c == rec {
                let next = meta.next_record();
                match prev {
                    Some(p) => segment
                        .meta(p)
                        .expect("chain record")
                        .set_next_record(next),
                    None => self.head = next,
                }
                if self.tail == Some(c) {
                    self.tail = prev;
                }
                meta.set_next_record(None);
                self.len -= 1;
                return true;
            }
            prev = Some(c);
            cur = meta.next_record();
        }
        false
    }

    pub fn records(&self, segment: &Segment) -> Vec<RecordId> {
        let mut out = Vec::with_capacity(self.len as usize);
        let mut cur = self.head;
        while let Some(rec) = cur {
            out.push(rec);
            cur = segment.meta(rec).expect("chain record").next_record();
            if out.len() > self.len as usize {
                panic!("chain walk exceeds recorded length");
            }
        }
        assert_eq!(out.len(), self.len as usize, "chain length mismatch");
        out
    }
}
