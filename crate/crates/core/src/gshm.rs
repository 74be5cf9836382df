//! Global shared memory: named segments, record layout, and access control.
//!
//! A [`Segment`] is a named OS shared-memory object (a file under `/dev/shm`)
//! mapped into every participating process. The segment is divided into a
//! header page, a record-metadata table, and a data region from which
//! page-aligned records and raw regions are carved. All bookkeeping stored in
//! the segment is offset-based so the layout is identical in every mapping.
//!
//! Access control is enforced in-library: every data-path access is gated by
//! [`PermissionMap::check_access`], and a denied access produces exactly one
//! [`FaultEvent`] routed to the broker. This is the software stand-in for
//! hardware page protection; the fault path is semantically the same.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{OnceLock, RwLock};
use std::time::Instant;

use memmap2::MmapRaw;
use thiserror::Error;

use crate::{PrincipalId, RecordId};

/// Fixed page size for all segments.
pub const PAGE_SIZE: usize = 4096;

/// Shared-memory object names are `<SHM_PREFIX>.<segment-name>`.
pub const SHM_PREFIX: &str = "elastisock";

const SEGMENT_MAGIC: [u8; 8] = *b"ELSTSEG1";
const SEGMENT_VERSION: u32 = 1;
const META_ENTRY_BYTES: usize = 64;

#[derive(Debug, Error)]
pub enum GshmError {
    #[error("segment name {0:?} is invalid")]
    BadName(String),
    #[error("segment {0:?} already exists")]
    NameCollision(String),
    #[error("segment size {size} is not a positive multiple of {PAGE_SIZE} with at least two pages")]
    BadSize { size: u64 },
    #[error("record capacity {capacity} is not a positive multiple of {PAGE_SIZE}")]
    BadCapacity { capacity: u64 },
    #[error("segment exhausted: requested {requested} bytes, {available} available")]
    SegmentExhausted { requested: u64, available: u64 },
    #[error("unknown record {0}")]
    UnknownRecord(RecordId),
    #[error("segment header is damaged or not a segment")]
    BadHeader,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn process_epoch() -> Instant {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    *EPOCH.get_or_init(Instant::now)
}

/// Monotonic nanoseconds since the first call in this process.
pub fn monotonic_nanos() -> u64 {
    process_epoch().elapsed().as_nanos() as u64
}

fn shm_dir() -> PathBuf {
    let dev_shm = Path::new("/dev/shm");
    if dev_shm.is_dir() {
        dev_shm.to_path_buf()
    } else {
        std::env::temp_dir()
    }
}

fn segment_path(name: &str) -> PathBuf {
    shm_dir().join(format!("{SHM_PREFIX}.{name}"))
}

fn validate_name(name: &str) -> Result<(), GshmError> {
    if name.is_empty()
        || name.len() > 128
        || name
            .bytes()
            .any(|b| !(b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.'))
    {
        return Err(GshmError::BadName(name.to_string()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// In-segment structures
// ---------------------------------------------------------------------------

#[repr(C)]
struct SegmentHeader {
    magic: [u8; 8],
    version: u32,
    page_size: u32,
    size_bytes: u64,
    meta_capacity: u32,
    _pad0: u32,
    data_start: u64,
    record_count: AtomicU32,
    _pad1: u32,
    alloc_cursor: AtomicU64,
}

/// Lifecycle states of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordState {
    Free,
    Claimed,
    Committed,
}

impl RecordState {
    fn from_raw(raw: u32) -> Option<RecordState> {
        match raw {
            1 => Some(RecordState::Free),
            2 => Some(RecordState::Claimed),
            3 => Some(RecordState::Committed),
            _ => None,
        }
    }

    fn raw(self) -> u32 {
        match self {
            RecordState::Free => 1,
            RecordState::Claimed => 2,
            RecordState::Committed => 3,
        }
    }
}

impl fmt::Display for RecordState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordState::Free => write!(f, "free"),
            RecordState::Claimed => write!(f, "claimed"),
            RecordState::Committed => write!(f, "committed"),
        }
    }
}

/// Which side of the system performs a record state transition. Everything
/// except the speculative Free→Claimed step is reserved to the broker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Authority {
    Worker,
    Broker,
}

/// Per-record metadata stored in the segment, one 64-byte entry per record.
///
/// Cursors follow the single-writer discipline: `write_cursor` is advanced
/// only by the sending side after the bytes are in place (Release), and
/// `read_cursor` only by the receiving side (Release); each side reads the
/// other's cursor with Acquire.
#[repr(C, align(64))]
pub struct RecordMeta {
    offset: AtomicU64,
    capacity: AtomicU32,
    state: AtomicU32,
    owner_channel: AtomicU64,
    next_record: AtomicU32,
    write_cursor: AtomicU32,
    read_cursor: AtomicU32,
    home_arena: AtomicU32,
    seq: AtomicU64,
}

const _: () = assert!(std::mem::size_of::<RecordMeta>() == META_ENTRY_BYTES);

pub(crate) const NO_CHANNEL: u64 = u64::MAX;
pub(crate) const NO_ARENA: u32 = u32::MAX;

impl RecordMeta {
    pub fn capacity(&self) -> u32 {
        self.capacity.load(Ordering::Relaxed)
    }

    pub fn offset(&self) -> u64 {
        self.offset.load(Ordering::Relaxed)
    }

    pub fn state(&self) -> RecordState {
        RecordState::from_raw(self.state.load(Ordering::Acquire)).expect("record state raw value")
    }

    pub(crate) fn transition(
        &self,
        from: RecordState,
        to: RecordState,
        authority: Authority,
    ) -> Result<(), RecordState> {
        debug_assert!(
            matches!(
                (from, to, authority),
                (RecordState::Free, RecordState::Claimed, Authority::Worker) | (_, _, Authority::Broker)
            ),
            "state transition {from}->{to} attempted by {authority:?}",
        );
        self.state
            .compare_exchange(from.raw(), to.raw(), Ordering::AcqRel, Ordering::Acquire)
            .map(|_| ())
            .map_err(|raw| RecordState::from_raw(raw).expect("record state raw value"))
    }

    pub fn owner_channel(&self) -> Option<crate::ChannelId> {
        match self.owner_channel.load(Ordering::Acquire) {
            NO_CHANNEL => None,
            id => Some(crate::ChannelId(id)),
        }
    }

    pub(crate) fn set_owner_channel(&self, owner: Option<crate::ChannelId>) {
        let raw = owner.map(|c| c.0).unwrap_or(NO_CHANNEL);
        self.owner_channel.store(raw, Ordering::Release);
    }

    pub fn next_record(&self) -> Option<RecordId> {
        match self.next_record.load(Ordering::Acquire) {
            RecordId::NONE => None,
            id => Some(RecordId(id)),
        }
    }

    pub(crate) fn set_next_record(&self, next: Option<RecordId>) {
        let raw = next.map(|r| r.0).unwrap_or(RecordId::NONE);
        self.next_record.store(raw, Ordering::Release);
    }

    pub fn write_cursor(&self) -> u32 {
        self.write_cursor.load(Ordering::Acquire)
    }

    pub fn read_cursor(&self) -> u32 {
        self.read_cursor.load(Ordering::Acquire)
    }

    pub(crate) fn advance_write_cursor(&self, by: u32) {
        self.write_cursor.fetch_add(by, Ordering::Release);
    }

    pub(crate) fn advance_read_cursor(&self, by: u32) {
        self.read_cursor.fetch_add(by, Ordering::Release);
    }

    pub(crate) fn reset_cursors(&self) {
        self.read_cursor.store(0, Ordering::Release);
        self.write_cursor.store(0, Ordering::Release);
    }

    pub fn seq(&self) -> u64 {
        self.seq.load(Ordering::Acquire)
    }

    pub(crate) fn set_seq(&self, seq: u64) {
        self.seq.store(seq, Ordering::Release);
    }

    /// Worker id of the arena this record was carved for, if any.
    pub fn home_arena(&self) -> Option<crate::WorkerId> {
        match self.home_arena.load(Ordering::Relaxed) {
            NO_ARENA => None,
            w => Some(crate::WorkerId(w)),
        }
    }

    pub(crate) fn set_home_arena(&self, worker: Option<crate::WorkerId>) {
        self.home_arena
            .store(worker.map(|w| w.0).unwrap_or(NO_ARENA), Ordering::Relaxed);
    }
}

// ---------------------------------------------------------------------------
// Segment
// ---------------------------------------------------------------------------

/// A raw page-aligned region carved from a segment (used by the reserved-ring
/// transport in the benchmark harness).
#[derive(Debug, Clone, Copy)]
pub struct Region {
    pub offset: u64,
    pub len: u64,
}

/// A named shared-memory segment mapped into this process.
pub struct Segment {
    name: String,
    path: PathBuf,
    map: MmapRaw,
    size: u64,
    unlink_on_drop: AtomicBool,
    _file: File,
}

// The raw mapping is only ever accessed through offset/bounds-checked helpers
// below, and concurrent byte access follows the cursor publication protocol.
unsafe impl Send for Segment {}
unsafe impl Sync for Segment {}

impl Segment {
    /// Create a new named segment, zero-filled. Fails if the name is taken.
    pub fn create(name: &str, size_bytes: u64) -> Result<Segment, GshmError> {
        validate_name(name)?;
        if size_bytes == 0 || !size_bytes.is_multiple_of(PAGE_SIZE as u64) || size_bytes < 2 * PAGE_SIZE as u64 {
            return Err(GshmError::BadSize { size: size_bytes });
        }
        let path = segment_path(name);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    GshmError::NameCollision(name.to_string())
                } else {
                    GshmError::Io(e)
                }
            })?;
        file.set_len(size_bytes)?;
        let map = MmapRaw::map_raw(&file)?;
        let segment = Segment {
            name: name.to_string(),
            path,
            map,
            size: size_bytes,
            unlink_on_drop: AtomicBool::new(true),
            _file: file,
        };
        segment.format_header();
        Ok(segment)
    }

    /// Map an existing segment by name.
    pub fn open(name: &str) -> Result<Segment, GshmError> {
        validate_name(name)?;
        let path = segment_path(name);
        let file = OpenOptions::new().read(true).write(true).open(&path)?;
        let size = file.metadata()?.len();
        let map = MmapRaw::map_raw(&file)?;
        let segment = Segment {
            name: name.to_string(),
            path,
            map,
            size,
            unlink_on_drop: AtomicBool::new(false),
            _file: file,
        };
        let header = segment.header();
        if header.magic != SEGMENT_MAGIC
            || header.version != SEGMENT_VERSION
            || header.size_bytes != size
        {
            return Err(GshmError::BadHeader);
        }
        Ok(segment)
    }

    fn format_header(&self) {
        let meta_capacity = (self.size / PAGE_SIZE as u64) as u32;
        let meta_bytes = meta_capacity as u64 * META_ENTRY_BYTES as u64;
        let data_start = page_align(PAGE_SIZE as u64 + meta_bytes);
        let header = self.header();
        header.magic = SEGMENT_MAGIC;
        header.version = SEGMENT_VERSION;
        header.page_size = PAGE_SIZE as u32;
        header.size_bytes = self.size;
        header.meta_capacity = meta_capacity;
        header.data_start = data_start;
        header.record_count.store(0, Ordering::Release);
        header.alloc_cursor.store(data_start, Ordering::Release);
    }

    #[allow(clippy::mut_from_ref)]
    fn header(&self) -> &mut SegmentHeader {
        // SAFETY: the mapping is at least two pages, the header sits at offset
        // zero with page alignment, and all mutable fields past creation are
        // atomics.
        unsafe { &mut *(self.map.as_mut_ptr() as *mut SegmentHeader) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn size_bytes(&self) -> u64 {
        self.size
    }

    pub fn page_size(&self) -> u32 {
        PAGE_SIZE as u32
    }

    /// Number of registered records.
    pub fn record_count(&self) -> u32 {
        self.header().record_count.load(Ordering::Acquire)
    }

    /// Bytes still available for records or regions.
    pub fn bytes_available(&self) -> u64 {
        self.size
            .saturating_sub(self.header().alloc_cursor.load(Ordering::Acquire))
    }

    fn alloc_bytes(&self, bytes: u64) -> Result<u64, GshmError> {
        let bytes = page_align(bytes);
        let header = self.header();
        let mut cursor = header.alloc_cursor.load(Ordering::Acquire);
        loop {
            if cursor + bytes > self.size {
                return Err(GshmError::SegmentExhausted {
                    requested: bytes,
                    available: self.size - cursor,
                });
            }
            match header.alloc_cursor.compare_exchange(
                cursor,
                cursor + bytes,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return Ok(cursor),
                Err(cur) => cursor = cur,
            }
        }
    }

    /// Register a record of `capacity` bytes (page multiple). The record
    /// starts in the `Free` state with zeroed cursors.
    pub fn register_record(&self, capacity: u32) -> Result<RecordId, GshmError> {
        if capacity == 0 || !(capacity as u64).is_multiple_of(PAGE_SIZE as u64) {
            return Err(GshmError::BadCapacity {
                capacity: capacity as u64,
            });
        }
        let header = self.header();
        let id = header.record_count.load(Ordering::Acquire);
        if id >= header.meta_capacity {
            return Err(GshmError::SegmentExhausted {
                requested: capacity as u64,
                available: 0,
            });
        }
        let offset = self.alloc_bytes(capacity as u64)?;
        let meta = self.meta_slot(id);
        meta.offset.store(offset, Ordering::Relaxed);
        meta.capacity.store(capacity, Ordering::Relaxed);
        meta.state.store(RecordState::Free.raw(), Ordering::Relaxed);
        meta.owner_channel.store(NO_CHANNEL, Ordering::Relaxed);
        meta.next_record.store(RecordId::NONE, Ordering::Relaxed);
        meta.write_cursor.store(0, Ordering::Relaxed);
        meta.read_cursor.store(0, Ordering::Relaxed);
        meta.home_arena.store(NO_ARENA, Ordering::Relaxed);
        meta.seq.store(0, Ordering::Relaxed);
        header.record_count.store(id + 1, Ordering::Release);
        Ok(RecordId(id))
    }

    /// Carve a raw page-aligned region (no record metadata).
    pub fn alloc_region(&self, bytes: u64) -> Result<Region, GshmError> {
        let len = page_align(bytes);
        let offset = self.alloc_bytes(len)?;
        Ok(Region { offset, len })
    }

    fn meta_slot(&self, id: u32) -> &RecordMeta {
        debug_assert!(id < self.header().meta_capacity);
        // SAFETY: the meta table starts at the first page boundary after the
        // header and holds `meta_capacity` 64-byte aligned entries, which is
        // within the mapping by construction of `data_start`.
        unsafe {
            let base = self.map.as_mut_ptr().add(PAGE_SIZE);
            &*(base.add(id as usize * META_ENTRY_BYTES) as *const RecordMeta)
        }
    }

    /// Metadata for a registered record.
    pub fn meta(&self, id: RecordId) -> Result<&RecordMeta, GshmError> {
        if id.0 >= self.record_count() {
            return Err(GshmError::UnknownRecord(id));
        }
        Ok(self.meta_slot(id.0))
    }

    /// Copy `buf` into the record's data at byte offset `at`.
    pub fn write_record(&self, id: RecordId, at: u32, buf: &[u8]) -> Result<(), GshmError> {
        let meta = self.meta(id)?;
        let cap = meta.capacity() as u64;
        assert!(at as u64 + buf.len() as u64 <= cap, "record write out of bounds");
        // SAFETY: offset+capacity were bounds-checked against the mapping at
        // registration; the assert above keeps the copy inside the record.
        // Writers only touch bytes past the published write cursor, so the
        // region is not concurrently read.
        unsafe {
            let dst = self.map.as_mut_ptr().add(meta.offset() as usize + at as usize);
            copy_to_segment(dst, buf.as_ptr(), buf.len());
        }
        Ok(())
    }

    /// Copy record data at byte offset `at` into `buf`.
    pub fn read_record(&self, id: RecordId, at: u32, buf: &mut [u8]) -> Result<(), GshmError> {
        let meta = self.meta(id)?;
        let cap = meta.capacity() as u64;
        assert!(at as u64 + buf.len() as u64 <= cap, "record read out of bounds");
        // SAFETY: as in `write_record`; readers only touch bytes below the
        // write cursor they loaded with Acquire.
        unsafe {
            let src = self.map.as_ptr().add(meta.offset() as usize + at as usize);
            std::ptr::copy_nonoverlapping(src, buf.as_mut_ptr(), buf.len());
        }
        Ok(())
    }

    /// Raw region IO for the reserved-ring transport.
    pub fn write_region(&self, region: Region, at: u64, buf: &[u8]) {
        assert!(at + buf.len() as u64 <= region.len, "region write out of bounds");
        // SAFETY: the region was carved inside the mapping; the assert keeps
        // the copy inside it.
        unsafe {
            let dst = self.map.as_mut_ptr().add((region.offset + at) as usize);
            copy_to_segment(dst, buf.as_ptr(), buf.len());
        }
    }

    pub fn read_region(&self, region: Region, at: u64, buf: &mut [u8]) {
        assert!(at + buf.len() as u64 <= region.len, "region read out of bounds");
        // SAFETY: as in `write_region`.
        unsafe {
            let src = self.map.as_ptr().add((region.offset + at) as usize);
            std::ptr::copy_nonoverlapping(src, buf.as_mut_ptr(), buf.len());
        }
    }

    /// Keep or remove the backing object when this mapping drops.
    pub fn set_unlink_on_drop(&self, unlink: bool) {
        self.unlink_on_drop.store(unlink, Ordering::Relaxed);
    }
}

impl Drop for Segment {
    fn drop(&mut self) {
        if self.unlink_on_drop.load(Ordering::Relaxed) {
            let _ = std::fs::remove_file(&self.path);
        }
    }
}

impl fmt::Debug for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Segment")
            .field("name", &self.name)
            .field("size", &self.size)
            .field("records", &self.record_count())
            .finish()
    }
}

fn page_align(v: u64) -> u64 {
    v.div_ceil(PAGE_SIZE as u64) * PAGE_SIZE as u64
}

/// Copies at or above this size stream past the cache.
const NT_COPY_MIN: usize = 128 * 1024;

/// Streaming copy with non-temporal stores: large transfers into shared
/// buffers should not displace the working set or pay read-for-ownership on
/// the destination lines. The trailing sfence orders the streamed data
/// before any subsequent cursor publication.
#[cfg(target_arch = "x86_64")]
unsafe fn copy_to_segment(dst: *mut u8, src: *const u8, len: usize) {
    use std::arch::x86_64::{_mm_loadu_si128, _mm_sfence, _mm_stream_si128, __m128i};
    if len < NT_COPY_MIN {
        unsafe { std::ptr::copy_nonoverlapping(src, dst, len) };
        return;
    }
    unsafe {
        let mut off = 0usize;
        while off < len && (dst.add(off) as usize) & 15 != 0 {
            *dst.add(off) = *src.add(off);
            off += 1;
        }
        while off + 16 <= len {
            let v = _mm_loadu_si128(src.add(off) as *const __m128i);
            _mm_stream_si128(dst.add(off) as *mut __m128i, v);
            off += 16;
        }
        while off < len {
            *dst.add(off) = *src.add(off);
            off += 1;
        }
        _mm_sfence();
    }
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn copy_to_segment(dst: *mut u8, src: *const u8, len: usize) {
    unsafe { std::ptr::copy_nonoverlapping(src, dst, len) };
}

// ---------------------------------------------------------------------------
// Permissions and faults
// ---------------------------------------------------------------------------

/// Kind of record access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
}

impl AccessKind {
    fn bit(self) -> u8 {
        match self {
            AccessKind::Read => PERM_READ,
            AccessKind::Write => PERM_WRITE,
        }
    }
}

impl fmt::Display for AccessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccessKind::Read => write!(f, "read"),
            AccessKind::Write => write!(f, "write"),
        }
    }
}

pub const PERM_READ: u8 = 0b01;
pub const PERM_WRITE: u8 = 0b10;

/// Emitted when a principal attempts an access its permission set excludes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultEvent {
    pub principal: PrincipalId,
    pub record: RecordId,
    pub kind: AccessKind,
    pub at_nanos: u64,
}

/// Per-(principal, record) permission bits, with a per-record holder index
/// so record teardown does not scan the whole map. Mutations are serialized
/// by the broker; checks may run concurrently from any worker.
#[derive(Default)]
struct PermState {
    entries: HashMap<(PrincipalId, RecordId), u8>,
    holders: HashMap<RecordId, Vec<PrincipalId>>,
}

impl PermState {
    fn unindex(&mut self, principal: PrincipalId, record: RecordId) {
        if let Some(list) = self.holders.get_mut(&record) {
            list.retain(|p| *p != principal);
            if list.is_empty() {
                self.holders.remove(&record);
            }
        }
    }
}

#[derive(Default)]
pub struct PermissionMap {
    state: RwLock<PermState>,
}

impl PermissionMap {
    pub fn new() -> PermissionMap {
        PermissionMap::default()
    }

    /// Allowed iff `kind` is in the principal's permission set for the
    /// record; otherwise returns the fault event describing the denial.
    pub fn check_access(
        &self,
        principal: PrincipalId,
        record: RecordId,
        kind: AccessKind,
    ) -> Result<(), FaultEvent> {
        let state = self.state.read().expect("permission map poisoned");
        let bits = state.entries.get(&(principal, record)).copied().unwrap_or(0);
        if bits & kind.bit() != 0 {
            Ok(())
        } else {
            Err(FaultEvent {
                principal,
                record,
                kind,
                at_nanos: monotonic_nanos(),
            })
        }
    }

    pub fn grant(&self, principal: PrincipalId, record: RecordId, bits: u8) {
        let mut state = self.state.write().expect("permission map poisoned");
        let entry = state.entries.entry((principal, record)).or_insert(0);
        let was_empty = *entry == 0;
        *entry |= bits;
        if was_empty && bits != 0 {
            let list = state.holders.entry(record).or_default();
            if !list.contains(&principal) {
                list.push(principal);
            }
        }
    }

    /// Revoking an absent permission is a no-op.
    pub fn revoke(&self, principal: PrincipalId, record: RecordId, kind: AccessKind) {
        let mut state = self.state.write().expect("permission map poisoned");
        if let Some(bits) = state.entries.get_mut(&(principal, record)) {
            *bits &= !kind.bit();
            if *bits == 0 {
                state.entries.remove(&(principal, record));
                state.unindex(principal, record);
            }
        }
    }

    pub fn revoke_all(&self, principal: PrincipalId, record: RecordId) {
        let mut state = self.state.write().expect("permission map poisoned");
        if state.entries.remove(&(principal, record)).is_some() {
            state.unindex(principal, record);
        }
    }

    /// Batched grants under one lock.
    pub fn grant_batch(&self, grants: &[(PrincipalId, RecordId, u8)]) {
        if grants.is_empty() {
            return;
        }
        let mut state = self.state.write().expect("permission map poisoned");
        for (principal, record, bits) in grants {
            let entry = state.entries.entry((*principal, *record)).or_insert(0);
            let was_empty = *entry == 0;
            *entry |= bits;
            if was_empty && *bits != 0 {
                let list = state.holders.entry(*record).or_default();
                if !list.contains(principal) {
                    list.push(*principal);
                }
            }
        }
    }

    /// Batched record resets under one lock: drop every entry for each
    /// record except the keeper's bits.
    pub fn retain_only_batch(&self, resets: &[(RecordId, PrincipalId, u8)]) {
        if resets.is_empty() {
            return;
        }
        let mut state = self.state.write().expect("permission map poisoned");
        for (record, keep, keep_bits) in resets {
            if let Some(holders) = state.holders.remove(record) {
                for principal in holders {
                    state.entries.remove(&(principal, *record));
                }
            }
            if *keep_bits != 0 {
                state.entries.insert((*keep, *record), *keep_bits);
                state.holders.insert(*record, vec![*keep]);
            }
        }
    }

    /// Drop every entry for `record` except the given holder's bits.
    pub fn retain_only(&self, record: RecordId, keep: PrincipalId, keep_bits: u8) {
        let mut state = self.state.write().expect("permission map poisoned");
        if let Some(holders) = state.holders.remove(&record) {
            for principal in holders {
                state.entries.remove(&(principal, record));
            }
        }
        if keep_bits != 0 {
            state.entries.insert((keep, record), keep_bits);
            state.holders.insert(record, vec![keep]);
        }
    }

    pub fn holders_of(&self, record: RecordId, kind: AccessKind) -> Vec<PrincipalId> {
        let state = self.state.read().expect("permission map poisoned");
        let mut out: Vec<PrincipalId> = state
            .holders
            .get(&record)
            .map(|list| {
                list.iter()
                    .filter(|p| {
                        state
                            .entries
                            .get(&(**p, record))
                            .is_some_and(|bits| bits & kind.bit() != 0)
                    })
                    .copied()
                    .collect()
            })
            .unwrap_or_default();
        out.sort();
        out
    }

    /// Stable snapshot for equality assertions in tests.
    pub fn snapshot(&self) -> Vec<(PrincipalId, RecordId, u8)> {
        let state = self.state.read().expect("permission map poisoned");
        let mut out: Vec<_> = state.entries.iter().map(|((p, r), b)| (*p, *r, *b)).collect();
        out.sort();
        out
    }
}

/// Where denied accesses are reported. The broker implements this.
pub trait FaultSink: Send + Sync {
    fn deliver(&self, fault: FaultEvent);
}

/// Gates every data-path record access: checks the permission map and routes
/// exactly one fault event per denial to the sink.
#[derive(Clone)]
pub struct AccessGate {
    segment: std::sync::Arc<Segment>,
    perms: std::sync::Arc<PermissionMap>,
    sink: std::sync::Arc<dyn FaultSink>,
}

impl AccessGate {
    pub fn new(
        segment: std::sync::Arc<Segment>,
        perms: std::sync::Arc<PermissionMap>,
        sink: std::sync::Arc<dyn FaultSink>,
    ) -> AccessGate {
        AccessGate {
            segment,
            perms,
            sink,
        }
    }

    pub fn permissions(&self) -> &PermissionMap {
        &self.perms
    }

    /// Check an access; on denial the fault is routed to the broker and also
    /// returned so the caller can wait for resolution and retry.
    pub fn check(
        &self,
        principal: PrincipalId,
        record: RecordId,
        kind: AccessKind,
    ) -> Result<Result<(), FaultEvent>, GshmError> {
        if record.0 >= self.segment.record_count() {
            return Err(GshmError::UnknownRecord(record));
        }
        match self.perms.check_access(principal, record, kind) {
            Ok(()) => Ok(Ok(())),
            Err(fault) => {
                self.sink.deliver(fault);
                Ok(Err(fault))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    fn unique_name(tag: &str) -> String {
        static N: AtomicUsize = AtomicUsize::new(0);
        format!(
            "test-{}-{}-{}",
            tag,
            std::process::id(),
            N.fetch_add(1, Ordering::Relaxed)
        )
    }

    #[test]
    fn create_minimal_segment() {
        let name = unique_name("gshm");
        let seg = Segment::create(&name, 4 * PAGE_SIZE as u64).unwrap();
        assert_eq!(seg.size_bytes(), 4 * PAGE_SIZE as u64);
        assert_eq!(seg.record_count(), 0);
    }

    #[test]
    fn create_default_benchmark_sized_segment() {
        // 128 MiB shared arena plus 128 KiB of local records per connection
        let conns = 4u64;
        let size = 128 * 1024 * 1024 + 128 * 1024 * conns;
        let seg = Segment::create(&unique_name("gshm-bench"), size).unwrap();
        assert_eq!(seg.size_bytes(), size);
    }

    #[test]
    fn create_rejects_unaligned_size() {
        let name = unique_name("gshm");
        let err = Segment::create(&name, 3 * PAGE_SIZE as u64 + 1).unwrap_err();
        assert!(matches!(err, GshmError::BadSize { .. }));
    }

    #[test]
    fn create_rejects_name_collision() {
        let name = unique_name("gshm");
        let _seg = Segment::create(&name, 4 * PAGE_SIZE as u64).unwrap();
        let err = Segment::create(&name, 4 * PAGE_SIZE as u64).unwrap_err();
        assert!(matches!(err, GshmError::NameCollision(_)));
    }

    #[test]
    fn open_sees_created_layout() {
        let name = unique_name("gshm");
        let seg = Segment::create(&name, 16 * PAGE_SIZE as u64).unwrap();
        let rec = seg.register_record(PAGE_SIZE as u32).unwrap();
        seg.write_record(rec, 0, b"hello").unwrap();

        let other = Segment::open(&name).unwrap();
        assert_eq!(other.record_count(), 1);
        assert_eq!(
            other.meta(rec).unwrap().offset(),
            seg.meta(rec).unwrap().offset()
        );
        let mut buf = [0u8; 5];
        other.read_record(rec, 0, &mut buf).unwrap();
        assert_eq!(&buf, b"hello");
    }

    #[test]
    fn layout_is_deterministic() {
        let a = Segment::create(&unique_name("gshm"), 64 * PAGE_SIZE as u64).unwrap();
        let b = Segment::create(&unique_name("gshm"), 64 * PAGE_SIZE as u64).unwrap();
        for _ in 0..8 {
            let ra = a.register_record(2 * PAGE_SIZE as u32).unwrap();
            let rb = b.register_record(2 * PAGE_SIZE as u32).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(a.meta(ra).unwrap().offset(), b.meta(rb).unwrap().offset());
        }
    }

    #[test]
    fn register_rejects_unaligned_capacity() {
        let seg = Segment::create(&unique_name("gshm"), 16 * PAGE_SIZE as u64).unwrap();
        assert!(matches!(
            seg.register_record(PAGE_SIZE as u32 + 1),
            Err(GshmError::BadCapacity { .. })
        ));
    }

    #[test]
    fn register_exhausts_segment() {
        let seg = Segment::create(&unique_name("gshm"), 4 * PAGE_SIZE as u64).unwrap();
        // header + meta leave two data pages
        seg.register_record(PAGE_SIZE as u32).unwrap();
        seg.register_record(PAGE_SIZE as u32).unwrap();
        assert!(matches!(
            seg.register_record(PAGE_SIZE as u32),
            Err(GshmError::SegmentExhausted { .. })
        ));
    }

    #[test]
    fn check_access_and_faults() {
        let perms = PermissionMap::new();
        let p = PrincipalId(1);
        let q = PrincipalId(2);
        let r = RecordId(0);

        assert!(perms.check_access(p, r, AccessKind::Read).is_err());
        perms.grant(p, r, PERM_READ);
        assert!(perms.check_access(p, r, AccessKind::Read).is_ok());
        assert!(perms.check_access(p, r, AccessKind::Write).is_err());
        let fault = perms.check_access(q, r, AccessKind::Read).unwrap_err();
        assert_eq!(fault.principal, q);
        assert_eq!(fault.kind, AccessKind::Read);
    }

    #[test]
    fn revoke_is_noop_on_absent_and_invertible() {
        let perms = PermissionMap::new();
        let p = PrincipalId(1);
        let r = RecordId(3);

        let before = perms.snapshot();
        perms.revoke(p, r, AccessKind::Read);
        assert_eq!(perms.snapshot(), before);

        perms.grant(p, r, PERM_READ);
        perms.revoke(p, r, AccessKind::Read);
        assert!(perms.check_access(p, r, AccessKind::Read).is_err());
        perms.grant(p, r, PERM_READ);
        assert!(perms.check_access(p, r, AccessKind::Read).is_ok());
    }

    #[test]
    fn gate_routes_exactly_one_fault_per_denial() {
        struct Counting(AtomicUsize);
        impl FaultSink for Counting {
            fn deliver(&self, _fault: FaultEvent) {
                self.0.fetch_add(1, Ordering::Relaxed);
            }
        }

        let seg = Arc::new(Segment::create(&unique_name("gshm"), 16 * PAGE_SIZE as u64).unwrap());
        let rec = seg.register_record(PAGE_SIZE as u32).unwrap();
        let perms = Arc::new(PermissionMap::new());
        let sink = Arc::new(Counting(AtomicUsize::new(0)));
        let gate = AccessGate::new(seg.clone(), perms.clone(), sink.clone());

        let p = PrincipalId(7);
        assert!(gate.check(p, rec, AccessKind::Read).unwrap().is_err());
        assert_eq!(sink.0.load(Ordering::Relaxed), 1);
        perms.grant(p, rec, PERM_READ);
        assert!(gate.check(p, rec, AccessKind::Read).unwrap().is_ok());
        assert_eq!(sink.0.load(Ordering::Relaxed), 1);

        assert!(matches!(
            gate.check(p, RecordId(99), AccessKind::Read),
            Err(GshmError::UnknownRecord(_))
        ));
    }

    #[test]
    fn permission_exclusivity_over_random_traces() {
        use rand::prelude::*;
        let perms = PermissionMap::new();
        let mut rng = StdRng::seed_from_u64(0x5eed);
        let principals: Vec<_> = (0..4).map(PrincipalId).collect();
        let records: Vec<_> = (0..8).map(RecordId).collect();

        for _ in 0..2000 {
            let r = *records.choose(&mut rng).unwrap();
            let p = *principals.choose(&mut rng).unwrap();
            match rng.gen_range(0..3) {
                // exclusive write handoff: retain a single writer
                0 => perms.retain_only(r, p, PERM_WRITE),
                1 => perms.grant(p, r, PERM_READ),
                _ => perms.revoke(p, r, AccessKind::Read),
            }
            for rec in &records {
                assert!(
                    perms.holders_of(*rec, AccessKind::Write).len() <= 1,
                    "two principals hold write on {rec}"
                );
            }
        }
    }
}
