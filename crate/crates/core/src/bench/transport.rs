//! Transport pairs behind a common duplex interface, plus pinned-byte
//! accounting for each kind.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use super::{BenchError, Scenario, TransportKind};
use crate::broker::{Runtime, RuntimeOptions};
use crate::channel::{self, ChannelConfig, ChannelEnd, ChannelError, NotifyPreference, WaitStats};
use crate::gshm::{monotonic_nanos, Region, Segment, PAGE_SIZE};
use crate::unapi::{PollController, PollMode, UnapiConfig};

/// Blocking duplex byte stream; `recv` returning 0 means the peer finished.
pub trait Duplex: Send {
    fn send_all(&mut self, buf: &[u8]) -> Result<(), BenchError>;
    fn recv(&mut self, buf: &mut [u8]) -> Result<usize, BenchError>;
    /// Signal end-of-stream to the peer.
    fn finish(&mut self) -> Result<(), BenchError>;

    fn recv_exact(&mut self, buf: &mut [u8]) -> Result<bool, BenchError> {
        let mut filled = 0;
        while filled < buf.len() {
            let n = self.recv(&mut buf[filled..])?;
            if n == 0 {
                return Ok(false);
            }
            filled += n;
        }
        Ok(true)
    }
}

/// One established connection: endpoint `a` (client) and `b` (server).
pub struct TransportPair {
    pub a: Box<dyn Duplex>,
    pub b: Box<dyn Duplex>,
}

/// Everything a scenario needs: the pairs, the pinned accounting, and the
/// wait-time instrumentation handles.
pub struct TransportSet {
    pub pairs: Vec<TransportPair>,
    pub pinned_bytes: u64,
    pub stats: Vec<Arc<WaitStats>>,
    /// Keeps segments/runtimes alive for the scenario's duration.
    _keep: Keep,
}

enum Keep {
    None,
    Segment(#[allow(dead_code)] Arc<Segment>),
    Runtime(#[allow(dead_code)] Arc<Runtime>),
}

pub fn build_transport_set(scenario: &Scenario) -> Result<TransportSet, BenchError> {
    match scenario.transport {
        TransportKind::Baseline => build_baseline(scenario),
        TransportKind::Reserve(n) => build_reserve(scenario, n),
        TransportKind::Elastic => build_elastic(scenario),
    }
}

// ---------------------------------------------------------------------------
// Baseline: loopback TCP
// ---------------------------------------------------------------------------

struct TcpDuplex(TcpStream);

impl Duplex for TcpDuplex {
    fn send_all(&mut self, buf: &[u8]) -> Result<(), BenchError> {
        self.0.write_all(buf)?;
        Ok(())
    }

    fn recv(&mut self, buf: &mut [u8]) -> Result<usize, BenchError> {
        Ok(self.0.read(buf)?)
    }

    fn finish(&mut self) -> Result<(), BenchError> {
        let _ = self.0.shutdown(Shutdown::Write);
        Ok(())
    }
}

fn build_baseline(scenario: &Scenario) -> Result<TransportSet, BenchError> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let conns = scenario.conns;
    let acceptor = std::thread::spawn(move || -> std::io::Result<Vec<TcpStream>> {
        let mut accepted = Vec::with_capacity(conns);
        for _ in 0..conns {
            let (stream, _) = listener.accept()?;
            stream.set_nodelay(true)?;
            accepted.push(stream);
        }
        Ok(accepted)
    });
    let mut clients = Vec::with_capacity(conns);
    for _ in 0..conns {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        clients.push(stream);
    }
    let servers = acceptor.join().map_err(|_| BenchError::WorkerPanic)??;
    let pairs = clients
        .into_iter()
        .zip(servers)
        .map(|(a, b)| TransportPair {
            a: Box::new(TcpDuplex(a)) as Box<dyn Duplex>,
            b: Box::new(TcpDuplex(b)) as Box<dyn Duplex>,
        })
        .collect();
    Ok(TransportSet {
        pairs,
        pinned_bytes: 0,
        stats: Vec::new(),
        _keep: Keep::None,
    })
}

// ---------------------------------------------------------------------------
// Reserve: fixed shared-memory rings
// ---------------------------------------------------------------------------

/// SPSC byte ring over a pinned segment region with message-atomic admission:
/// a send waits until the whole message (capped at ring capacity) fits, then
/// copies it in at most two wrapped segments. This is the fixed-reservation
/// discipline the elastic transport is compared against.
pub struct ReserveRing {
    segment: Arc<Segment>,
    region: Region,
    capacity: u64,
    wpos: AtomicU64,
    rpos: AtomicU64,
    closed: AtomicBool,
    waiter_count: AtomicU64,
    waiters: Mutex<u32>,
    cv: Condvar,
}

impl ReserveRing {
    fn new(segment: Arc<Segment>, region: Region, capacity: u64) -> Arc<ReserveRing> {
        assert!(capacity <= region.len);
        Arc::new(ReserveRing {
            segment,
            region,
            capacity,
            wpos: AtomicU64::new(0),
            rpos: AtomicU64::new(0),
            closed: AtomicBool::new(false),
            waiter_count: AtomicU64::new(0),
            waiters: Mutex::new(0),
            cv: Condvar::new(),
        })
    }

    fn free(&self) -> u64 {
        self.capacity - (self.wpos.load(Ordering::Acquire) - self.rpos.load(Ordering::Acquire))
    }

    fn available(&self) -> u64 {
        self.wpos.load(Ordering::Acquire) - self.rpos.load(Ordering::Acquire)
    }

    fn wake(&self) {
        // lock-free fast path: the hot loop never takes the mutex unless
        // someone is actually parked
        if self.waiter_count.load(Ordering::Acquire) == 0 {
            return;
        }
        let _waiters = self.waiters.lock().expect("ring poisoned");
        self.cv.notify_all();
    }

    /// Adaptive wait for `cond`; returns false if the ring closed first.
    fn wait_until(
        &self,
        controller: &mut PollController,
        stats: &WaitStats,
        cond: impl Fn() -> bool,
    ) -> bool {
        let start = Instant::now();
        loop {
            if cond() {
                controller.step(true, monotonic_nanos());
                stats
                    .poll_ns
                    .fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
                return true;
            }
            if self.closed.load(Ordering::Acquire) {
                return cond();
            }
            match controller.mode() {
                PollMode::Polling => {
                    controller.step(false, monotonic_nanos());
                    std::hint::spin_loop();
                }
                PollMode::Interrupt => {
                    stats
                        .poll_ns
                        .fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
                    let blocked = Instant::now();
                    self.waiter_count.fetch_add(1, Ordering::AcqRel);
                    let mut waiters = self.waiters.lock().expect("ring poisoned");
                    *waiters += 1;
                    while !cond() && !self.closed.load(Ordering::Acquire) {
                        waiters = self.cv.wait(waiters).expect("ring poisoned");
                    }
                    *waiters -= 1;
                    drop(waiters);
                    self.waiter_count.fetch_sub(1, Ordering::AcqRel);
                    stats
                        .intr_ns
                        .fetch_add(blocked.elapsed().as_nanos() as u64, Ordering::Relaxed);
                    controller.step(true, monotonic_nanos());
                    return cond() || !self.closed.load(Ordering::Acquire);
                }
            }
        }
    }

    fn copy_in(&self, at: u64, buf: &[u8]) {
        let offset = at % self.capacity;
        let first = ((self.capacity - offset) as usize).min(buf.len());
        self.segment.write_region(self.region, offset, &buf[..first]);
        if first < buf.len() {
            self.segment.write_region(self.region, 0, &buf[first..]);
        }
    }

    fn copy_out(&self, at: u64, buf: &mut [u8]) {
        let offset = at % self.capacity;
        let first = ((self.capacity - offset) as usize).min(buf.len());
        self.segment.read_region(self.region, offset, &mut buf[..first]);
        if first < buf.len() {
            self.segment.read_region(self.region, 0, &mut buf[first..]);
        }
    }

    /// Non-blocking admission: the message (capped at ring capacity) goes in
    /// whole or not at all. Returns bytes accepted.
    pub fn try_send(&self, buf: &[u8]) -> usize {
        let chunk = buf.len().min(self.capacity as usize);
        if (self.free() as usize) < chunk || chunk == 0 {
            return 0;
        }
        let at = self.wpos.load(Ordering::Relaxed);
        self.copy_in(at, &buf[..chunk]);
        self.wpos.store(at + chunk as u64, Ordering::Release);
        self.wake();
        chunk
    }

    /// Non-blocking drain. Returns bytes read.
    pub fn try_recv(&self, buf: &mut [u8]) -> usize {
        let avail = self.available();
        if avail == 0 || buf.is_empty() {
            return 0;
        }
        let n = (avail as usize).min(buf.len());
        let at = self.rpos.load(Ordering::Relaxed);
        self.copy_out(at, &mut buf[..n]);
        self.rpos.store(at + n as u64, Ordering::Release);
        self.wake();
        n
    }

    /// Build a standalone ring pair over a fresh segment (test support).
    pub fn pair(capacity: u64) -> Result<(Arc<ReserveRing>, Arc<ReserveRing>), BenchError> {
        let segment = create_segment_for(2 * capacity, "ring-pair")?;
        let a = segment
            .alloc_region(capacity)
            .map_err(|e| BenchError::Setup(e.to_string()))?;
        let b = segment
            .alloc_region(capacity)
            .map_err(|e| BenchError::Setup(e.to_string()))?;
        Ok((
            ReserveRing::new(segment.clone(), a, capacity),
            ReserveRing::new(segment, b, capacity),
        ))
    }
}

struct RingDuplex {
    tx: Arc<ReserveRing>,
    rx: Arc<ReserveRing>,
    controller: PollController,
    stats: Arc<WaitStats>,
    blocking_only: bool,
}

impl RingDuplex {
    fn new(
        tx: Arc<ReserveRing>,
        rx: Arc<ReserveRing>,
        notify: NotifyPreference,
        unapi: &UnapiConfig,
        stats: Arc<WaitStats>,
    ) -> RingDuplex {
        let mut controller = PollController::new(unapi);
        let blocking_only = notify == NotifyPreference::Blocking;
        if blocking_only {
            // pin to interrupt mode by exhausting the budget up front
            while controller.mode() == PollMode::Polling {
                controller.step(false, 0);
            }
        }
        RingDuplex {
            tx,
            rx,
            controller,
            stats,
            blocking_only,
        }
    }

    fn reset_controller(&mut self) {
        if self.blocking_only {
            while self.controller.mode() == PollMode::Polling {
                self.controller.step(false, 0);
            }
        }
    }
}

impl Duplex for RingDuplex {
    fn send_all(&mut self, buf: &[u8]) -> Result<(), BenchError> {
        let mut sent = 0;
        while sent < buf.len() {
            // message-atomic admission, capped at ring capacity
            let chunk = (buf.len() - sent).min(self.tx.capacity as usize);
            let ring = self.tx.clone();
            let need = chunk as u64;
            let ok = {
                let r = ring.clone();
                self.tx.wait_until(&mut self.controller, &self.stats, move || {
                    r.free() >= need
                })
            };
            self.reset_controller();
            if !ok || ring.closed.load(Ordering::Acquire) {
                return Err(BenchError::Setup("ring closed during send".into()));
            }
            let at = ring.wpos.load(Ordering::Relaxed);
            ring.copy_in(at, &buf[sent..sent + chunk]);
            ring.wpos.store(at + need, Ordering::Release);
            ring.wake();
            sent += chunk;
        }
        Ok(())
    }

    fn recv(&mut self, buf: &mut [u8]) -> Result<usize, BenchError> {
        let ring = self.rx.clone();
        {
            let r = ring.clone();
            self.rx.wait_until(&mut self.controller, &self.stats, move || {
                r.available() > 0
            });
        }
        self.reset_controller();
        let avail = ring.available();
        if avail == 0 {
            return Ok(0); // closed and drained
        }
        let n = (avail as usize).min(buf.len());
        let at = ring.rpos.load(Ordering::Relaxed);
        ring.copy_out(at, &mut buf[..n]);
        ring.rpos.store(at + n as u64, Ordering::Release);
        ring.wake();
        Ok(n)
    }

    fn finish(&mut self) -> Result<(), BenchError> {
        self.tx.closed.store(true, Ordering::Release);
        self.tx.wake();
        Ok(())
    }
}

fn build_reserve(scenario: &Scenario, reserve_bytes: u64) -> Result<TransportSet, BenchError> {
    let conns = scenario.conns as u64;
    let data_bytes = 2 * reserve_bytes * conns;
    let segment = create_segment_for(data_bytes, "bench-reserve")?;
    let unapi = UnapiConfig::default();

    let mut pairs = Vec::with_capacity(scenario.conns);
    let mut stats = Vec::new();
    for _ in 0..scenario.conns {
        let fwd_region = segment
            .alloc_region(reserve_bytes)
            .map_err(|e| BenchError::Setup(e.to_string()))?;
        let rev_region = segment
            .alloc_region(reserve_bytes)
            .map_err(|e| BenchError::Setup(e.to_string()))?;
        let fwd = ReserveRing::new(segment.clone(), fwd_region, reserve_bytes);
        let rev = ReserveRing::new(segment.clone(), rev_region, reserve_bytes);
        let stats_a = Arc::new(WaitStats::default());
        let stats_b = Arc::new(WaitStats::default());
        stats.push(stats_a.clone());
        stats.push(stats_b.clone());
        pairs.push(TransportPair {
            a: Box::new(RingDuplex::new(
                fwd.clone(),
                rev.clone(),
                scenario.notify,
                &unapi,
                stats_a,
            )),
            b: Box::new(RingDuplex::new(rev, fwd, scenario.notify, &unapi, stats_b)),
        });
    }
    Ok(TransportSet {
        pairs,
        pinned_bytes: 2 * reserve_bytes * conns,
        stats,
        _keep: Keep::Segment(segment),
    })
}

// ---------------------------------------------------------------------------
// Elastic: the channel data path
// ---------------------------------------------------------------------------

struct ChannelDuplex {
    end: ChannelEnd,
}

impl Duplex for ChannelDuplex {
    fn send_all(&mut self, buf: &[u8]) -> Result<(), BenchError> {
        let mut sent = 0;
        while sent < buf.len() {
            match self.end.write(&buf[sent..]) {
                Ok(n) => sent += n,
                Err(e) => return Err(BenchError::Setup(format!("channel send: {e}"))),
            }
        }
        Ok(())
    }

    fn recv(&mut self, buf: &mut [u8]) -> Result<usize, BenchError> {
        match self.end.read(buf) {
            Ok(n) => Ok(n),
            Err(ChannelError::Closed) => Ok(0),
            Err(e) => Err(BenchError::Setup(format!("channel recv: {e}"))),
        }
    }

    fn finish(&mut self) -> Result<(), BenchError> {
        self.end
            .close()
            .map_err(|e| BenchError::Setup(format!("channel close: {e}")))
    }
}

fn create_segment_for(data_bytes: u64, tag: &str) -> Result<Arc<Segment>, BenchError> {
    static SEQ: AtomicU64 = AtomicU64::new(0);
    // data + per-page metadata overhead (64B per 4096B page) + slack
    let needed = data_bytes + data_bytes / 32 + 8 * 1024 * 1024;
    let size = needed.div_ceil(PAGE_SIZE as u64) * PAGE_SIZE as u64;
    let name = format!(
        "{tag}-{}-{}",
        std::process::id(),
        SEQ.fetch_add(1, Ordering::Relaxed)
    );
    Segment::create(&name, size)
        .map(Arc::new)
        .map_err(|e| BenchError::Setup(e.to_string()))
}

fn build_elastic(scenario: &Scenario) -> Result<TransportSet, BenchError> {
    let policy = scenario.policy.clone();
    let conns = scenario.conns;
    let locals = 2 * conns as u64 * policy.local_record_bytes as u64;
    let segment = create_segment_for(policy.arena_size_bytes + locals, "bench-elastic")?;
    let runtime = Runtime::with_segment(
        segment,
        RuntimeOptions {
            segment_name: String::new(),
            segment_bytes: 0,
            policy: policy.clone(),
            unapi: UnapiConfig::default(),
            tick: std::time::Duration::from_millis(1),
            brokers: 1,
        },
    )
    .map_err(|e| BenchError::Setup(e.to_string()))?;

    // per-core arena topology: a small set of arenas carved from the total,
    // time-shared by the connection workers (endpoint A workers claim from
    // even arenas, endpoint B workers from odd ones, so the two ends of a
    // connection never share a principal)
    let total_records = (policy.arena_size_bytes / policy.record_size_bytes as u64) as u32;
    let arena_count = 2 * std::thread::available_parallelism()
        .map(|n| n.get() as u32)
        .unwrap_or(2)
        .clamp(1, 8)
        .min(total_records.max(2) / 2);
    let base = total_records / arena_count;
    let remainder = total_records % arena_count;
    let records_for = |i: u32| base + if i < remainder { 1 } else { 0 };
    let mut arena_workers = Vec::with_capacity(arena_count as usize);
    for i in 0..arena_count {
        arena_workers.push(
            runtime
                .register_worker(0, policy.record_size_bytes, records_for(i))
                .map_err(|e| BenchError::Setup(e.to_string()))?,
        );
    }

    let allow = ChannelConfig {
        allowlist: Arc::new(crate::channel::allowlist::Allowlist::allow_all()),
        notify: scenario.notify,
        ..ChannelConfig::default()
    };

    let mut pairs = Vec::with_capacity(conns);
    let mut stats = Vec::new();
    for i in 0..conns as u32 {
        let arena_a = &arena_workers[(2 * (i as usize)) % arena_count as usize];
        let arena_b = &arena_workers[(2 * (i as usize) + 1) % arena_count as usize];
        let wa = runtime
            .register_worker_attached(arena_a)
            .map_err(|e| BenchError::Setup(e.to_string()))?;
        let wb = runtime
            .register_worker_attached(arena_b)
            .map_err(|e| BenchError::Setup(e.to_string()))?;
        let listener = channel::ChannelListener::bind(
            "127.0.0.1:0".parse::<SocketAddr>().unwrap(),
            &wb,
            allow.clone(),
        )
        .map_err(|e| BenchError::Setup(e.to_string()))?;
        let addr = listener.local_addr().map_err(|e| BenchError::Setup(e.to_string()))?;
        let accept_cfg = allow.clone();
        let acceptor = std::thread::spawn(move || {
            let _ = accept_cfg;
            listener.accept()
        });
        let a = channel::connect(addr, &wa, allow.clone())
            .map_err(|e| BenchError::Setup(e.to_string()))?;
        let b = acceptor
            .join()
            .map_err(|_| BenchError::WorkerPanic)?
            .map_err(|e| BenchError::Setup(e.to_string()))?;
        if !a.is_gshm() || !b.is_gshm() {
            return Err(BenchError::Setup(format!(
                "elastic establishment fell back: {:?} / {:?}",
                a.fallback_reason(),
                b.fallback_reason()
            )));
        }
        stats.push(a.wait_stats().clone());
        stats.push(b.wait_stats().clone());
        pairs.push(TransportPair {
            a: Box::new(ChannelDuplex { end: a }),
            b: Box::new(ChannelDuplex { end: b }),
        });
    }
    Ok(TransportSet {
        pairs,
        pinned_bytes: locals + total_records as u64 * policy.record_size_bytes as u64,
        stats,
        _keep: Keep::Runtime(runtime),
    })
}

/// Closed-form pinned accounting, recomputed independently of the transports.
pub fn expected_pinned_bytes(scenario: &Scenario) -> u64 {
    match scenario.transport {
        TransportKind::Baseline => 0,
        TransportKind::Reserve(n) => 2 * n * scenario.conns as u64,
        TransportKind::Elastic => {
            scenario.conns as u64 * scenario.policy.local_record_bytes as u64 * 2
                + scenario.policy.arena_size_bytes
        }
    }
}
