//! Channel establishment, data path, close, and metadata behaviour over real
//! loopback sockets.

use std::collections::VecDeque;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use elastisock::arena::AllocationPolicy;
use elastisock::broker::{Runtime, RuntimeOptions, Worker};
use elastisock::channel::allowlist::Allowlist;
use elastisock::channel::state::ChannelState;
use elastisock::channel::{
    connect, ChannelConfig, ChannelEnd, ChannelError, ChannelListener, FallbackReason,
    MetadataValue, NotifyPreference,
};
use elastisock::unapi::UnapiConfig;

fn unique_name(tag: &str) -> String {
    static N: AtomicUsize = AtomicUsize::new(0);
    format!(
        "itest-{}-{}-{}",
        tag,
        std::process::id(),
        N.fetch_add(1, Ordering::Relaxed)
    )
}

fn small_runtime(arena_records: u32) -> Arc<Runtime> {
    let opts = RuntimeOptions {
        segment_name: unique_name("chan"),
        segment_bytes: 256 * 1024 * 1024,
        policy: AllocationPolicy {
            max_records_per_channel: 8,
            max_records_per_process: 64,
            record_size_bytes: 64 * 1024,
            arena_size_bytes: arena_records as u64 * 64 * 1024,
            local_record_bytes: 64 * 1024,
        },
        unapi: UnapiConfig::default(),
        tick: Duration::from_millis(1),
        brokers: 1,
    };
    Runtime::create(opts).unwrap()
}

fn workers(rt: &Arc<Runtime>) -> (Worker, Worker) {
    let records = (rt.policy().arena_size_bytes / rt.policy().record_size_bytes as u64) as u32 / 2;
    let a = rt
        .register_worker(0, rt.policy().record_size_bytes, records)
        .unwrap();
    let b = rt
        .register_worker(0, rt.policy().record_size_bytes, records)
        .unwrap();
    (a, b)
}

fn establish_pair(
    rt: &Arc<Runtime>,
    cfg_a: ChannelConfig,
    cfg_b: ChannelConfig,
) -> (ChannelEnd, ChannelEnd) {
    let (wa, wb) = workers(rt);
    let listener =
        ChannelListener::bind("127.0.0.1:0".parse::<SocketAddr>().unwrap(), &wb, cfg_b).unwrap();
    let addr = listener.local_addr().unwrap();
    let acceptor = std::thread::spawn(move || listener.accept().unwrap());
    let a = connect(addr, &wa, cfg_a).unwrap();
    let b = acceptor.join().unwrap();
    (a, b)
}

fn gshm_pair(rt: &Arc<Runtime>, notify: NotifyPreference) -> (ChannelEnd, ChannelEnd) {
    let cfg = ChannelConfig {
        allowlist: Arc::new(Allowlist::allow_all()),
        notify,
        ..ChannelConfig::default()
    };
    let (a, b) = establish_pair(rt, cfg.clone(), cfg);
    assert!(a.is_gshm() && b.is_gshm());
    (a, b)
}

#[test]
fn establish_active_gshm_channel_when_allowlist_permits() {
    let rt = small_runtime(8);
    let (a, b) = gshm_pair(&rt, NotifyPreference::Adaptive);
    assert_eq!(a.state(), ChannelState::Active);
    assert_eq!(b.state(), ChannelState::Active);
    assert_eq!(
        a.get_metadata("transport").unwrap(),
        MetadataValue::Text("gshm".into())
    );
}

#[test]
fn allowlist_deny_falls_back_and_ops_still_succeed() {
    let rt = small_runtime(8);
    let deny = ChannelConfig {
        allowlist: Arc::new(Allowlist::deny_all()),
        notify: NotifyPreference::Blocking,
        ..ChannelConfig::default()
    };
    let (mut a, mut b) = establish_pair(&rt, deny.clone(), deny);
    assert!(!a.is_gshm());
    assert_eq!(a.fallback_reason(), Some(FallbackReason::Denied));

    a.write(b"over the socket").unwrap();
    let mut buf = [0u8; 15];
    let mut got = 0;
    while got < buf.len() {
        got += b.read(&mut buf[got..]).unwrap();
    }
    assert_eq!(&buf, b"over the socket");
    // peer address comes from the ordinary socket
    match a.get_metadata("peer_addr").unwrap() {
        MetadataValue::Addr(addr) => assert_eq!(addr.ip().to_string(), "127.0.0.1"),
        other => panic!("unexpected metadata {other:?}"),
    }
}

#[test]
fn plain_socket_peer_falls_back_after_timeout() {
    let rt = small_runtime(8);
    let (wa, _wb) = workers(&rt);
    // a peer that accepts and stays silent (no handshake)
    let plain = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = plain.local_addr().unwrap();
    let peer = std::thread::spawn(move || {
        let (sock, _) = plain.accept().unwrap();
        std::thread::sleep(Duration::from_millis(300));
        drop(sock);
    });
    let cfg = ChannelConfig {
        allowlist: Arc::new(Allowlist::allow_all()),
        handshake_timeout: Duration::from_millis(100),
        ..ChannelConfig::default()
    };
    let t0 = Instant::now();
    let a = connect(addr, &wa, cfg).unwrap();
    let waited = t0.elapsed();
    assert!(!a.is_gshm());
    assert_eq!(a.fallback_reason(), Some(FallbackReason::Timeout));
    assert!(waited >= Duration::from_millis(90), "timed out early: {waited:?}");
    assert!(waited < Duration::from_secs(2), "timeout too slow: {waited:?}");
    peer.join().unwrap();
}

#[test]
fn small_write_fills_local_record_without_claims() {
    let rt = small_runtime(8);
    let (mut a, _b) = gshm_pair(&rt, NotifyPreference::NonBlocking);
    assert_eq!(a.write(b"sixteen bytes!!!").unwrap(), 16);
    assert_eq!(
        a.get_metadata("occupancy").unwrap(),
        MetadataValue::Count(16)
    );
    assert_eq!(rt.fault_count(), 0);
}

#[test]
fn write_past_local_record_claims_once() {
    let rt = small_runtime(8);
    let (wa, wb) = workers(&rt);
    let arena = wa.arena.clone();
    let cfg = ChannelConfig {
        allowlist: Arc::new(Allowlist::allow_all()),
        notify: NotifyPreference::Blocking,
        ..ChannelConfig::default()
    };
    let listener =
        ChannelListener::bind("127.0.0.1:0".parse::<SocketAddr>().unwrap(), &wb, cfg.clone())
            .unwrap();
    let addr = listener.local_addr().unwrap();
    let acceptor = std::thread::spawn(move || listener.accept().unwrap());
    let mut a = connect(addr, &wa, cfg).unwrap();
    let mut b = acceptor.join().unwrap();
    assert!(a.is_gshm());

    // 96 KiB with 64 KiB records: ceil((96K - 64K)/64K) = 1 claim extends
    // the chain to length 2
    let free_before = arena.free_count();
    let payload = vec![7u8; 96 * 1024];
    assert_eq!(a.write(&payload).unwrap(), payload.len());
    assert_eq!(arena.free_count(), free_before - 1, "exactly one claim");

    let mut back = vec![0u8; payload.len()];
    let mut got = 0;
    while got < back.len() {
        got += b.read(&mut back[got..]).unwrap();
    }
    assert_eq!(back, payload);
}

#[test]
fn write_blocks_on_exhausted_arena_until_release() {
    // one arena record per worker: local (64K) + 1 claimable
    let rt = small_runtime(2);
    let (mut a, mut b) = gshm_pair(&rt, NotifyPreference::Blocking);
    // 3 records worth of data: local + the single arena record + one more
    let payload = vec![9u8; 3 * 64 * 1024];
    let writer = std::thread::spawn(move || {
        let n = a.write(&payload).unwrap();
        (a, n)
    });
    // give the writer time to fill and block
    std::thread::sleep(Duration::from_millis(50));
    let mut drained = vec![0u8; 3 * 64 * 1024];
    let mut got = 0;
    while got < drained.len() {
        got += b.read(&mut drained[got..]).unwrap();
    }
    let (_a, written) = writer.join().unwrap();
    assert_eq!(written, 3 * 64 * 1024);
    assert!(drained.iter().all(|v| *v == 9));
}

#[test]
fn random_trace_matches_byte_queue_oracle() {
    use rand::prelude::*;
    let rt = small_runtime(16);
    let (mut a, mut b) = gshm_pair(&rt, NotifyPreference::NonBlocking);
    let mut rng = StdRng::seed_from_u64(0xfeed);
    let mut oracle: VecDeque<u8> = VecDeque::new();
    let mut next_byte: u64 = 0;
    let mut drained: u64 = 0;

    for _ in 0..400 {
        if rng.gen_bool(0.55) {
            let len = 1usize << rng.gen_range(0..15);
            let chunk: Vec<u8> = (0..len)
                .map(|i| ((next_byte + i as u64) % 251) as u8)
                .collect();
            match a.write(&chunk) {
                Ok(n) => {
                    oracle.extend(&chunk[..n]);
                    next_byte += n as u64;
                }
                Err(ChannelError::WouldBlock) => {}
                Err(e) => panic!("write: {e}"),
            }
        } else {
            let mut buf = vec![0u8; 1 << rng.gen_range(0..15)];
            match b.read(&mut buf) {
                Ok(n) => {
                    for &byte in &buf[..n] {
                        assert_eq!(Some(byte), oracle.pop_front(), "stream diverged");
                    }
                    drained += n as u64;
                }
                Err(ChannelError::WouldBlock) => {}
                Err(e) => panic!("read: {e}"),
            }
        }
    }
    // drain the rest
    let mut buf = vec![0u8; 64 * 1024];
    while !oracle.is_empty() {
        match b.read(&mut buf) {
            Ok(n) => {
                for &byte in &buf[..n] {
                    assert_eq!(Some(byte), oracle.pop_front());
                }
                drained += n as u64;
            }
            Err(ChannelError::WouldBlock) => std::thread::sleep(Duration::from_millis(1)),
            Err(e) => panic!("drain: {e}"),
        }
    }
    assert_eq!(drained, next_byte);
}

#[test]
fn reader_fault_on_uncommitted_record_is_single_shot() {
    // Huge tick and no claim hints: the receiver's fault is the only live
    // commit trigger, so the claimed record is still uncommitted when the
    // reader crosses into it.
    let opts = RuntimeOptions {
        segment_name: unique_name("fault"),
        segment_bytes: 64 * 1024 * 1024,
        policy: AllocationPolicy {
            max_records_per_channel: 8,
            max_records_per_process: 64,
            record_size_bytes: 64 * 1024,
            arena_size_bytes: 8 * 64 * 1024,
            local_record_bytes: 64 * 1024,
        },
        unapi: UnapiConfig::default(),
        tick: Duration::from_secs(3600),
        brokers: 1,
    };
    let rt = Runtime::create(opts).unwrap();
    let cfg = ChannelConfig {
        allowlist: Arc::new(Allowlist::allow_all()),
        notify: NotifyPreference::Blocking,
        hint_claims: false,
        ..ChannelConfig::default()
    };
    let (mut a, mut b) = establish_pair(&rt, cfg.clone(), cfg);
    assert!(a.is_gshm());

    // local record (64 KiB) plus one claimed, uncommitted record
    let payload = vec![3u8; 96 * 1024];
    assert_eq!(a.write(&payload).unwrap(), payload.len());
    assert_eq!(rt.fault_count(), 0);

    let mut back = vec![0u8; payload.len()];
    let mut got = 0;
    while got < back.len() {
        got += b.read(&mut back[got..]).unwrap();
    }
    assert_eq!(back, payload);
    // exactly one fault: the first touch of the claimed record; the broker
    // committed it and the retried read succeeded
    assert_eq!(rt.fault_count(), 1);
}

#[test]
fn close_with_empty_chains_is_immediate() {
    let rt = small_runtime(8);
    let (mut a, b) = gshm_pair(&rt, NotifyPreference::Blocking);
    a.close().unwrap();
    assert_eq!(a.state(), ChannelState::Closed);
    assert_eq!(b.state(), ChannelState::Closed);
    // double close is a no-op
    a.close().unwrap();
    assert!(matches!(a.write(b"x"), Err(ChannelError::Closed)));
}

#[test]
fn close_with_unread_data_lets_receiver_drain() {
    let rt = small_runtime(8);
    let (mut a, mut b) = gshm_pair(&rt, NotifyPreference::Blocking);
    a.write(b"residue").unwrap();
    a.close().unwrap();
    assert_eq!(a.state(), ChannelState::Draining);

    let mut buf = [0u8; 7];
    let mut got = 0;
    while got < buf.len() {
        let n = b.read(&mut buf[got..]).unwrap();
        assert!(n > 0);
        got += n;
    }
    assert_eq!(&buf, b"residue");
    // next read observes end of stream and the channel finalizes
    assert_eq!(b.read(&mut buf).unwrap(), 0);
    assert_eq!(b.state(), ChannelState::Closed);
}

#[test]
fn metadata_orig_dst_and_occupancy() {
    let rt = small_runtime(8);
    let orig: SocketAddr = "10.0.0.5:80".parse().unwrap();
    let cfg_a = ChannelConfig {
        allowlist: Arc::new(Allowlist::allow_all()),
        orig_dst: Some(orig),
        ..ChannelConfig::default()
    };
    let cfg_b = ChannelConfig {
        allowlist: Arc::new(Allowlist::allow_all()),
        ..ChannelConfig::default()
    };
    let (mut a, mut b) = establish_pair(&rt, cfg_a, cfg_b);
    assert!(a.is_gshm());

    // the acceptor (proxy side) can retrieve the pre-rewrite destination
    assert_eq!(
        b.get_metadata("original_dst").unwrap(),
        MetadataValue::Addr(orig)
    );

    // occupancy: wrote N, peer read M, N - M remain
    a.write(&[1u8; 1000]).unwrap();
    let mut buf = [0u8; 400];
    let mut got = 0;
    while got < buf.len() {
        got += b.read(&mut buf[got..]).unwrap();
    }
    assert_eq!(
        a.get_metadata("occupancy").unwrap(),
        MetadataValue::Count(600)
    );
    assert!(matches!(
        a.get_metadata("bogus"),
        Err(ChannelError::UnknownMetadataKey(_))
    ));
}

#[test]
fn steady_state_gshm_transfer_makes_no_data_path_syscalls() {
    let rt = small_runtime(8);
    let (mut a, mut b) = gshm_pair(&rt, NotifyPreference::NonBlocking);
    for _ in 0..50 {
        let _ = a.write(&[0u8; 4096]);
        let mut buf = [0u8; 4096];
        let _ = b.read(&mut buf);
    }
    assert_eq!(a.data_path_syscalls(), 0);
    assert_eq!(b.data_path_syscalls(), 0);
}

#[test]
fn fallback_channel_passes_the_same_byte_trace() {
    use rand::prelude::*;
    let rt = small_runtime(8);
    let deny = ChannelConfig {
        allowlist: Arc::new(Allowlist::deny_all()),
        notify: NotifyPreference::NonBlocking,
        ..ChannelConfig::default()
    };
    let (mut a, mut b) = establish_pair(&rt, deny.clone(), deny);
    assert!(!a.is_gshm());

    let mut rng = StdRng::seed_from_u64(0xfeed);
    let mut oracle: VecDeque<u8> = VecDeque::new();
    let mut next_byte: u64 = 0;
    for _ in 0..300 {
        if rng.gen_bool(0.55) {
            let len = 1usize << rng.gen_range(0..13);
            let chunk: Vec<u8> = (0..len)
                .map(|i| ((next_byte + i as u64) % 251) as u8)
                .collect();
            match a.write(&chunk) {
                Ok(n) => {
                    oracle.extend(&chunk[..n]);
                    next_byte += n as u64;
                }
                Err(ChannelError::WouldBlock) => {}
                Err(e) => panic!("write: {e}"),
            }
        } else {
            let mut buf = vec![0u8; 1 << rng.gen_range(0..13)];
            match b.read(&mut buf) {
                Ok(n) => {
                    for &byte in &buf[..n] {
                        assert_eq!(Some(byte), oracle.pop_front(), "stream diverged");
                    }
                }
                Err(ChannelError::WouldBlock) => {}
                Err(e) => panic!("read: {e}"),
            }
        }
    }
    while !oracle.is_empty() {
        let mut buf = vec![0u8; 8192];
        match b.read(&mut buf) {
            Ok(n) => {
                for &byte in &buf[..n] {
                    assert_eq!(Some(byte), oracle.pop_front());
                }
            }
            Err(ChannelError::WouldBlock) => std::thread::sleep(Duration::from_millis(1)),
            Err(e) => panic!("drain: {e}"),
        }
    }
}
