//! User-mode NAPI: notification tokens, delivery cells, and the adaptive
//! interrupt/poll controller.
//!
//! Blocking (`Sync`) and callback (`Async`) notifications are armed against a
//! channel end and completed by the broker when the masked condition becomes
//! true. Arming always re-checks the condition after registration, so a
//! status change that lands between "condition false" and "token armed"
//! cannot be lost. Each armed token delivers at most once before rearm.
//!
//! The [`PollController`] mirrors kernel NAPI behaviour: it busy-polls while
//! traffic is flowing, falls back to interrupt (notification) mode after a
//! configurable number of idle spins, and returns to polling when events
//! arrive in bursts.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::gshm::AccessKind;
use crate::{ChannelId, PrincipalId};

#[derive(Debug, Error)]
pub enum UnapiError {
    #[error("a token is already armed for this channel/mask/principal")]
    Conflict,
    #[error("channel is closed")]
    ChannelClosed,
    #[error("empty notify mask")]
    EmptyMask,
}

/// Blocking or callback delivery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NotifyMode {
    Sync,
    Async,
}

/// Subset of {R, W}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NotifyMask(u8);

impl NotifyMask {
    pub const R: NotifyMask = NotifyMask(0b01);
    pub const W: NotifyMask = NotifyMask(0b10);
    pub const RW: NotifyMask = NotifyMask(0b11);

    pub fn contains_r(self) -> bool {
        self.0 & 0b01 != 0
    }

    pub fn contains_w(self) -> bool {
        self.0 & 0b10 != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn bits(self) -> u8 {
        self.0
    }
}

/// What a completed token reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NotifyEvent {
    Readable,
    Writable,
    /// Notify-on-RW: the peer attempted the given access kind.
    PeerActivity(AccessKind),
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenStatus {
    Armed,
    Fired,
    Disabled,
}

/// What completes the token: a readable/writable condition, or a peer access
/// observed through a deliberately revoked permission (Notify-on-RW). Peer
/// access tokens never complete from condition evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Condition,
    PeerAccess,
}

struct TokenInner {
    status: TokenStatus,
    event: Option<NotifyEvent>,
}

type Callback = Box<dyn Fn(NotifyEvent) + Send + Sync>;

/// Shared completion cell for one armed token. Completion is once-only:
/// whoever moves the state Armed→Fired delivers.
pub struct TokenCell {
    pub token_id: u64,
    pub channel: ChannelId,
    pub principal: PrincipalId,
    pub mode: NotifyMode,
    pub mask: NotifyMask,
    pub kind: TokenKind,
    inner: Mutex<TokenInner>,
    cv: Condvar,
    callback: Option<Callback>,
    delivered: AtomicU32,
}

impl TokenCell {
    pub fn new(
        token_id: u64,
        channel: ChannelId,
        principal: PrincipalId,
        mode: NotifyMode,
        mask: NotifyMask,
        kind: TokenKind,
        callback: Option<Callback>,
    ) -> Arc<TokenCell> {
        Arc::new(TokenCell {
            token_id,
            channel,
            principal,
            mode,
            mask,
            kind,
            inner: Mutex::new(TokenInner {
                status: TokenStatus::Armed,
                event: None,
            }),
            cv: Condvar::new(),
            callback,
            delivered: AtomicU32::new(0),
        })
    }

    pub fn status(&self) -> TokenStatus {
        self.inner.lock().expect("token poisoned").status
    }

    /// Move Armed→Fired and record the event. Returns false if the token was
    /// already fired or disabled (delivery loses the race exactly once).
    pub fn fire(&self, event: NotifyEvent) -> bool {
        let mut inner = self.inner.lock().expect("token poisoned");
        if inner.status != TokenStatus::Armed {
            return false;
        }
        inner.status = TokenStatus::Fired;
        inner.event = Some(event);
        self.delivered.fetch_add(1, Ordering::AcqRel);
        self.cv.notify_all();
        true
    }

    /// Invoke the async callback, if any. Called by the dispatcher after a
    /// successful `fire`.
    pub fn run_callback(&self, event: NotifyEvent) {
        if let Some(cb) = &self.callback {
            cb(event);
        }
    }

    /// Disable the token; no delivery happens afterwards. Idempotent.
    /// Returns true if the token was still armed.
    pub fn disable(&self) -> bool {
        let mut inner = self.inner.lock().expect("token poisoned");
        match inner.status {
            TokenStatus::Armed => {
                inner.status = TokenStatus::Disabled;
                self.cv.notify_all();
                true
            }
            TokenStatus::Fired | TokenStatus::Disabled => false,
        }
    }

    /// Block until the token fires or is disabled. Returns the event, or
    /// None on disable/timeout.
    pub fn wait(&self, timeout: Option<Duration>) -> Option<NotifyEvent> {
        let mut inner = self.inner.lock().expect("token poisoned");
        let deadline = timeout.map(|t| std::time::Instant::now() + t);
        loop {
            match inner.status {
                TokenStatus::Fired => return inner.event,
                TokenStatus::Disabled => return None,
                TokenStatus::Armed => {}
            }
            match deadline {
                Some(d) => {
                    let now = std::time::Instant::now();
                    if now >= d {
                        return None;
                    }
                    let (guard, _) = self
                        .cv
                        .wait_timeout(inner, d - now)
                        .expect("token poisoned");
                    inner = guard;
                }
                None => inner = self.cv.wait(inner).expect("token poisoned"),
            }
        }
    }

    /// Number of deliveries this cell has made (≤ 1 per arming by
    /// construction; exposed for race tests).
    pub fn delivered_count(&self) -> u32 {
        self.delivered.load(Ordering::Acquire)
    }
}

/// Handle returned by arming operations.
#[derive(Clone)]
pub struct NotifyToken {
    cell: Arc<TokenCell>,
}

impl NotifyToken {
    pub fn new(cell: Arc<TokenCell>) -> NotifyToken {
        NotifyToken { cell }
    }

    pub fn id(&self) -> u64 {
        self.cell.token_id
    }

    pub fn status(&self) -> TokenStatus {
        self.cell.status()
    }

    pub fn cell(&self) -> &Arc<TokenCell> {
        &self.cell
    }

    pub fn wait(&self, timeout: Option<Duration>) -> Option<NotifyEvent> {
        self.cell.wait(timeout)
    }

    pub fn delivered_count(&self) -> u32 {
        self.cell.delivered_count()
    }
}

// ---------------------------------------------------------------------------
// Adaptive controller
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PollMode {
    Interrupt,
    Polling,
}

/// Configuration for the adaptive controller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnapiConfig {
    pub spin_budget: u32,
    pub burst_threshold: u32,
    pub burst_window_us: u64,
}

impl Default for UnapiConfig {
    fn default() -> UnapiConfig {
        UnapiConfig {
            spin_budget: 4096,
            burst_threshold: 8,
            burst_window_us: 1000,
        }
    }
}

/// `UNAPI_FORCE_MODE=poll|interrupt` pins the controller for benchmarking.
pub fn forced_mode() -> Option<PollMode> {
    match std::env::var("UNAPI_FORCE_MODE").ok()?.as_str() {
        "poll" | "polling" => Some(PollMode::Polling),
        "interrupt" | "intr" => Some(PollMode::Interrupt),
        _ => None,
    }
}

/// Per-channel-end adaptive interrupt/poll state machine. Transitions happen
/// only at the defined trigger points: spin-budget exhaustion while polling,
/// and an event burst within the window while in interrupt mode.
#[derive(Debug, Clone)]
pub struct PollController {
    mode: PollMode,
    idle_spins: u32,
    spin_budget: u32,
    burst_count: u32,
    burst_threshold: u32,
    window_ns: u64,
    window_start_ns: u64,
}

impl PollController {
    pub fn new(config: &UnapiConfig) -> PollController {
        PollController {
            mode: PollMode::Polling,
            idle_spins: 0,
            spin_budget: config.spin_budget,
            burst_count: 0,
            burst_threshold: config.burst_threshold,
            window_ns: config.burst_window_us * 1000,
            window_start_ns: 0,
        }
    }

    pub fn mode(&self) -> PollMode {
        self.mode
    }

    pub fn idle_spins(&self) -> u32 {
        self.idle_spins
    }

    /// Advance the controller by one poll iteration or event delivery.
    /// Returns the new mode when a transition fires.
    pub fn step(&mut self, event_observed: bool, now_ns: u64) -> Option<PollMode> {
        match self.mode {
            PollMode::Polling => {
                if event_observed {
                    self.idle_spins = 0;
                    None
                } else {
                    self.idle_spins += 1;
                    if self.idle_spins > self.spin_budget {
                        self.mode = PollMode::Interrupt;
                        self.idle_spins = 0;
                        self.burst_count = 0;
                        self.window_start_ns = now_ns;
                        Some(PollMode::Interrupt)
                    } else {
                        None
                    }
                }
            }
            PollMode::Interrupt => {
                if !event_observed {
                    return None;
                }
                if now_ns.saturating_sub(self.window_start_ns) > self.window_ns {
                    self.window_start_ns = now_ns;
                    self.burst_count = 0;
                }
                self.burst_count += 1;
                if self.burst_count >= self.burst_threshold {
                    self.mode = PollMode::Polling;
                    self.idle_spins = 0;
                    self.burst_count = 0;
                    Some(PollMode::Polling)
                } else {
                    None
                }
            }
        }
    }
}

/// CPU time consumed by the calling thread, in nanoseconds.
pub fn thread_cpu_nanos() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: plain struct out-parameter syscall.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime(CLOCK_THREAD_CPUTIME_ID) failed");
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(budget: u32, burst: u32, window_us: u64) -> UnapiConfig {
        UnapiConfig {
            spin_budget: budget,
            burst_threshold: burst,
            burst_window_us: window_us,
        }
    }

    #[test]
    fn budget_exhaustion_switches_to_interrupt() {
        let mut pc = PollController::new(&config(1000, 8, 1000));
        let mut switched_at = None;
        for i in 0..1001 {
            if pc.step(false, i).is_some() {
                switched_at = Some(i + 1);
            }
        }
        assert_eq!(pc.mode(), PollMode::Interrupt);
        assert_eq!(switched_at, Some(1001));
    }

    #[test]
    fn event_burst_switches_to_polling_within_one_window() {
        let mut pc = PollController::new(&config(4, 8, 1000));
        for i in 0..5 {
            pc.step(false, i);
        }
        assert_eq!(pc.mode(), PollMode::Interrupt);

        // steady stream: events 100ns apart, all within the 1ms window
        let mut now = 10_000;
        let mut flipped = false;
        for _ in 0..8 {
            if pc.step(true, now) == Some(PollMode::Polling) {
                flipped = true;
            }
            now += 100;
        }
        assert!(flipped);
        assert_eq!(pc.mode(), PollMode::Polling);
    }

    #[test]
    fn single_event_then_silence_retains_interrupt() {
        let mut pc = PollController::new(&config(4, 8, 1000));
        for i in 0..5 {
            pc.step(false, i);
        }
        assert_eq!(pc.mode(), PollMode::Interrupt);
        pc.step(true, 1_000_000);
        // next event far outside the window: burst never accumulates
        pc.step(true, 1_000_000_000);
        assert_eq!(pc.mode(), PollMode::Interrupt);
    }

    #[test]
    fn polling_event_resets_idle_counter() {
        let mut pc = PollController::new(&config(10, 8, 1000));
        for i in 0..9 {
            pc.step(false, i);
        }
        pc.step(true, 9);
        assert_eq!(pc.idle_spins(), 0);
        assert_eq!(pc.mode(), PollMode::Polling);
    }

    #[test]
    fn forced_mode_env_override() {
        // the only test that touches this variable
        unsafe { std::env::set_var("UNAPI_FORCE_MODE", "poll") };
        assert_eq!(forced_mode(), Some(PollMode::Polling));
        unsafe { std::env::set_var("UNAPI_FORCE_MODE", "interrupt") };
        assert_eq!(forced_mode(), Some(PollMode::Interrupt));
        unsafe { std::env::set_var("UNAPI_FORCE_MODE", "bogus") };
        assert_eq!(forced_mode(), None);
        unsafe { std::env::remove_var("UNAPI_FORCE_MODE") };
        assert_eq!(forced_mode(), None);
    }

    #[test]
    fn token_fires_once() {
        let cell = TokenCell::new(
            1,
            ChannelId(1),
            PrincipalId(1),
            NotifyMode::Sync,
            NotifyMask::R,
            TokenKind::Condition,
            None,
        );
        assert!(cell.fire(NotifyEvent::Readable));
        assert!(!cell.fire(NotifyEvent::Readable));
        assert_eq!(cell.delivered_count(), 1);
        assert_eq!(cell.wait(None), Some(NotifyEvent::Readable));
    }

    #[test]
    fn disable_is_idempotent_and_blocks_delivery() {
        let cell = TokenCell::new(
            2,
            ChannelId(1),
            PrincipalId(1),
            NotifyMode::Async,
            NotifyMask::W,
            TokenKind::Condition,
            None,
        );
        assert!(cell.disable());
        assert!(!cell.disable());
        assert!(!cell.fire(NotifyEvent::Writable));
        assert_eq!(cell.delivered_count(), 0);
    }

    #[test]
    fn disable_race_delivers_at_most_once() {
        use std::thread;
        for i in 0..500 {
            let cell = TokenCell::new(
                i,
                ChannelId(1),
                PrincipalId(1),
                NotifyMode::Async,
                NotifyMask::R,
                TokenKind::Condition,
                None,
            );
            let c2 = cell.clone();
            let t = thread::spawn(move || {
                c2.fire(NotifyEvent::Readable);
            });
            cell.disable();
            t.join().unwrap();
            assert!(cell.delivered_count() <= 1);
        }
    }
}
