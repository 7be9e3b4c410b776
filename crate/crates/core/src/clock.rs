//! Run-relative clocks and the stop signal shared by the sampling loops.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

/// Cross-thread stop flag with prompt wake-up of waiting loops.
#[derive(Debug, Clone, Default)]
pub struct StopSignal {
    inner: Arc<(Mutex<bool>, Condvar)>,
}

impl StopSignal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raise(&self) {
        let (lock, cvar) = &*self.inner;
        *lock.lock().unwrap() = true;
        cvar.notify_all();
    }

    pub fn is_raised(&self) -> bool {
        *self.inner.0.lock().unwrap()
    }

    /// Waits up to `timeout`; returns true when the signal is raised.
    pub fn wait_timeout(&self, timeout: Duration) -> bool {
        let (lock, cvar) = &*self.inner;
        let guard = lock.lock().unwrap();
        let (guard, _) = cvar.wait_timeout_while(guard, timeout, |stopped| !*stopped).unwrap();
        *guard
    }
}

/// Millisecond clock relative to a session origin.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;

    /// Blocks until `deadline_ms` or until `stop` is raised. Returns true if
    /// stopped.
    fn wait_until(&self, deadline_ms: u64, stop: &StopSignal) -> bool;
}

#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn start() -> Self {
        MonotonicClock { origin: Instant::now() }
    }

    pub fn from_origin(origin: Instant) -> Self {
        MonotonicClock { origin }
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }
}

impl Clock for MonotonicClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    fn wait_until(&self, deadline_ms: u64, stop: &StopSignal) -> bool {
        let now = self.now_ms();
        if deadline_ms <= now {
            return stop.is_raised();
        }
        stop.wait_timeout(Duration::from_millis(deadline_ms - now))
    }
}

/// Clock that jumps straight to each deadline. Deterministic tests only.
#[derive(Debug, Clone, Default)]
pub struct ManualClock {
    now: Arc<AtomicU64>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self, t_ms: u64) {
        self.now.store(t_ms, Ordering::SeqCst);
    }

    pub fn advance(&self, dt_ms: u64) {
        self.now.fetch_add(dt_ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn wait_until(&self, deadline_ms: u64, stop: &StopSignal) -> bool {
        if stop.is_raised() {
            return true;
        }
        self.now.fetch_max(deadline_ms, Ordering::SeqCst);
        stop.is_raised()
    }
}

/// Milliseconds since the Unix epoch.
pub fn wall_clock_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
