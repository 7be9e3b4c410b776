//! Bundled HTTP service with tunable per-request CPU work and payload size.
//!
//! Four built-in profiles mirror a login service across four versions:
//! a baseline with an inefficient lookup, a larger token payload, a more
//! expensive signing scheme, and that scheme with the lookup optimised.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;

use crate::sim::MockContainer;

/// Kernel iterations per work unit.
pub const ITERATIONS_PER_UNIT: u64 = 1000;

/// Resident memory a mock container reports when idle.
pub const BASE_MEMORY_BYTES: u64 = 48 * 1024 * 1024;

const WORKERS: usize = 2;

#[derive(Debug, Error)]
pub enum SutError {
    #[error("unknown mock profile `{0}`")]
    UnknownProfile(String),
    #[error("cannot bind {addr}: {msg}")]
    Bind { addr: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SutProfile {
    pub profile_id: String,
    /// Units of the fixed arithmetic kernel burned per login.
    pub cpu_work_units: u64,
    pub payload_bytes: usize,
    /// Additional fixed delay per request.
    pub base_latency_ms: f64,
}

impl SutProfile {
    pub fn v1() -> Self {
        SutProfile { profile_id: "v1".into(), cpu_work_units: 1_000, payload_bytes: 1_024, base_latency_ms: 1.0 }
    }

    pub fn v2() -> Self {
        SutProfile { profile_id: "v2".into(), cpu_work_units: 1_000, payload_bytes: 8_192, base_latency_ms: 1.0 }
    }

    pub fn v3() -> Self {
        SutProfile { profile_id: "v3".into(), cpu_work_units: 4_000, payload_bytes: 8_192, base_latency_ms: 1.0 }
    }

    pub fn v4() -> Self {
        SutProfile { profile_id: "v4".into(), cpu_work_units: 2_500, payload_bytes: 8_192, base_latency_ms: 1.0 }
    }

    /// No CPU work, constant service time.
    pub fn fixed_latency(ms: f64) -> Self {
        SutProfile { profile_id: format!("fixed-{ms}"), cpu_work_units: 0, payload_bytes: 64, base_latency_ms: ms }
    }

    /// Resolves `v1`..`v4` or `fixed-<ms>`.
    pub fn by_name(name: &str) -> Result<Self, SutError> {
        match name {
            "v1" => Ok(Self::v1()),
            "v2" => Ok(Self::v2()),
            "v3" => Ok(Self::v3()),
            "v4" => Ok(Self::v4()),
            other => other
                .strip_prefix("fixed-")
                .and_then(|ms| ms.parse::<f64>().ok())
                .filter(|ms| ms.is_finite() && *ms >= 0.0)
                .map(Self::fixed_latency)
                .ok_or_else(|| SutError::UnknownProfile(other.to_string())),
        }
    }
}

/// Deterministic integer kernel: `units * ITERATIONS_PER_UNIT` rounds of
/// xorshift-multiply.
pub fn burn(units: u64) -> u64 {
    let mut x: u64 = 0x9E37_79B9_7F4A_7C15;
    for _ in 0..units * ITERATIONS_PER_UNIT {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        x = x.wrapping_mul(0x2545_F491_4F6C_DD1D);
    }
    std::hint::black_box(x)
}

fn thread_cpu_usec() -> u64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: ts is a valid out-pointer for the duration of the call
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0;
    }
    ts.tv_sec as u64 * 1_000_000 + ts.tv_nsec as u64 / 1_000
}

/// Accepted sockets inherit TCP_NODELAY on Linux. Replies larger than the
/// server's write buffer otherwise stall on delayed ACKs under keep-alive.
fn set_nodelay(listener: &std::net::TcpListener) -> std::io::Result<()> {
    use std::os::fd::AsRawFd;
    let on: libc::c_int = 1;
    // SAFETY: valid socket fd and a live c_int of the advertised size
    let rc = unsafe {
        libc::setsockopt(
            listener.as_raw_fd(),
            libc::IPPROTO_TCP,
            libc::TCP_NODELAY,
            &on as *const libc::c_int as *const libc::c_void,
            std::mem::size_of::<libc::c_int>() as libc::socklen_t,
        )
    };
    if rc == 0 { Ok(()) } else { Err(std::io::Error::last_os_error()) }
}

#[derive(Deserialize)]
struct Credentials {
    user: String,
    pass: String,
}

fn token(user: &str, payload_bytes: usize, seed: u64) -> String {
    let head = format!("{{\"token\":\"{:016x}.", seed ^ user.len() as u64);
    let tail = "\"}";
    let fill = payload_bytes.saturating_sub(head.len() + tail.len());
    let mut s = String::with_capacity(payload_bytes.max(head.len() + tail.len()));
    s.push_str(&head);
    s.extend(std::iter::repeat_n('x', fill));
    s.push_str(tail);
    s
}

/// Shared state of one running service.
struct Shared {
    profile: SutProfile,
    container: Option<Arc<MockContainer>>,
    requests: AtomicU64,
    in_flight: AtomicU64,
}

impl Shared {
    /// Burns the profile's work on the calling thread and returns the token.
    fn login(&self, user: &str) -> String {
        let p = &self.profile;
        let n = self.in_flight.fetch_add(1, Ordering::Relaxed) + 1;
        if let Some(c) = &self.container {
            c.set_memory(BASE_MEMORY_BYTES + n * p.payload_bytes as u64);
        }
        let cpu0 = thread_cpu_usec();
        let seed = burn(p.cpu_work_units);
        let cpu = thread_cpu_usec().saturating_sub(cpu0);
        let n = self.in_flight.fetch_sub(1, Ordering::Relaxed) - 1;
        if let Some(c) = &self.container {
            c.add_work(p.cpu_work_units, cpu);
            c.set_memory(BASE_MEMORY_BYTES + n * p.payload_bytes as u64);
        }
        token(user, p.payload_bytes, seed)
    }
}

const JSON: [(header::HeaderName, &str); 1] = [(header::CONTENT_TYPE, "application/json")];

async fn health(State(s): State<Arc<Shared>>) -> &'static str {
    s.requests.fetch_add(1, Ordering::Relaxed);
    "ok"
}

async fn login(State(s): State<Arc<Shared>>, body: Bytes) -> Response {
    s.requests.fetch_add(1, Ordering::Relaxed);
    let creds = serde_json::from_slice::<Credentials>(&body).ok().filter(|c| !c.user.is_empty() && !c.pass.is_empty());
    let Some(c) = creds else {
        return (StatusCode::BAD_REQUEST, JSON, "{\"error\":\"bad credentials format\"}").into_response();
    };
    let delay = s.profile.base_latency_ms;
    let worker = s.clone();
    let Ok(token) = tokio::task::spawn_blocking(move || worker.login(&c.user)).await else {
        return StatusCode::INTERNAL_SERVER_ERROR.into_response();
    };
    if delay > 0.0 {
        tokio::time::sleep(Duration::from_secs_f64(delay / 1e3)).await;
    }
    (JSON, token).into_response()
}

/// A running mock service. Dropping it without [`MockSut::shutdown`] leaves
/// it running until process exit.
pub struct MockSut {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for MockSut {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MockSut").field("addr", &self.addr).field("profile", &self.shared.profile).finish()
    }
}

impl MockSut {
    /// Binds and starts serving `POST /login` and `GET /health`. Work done is
    /// reported to `container` when given.
    pub fn serve(profile: SutProfile, bind: &str, container: Option<Arc<MockContainer>>) -> Result<Self, SutError> {
        let bind_err = |msg: String| SutError::Bind { addr: bind.to_string(), msg };
        let listener = std::net::TcpListener::bind(bind).map_err(|e| bind_err(e.to_string()))?;
        set_nodelay(&listener).map_err(|e| bind_err(e.to_string()))?;
        listener.set_nonblocking(true).map_err(|e| bind_err(e.to_string()))?;
        let addr = listener.local_addr().map_err(|e| bind_err(e.to_string()))?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(WORKERS)
            .enable_all()
            .build()
            .map_err(|e| bind_err(e.to_string()))?;
        let listener = {
            let _guard = runtime.enter();
            tokio::net::TcpListener::from_std(listener).map_err(|e| bind_err(e.to_string()))?
        };
        let shared = Arc::new(Shared { profile, container, requests: AtomicU64::new(0), in_flight: AtomicU64::new(0) });
        let app = Router::new().route("/health", get(health)).route("/login", post(login)).with_state(shared.clone());
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let served = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = served.await {
                    log::error!("mock SUT stopped: {e}");
                }
            });
            runtime.shutdown_timeout(Duration::from_secs(1));
        });
        Ok(MockSut { addr, shared, stop: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn profile(&self) -> &SutProfile {
        &self.shared.profile
    }

    pub fn requests_served(&self) -> u64 {
        self.shared.requests.load(Ordering::Relaxed)
    }

    /// Stops accepting, lets in-flight requests finish and joins.
    pub fn shutdown(mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
