//! Testbed daemon: runs the power and container collectors for one session
//! at a time and hands back checksummed data files.

mod client;
mod protocol;
mod server;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use crate::artifact::{pack_tar, FileEntry, FileKind};
use crate::clock::{wall_clock_ms, MonotonicClock, StopSignal};
use crate::container::{poll_container_stats, CgroupV2, MonitorOutcome, StatsSource};
use crate::metric::{to_csv_bytes, Sample, SampleSeries};
use crate::power::{
    implausible_power, sample_stream, CounterReading, EnergyDomain, EnergySource, RaplSysfs, StreamOutcome,
    DEFAULT_MAX_WATTS, MIN_INTERVAL_MS,
};
use crate::sim::SimulationEnv;

pub use client::{AgentClient, AgentError, StopResult};
pub use protocol::{
    parse_command, read_payload, write_message, write_payload, Command, CommandKind, ErrorCode, MonitoringConfig,
    Reply, SessionInfo, Status, MAX_PAYLOAD_BYTES, PROTOCOL_VERSION,
};
pub use server::AgentServer;

pub const HOST_CPU_FILE: &str = "host_cpu.csv";

pub fn power_file(domain: &str) -> String {
    format!("power_{domain}.csv")
}

pub fn container_file(id: &str) -> String {
    format!("container_{id}.csv")
}

/// Supplies the collectors' data sources for each session.
pub trait Backend: Send + Sync {
    fn name(&self) -> String;
    fn energy_source(&self) -> Box<dyn EnergySource>;
    fn stats_source(&self) -> Box<dyn StatsSource>;
}

/// RAPL through powercap sysfs and containers through cgroup v2.
#[derive(Debug, Clone)]
pub struct HardwareBackend {
    pub powercap_root: PathBuf,
    pub cgroup_root: PathBuf,
    pub proc_root: PathBuf,
}

impl Default for HardwareBackend {
    fn default() -> Self {
        HardwareBackend {
            powercap_root: crate::power::DEFAULT_POWERCAP_ROOT.into(),
            cgroup_root: crate::container::DEFAULT_CGROUP_ROOT.into(),
            proc_root: crate::container::DEFAULT_PROC_ROOT.into(),
        }
    }
}

impl Backend for HardwareBackend {
    fn name(&self) -> String {
        format!("powercap:{}", self.powercap_root.display())
    }

    fn energy_source(&self) -> Box<dyn EnergySource> {
        Box::new(RaplSysfs::new(&self.powercap_root))
    }

    fn stats_source(&self) -> Box<dyn StatsSource> {
        Box::new(CgroupV2::new(&self.cgroup_root, &self.proc_root))
    }
}

impl Backend for SimulationEnv {
    fn name(&self) -> String {
        "simulated".into()
    }

    fn energy_source(&self) -> Box<dyn EnergySource> {
        Box::new(SimulationEnv::energy_source(self))
    }

    fn stats_source(&self) -> Box<dyn StatsSource> {
        SimulationEnv::stats_source(self)
    }
}

struct Active {
    info: SessionInfo,
    containers: Vec<String>,
    stop: Arc<StopSignal>,
    power: JoinHandle<StreamOutcome>,
    monitor: JoinHandle<MonitorOutcome>,
}

struct Finished {
    info: SessionInfo,
    manifest: Vec<FileEntry>,
    archive: Vec<u8>,
}

#[derive(Default)]
struct State {
    active: Option<Active>,
    finished: BTreeMap<String, Finished>,
}

/// Session state machine behind the wire protocol.
pub struct Agent {
    backend: Box<dyn Backend>,
    state: Mutex<State>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent").field("backend", &self.backend.name()).finish()
    }
}

impl Agent {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Agent { backend: Box::new(backend), state: Mutex::default() }
    }

    pub fn handle(&self, cmd: &Command) -> (Reply, Option<Vec<u8>>) {
        match cmd.cmd {
            CommandKind::Health => (self.health(), None),
            CommandKind::StartMonitoring => match &cmd.config {
                Some(config) => (self.handle_start(&cmd.run_id, config), None),
                None => (Reply::error(ErrorCode::BadRequest, "start_monitoring needs a config"), None),
            },
            CommandKind::StopMonitoring => (self.handle_stop(&cmd.run_id), None),
            CommandKind::FetchResults => self.handle_fetch(&cmd.run_id),
        }
    }

    fn health(&self) -> Reply {
        let state = self.state.lock().unwrap();
        match &state.active {
            Some(a) => Reply::ok(format!("ok, monitoring {}", a.info.run_id)),
            None => Reply::ok("ok, idle"),
        }
    }

    pub fn handle_start(&self, run_id: &str, config: &MonitoringConfig) -> Reply {
        let mut state = self.state.lock().unwrap();
        if let Some(a) = &state.active {
            return Reply::error(ErrorCode::Busy, format!("session {} is active", a.info.run_id));
        }
        if state.finished.contains_key(run_id) {
            return Reply::error(ErrorCode::BadRequest, format!("run {run_id} was already monitored"));
        }
        if config.interval_ms < MIN_INTERVAL_MS {
            return Reply::error(ErrorCode::BadRequest, format!("interval below {MIN_INTERVAL_MS} ms"));
        }
        if config.domains.is_empty() {
            return Reply::error(ErrorCode::BadRequest, "no energy domains requested");
        }

        let mut energy = self.backend.energy_source();
        let mut domains = Vec::new();
        let mut warnings = Vec::new();
        for &kind in &config.domains {
            match energy.domain(kind) {
                Ok((d, w)) => {
                    domains.push(d);
                    warnings.extend(w);
                }
                Err(e) => return Reply::error(ErrorCode::ProbeUnavailable, e.to_string()),
            }
        }
        let mut stats = self.backend.stats_source();
        for id in &config.containers {
            match stats.container_stat(id, 0) {
                Ok(Some(_)) => {}
                Ok(None) => return Reply::error(ErrorCode::ProbeUnavailable, format!("container {id} not found")),
                Err(e) => return Reply::error(ErrorCode::ProbeUnavailable, e.to_string()),
            }
        }
        if let Err(e) = stats.host_busy_usec(0) {
            return Reply::error(ErrorCode::ProbeUnavailable, e.to_string());
        }

        let num_cpus = stats.num_cpus();
        let origin = Instant::now();
        let anchor_wall_ms = wall_clock_ms();
        let stop = Arc::new(StopSignal::new());
        let interval = config.interval_ms;
        let power = {
            let (stop, domains) = (stop.clone(), domains.clone());
            std::thread::spawn(move || {
                let clock = MonotonicClock::from_origin(origin);
                sample_stream(energy.as_mut(), &domains, interval, &clock, &stop)
            })
        };
        let monitor = {
            let (stop, ids) = (stop.clone(), config.containers.clone());
            std::thread::spawn(move || {
                let clock = MonotonicClock::from_origin(origin);
                poll_container_stats(stats.as_mut(), &ids, interval, &clock, &stop)
            })
        };
        let info = SessionInfo {
            run_id: run_id.to_string(),
            token: uuid::Uuid::new_v4().to_string(),
            anchor_wall_ms,
            backend: self.backend.name(),
            num_cpus,
            domains,
            warnings,
            degraded: false,
            degraded_reasons: Vec::new(),
            stopped_at_ms: None,
        };
        log::info!("session {run_id} started");
        let mut reply = Reply::ok("monitoring");
        reply.session = Some(info.clone());
        state.active = Some(Active { info, containers: config.containers.clone(), stop, power, monitor });
        reply
    }

    pub fn handle_stop(&self, run_id: &str) -> Reply {
        let mut state = self.state.lock().unwrap();
        match &state.active {
            Some(a) if a.info.run_id == run_id => {}
            _ => return Reply::error(ErrorCode::NotFound, format!("no active session for run {run_id}")),
        }
        let active = state.active.take().expect("checked above");
        active.stop.raise();
        let finished = finish(active);
        let mut reply = Reply::ok(if finished.info.degraded { "stopped, degraded" } else { "stopped" });
        reply.manifest = finished.manifest.clone();
        reply.session = Some(finished.info.clone());
        log::info!("session {run_id} stopped ({} files)", finished.manifest.len());
        state.finished.insert(run_id.to_string(), finished);
        reply
    }

    pub fn handle_fetch(&self, run_id: &str) -> (Reply, Option<Vec<u8>>) {
        let state = self.state.lock().unwrap();
        if let Some(f) = state.finished.get(run_id) {
            let mut reply = Reply::ok("archive follows");
            reply.manifest = f.manifest.clone();
            reply.session = Some(f.info.clone());
            reply.payload_bytes = Some(f.archive.len() as u64);
            return (reply, Some(f.archive.clone()));
        }
        match &state.active {
            Some(a) if a.info.run_id == run_id => {
                (Reply::error(ErrorCode::NotReady, format!("run {run_id} is still being monitored")), None)
            }
            _ => (Reply::error(ErrorCode::NotFound, format!("unknown run {run_id}")), None),
        }
    }

    /// Stops any active session without keeping its data.
    pub fn abort(&self) {
        let mut state = self.state.lock().unwrap();
        if let Some(a) = state.active.take() {
            a.stop.raise();
            let _ = a.power.join();
            let _ = a.monitor.join();
            log::warn!("session {} aborted", a.info.run_id);
        }
    }
}

fn counter_series(domain: &EnergyDomain, readings: &[CounterReading]) -> SampleSeries {
    SampleSeries::new(domain.kind.counter_metric(), domain.kind.as_str())
        .with_samples(readings.iter().map(|r| Sample::new(r.timestamp_ms, r.raw_uj as f64)).collect())
}

fn finish(active: Active) -> Finished {
    let Active { mut info, containers, power, monitor, .. } = active;
    let mut reasons = Vec::new();
    let power = power.join().unwrap_or_else(|_| {
        reasons.push("power collector panicked".into());
        StreamOutcome::default()
    });
    let monitor = monitor.join().ok();

    let mut files: Vec<(String, FileKind, Vec<u8>)> = Vec::new();
    if let Some(e) = &power.error {
        reasons.push(format!("power collector failed: {e}"));
    }
    for (i, domain) in info.domains.iter().enumerate() {
        let readings = power.readings.get(i).map(Vec::as_slice).unwrap_or(&[]);
        if readings.len() < 2 {
            reasons.push(format!("{}: only {} counter readings", domain.kind, readings.len()));
        }
        if let Some(why) = implausible_power(readings, domain, DEFAULT_MAX_WATTS) {
            reasons.push(format!("implausible power {why}"));
        }
        let series = counter_series(domain, readings);
        files.push((power_file(domain.kind.as_str()), FileKind::Power, to_csv_bytes([&series])));
    }
    match monitor {
        None => reasons.push("container collector panicked".into()),
        Some(m) => {
            if let Some(e) = &m.error {
                reasons.push(format!("container collector failed: {e}"));
            }
            for (id, t) in &m.vanished {
                reasons.push(format!("container {id} vanished at t={t} ms"));
            }
            for c in &m.containers {
                files.push((container_file(&c.container_id), FileKind::Container, to_csv_bytes([&c.memory, &c.cpu])));
            }
            files.push((HOST_CPU_FILE.into(), FileKind::Container, to_csv_bytes([&m.host_cpu])));
        }
    }
    for id in &containers {
        if !files.iter().any(|(p, _, _)| *p == container_file(id)) {
            files.push((container_file(id), FileKind::Container, Vec::new()));
        }
    }

    info.stopped_at_ms = power.readings.first().and_then(|r| r.last()).map(|r| r.timestamp_ms);
    info.degraded = !reasons.is_empty();
    info.degraded_reasons = reasons;
    files.sort_by(|a, b| a.0.cmp(&b.0));
    let manifest = files.iter().map(|(p, k, d)| FileEntry::describe(p.clone(), *k, d)).collect();
    let archive = pack_tar(&files.into_iter().map(|(p, _, d)| (p, d)).collect::<Vec<_>>())
        .expect("archiving to memory cannot fail");
    Finished { info, manifest, archive }
}
