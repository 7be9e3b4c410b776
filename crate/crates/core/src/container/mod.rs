//! Per-container memory and CPU utilization collection and attribution of
//! host power to containers.

mod attribution;
mod cgroup;
mod scripted;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::clock::{Clock, StopSignal};
use crate::metric::{self, Sample, SampleSeries};

pub use attribution::{attribute_power, Attribution, CpuShareSnapshot, SHARE_SKEW_PERCENT};
pub use cgroup::{parse_cgroup_container, resolve_container_of_process, CgroupV2, DEFAULT_CGROUP_ROOT, DEFAULT_PROC_ROOT};
pub use scripted::ScriptedStats;

/// Reserved scope id for the host and for power not attributed to any
/// monitored container.
pub const HOST_ID: &str = "host";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonitorError {
    #[error("process {0} no longer exists")]
    StaleProcess(u32),
    #[error("stats source unavailable: {0}")]
    Unavailable(String),
    #[error("host cpu share is zero while containers report {0:.3}%")]
    Attribution(f64),
    #[error("bad container stats script: {0}")]
    Script(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerStat {
    pub timestamp_ms: u64,
    pub memory_bytes: u64,
    /// Cumulative CPU time, non-decreasing.
    pub cpu_usage_usec: u64,
}

/// A source of container and host resource counters.
pub trait StatsSource: Send {
    fn num_cpus(&self) -> u32;

    /// Current memory and cumulative CPU usage of a container, or `None` once
    /// the container is gone.
    fn container_stat(&mut self, container_id: &str, now_ms: u64) -> Result<Option<ContainerStat>, MonitorError>;

    /// Cumulative busy CPU time of the whole host across all cores.
    fn host_busy_usec(&mut self, now_ms: u64) -> Result<u64, MonitorError>;
}

/// CPU utilization over an interval, normalised to total host capacity and
/// clamped to `[0, 100]`.
pub fn cpu_percent(delta_usage_usec: u64, delta_t_ms: u64, num_cpus: u32) -> f64 {
    if delta_t_ms == 0 || num_cpus == 0 {
        return 0.0;
    }
    let pct = delta_usage_usec as f64 / (delta_t_ms as f64 * 1e3 * num_cpus as f64) * 100.0;
    pct.clamp(0.0, 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainerSeries {
    pub container_id: String,
    pub memory: SampleSeries,
    pub cpu: SampleSeries,
}

/// Result of [`poll_container_stats`].
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorOutcome {
    pub containers: Vec<ContainerSeries>,
    pub host_cpu: SampleSeries,
    /// Containers that disappeared, with the time they were found missing.
    pub vanished: Vec<(String, u64)>,
    pub error: Option<MonitorError>,
}

impl MonitorOutcome {
    fn new(ids: &[String]) -> Self {
        MonitorOutcome {
            containers: ids
                .iter()
                .map(|id| ContainerSeries {
                    container_id: id.clone(),
                    memory: SampleSeries::new(&metric::MEMORY_USAGE, id.as_str()),
                    cpu: SampleSeries::new(&metric::CPU_UTILIZATION, id.as_str()),
                })
                .collect(),
            host_cpu: SampleSeries::new(&metric::CPU_UTILIZATION, HOST_ID),
            vanished: Vec::new(),
            error: None,
        }
    }
}

struct Tracker {
    last: Option<ContainerStat>,
    gone: bool,
}

/// Polls memory and CPU of every container, and host CPU, once per interval
/// until `stop`, with one closing poll. A vanished container's series ends
/// there; an unreadable host ends the whole loop with an error.
pub fn poll_container_stats(
    source: &mut dyn StatsSource,
    container_ids: &[String],
    interval_ms: u64,
    clock: &dyn Clock,
    stop: &StopSignal,
) -> MonitorOutcome {
    let mut out = MonitorOutcome::new(container_ids);
    let mut trackers: Vec<Tracker> = container_ids.iter().map(|_| Tracker { last: None, gone: false }).collect();
    let mut host_last: Option<(u64, u64)> = None;
    let ncpu = source.num_cpus();
    let mut last_tick: Option<u64> = None;

    let mut tick = |out: &mut MonitorOutcome, t: u64| -> Result<(), MonitorError> {
        let busy = source.host_busy_usec(t)?;
        if let Some((pt, pb)) = host_last {
            out.host_cpu.samples.push(Sample::new(t, cpu_percent(busy.saturating_sub(pb), t - pt, ncpu)));
        }
        host_last = Some((t, busy));
        for (series, tr) in out.containers.iter_mut().zip(trackers.iter_mut()) {
            if tr.gone {
                continue;
            }
            match source.container_stat(&series.container_id, t)? {
                None => {
                    tr.gone = true;
                    out.vanished.push((series.container_id.clone(), t));
                }
                Some(stat) => {
                    series.memory.samples.push(Sample::new(t, stat.memory_bytes as f64));
                    if let Some(prev) = tr.last {
                        let du = stat.cpu_usage_usec.saturating_sub(prev.cpu_usage_usec);
                        series.cpu.samples.push(Sample::new(t, cpu_percent(du, t - prev.timestamp_ms, ncpu)));
                    }
                    tr.last = Some(ContainerStat { timestamp_ms: t, ..stat });
                }
            }
        }
        Ok(())
    };

    let t0 = clock.now_ms();
    if let Err(e) = tick(&mut out, t0) {
        out.error = Some(e);
        return out;
    }
    last_tick = last_tick.or(Some(t0));
    let mut next = t0;
    loop {
        next += interval_ms;
        let stopped = clock.wait_until(next, stop);
        let now = clock.now_ms();
        if Some(now) > last_tick {
            if let Err(e) = tick(&mut out, now) {
                out.error = Some(e);
                break;
            }
            last_tick = Some(now);
        }
        if stopped {
            break;
        }
        if now >= next + interval_ms {
            next = now;
        }
    }
    out
}

/// Builds per-tick CPU share snapshots from host and container utilization
/// series sharing the same tick timestamps.
pub fn share_snapshots(host_cpu: &SampleSeries, containers: &[(&str, &SampleSeries)]) -> Vec<CpuShareSnapshot<f64>> {
    let mut by_time: BTreeMap<u64, CpuShareSnapshot<f64>> = host_cpu
        .samples
        .iter()
        .map(|s| (s.timestamp_ms, CpuShareSnapshot::new(s.timestamp_ms, s.value)))
        .collect();
    for (id, series) in containers {
        for s in &series.samples {
            if let Some(snap) = by_time.get_mut(&s.timestamp_ms) {
                snap.per_container_percent.insert((*id).to_string(), s.value);
            }
        }
    }
    by_time.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    #[test]
    fn percent_formula() {
        assert_eq!(cpu_percent(200_000, 1000, 4), 5.0);
        assert_eq!(cpu_percent(0, 1000, 4), 0.0);
        assert_eq!(cpu_percent(9_000_000, 1000, 4), 100.0);
        assert_eq!(cpu_percent(5, 0, 4), 0.0);
    }

    #[test]
    fn polls_scripted_containers() {
        let script = "t_ms,container_id,memory_bytes,cpu_usage_usec\n\
                      0,a,52428800,0\n10000,a,52428800,2000000\n\
                      0,b,1000,0\n10000,b,1000,0\n\
                      0,host,0,0\n10000,host,0,4000000\n";
        let mut src = ScriptedStats::parse(script, 4).unwrap();
        let stop = StopSignal::new();
        struct StopAt(ManualClock, StopSignal);
        impl Clock for StopAt {
            fn now_ms(&self) -> u64 {
                self.0.now_ms()
            }
            fn wait_until(&self, d: u64, s: &StopSignal) -> bool {
                self.0.wait_until(d, s);
                if self.0.now_ms() >= 10_000 {
                    self.1.raise();
                }
                s.is_raised()
            }
        }
        let clock = StopAt(ManualClock::new(), stop.clone());
        let ids = vec!["a".to_string(), "b".to_string()];
        let out = poll_container_stats(&mut src, &ids, 1000, &clock, &stop);
        assert!(out.error.is_none());
        let a = &out.containers[0];
        assert_eq!(a.memory.len(), 11);
        assert_eq!(a.cpu.len(), 10);
        assert!(a.cpu.samples.iter().all(|s| (s.value - 5.0).abs() < 1e-9));
        assert_eq!(a.memory.samples[0].value, 52_428_800.0);
        assert!(out.containers[1].cpu.samples.iter().all(|s| s.value == 0.0));
        assert!(out.host_cpu.samples.iter().all(|s| (s.value - 10.0).abs() < 1e-9));
        assert!(out.vanished.is_empty());
    }

    #[test]
    fn vanished_container_truncates_its_series() {
        struct Flaky(u64);
        impl StatsSource for Flaky {
            fn num_cpus(&self) -> u32 {
                1
            }
            fn container_stat(&mut self, _id: &str, now: u64) -> Result<Option<ContainerStat>, MonitorError> {
                Ok((now < self.0).then_some(ContainerStat { timestamp_ms: now, memory_bytes: 1, cpu_usage_usec: now * 100 }))
            }
            fn host_busy_usec(&mut self, now: u64) -> Result<u64, MonitorError> {
                Ok(now * 500)
            }
        }
        let stop = StopSignal::new();
        let clock = ManualClock::new();
        let s2 = stop.clone();
        let c2 = clock.clone();
        // raise stop once the manual clock passes 5 s
        let watcher = std::thread::spawn(move || loop {
            if c2.now_ms() >= 5000 {
                s2.raise();
                break;
            }
            std::thread::yield_now();
        });
        let out = poll_container_stats(&mut Flaky(3000), &["x".to_string()], 1000, &clock, &stop);
        watcher.join().unwrap();
        assert_eq!(out.vanished, vec![("x".to_string(), 3000)]);
        assert_eq!(out.containers[0].memory.len(), 3);
        assert!(out.host_cpu.len() >= 3);
        assert!(out.error.is_none());
    }

    #[test]
    fn snapshots_join_on_tick_time() {
        let host = SampleSeries::new(&metric::CPU_UTILIZATION, HOST_ID)
            .with_samples(vec![Sample::new(1000, 50.0), Sample::new(2000, 40.0)]);
        let a = SampleSeries::new(&metric::CPU_UTILIZATION, "a").with_samples(vec![Sample::new(1000, 30.0)]);
        let snaps = share_snapshots(&host, &[("a", &a)]);
        assert_eq!(snaps.len(), 2);
        assert_eq!(snaps[0].per_container_percent["a"], 30.0);
        assert!(snaps[1].per_container_percent.is_empty());
    }
}
