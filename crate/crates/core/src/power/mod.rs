//! Cumulative energy counters (CPU package and DRAM) and the power traces
//! derived from them.

mod rapl;
mod sim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, StopSignal};
use crate::metric::{self, MetricDescriptor, Sample, SampleSeries};

pub use rapl::{RaplSysfs, DEFAULT_POWERCAP_ROOT};
pub use sim::{ActivityMeter, PowerProfile, SimulatedEnergy};

/// Fallback counter range when the interface does not advertise one.
pub const FALLBACK_MAX_RANGE_UJ: u64 = 1 << 32;

/// Default ceiling above which a derived power value invalidates a run.
pub const DEFAULT_MAX_WATTS: f64 = 1000.0;

pub const MIN_INTERVAL_MS: u64 = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("energy probe unavailable: {0}")]
    Unavailable(String),
    #[error("counter value {value} outside [0, {max}]")]
    Range { value: u64, max: u64 },
    #[error("need at least two counter readings, got {0}")]
    InsufficientData(usize),
    #[error("counter readings not strictly increasing in time at index {0}")]
    Unordered(usize),
    #[error("sampling interval {0} ms below minimum of {MIN_INTERVAL_MS} ms")]
    Interval(u64),
    #[error("bad power profile: {0}")]
    Profile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    CpuPackage,
    Dram,
}

impl DomainKind {
    pub const ALL: [DomainKind; 2] = [DomainKind::CpuPackage, DomainKind::Dram];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainKind::CpuPackage => "cpu_package",
            DomainKind::Dram => "dram",
        }
    }

    /// Metric under which raw readings of this domain are persisted.
    pub fn counter_metric(self) -> &'static MetricDescriptor {
        match self {
            DomainKind::CpuPackage => &metric::CPU_ENERGY_COUNTER,
            DomainKind::Dram => &metric::DRAM_ENERGY_COUNTER,
        }
    }

    pub fn from_counter_metric(name: &str) -> Option<Self> {
        DomainKind::ALL.into_iter().find(|k| k.counter_metric().name == name)
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "cpu_package" | "package" | "cpu" => Ok(DomainKind::CpuPackage),
            "dram" => Ok(DomainKind::Dram),
            other => Err(format!("unknown energy domain `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyDomain {
    pub kind: DomainKind,
    /// Backend-specific locator of the counter (sysfs directory, profile name).
    pub counter_path: String,
    pub max_range_uj: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterReading {
    pub timestamp_ms: u64,
    pub raw_uj: u64,
}

/// A source of cumulative energy counters.
pub trait EnergySource: Send {
    /// Resolves the domain of the given kind, with warnings worth keeping in
    /// run metadata (e.g. a fallback counter range).
    fn domain(&mut self, kind: DomainKind) -> Result<(EnergyDomain, Vec<String>), ProbeError>;

    /// Reads the cumulative counter. `now_ms` is the session-relative time
    /// of the read.
    fn read(&mut self, domain: &EnergyDomain, now_ms: u64) -> Result<u64, ProbeError>;
}

/// Reads one counter and stamps it with the session clock.
pub fn read_counter(
    source: &mut dyn EnergySource,
    domain: &EnergyDomain,
    clock: &dyn Clock,
) -> Result<CounterReading, ProbeError> {
    let timestamp_ms = clock.now_ms();
    let raw_uj = source.read(domain, timestamp_ms)?;
    if raw_uj > domain.max_range_uj {
        return Err(ProbeError::Range { value: raw_uj, max: domain.max_range_uj });
    }
    Ok(CounterReading { timestamp_ms, raw_uj })
}

/// Energy consumed between two readings of a wrapping counter, assuming at
/// most one wrap in between.
pub fn delta_energy(prev_uj: u64, curr_uj: u64, max_range_uj: u64) -> Result<u64, ProbeError> {
    for value in [prev_uj, curr_uj] {
        if value > max_range_uj {
            return Err(ProbeError::Range { value, max: max_range_uj });
        }
    }
    Ok(if curr_uj >= prev_uj { curr_uj - prev_uj } else { curr_uj + (max_range_uj - prev_uj) })
}

/// Total energy across consecutive readings, summing per-interval deltas.
pub fn energy_between(readings: &[CounterReading], max_range_uj: u64) -> Result<u64, ProbeError> {
    readings
        .windows(2)
        .map(|w| delta_energy(w[0].raw_uj, w[1].raw_uj, max_range_uj))
        .try_fold(0u64, |acc, d| Ok(acc + d?))
}

/// Point power derived from a counter trace.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTrace {
    pub domain: EnergyDomain,
    /// Mean spacing of the readings the trace was derived from.
    pub interval_ms: u64,
    /// Timestamp of the first reading; point `i` covers
    /// `(points[i-1].timestamp_ms or start_ms, points[i].timestamp_ms]`.
    pub start_ms: u64,
    pub points: SampleSeries,
}

impl PowerTrace {
    /// Σ power·Δt over the trace, in joules.
    pub fn integrated_joules(&self) -> f64 {
        let mut prev = self.start_ms;
        let mut total = 0.0;
        for p in &self.points.samples {
            total += p.value * (p.timestamp_ms - prev) as f64 / 1e3;
            prev = p.timestamp_ms;
        }
        total
    }
}

/// Derives watts per interval: point `i` is the energy between readings `i`
/// and `i+1` divided by their actual time difference, stamped at reading `i+1`.
pub fn power_from_counters(readings: &[CounterReading], domain: &EnergyDomain) -> Result<PowerTrace, ProbeError> {
    if readings.len() < 2 {
        return Err(ProbeError::InsufficientData(readings.len()));
    }
    let mut samples = Vec::with_capacity(readings.len() - 1);
    for (i, w) in readings.windows(2).enumerate() {
        if w[1].timestamp_ms <= w[0].timestamp_ms {
            return Err(ProbeError::Unordered(i + 1));
        }
        let uj = delta_energy(w[0].raw_uj, w[1].raw_uj, domain.max_range_uj)?;
        let dt_s = (w[1].timestamp_ms - w[0].timestamp_ms) as f64 / 1e3;
        samples.push(Sample::new(w[1].timestamp_ms, uj as f64 / 1e6 / dt_s));
    }
    let first = readings[0].timestamp_ms;
    let last = readings[readings.len() - 1].timestamp_ms;
    Ok(PowerTrace {
        domain: domain.clone(),
        interval_ms: (last - first) / (readings.len() as u64 - 1),
        start_ms: first,
        points: SampleSeries::new(&metric::HOST_POWER, domain.kind.as_str()).with_samples(samples),
    })
}

/// Returns a description of the first interval whose mean power exceeds
/// `max_watts`.
pub fn implausible_power(readings: &[CounterReading], domain: &EnergyDomain, max_watts: f64) -> Option<String> {
    let trace = power_from_counters(readings, domain).ok()?;
    trace
        .points
        .samples
        .iter()
        .find(|p| p.value > max_watts)
        .map(|p| format!("{}: {:.1} W at t={} ms exceeds {max_watts} W", domain.kind, p.value, p.timestamp_ms))
}

/// Readings collected by [`sample_stream`], one list per domain, plus the
/// error that ended the stream early, if any.
#[derive(Debug, Clone, Default)]
pub struct StreamOutcome {
    pub readings: Vec<Vec<CounterReading>>,
    pub error: Option<ProbeError>,
}

/// Samples every domain once per interval until `stop` is raised, then takes
/// one closing reading. Timestamps are actual read times.
pub fn sample_stream(
    source: &mut dyn EnergySource,
    domains: &[EnergyDomain],
    interval_ms: u64,
    clock: &dyn Clock,
    stop: &StopSignal,
) -> StreamOutcome {
    let mut out = StreamOutcome { readings: vec![Vec::new(); domains.len()], error: None };
    if interval_ms < MIN_INTERVAL_MS {
        out.error = Some(ProbeError::Interval(interval_ms));
        return out;
    }
    let mut read_all = |out: &mut StreamOutcome| -> Result<(), ProbeError> {
        let t = clock.now_ms();
        for (domain, list) in domains.iter().zip(out.readings.iter_mut()) {
            let raw_uj = source.read(domain, t)?;
            if raw_uj > domain.max_range_uj {
                return Err(ProbeError::Range { value: raw_uj, max: domain.max_range_uj });
            }
            list.push(CounterReading { timestamp_ms: t, raw_uj });
        }
        Ok(())
    };
    let last_ts = |out: &StreamOutcome| out.readings.first().and_then(|l| l.last()).map(|r| r.timestamp_ms);

    if let Err(e) = read_all(&mut out) {
        out.error = Some(e);
        return out;
    }
    let mut next = clock.now_ms();
    loop {
        next += interval_ms;
        let stopped = clock.wait_until(next, stop);
        let now = clock.now_ms();
        if Some(now) <= last_ts(&out) {
            if stopped {
                break;
            }
            continue;
        }
        if let Err(e) = read_all(&mut out) {
            out.error = Some(e);
            break;
        }
        if stopped {
            break;
        }
        if now >= next + interval_ms {
            // fell behind; resynchronise rather than bursting
            next = now;
        }
    }
    out
}
