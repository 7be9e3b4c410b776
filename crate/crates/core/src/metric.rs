//! Metric taxonomy, units, and the sample/series data model shared by all
//! producers and consumers.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("unsupported unit conversion {from} -> {to}")]
    Unit { from: Unit, to: Unit },
    #[error("watt to joule conversion needs an interval")]
    MissingInterval,
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("phase {0} has no marks in this series")]
    Phase(Phase),
    #[error("bad sample csv at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("non-finite value in series `{0}`")]
    NonFinite(String),
    #[error("timestamps not strictly increasing in series `{0}`")]
    Unordered(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Byte,
    Watt,
    Percent,
    Microjoule,
    Joule,
    Millisecond,
    Second,
    Count,
    RequestsPerSecond,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Unit::Byte => "B",
            Unit::Watt => "W",
            Unit::Percent => "%",
            Unit::Microjoule => "uJ",
            Unit::Joule => "J",
            Unit::Millisecond => "ms",
            Unit::Second => "s",
            Unit::Count => "count",
            Unit::RequestsPerSecond => "req/s",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Host,
    Container,
    Endpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Direct,
    Derived,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temporal {
    Point,
    Cumulative,
}

/// Name, unit and three-way classification (scope, origin, temporal) of a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MetricDescriptor {
    pub name: &'static str,
    pub unit: Unit,
    pub scopes: &'static [Scope],
    pub origin: Origin,
    pub temporal: Temporal,
}

impl MetricDescriptor {
    pub fn has_scope(&self, scope: Scope) -> bool {
        self.scopes.contains(&scope)
    }
}

const fn descriptor(
    name: &'static str,
    unit: Unit,
    scopes: &'static [Scope],
    origin: Origin,
    temporal: Temporal,
) -> MetricDescriptor {
    MetricDescriptor { name, unit, scopes, origin, temporal }
}

pub const MEMORY_USAGE: MetricDescriptor =
    descriptor("memory_usage", Unit::Byte, &[Scope::Container], Origin::Direct, Temporal::Point);
pub const CPU_POWER: MetricDescriptor =
    descriptor("cpu_power", Unit::Watt, &[Scope::Container], Origin::Direct, Temporal::Point);
pub const CPU_UTILIZATION: MetricDescriptor = descriptor(
    "cpu_utilization",
    Unit::Percent,
    &[Scope::Host, Scope::Container],
    Origin::Direct,
    Temporal::Point,
);
pub const DRAM_ENERGY: MetricDescriptor =
    descriptor("dram_energy", Unit::Microjoule, &[Scope::Host], Origin::Derived, Temporal::Cumulative);
pub const RESPONSE_TIME: MetricDescriptor =
    descriptor("response_time", Unit::Millisecond, &[Scope::Endpoint], Origin::Direct, Temporal::Point);
pub const FAILURES: MetricDescriptor =
    descriptor("failures", Unit::Count, &[Scope::Endpoint], Origin::Direct, Temporal::Point);

/// The six measured metrics and their classification.
pub const BUILTIN: [MetricDescriptor; 6] =
    [MEMORY_USAGE, CPU_POWER, CPU_UTILIZATION, DRAM_ENERGY, RESPONSE_TIME, FAILURES];

// Series produced internally by the collectors and the analytics layer.
pub const CPU_ENERGY_COUNTER: MetricDescriptor = descriptor(
    "cpu_energy_counter",
    Unit::Microjoule,
    &[Scope::Host],
    Origin::Direct,
    Temporal::Cumulative,
);
pub const DRAM_ENERGY_COUNTER: MetricDescriptor = descriptor(
    "dram_energy_counter",
    Unit::Microjoule,
    &[Scope::Host],
    Origin::Direct,
    Temporal::Cumulative,
);
pub const HOST_POWER: MetricDescriptor =
    descriptor("host_power", Unit::Watt, &[Scope::Host], Origin::Derived, Temporal::Point);
pub const ATTRIBUTED_POWER: MetricDescriptor =
    descriptor("attributed_power", Unit::Watt, &[Scope::Container], Origin::Derived, Temporal::Point);
pub const THROUGHPUT: MetricDescriptor = descriptor(
    "throughput",
    Unit::RequestsPerSecond,
    &[Scope::Endpoint],
    Origin::Derived,
    Temporal::Point,
);

pub const AUXILIARY: [MetricDescriptor; 5] =
    [CPU_ENERGY_COUNTER, DRAM_ENERGY_COUNTER, HOST_POWER, ATTRIBUTED_POWER, THROUGHPUT];

/// Looks up a registered descriptor by name.
pub fn classify(name: &str) -> Result<&'static MetricDescriptor, MetricError> {
    BUILTIN
        .iter()
        .chain(AUXILIARY.iter())
        .find(|d| d.name == name)
        .ok_or_else(|| MetricError::UnknownMetric(name.to_string()))
}

/// Converts between the supported unit pairs. `interval_s` is required for
/// watt to joule and ignored otherwise.
pub fn convert_unit(value: f64, from: Unit, to: Unit, interval_s: Option<f64>) -> Result<f64, MetricError> {
    match (from, to) {
        (Unit::Microjoule, Unit::Joule) => Ok(value / 1e6),
        (Unit::Joule, Unit::Microjoule) => Ok(value * 1e6),
        (Unit::Watt, Unit::Joule) => interval_s.map(|dt| value * dt).ok_or(MetricError::MissingInterval),
        (Unit::Millisecond, Unit::Second) => Ok(value / 1e3),
        (a, b) if a == b => Ok(value),
        (from, to) => Err(MetricError::Unit { from, to }),
    }
}

/// Converts a raw counter value in µJ to joules.
pub fn uj_to_j(uj: u64) -> f64 {
    uj as f64 / 1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Measurement,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::Measurement => "measurement",
        })
    }
}

/// Half-open interval `[start_ms, end_ms)` of a run phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseMark {
    pub phase: Phase,
    pub start_ms: u64,
    pub end_ms: u64,
}

impl PhaseMark {
    pub fn contains(&self, t_ms: u64) -> bool {
        t_ms >= self.start_ms && t_ms < self.end_ms
    }

    pub fn shifted(self, offset_ms: u64) -> Self {
        PhaseMark { start_ms: self.start_ms + offset_ms, end_ms: self.end_ms + offset_ms, ..self }
    }
}

/// Standard warm-up then measurement marks for a run of `duration_ms`
/// starting at `offset_ms`.
pub fn standard_phases(offset_ms: u64, warmup_ms: u64, duration_ms: u64) -> Vec<PhaseMark> {
    vec![
        PhaseMark { phase: Phase::Warmup, start_ms: offset_ms, end_ms: offset_ms + warmup_ms },
        PhaseMark { phase: Phase::Measurement, start_ms: offset_ms + warmup_ms, end_ms: offset_ms + duration_ms },
    ]
}

/// One timestamped value. Timestamps are milliseconds since run start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub timestamp_ms: u64,
    pub value: f64,
}

impl Sample {
    pub fn new(timestamp_ms: u64, value: f64) -> Self {
        Sample { timestamp_ms, value }
    }
}

/// Timestamped values of one metric for one host, container or endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSeries {
    pub descriptor: &'static MetricDescriptor,
    pub scope_id: String,
    pub samples: Vec<Sample>,
    pub phase_marks: Vec<PhaseMark>,
}

impl SampleSeries {
    pub fn new(descriptor: &'static MetricDescriptor, scope_id: impl Into<String>) -> Self {
        SampleSeries { descriptor, scope_id: scope_id.into(), samples: Vec::new(), phase_marks: Vec::new() }
    }

    pub fn with_samples(mut self, samples: Vec<Sample>) -> Self {
        self.samples = samples;
        self
    }

    pub fn with_phases(mut self, marks: Vec<PhaseMark>) -> Self {
        self.phase_marks = marks;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.value).collect()
    }

    pub fn phase(&self, phase: Phase) -> Option<PhaseMark> {
        self.phase_marks.iter().copied().find(|m| m.phase == phase)
    }

    /// Checks finiteness and strictly increasing timestamps.
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.samples.iter().any(|s| !s.value.is_finite()) {
            return Err(MetricError::NonFinite(self.descriptor.name.to_string()));
        }
        if self.samples.windows(2).any(|w| w[1].timestamp_ms <= w[0].timestamp_ms) {
            return Err(MetricError::Unordered(self.descriptor.name.to_string()));
        }
        Ok(())
    }

    /// Samples inside the phase interval, start inclusive, end exclusive.
    pub fn slice_phase(&self, phase: Phase) -> Result<SampleSeries, MetricError> {
        let mark = self.phase(phase).ok_or(MetricError::Phase(phase))?;
        Ok(SampleSeries {
            descriptor: self.descriptor,
            scope_id: self.scope_id.clone(),
            samples: self.samples.iter().copied().filter(|s| mark.contains(s.timestamp_ms)).collect(),
            phase_marks: vec![mark],
        })
    }
}

const CSV_HEADER: &str = "timestamp_ms,metric,scope_id,value";

/// Writes series in the sample CSV format: header, then one
/// `timestamp_ms,metric,scope_id,value` row per sample, values at six
/// decimals, LF endings.
pub fn write_csv<'a, W: Write>(
    mut out: W,
    series: impl IntoIterator<Item = &'a SampleSeries>,
) -> std::io::Result<usize> {
    writeln!(out, "{CSV_HEADER}")?;
    let mut rows = 0;
    for s in series {
        debug_assert!(!s.scope_id.contains(','), "scope id with comma");
        for sample in &s.samples {
            writeln!(out, "{},{},{},{:.6}", sample.timestamp_ms, s.descriptor.name, s.scope_id, sample.value)?;
            rows += 1;
        }
    }
    Ok(rows)
}

pub fn to_csv_bytes<'a>(series: impl IntoIterator<Item = &'a SampleSeries>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(&mut buf, series).expect("writing to a Vec cannot fail");
    buf
}

/// Parses the sample CSV format back into series, grouped by
/// `(metric, scope_id)` in order of first appearance. Phase marks are not
/// part of the format and come back empty.
pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<SampleSeries>, MetricError> {
    let mut out: Vec<SampleSeries> = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| MetricError::Csv { line: lineno, msg: e.to_string() })?;
        if idx == 0 {
            if line != CSV_HEADER {
                return Err(MetricError::Csv { line: 1, msg: format!("unexpected header `{line}`") });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| MetricError::Csv { line: lineno, msg: msg.to_string() };
        let mut parts = line.split(',');
        let (Some(ts), Some(metric), Some(scope), Some(value), None) =
            (parts.next(), parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad("expected 4 fields"));
        };
        let timestamp_ms = u64::from_str(ts).map_err(|_| bad("bad timestamp"))?;
        let value = f64::from_str(value).map_err(|_| bad("bad value"))?;
        let descriptor = classify(metric)?;
        let sample = Sample { timestamp_ms, value };
        match out.iter_mut().find(|s| s.descriptor.name == metric && s.scope_id == scope) {
            Some(s) => s.samples.push(sample),
            None => out.push(SampleSeries::new(descriptor, scope).with_samples(vec![sample])),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_of_builtins_is_closed() {
        assert_eq!(BUILTIN.len(), 6);
        let expect = [
            ("memory_usage", Unit::Byte, &[Scope::Container][..], Origin::Direct, Temporal::Point),
            ("cpu_power", Unit::Watt, &[Scope::Container][..], Origin::Direct, Temporal::Point),
            ("cpu_utilization", Unit::Percent, &[Scope::Host, Scope::Container][..], Origin::Direct, Temporal::Point),
            ("dram_energy", Unit::Microjoule, &[Scope::Host][..], Origin::Derived, Temporal::Cumulative),
            ("response_time", Unit::Millisecond, &[Scope::Endpoint][..], Origin::Direct, Temporal::Point),
            ("failures", Unit::Count, &[Scope::Endpoint][..], Origin::Direct, Temporal::Point),
        ];
        for (d, (name, unit, scopes, origin, temporal)) in BUILTIN.iter().zip(expect) {
            assert_eq!((d.name, d.unit, d.scopes, d.origin, d.temporal), (name, unit, scopes, origin, temporal));
        }
        let multi: Vec<_> = BUILTIN.iter().filter(|d| d.scopes.len() > 1).map(|d| d.name).collect();
        assert_eq!(multi, ["cpu_utilization"]);
    }

    #[test]
    fn classify_known_and_unknown() {
        let d = classify("dram_energy").unwrap();
        assert_eq!((d.unit, d.scopes, d.origin, d.temporal), (Unit::Microjoule, &[Scope::Host][..], Origin::Derived, Temporal::Cumulative));
        let r = classify("response_time").unwrap();
        assert_eq!((r.unit, r.scopes, r.origin, r.temporal), (Unit::Millisecond, &[Scope::Endpoint][..], Origin::Direct, Temporal::Point));
        assert_eq!(classify("nonexistent"), Err(MetricError::UnknownMetric("nonexistent".into())));
    }

    #[test]
    fn unit_conversions() {
        assert_eq!(convert_unit(29_710_000.0, Unit::Microjoule, Unit::Joule, None), Ok(29.71));
        assert_eq!(convert_unit(0.0, Unit::Microjoule, Unit::Joule, None), Ok(0.0));
        assert_eq!(convert_unit(10.0, Unit::Watt, Unit::Joule, Some(100.0)), Ok(1000.0));
        assert_eq!(convert_unit(1500.0, Unit::Millisecond, Unit::Second, None), Ok(1.5));
        assert_eq!(convert_unit(1.0, Unit::Watt, Unit::Joule, None), Err(MetricError::MissingInterval));
        assert!(matches!(convert_unit(1.0, Unit::Byte, Unit::Joule, None), Err(MetricError::Unit { .. })));
    }

    fn ramp(n: u64) -> SampleSeries {
        SampleSeries::new(&CPU_UTILIZATION, "host")
            .with_samples((0..n).map(|t| Sample::new(t * 1000, t as f64)).collect())
            .with_phases(standard_phases(0, 10_000, 110_000))
    }

    #[test]
    fn slice_measurement_phase() {
        let m = ramp(110).slice_phase(Phase::Measurement).unwrap();
        assert_eq!(m.samples.first().unwrap().timestamp_ms, 10_000);
        assert_eq!(m.samples.last().unwrap().timestamp_ms, 109_000);
        assert_eq!(m.len(), 100);
    }

    #[test]
    fn slice_empty_and_missing_phase() {
        let s = SampleSeries::new(&CPU_UTILIZATION, "host")
            .with_samples(vec![Sample::new(0, 1.0)])
            .with_phases(standard_phases(0, 10, 10));
        assert!(s.slice_phase(Phase::Measurement).unwrap().is_empty());
        let bare = SampleSeries::new(&CPU_UTILIZATION, "host");
        assert_eq!(bare.slice_phase(Phase::Warmup), Err(MetricError::Phase(Phase::Warmup)));
    }

    #[test]
    fn csv_format_is_exact() {
        let s = SampleSeries::new(&MEMORY_USAGE, "abc123")
            .with_samples(vec![Sample::new(0, 52_428_800.0), Sample::new(1000, 1.25)]);
        let text = String::from_utf8(to_csv_bytes([&s])).unwrap();
        assert_eq!(
            text,
            "timestamp_ms,metric,scope_id,value\n0,memory_usage,abc123,52428800.000000\n1000,memory_usage,abc123,1.250000\n"
        );
        let back = read_csv(text.as_bytes()).unwrap();
        assert_eq!(back, vec![s]);
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(read_csv("nope\n".as_bytes()).is_err());
        assert!(read_csv("timestamp_ms,metric,scope_id,value\n1,memory_usage,x\n".as_bytes()).is_err());
        assert!(matches!(
            read_csv("timestamp_ms,metric,scope_id,value\n1,bogus,x,1.0\n".as_bytes()),
            Err(MetricError::UnknownMetric(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn warmup_and_measurement_partition_the_series(
            gaps in proptest::collection::vec(1u64..500, 0..80),
            warmup in 0u64..5_000,
            extra in 1u64..20_000,
        ) {
            let mut t = 0;
            let samples: Vec<Sample> = gaps.iter().enumerate().map(|(i, g)| { t += g; Sample::new(t, i as f64) }).collect();
            let end = t + 1;
            let duration = (warmup + extra).max(end);
            let s = SampleSeries::new(&CPU_UTILIZATION, "host")
                .with_samples(samples.clone())
                .with_phases(standard_phases(0, warmup, duration));
            let mut joined = s.slice_phase(Phase::Warmup).unwrap().samples;
            joined.extend(s.slice_phase(Phase::Measurement).unwrap().samples);
            let key = |v: &Vec<Sample>| { let mut k: Vec<(u64, u64)> = v.iter().map(|s| (s.timestamp_ms, s.value.to_bits())).collect(); k.sort(); k };
            prop_assert_eq!(key(&joined), key(&samples));
        }

        #[test]
        fn joule_microjoule_round_trip(micro in 0i64..1_000_000_000_000i64) {
            let x = micro as f64 / 1e6;
            let there = convert_unit(x, Unit::Joule, Unit::Microjoule, None).unwrap();
            prop_assert_eq!(convert_unit(there, Unit::Microjoule, Unit::Joule, None).unwrap(), x);
        }
    }
}
