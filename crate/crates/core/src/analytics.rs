//! Run summaries, version comparison with regression verdicts, and
//! deterministic reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{attribute_power, share_snapshots, CpuShareSnapshot};
use crate::loadgen::throughput_series;
use crate::metric::{Phase, PhaseMark};
use crate::power::{energy_between, power_from_counters, CounterReading, DomainKind};
use crate::stats::{self, rank_sum, Alternative, FiveNumber};
use crate::store::RunData;

pub const REPORT_SCHEMA: u32 = 1;
pub const DEFAULT_THRESHOLD_PERCENT: f64 = 5.0;
pub const DEFAULT_ALPHA: f64 = 0.05;
/// Repetitions per side from which the rank-sum test is applied.
pub const MIN_REPETITIONS_FOR_TEST: usize = 3;
pub const THROUGHPUT_BUCKET_MS: u64 = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum SummaryError {
    #[error("run {0} is invalid: {1}")]
    InvalidRun(String, String),
    #[error("run {0} has no load phase information")]
    NoPhases(String),
    #[error("run {run_id}: {domain} trace has fewer than two readings in the measurement phase")]
    EmptyPowerTrace { run_id: String, domain: DomainKind },
    #[error("run {0} has no request log")]
    NoRequests(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("runs measured under different plans: {0} vs {1}")]
    IncomparableRuns(String, String),
    #[error("no valid runs for {0}")]
    NoData(String),
}

/// Per-run aggregate over the measurement phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub commit_id: String,
    pub plan_hash: String,
    pub cpu_energy_j: f64,
    pub dram_energy_j: f64,
    pub response_ms_median: f64,
    pub response_ms_max: f64,
    pub throughput_mean_rps: f64,
    pub throughput_median_rps: f64,
    pub throughput_max_rps: f64,
    pub cpu_percent_median: f64,
    pub cpu_percent_max: f64,
    /// Absent when no request succeeded.
    pub energy_per_request_j: Option<f64>,
    pub successful_requests: u64,
    pub failures_total: u64,
    pub requests_total: u64,
    /// Attributed CPU package energy per monitored container.
    pub container_energy_j: BTreeMap<String, f64>,
    /// Attributed energy of all monitored containers together.
    pub group_energy_j: f64,
    pub group_energy_per_request_j: Option<f64>,
}

fn in_window(t: u64, m: &PhaseMark) -> bool {
    m.contains(t)
}

fn window_readings(readings: &[CounterReading], m: &PhaseMark) -> Vec<CounterReading> {
    readings.iter().copied().filter(|r| in_window(r.timestamp_ms, m)).collect()
}

/// Aggregates a valid run. Energy is the counter delta between the first
/// and last readings inside the measurement phase.
pub fn aggregate_run(data: &RunData) -> Result<RunSummary, SummaryError> {
    let record = &data.meta.record;
    let run_id = record.run_id.clone();
    if let crate::store::RunStatus::Invalid { reason } = &record.status {
        return Err(SummaryError::InvalidRun(run_id, reason.clone()));
    }
    let marks = data.phase_marks().ok_or_else(|| SummaryError::NoPhases(run_id.clone()))?;
    let m = *marks.iter().find(|m| m.phase == Phase::Measurement).ok_or_else(|| SummaryError::NoPhases(run_id.clone()))?;
    let log = data.requests.as_ref().ok_or_else(|| SummaryError::NoRequests(run_id.clone()))?;

    let mut energy = BTreeMap::new();
    for (&kind, (domain, readings)) in &data.power {
        let inside = window_readings(readings, &m);
        if inside.len() < 2 {
            return Err(SummaryError::EmptyPowerTrace { run_id, domain: kind });
        }
        let uj = energy_between(&inside, domain.max_range_uj)
            .map_err(|_| SummaryError::EmptyPowerTrace { run_id: run_id.clone(), domain: kind })?;
        energy.insert(kind, uj as f64 / 1e6);
    }
    let cpu_energy_j = *energy
        .get(&DomainKind::CpuPackage)
        .ok_or(SummaryError::EmptyPowerTrace { run_id: run_id.clone(), domain: DomainKind::CpuPackage })?;
    let dram_energy_j = energy.get(&DomainKind::Dram).copied().unwrap_or(0.0);

    let measured: Vec<_> = log.measurement().filter(|r| r.start_ms < log.duration_ms).collect();
    let latencies: Vec<f64> = measured.iter().filter(|r| r.outcome.is_success()).map(|r| r.latency_ms).collect();
    let successful_requests = latencies.len() as u64;
    let throughput = throughput_series(log, THROUGHPUT_BUCKET_MS).values();

    let host: Vec<f64> = data
        .host_cpu
        .iter()
        .flat_map(|s| s.samples.iter())
        .filter(|s| in_window(s.timestamp_ms, &m))
        .map(|s| s.value)
        .collect();

    let container_energy_j = attributed_energy(data, &m);
    let group_energy_j = container_energy_j.values().sum();
    let per_request = |e: f64| (successful_requests > 0).then(|| e / successful_requests as f64);

    Ok(RunSummary {
        run_id,
        commit_id: record.commit_id.clone(),
        plan_hash: record.plan_hash.clone(),
        cpu_energy_j,
        dram_energy_j,
        response_ms_median: stats::median(&latencies).unwrap_or(0.0),
        response_ms_max: stats::max(&latencies).unwrap_or(0.0),
        throughput_mean_rps: stats::mean(&throughput).unwrap_or(0.0),
        throughput_median_rps: stats::median(&throughput).unwrap_or(0.0),
        throughput_max_rps: stats::max(&throughput).unwrap_or(0.0),
        cpu_percent_median: stats::median(&host).unwrap_or(0.0),
        cpu_percent_max: stats::max(&host).unwrap_or(0.0),
        energy_per_request_j: per_request(cpu_energy_j + dram_energy_j),
        successful_requests,
        failures_total: measured.len() as u64 - successful_requests,
        requests_total: measured.len() as u64,
        container_energy_j,
        group_energy_j,
        group_energy_per_request_j: per_request(group_energy_j),
    })
}

/// CPU package energy attributed to each container over power intervals
/// lying inside the phase, using the utilization tick nearest to each
/// interval end.
fn attributed_energy(data: &RunData, m: &PhaseMark) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = data.containers.iter().map(|c| (c.container_id.clone(), 0.0)).collect();
    let (Some((domain, readings)), Some(host)) = (data.power.get(&DomainKind::CpuPackage), &data.host_cpu) else {
        return out;
    };
    let Ok(trace) = power_from_counters(&window_readings(readings, m), domain) else {
        return out;
    };
    let shares: Vec<(&str, &crate::metric::SampleSeries)> =
        data.containers.iter().map(|c| (c.container_id.as_str(), &c.cpu)).collect();
    let snaps: Vec<CpuShareSnapshot<f64>> =
        share_snapshots(host, &shares).into_iter().filter(|s| in_window(s.timestamp_ms, m)).collect();
    if snaps.is_empty() {
        return out;
    }
    let mut prev = trace.start_ms;
    for p in &trace.points.samples {
        let dt_s = (p.timestamp_ms - prev) as f64 / 1e3;
        prev = p.timestamp_ms;
        let snap = snaps.iter().min_by_key(|s| s.timestamp_ms.abs_diff(p.timestamp_ms)).expect("non-empty");
        if let Ok(a) = attribute_power(p.value, snap) {
            for (id, watts) in a.per_container {
                *out.entry(id).or_default() += watts * dt_s;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKey {
    CpuEnergy,
    DramEnergy,
    EnergyPerRequest,
    ResponseTime,
    Throughput,
    CpuUtilization,
}

impl MetricKey {
    pub const ALL: [MetricKey; 6] = [
        MetricKey::CpuEnergy,
        MetricKey::DramEnergy,
        MetricKey::EnergyPerRequest,
        MetricKey::ResponseTime,
        MetricKey::Throughput,
        MetricKey::CpuUtilization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKey::CpuEnergy => "cpu_energy_j",
            MetricKey::DramEnergy => "dram_energy_j",
            MetricKey::EnergyPerRequest => "energy_per_request_j",
            MetricKey::ResponseTime => "response_ms_median",
            MetricKey::Throughput => "throughput_mean_rps",
            MetricKey::CpuUtilization => "cpu_percent_median",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        Self::ALL.into_iter().find(|k| k.name() == s || k.short() == s)
    }

    fn short(self) -> &'static str {
        match self {
            MetricKey::CpuEnergy => "cpu_energy",
            MetricKey::DramEnergy => "dram_energy",
            MetricKey::EnergyPerRequest => "energy_per_request",
            MetricKey::ResponseTime => "response_time",
            MetricKey::Throughput => "throughput",
            MetricKey::CpuUtilization => "cpu_utilization",
        }
    }

    /// Whether an increase is harmful.
    pub fn higher_is_worse(self) -> bool {
        !matches!(self, MetricKey::Throughput)
    }

    pub fn of(self, s: &RunSummary) -> Option<f64> {
        match self {
            MetricKey::CpuEnergy => Some(s.cpu_energy_j),
            MetricKey::DramEnergy => Some(s.dram_energy_j),
            MetricKey::EnergyPerRequest => s.energy_per_request_j,
            MetricKey::ResponseTime => Some(s.response_ms_median),
            MetricKey::Throughput => Some(s.throughput_mean_rps),
            MetricKey::CpuUtilization => Some(s.cpu_percent_median),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparePolicy {
    pub threshold_percent: f64,
    pub alpha: f64,
    /// Metrics whose verdict feeds the overall verdict.
    pub metrics: Vec<MetricKey>,
}

impl Default for ComparePolicy {
    fn default() -> Self {
        ComparePolicy { threshold_percent: DEFAULT_THRESHOLD_PERCENT, alpha: DEFAULT_ALPHA, metrics: MetricKey::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Regression,
    Improvement,
    Unchanged,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Regression => "regression",
            Verdict::Improvement => "improvement",
            Verdict::Unchanged => "unchanged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub baseline_stat: f64,
    pub candidate_stat: f64,
    /// `None` when the baseline is zero and the candidate is not.
    pub delta_percent: Option<f64>,
    pub verdict: Verdict,
    pub p_value: Option<f64>,
    /// Whether the threshold was exceeded but the rank-sum test did not
    /// confirm it.
    pub not_significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline_commit: String,
    pub candidate_commit: String,
    pub plan_hash: String,
    pub baseline_runs: usize,
    pub candidate_runs: usize,
    pub threshold_percent: f64,
    pub alpha: f64,
    /// Fewer than the test minimum of repetitions on a side: threshold only.
    pub low_confidence: bool,
    pub per_metric: BTreeMap<String, MetricComparison>,
    pub overall_verdict: Verdict,
}

fn commit_of(side: &[RunSummary], what: &str) -> Result<String, CompareError> {
    let first = side.first().ok_or_else(|| CompareError::NoData(what.to_string()))?;
    Ok(first.commit_id.clone())
}

/// Compares median statistics of two sets of runs. A metric regresses when
/// the candidate/baseline ratio moves beyond `1 + threshold` in the harmful
/// direction (improves beyond the reciprocal) and, when both sides have
/// enough repetitions, a one-sided rank-sum test in that direction rejects
/// at `alpha`.
pub fn compare(baseline: &[RunSummary], candidate: &[RunSummary], policy: &ComparePolicy) -> Result<ComparisonReport, CompareError> {
    let baseline_commit = commit_of(baseline, "baseline")?;
    let candidate_commit = commit_of(candidate, "candidate")?;
    let plan_hash = baseline[0].plan_hash.clone();
    if let Some(other) = baseline.iter().chain(candidate).find(|s| s.plan_hash != plan_hash) {
        return Err(CompareError::IncomparableRuns(plan_hash, other.plan_hash.clone()));
    }
    let tested = baseline.len() >= MIN_REPETITIONS_FOR_TEST && candidate.len() >= MIN_REPETITIONS_FOR_TEST;
    let limit = (1.0 + policy.threshold_percent / 100.0).ln();

    let mut per_metric = BTreeMap::new();
    for key in MetricKey::ALL {
        let b: Vec<f64> = baseline.iter().filter_map(|s| key.of(s)).collect();
        let c: Vec<f64> = candidate.iter().filter_map(|s| key.of(s)).collect();
        let (Some(bm), Some(cm)) = (stats::median(&b), stats::median(&c)) else {
            continue;
        };
        let delta_percent = if bm != 0.0 { Some((cm - bm) / bm * 100.0) } else if cm == 0.0 { Some(0.0) } else { None };
        let log_ratio = match (bm, cm) {
            (b, c) if b == c => 0.0,
            (b, c) if b > 0.0 && c > 0.0 => (c / b).ln(),
            (b, c) => (c - b).signum() * f64::INFINITY,
        };
        let worse = if key.higher_is_worse() { log_ratio > limit } else { log_ratio < -limit };
        let better = if key.higher_is_worse() { log_ratio < -limit } else { log_ratio > limit };
        let mut verdict = if worse { Verdict::Regression } else if better { Verdict::Improvement } else { Verdict::Unchanged };
        let mut p_value = None;
        let mut not_significant = false;
        if tested && verdict != Verdict::Unchanged {
            let alt = if cm > bm { Alternative::Greater } else { Alternative::Less };
            if let Some(t) = rank_sum(&b, &c, alt) {
                p_value = Some(t.p_value);
                if t.p_value > policy.alpha {
                    verdict = Verdict::Unchanged;
                    not_significant = true;
                }
            }
        }
        per_metric.insert(
            key.name().to_string(),
            MetricComparison { baseline_stat: bm, candidate_stat: cm, delta_percent, verdict, p_value, not_significant },
        );
    }
    let monitored = |v: Verdict| {
        policy.metrics.iter().any(|k| per_metric.get(k.name()).is_some_and(|m: &MetricComparison| m.verdict == v))
    };
    let overall_verdict = if monitored(Verdict::Regression) {
        Verdict::Regression
    } else if monitored(Verdict::Improvement) {
        Verdict::Improvement
    } else {
        Verdict::Unchanged
    };
    Ok(ComparisonReport {
        baseline_commit,
        candidate_commit,
        plan_hash,
        baseline_runs: baseline.len(),
        candidate_runs: candidate.len(),
        threshold_percent: policy.threshold_percent,
        alpha: policy.alpha,
        low_confidence: !tested,
        per_metric,
        overall_verdict,
    })
}

/// One row of a version table: the median of each field over the runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionRow {
    pub label: String,
    pub runs: usize,
    pub cpu_energy_j: f64,
    pub dram_energy_j: f64,
    pub response_ms_median: f64,
    pub response_ms_max: f64,
    pub throughput_mean_rps: f64,
    pub throughput_median_rps: f64,
    pub throughput_max_rps: f64,
    pub cpu_percent_median: f64,
    pub cpu_percent_max: f64,
    pub energy_per_request_j: Option<f64>,
    pub requests_total: f64,
    pub failures_total: f64,
}

impl VersionRow {
    pub fn from_runs(label: impl Into<String>, runs: &[RunSummary]) -> Option<Self> {
        if runs.is_empty() {
            return None;
        }
        let med = |f: fn(&RunSummary) -> f64| stats::median(&runs.iter().map(f).collect::<Vec<_>>()).unwrap_or(0.0);
        let epr: Vec<f64> = runs.iter().filter_map(|r| r.energy_per_request_j).collect();
        Some(VersionRow {
            label: label.into(),
            runs: runs.len(),
            cpu_energy_j: med(|r| r.cpu_energy_j),
            dram_energy_j: med(|r| r.dram_energy_j),
            response_ms_median: med(|r| r.response_ms_median),
            response_ms_max: med(|r| r.response_ms_max),
            throughput_mean_rps: med(|r| r.throughput_mean_rps),
            throughput_median_rps: med(|r| r.throughput_median_rps),
            throughput_max_rps: med(|r| r.throughput_max_rps),
            cpu_percent_median: med(|r| r.cpu_percent_median),
            cpu_percent_max: med(|r| r.cpu_percent_max),
            energy_per_request_j: stats::median(&epr),
            requests_total: med(|r| r.requests_total as f64),
            failures_total: med(|r| r.failures_total as f64),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Markdown,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Format::Json),
            "markdown" | "md" => Ok(Format::Markdown),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

/// Statistic shown as "M" in the throughput column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThroughputStat {
    #[default]
    Mean,
    Median,
}

/// Fixed-point with thousands separators: `1381.905` → `1,381.91`.
pub fn format_number(value: f64, decimals: usize) -> String {
    let s = format!("{:.*}", decimals, value.abs());
    let (int, frac) = s.split_once('.').map_or((s.as_str(), None), |(i, f)| (i, Some(f)));
    let mut grouped = String::new();
    for (i, ch) in int.chars().enumerate() {
        if i > 0 && (int.len() - i) % 3 == 0 {
            grouped.push(',');
        }
        grouped.push(ch);
    }
    let sign = if value < 0.0 && s.chars().any(|c| c.is_ascii_digit() && c != '0') { "-" } else { "" };
    match frac {
        Some(f) => format!("{sign}{grouped}.{f}"),
        None => format!("{sign}{grouped}"),
    }
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    let r = (v * f).round() / f;
    if r == 0.0 { 0.0 } else { r }
}

/// The six columns of one row of the version table.
pub fn table_cells(row: &VersionRow, thr: ThroughputStat) -> [String; 6] {
    let thr_m = match thr {
        ThroughputStat::Mean => row.throughput_mean_rps,
        ThroughputStat::Median => row.throughput_median_rps,
    };
    [
        row.label.clone(),
        format_number(row.cpu_energy_j, 2),
        format_number(row.dram_energy_j, 2),
        format!("{} ({})", format_number(row.response_ms_median, 1), format_number(row.response_ms_max, 1)),
        format!("{} ({})", format_number(thr_m, 1), format_number(row.throughput_max_rps, 1)),
        format!("{} ({})", format_number(row.cpu_percent_median, 1), format_number(row.cpu_percent_max, 1)),
    ]
}

#[derive(Serialize)]
struct JsonRow<'a> {
    label: &'a str,
    runs: usize,
    cpu_energy_j: f64,
    dram_energy_j: f64,
    response_ms_median: f64,
    response_ms_max: f64,
    throughput_mean_rps: f64,
    throughput_median_rps: f64,
    throughput_max_rps: f64,
    cpu_percent_median: f64,
    cpu_percent_max: f64,
    energy_per_request_j: Option<f64>,
    requests_total: f64,
    failures_total: f64,
}

/// Renders version rows; identical input gives identical bytes.
pub fn render_summary(rows: &[VersionRow], format: Format, thr: ThroughputStat) -> Vec<u8> {
    match format {
        Format::Json => {
            let versions: Vec<JsonRow> = rows
                .iter()
                .map(|r| JsonRow {
                    label: &r.label,
                    runs: r.runs,
                    cpu_energy_j: round_to(r.cpu_energy_j, 2),
                    dram_energy_j: round_to(r.dram_energy_j, 2),
                    response_ms_median: round_to(r.response_ms_median, 2),
                    response_ms_max: round_to(r.response_ms_max, 2),
                    throughput_mean_rps: round_to(r.throughput_mean_rps, 2),
                    throughput_median_rps: round_to(r.throughput_median_rps, 2),
                    throughput_max_rps: round_to(r.throughput_max_rps, 2),
                    cpu_percent_median: round_to(r.cpu_percent_median, 2),
                    cpu_percent_max: round_to(r.cpu_percent_max, 2),
                    energy_per_request_j: r.energy_per_request_j.map(|v| round_to(v, 6)),
                    requests_total: r.requests_total,
                    failures_total: r.failures_total,
                })
                .collect();
            let doc = serde_json::json!({
                "schema": REPORT_SCHEMA,
                "kind": "summary",
                "throughput_statistic": thr,
                "empty": versions.is_empty(),
                "versions": versions,
            });
            let mut out = serde_json::to_vec_pretty(&doc).expect("serializable");
            out.push(b'\n');
            out
        }
        Format::Markdown => {
            let mut s = String::from("# Energy, latency and throughput per version\n\n");
            if rows.is_empty() {
                s.push_str("_No runs selected._\n");
                return s.into_bytes();
            }
            s.push_str("| Run | CPU (J) | DRAM (J) | Resp. M(Max) ms | Thr. M(Max) | CPU % M(Max) |\n");
            s.push_str("|---|---:|---:|---:|---:|---:|\n");
            for r in rows {
                let c = table_cells(r, thr);
                let _ = writeln!(s, "| {} |", c.join(" | "));
            }
            let _ = writeln!(s, "\nM is the median, except throughput ({}).\n", match thr {
                ThroughputStat::Mean => "mean of 1 s buckets",
                ThroughputStat::Median => "median of 1 s buckets",
            });
            s.push_str("| Run | Runs | Energy/request (J) | Requests | Failures |\n|---|---:|---:|---:|---:|\n");
            for r in rows {
                let epr = r.energy_per_request_j.map_or("n/a".to_string(), |v| format_number(v, 4));
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} |",
                    r.label,
                    r.runs,
                    epr,
                    format_number(r.requests_total, 0),
                    format_number(r.failures_total, 0)
                );
            }
            s.into_bytes()
        }
    }
}

pub fn render_comparison(report: &ComparisonReport, format: Format) -> Vec<u8> {
    match format {
        Format::Json => {
            let metrics: BTreeMap<&str, serde_json::Value> = report
                .per_metric
                .iter()
                .map(|(k, m)| {
                    (
                        k.as_str(),
                        serde_json::json!({
                            "baseline_stat": round_to(m.baseline_stat, 2),
                            "candidate_stat": round_to(m.candidate_stat, 2),
                            "delta_percent": m.delta_percent.map(|d| round_to(d, 2)),
                            "verdict": m.verdict,
                            "p_value": m.p_value.map(|p| round_to(p, 6)),
                            "not_significant": m.not_significant,
                        }),
                    )
                })
                .collect();
            let doc = serde_json::json!({
                "schema": REPORT_SCHEMA,
                "kind": "comparison",
                "baseline_commit": report.baseline_commit,
                "candidate_commit": report.candidate_commit,
                "plan_hash": report.plan_hash,
                "baseline_runs": report.baseline_runs,
                "candidate_runs": report.candidate_runs,
                "threshold_percent": report.threshold_percent,
                "alpha": report.alpha,
                "low_confidence": report.low_confidence,
                "per_metric": metrics,
                "overall_verdict": report.overall_verdict,
            });
            let mut out = serde_json::to_vec_pretty(&doc).expect("serializable");
            out.push(b'\n');
            out
        }
        Format::Markdown => {
            let mut s = format!(
                "# {} vs {}\n\nOverall: **{}**. Plan `{}`, {} baseline and {} candidate runs, threshold {}%, alpha {}.\n",
                report.baseline_commit,
                report.candidate_commit,
                report.overall_verdict.as_str(),
                report.plan_hash,
                report.baseline_runs,
                report.candidate_runs,
                report.threshold_percent,
                report.alpha,
            );
            if report.low_confidence {
                s.push_str("\nToo few repetitions for a rank-sum test; the threshold alone decided.\n");
            }
            s.push_str("\n| Metric | Baseline | Candidate | Delta % | p | Verdict |\n|---|---:|---:|---:|---:|---|\n");
            for (k, m) in &report.per_metric {
                let delta = m.delta_percent.map_or("n/a".into(), |d| format!("{}{}", if d > 0.0 { "+" } else { "" }, format_number(d, 1)));
                let p = m.p_value.map_or("-".into(), |p| format!("{p:.4}"));
                let _ = writeln!(
                    s,
                    "| {k} | {} | {} | {delta} | {p} | {}{} |",
                    format_number(m.baseline_stat, 2),
                    format_number(m.candidate_stat, 2),
                    m.verdict.as_str(),
                    if m.not_significant { " (not significant)" } else { "" }
                );
            }
            s.into_bytes()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    ResponseTime,
    CpuUtilization,
    Power,
}

impl std::str::FromStr for PlotKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "response_time" => Ok(PlotKind::ResponseTime),
            "cpu_utilization" => Ok(PlotKind::CpuUtilization),
            "power" => Ok(PlotKind::Power),
            other => Err(format!("unknown plot kind `{other}` (response_time, cpu_utilization, power)")),
        }
    }
}

/// Measurement-phase observations of one run for a distribution plot:
/// successful latencies (ms), host CPU samples (%), or CPU package power
/// points (W).
pub fn distribution(data: &RunData, kind: PlotKind) -> Vec<f64> {
    let Some(m) = data.phase_marks().and_then(|ms| ms.into_iter().find(|m| m.phase == Phase::Measurement)) else {
        return Vec::new();
    };
    match kind {
        PlotKind::ResponseTime => data
            .requests
            .iter()
            .flat_map(|log| log.measurement().filter(|r| r.outcome.is_success() && r.start_ms < log.duration_ms))
            .map(|r| r.latency_ms)
            .collect(),
        PlotKind::CpuUtilization => data
            .host_cpu
            .iter()
            .flat_map(|s| s.samples.iter())
            .filter(|s| in_window(s.timestamp_ms, &m))
            .map(|s| s.value)
            .collect(),
        PlotKind::Power => data
            .power
            .get(&DomainKind::CpuPackage)
            .and_then(|(d, r)| power_from_counters(&window_readings(r, &m), d).ok())
            .map(|t| t.points.values())
            .unwrap_or_default(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub version: String,
    pub values: Vec<f64>,
    pub summary: Option<FiveNumber<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub schema: u32,
    pub kind: PlotKind,
    pub series: Vec<PlotSeries>,
}

/// Per-version value arrays with five-number summaries for boxplots.
pub fn export_plot_data(versions: &[(String, Vec<f64>)], kind: PlotKind) -> PlotData {
    PlotData {
        schema: REPORT_SCHEMA,
        kind,
        series: versions
            .iter()
            .map(|(v, values)| PlotSeries { version: v.clone(), values: values.clone(), summary: FiveNumber::of(values) })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn summary(commit: &str, cpu: f64) -> RunSummary {
        RunSummary {
            run_id: format!("{commit}-{cpu}"),
            commit_id: commit.into(),
            plan_hash: "h".into(),
            cpu_energy_j: cpu,
            dram_energy_j: 30.0,
            response_ms_median: 26.5,
            response_ms_max: 39.4,
            throughput_mean_rps: 12.6,
            throughput_median_rps: 12.6,
            throughput_max_rps: 13.8,
            cpu_percent_median: 33.3,
            cpu_percent_max: 45.6,
            energy_per_request_j: None,
            successful_requests: 0,
            failures_total: 0,
            requests_total: 0,
            container_energy_j: BTreeMap::new(),
            group_energy_j: 0.0,
            group_energy_per_request_j: None,
        }
    }

    #[test]
    fn thousands_separator() {
        assert_eq!(format_number(1381.9149, 2), "1,381.91");
        assert_eq!(format_number(886.75, 2), "886.75");
        assert_eq!(format_number(1234567.0, 0), "1,234,567");
        assert_eq!(format_number(-6.6049, 1), "-6.6");
        assert_eq!(format_number(-0.001, 1), "0.0");
    }

    #[test]
    fn identical_sets_are_unchanged() {
        let side: Vec<_> = [100.0, 101.0, 99.0].iter().map(|&e| summary("a", e)).collect();
        let mut other = side.clone();
        other.iter_mut().for_each(|s| s.commit_id = "b".into());
        let r = compare(&side, &other, &ComparePolicy::default()).unwrap();
        assert_eq!(r.overall_verdict, Verdict::Unchanged);
        assert!(r.per_metric.values().all(|m| m.verdict == Verdict::Unchanged && m.delta_percent == Some(0.0)));
    }

    #[test]
    fn mismatched_plans_and_empty_sides() {
        let a = vec![summary("a", 1.0)];
        let mut b = vec![summary("b", 1.0)];
        b[0].plan_hash = "other".into();
        assert!(matches!(compare(&a, &b, &ComparePolicy::default()), Err(CompareError::IncomparableRuns(..))));
        assert!(matches!(compare(&a, &[], &ComparePolicy::default()), Err(CompareError::NoData(_))));
    }

    #[test]
    fn insignificant_shift_with_overlap_is_unchanged() {
        let b: Vec<_> = [100.0, 130.0, 90.0].iter().map(|&e| summary("a", e)).collect();
        let c: Vec<_> = [120.0, 95.0, 125.0].iter().map(|&e| summary("b", e)).collect();
        let r = compare(&b, &c, &ComparePolicy::default()).unwrap();
        let m = &r.per_metric["cpu_energy_j"];
        assert_eq!(m.verdict, Verdict::Unchanged);
        assert!(m.not_significant);
        assert!(!r.low_confidence);
    }

    #[test]
    fn empty_report_has_marker() {
        let md = String::from_utf8(render_summary(&[], Format::Markdown, ThroughputStat::Mean)).unwrap();
        assert!(md.contains("_No runs selected._"));
        let json: serde_json::Value = serde_json::from_slice(&render_summary(&[], Format::Json, ThroughputStat::Mean)).unwrap();
        assert_eq!(json["empty"], true);
        assert_eq!(json["schema"], 1);
    }
}
