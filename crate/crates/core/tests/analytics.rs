use std::path::PathBuf;

use joulegate::analytics::{
    aggregate_run, compare, distribution, export_plot_data, render_comparison, render_summary, ComparePolicy,
    Format, PlotKind, RunSummary, SummaryError, ThroughputStat, Verdict, VersionRow,
};
use joulegate::loadgen::{Outcome, RequestRecord};
use joulegate::plan::TestPlan;
use joulegate::store::{RunData, RunStatus, RunStore};
use joulegate::synth::SyntheticRun;
use proptest::prelude::*;

fn plan() -> TestPlan {
    let text = "[plan]\nid = p\nusers = 4\nduration_ms = 10000\nwarmup_ms = 1000\n[scenario]\npath = login.toml\nthink_time_ms = 80\n[monitoring]\ninterval_ms = 1000\n";
    TestPlan::parse(text, &PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../plans"), "p").unwrap()
}

fn round_trip(run: &SyntheticRun) -> RunData {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::open(dir.path()).unwrap();
    store.persist_run(&run.meta(), &run.files()).unwrap();
    store.load_run(&run.run_id).unwrap()
}

fn summarize(run: &SyntheticRun) -> RunSummary {
    aggregate_run(&round_trip(run)).unwrap()
}

/// Readings at ticks in [offset+warmup, offset+duration): energy is
/// power times the span between the first and last of them.
fn energy_oracle(run: &SyntheticRun, watts: f64) -> f64 {
    let lo = run.load_offset_ms + run.plan.warmup_ms;
    let hi = run.load_offset_ms + run.plan.duration_ms;
    let inside: Vec<u64> = run.ticks().into_iter().filter(|&t| t >= lo && t < hi).collect();
    watts * (inside.last().unwrap() - inside.first().unwrap()) as f64 / 1000.0
}

#[test]
fn energy_matches_window_oracle() {
    let run = SyntheticRun::new("r", "c", plan());
    let s = summarize(&run);
    assert!((s.cpu_energy_j - energy_oracle(&run, run.cpu_watts)).abs() < 1e-6);
    assert!((s.dram_energy_j - energy_oracle(&run, run.dram_watts)).abs() < 1e-6);
    // all host utilization is constant
    assert_eq!((s.cpu_percent_median, s.cpu_percent_max), (run.host_cpu_percent, run.host_cpu_percent));
    // the container causes half of the host's utilization
    assert!((s.group_energy_j - s.cpu_energy_j * run.container_share).abs() < 1e-9);
}

#[test]
fn energy_per_request_oracle() {
    // 1000 J CPU and 30 J DRAM over the 8 s window, 1260 successes
    let mut run = SyntheticRun::new("r", "c", plan());
    run.cpu_watts = 125.0;
    run.dram_watts = 3.75;
    run.requests = (0..1260u64)
        .map(|i| RequestRecord {
            endpoint: "login".into(),
            user_index: (i % 10) as usize,
            start_ms: 1000 + i * 7,
            latency_ms: 20.0,
            outcome: Outcome::Success,
        })
        .chain((0..5).map(|i| RequestRecord {
            endpoint: "login".into(),
            user_index: 0,
            start_ms: 2000 + i,
            latency_ms: 3.0,
            outcome: Outcome::Status(500),
        }))
        .collect();
    run.requests.sort_by_key(|r| r.start_ms);
    let s = summarize(&run);
    assert_eq!(s.cpu_energy_j, 1000.0);
    assert_eq!(s.dram_energy_j, 30.0);
    assert_eq!(s.successful_requests, 1260);
    assert_eq!((s.failures_total, s.requests_total), (5, 1265));
    let epr = s.energy_per_request_j.unwrap();
    assert!((epr - 1030.0 / 1260.0).abs() < 1e-12);
    assert!((epr - 0.8175).abs() < 5e-5);
}

#[test]
fn no_success_means_no_energy_per_request() {
    let mut run = SyntheticRun::new("r", "c", plan());
    run.requests.iter_mut().for_each(|r| r.outcome = Outcome::Transport);
    let s = summarize(&run);
    assert_eq!(s.energy_per_request_j, None);
    assert_eq!(s.successful_requests, 0);
}

#[test]
fn invalid_runs_do_not_summarize() {
    let run = SyntheticRun::new("r", "c", plan());
    let mut data = round_trip(&run);
    data.meta.record.status = RunStatus::Invalid { reason: "degraded".into() };
    assert!(matches!(aggregate_run(&data), Err(SummaryError::InvalidRun(..))));
    let mut data = round_trip(&run);
    data.meta.load_offset_ms = None;
    assert!(matches!(aggregate_run(&data), Err(SummaryError::NoPhases(_))));
}

#[test]
fn empty_power_trace_is_rejected() {
    let run = SyntheticRun::new("r", "c", plan());
    let mut data = round_trip(&run);
    data.power.get_mut(&joulegate::power::DomainKind::Dram).unwrap().1.clear();
    assert!(matches!(aggregate_run(&data), Err(SummaryError::EmptyPowerTrace { .. })));
}

fn version_row(label: &str, cpu: f64, dram: f64, resp: (f64, f64), thr: (f64, f64), cpu_pct: (f64, f64)) -> VersionRow {
    VersionRow {
        label: label.into(),
        runs: 1,
        cpu_energy_j: cpu,
        dram_energy_j: dram,
        response_ms_median: resp.0,
        response_ms_max: resp.1,
        throughput_mean_rps: thr.0,
        throughput_median_rps: thr.0,
        throughput_max_rps: thr.1,
        cpu_percent_median: cpu_pct.0,
        cpu_percent_max: cpu_pct.1,
        energy_per_request_j: None,
        requests_total: 0.0,
        failures_total: 0.0,
    }
}

#[test]
fn v1_row_renders_expected_cells() {
    let row = version_row("v1", 886.75, 29.71, (26.5, 39.4), (12.6, 13.8), (33.3, 45.6));
    let cells = joulegate::analytics::table_cells(&row, ThroughputStat::Mean);
    assert_eq!(cells[1..], ["886.75", "29.71", "26.5 (39.4)", "12.6 (13.8)", "33.3 (45.6)"]);
}

#[test]
fn markdown_matches_golden_file() {
    let rows = [
        version_row("v1", 886.75, 29.71, (26.5, 39.4), (12.6, 13.8), (33.3, 45.6)),
        version_row("v2", 882.70, 30.01, (23.1, 30.9), (12.9, 14.1), (35.9, 46.9)),
        version_row("v3", 1381.91, 29.66, (109.7, 149.5), (11.1, 12.1), (63.1, 83.9)),
        version_row("v4", 1290.71, 29.30, (92.0, 123.7), (11.3, 12.3), (58.6, 79.9)),
    ];
    let md = render_summary(&rows, Format::Markdown, ThroughputStat::Mean);
    let golden = include_str!("golden/four_versions.md");
    assert_eq!(String::from_utf8(md).unwrap(), golden);
}

#[test]
fn version_table_and_determinism() {
    let mut rows = Vec::new();
    for (v, watts, latency) in [("v1", 40.0, 20.0), ("v2", 40.5, 21.0), ("v3", 62.0, 45.0), ("v4", 58.0, 40.0)] {
        let mut run = SyntheticRun::new(format!("r-{v}"), v, plan());
        run.cpu_watts = watts;
        run.requests.iter_mut().for_each(|r| r.latency_ms = latency);
        rows.push(VersionRow::from_runs(v, &[summarize(&run)]).unwrap());
    }
    let md = render_summary(&rows, Format::Markdown, ThroughputStat::Mean);
    assert_eq!(md, render_summary(&rows, Format::Markdown, ThroughputStat::Mean));
    let text = String::from_utf8(md).unwrap();
    let table: Vec<&str> = text.lines().skip_while(|l| !l.starts_with("| Run | CPU")).take_while(|l| l.starts_with('|')).collect();
    assert_eq!(table.len(), 6, "{text}");
    assert!(table[0].contains("Resp. M(Max) ms") && table[0].contains("Thr. M(Max)"));
    assert!(table[4].starts_with("| v3 | 496.00 |"), "{}", table[4]);
    assert!(table[4].contains("45.0 (45.0)"));

    let json = render_summary(&rows, Format::Json, ThroughputStat::Mean);
    assert_eq!(json, render_summary(&rows, Format::Json, ThroughputStat::Mean));
    let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
    assert_eq!(v["versions"].as_array().unwrap().len(), 4);
    assert_eq!(v["versions"][2]["cpu_energy_j"], 496.0);
}

#[test]
fn distributions_cover_measurement_only() {
    let run = SyntheticRun::new("r", "c", plan());
    let data = round_trip(&run);
    let latencies = distribution(&data, PlotKind::ResponseTime);
    let measured = run.requests.iter().filter(|r| r.start_ms >= 1000 && r.start_ms < 10000).count();
    assert_eq!(latencies.len(), measured);
    let power = distribution(&data, PlotKind::Power);
    assert!(power.iter().all(|&p| (p - run.cpu_watts).abs() < 1e-9));
    let cpu = distribution(&data, PlotKind::CpuUtilization);
    assert_eq!(cpu.len(), 9);
    let plot = export_plot_data(&[("c".into(), latencies)], PlotKind::ResponseTime);
    assert!(plot.series[0].summary.is_some());
}

fn single(commit: &str, cpu: f64) -> RunSummary {
    let mut s = summarize(&SyntheticRun::new("r", commit, plan()));
    s.cpu_energy_j = cpu;
    s
}

#[test]
fn comparison_reports_render_deterministically() {
    let r = compare(&[single("a", 882.70)], &[single("b", 1381.91)], &ComparePolicy::default()).unwrap();
    assert!(r.low_confidence);
    let md = String::from_utf8(render_comparison(&r, Format::Markdown)).unwrap();
    assert!(md.contains("| cpu_energy_j | 882.70 | 1,381.91 | +56.6 |"), "{md}");
    assert_eq!(render_comparison(&r, Format::Json), render_comparison(&r, Format::Json));
}

fn sorted_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// A measurement-free run modified by extra data strictly inside the
/// warm-up window.
#[derive(Debug, Clone)]
struct WarmupNoise {
    readings: Vec<(u64, u64)>,
    host: Vec<(u64, f64)>,
    container: Vec<(u64, f64)>,
    requests: Vec<(u64, f64, u8)>,
}

fn warmup_noise() -> impl Strategy<Value = WarmupNoise> {
    // monitoring warm-up window is [500, 1500); ticks at 0, 1000, ...
    let t = (501u64..1500).prop_filter("not a tick", |t| t % 1000 != 0);
    (
        prop::collection::vec((t.clone(), any::<u32>().prop_map(u64::from)), 0..4),
        prop::collection::vec((t.clone(), 0.0f64..100.0), 0..4),
        prop::collection::vec((t, 0.0f64..100.0), 0..4),
        prop::collection::vec((0u64..1000, 0.0f64..5000.0, 0u8..3), 0..20),
    )
        .prop_map(|(readings, host, container, requests)| WarmupNoise { readings, host, container, requests })
}

fn apply_noise(base: &RunData, noise: &WarmupNoise) -> RunData {
    let mut data = base.clone();
    let (domain, readings) = data.power.get_mut(&joulegate::power::DomainKind::CpuPackage).unwrap();
    let _ = domain;
    for &(t, raw) in &noise.readings {
        if !readings.iter().any(|r| r.timestamp_ms == t) {
            readings.push(joulegate::power::CounterReading { timestamp_ms: t, raw_uj: raw });
        }
    }
    readings.sort_by_key(|r| r.timestamp_ms);
    let host = data.host_cpu.as_mut().unwrap();
    for &(t, v) in &noise.host {
        if !host.samples.iter().any(|s| s.timestamp_ms == t) {
            host.samples.push(joulegate::metric::Sample::new(t, v));
        }
    }
    host.samples.sort_by_key(|s| s.timestamp_ms);
    let cpu = &mut data.containers[0].cpu;
    for &(t, v) in &noise.container {
        if !cpu.samples.iter().any(|s| s.timestamp_ms == t) {
            cpu.samples.push(joulegate::metric::Sample::new(t, v));
        }
    }
    cpu.samples.sort_by_key(|s| s.timestamp_ms);
    let log = data.requests.as_mut().unwrap();
    for &(start, latency, o) in &noise.requests {
        let outcome = [Outcome::Success, Outcome::Status(503), Outcome::Transport][o as usize].clone();
        // CSV precision
        let latency_ms = format!("{latency:.6}").parse().unwrap();
        log.records.push(RequestRecord { endpoint: "login".into(), user_index: 0, start_ms: start, latency_ms, outcome });
    }
    log.records.sort_by_key(|r| r.start_ms);
    data
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warmup_data_changes_nothing(noise in warmup_noise()) {
        let base = round_trip(&SyntheticRun::new("r", "c", plan()));
        let before = aggregate_run(&base).unwrap();
        prop_assert_eq!(aggregate_run(&apply_noise(&base, &noise)).unwrap(), before);
    }

    #[test]
    fn energy_scales_linearly(watts in 1.0f64..200.0, dram in 0.1f64..20.0, k in 0.5f64..3.0) {
        let mut run = SyntheticRun::new("r", "c", plan());
        run.cpu_watts = watts;
        run.dram_watts = dram;
        let a = summarize(&run);
        run.cpu_watts = watts * k;
        run.dram_watts = dram * k;
        let b = summarize(&run);
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-6 * x.abs().max(1.0);
        prop_assert!(close(b.cpu_energy_j, k * a.cpu_energy_j));
        prop_assert!(close(b.dram_energy_j, k * a.dram_energy_j));
        prop_assert!(close(b.energy_per_request_j.unwrap(), k * a.energy_per_request_j.unwrap()));
        prop_assert_eq!(
            (b.response_ms_median, b.response_ms_max, b.throughput_mean_rps, b.throughput_max_rps),
            (a.response_ms_median, a.response_ms_max, a.throughput_mean_rps, a.throughput_max_rps)
        );
    }

    #[test]
    fn swapping_sides_swaps_verdicts(
        base in prop::collection::vec(100.0f64..2000.0, 1..6),
        cand in prop::collection::vec(100.0f64..2000.0, 1..6),
    ) {
        let proto = summarize(&SyntheticRun::new("r", "c", plan()));
        let side = |commit: &str, v: &[f64]| -> Vec<RunSummary> {
            v.iter().map(|&e| RunSummary { commit_id: commit.into(), cpu_energy_j: e, ..proto.clone() }).collect()
        };
        let policy = ComparePolicy::default();
        let fwd = compare(&side("a", &base), &side("b", &cand), &policy).unwrap();
        let back = compare(&side("b", &cand), &side("a", &base), &policy).unwrap();
        let flip = |v: Verdict| match v {
            Verdict::Regression => Verdict::Improvement,
            Verdict::Improvement => Verdict::Regression,
            Verdict::Unchanged => Verdict::Unchanged,
        };
        for (k, m) in &fwd.per_metric {
            let b = &back.per_metric[k];
            prop_assert_eq!(b.verdict, flip(m.verdict));
            let (d, e) = (m.delta_percent.unwrap(), b.delta_percent.unwrap());
            prop_assert!(d == 0.0 && e == 0.0 || d.signum() == -e.signum());
        }
        prop_assert_eq!(back.overall_verdict, flip(fwd.overall_verdict));
    }

    #[test]
    fn five_numbers_match_sorting(values in prop::collection::vec(-1e6f64..1e6, 1..200)) {
        let plot = export_plot_data(&[("v".into(), values.clone())], PlotKind::Power);
        let f = plot.series[0].summary.clone().unwrap();
        let mut sorted = values;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert_eq!(f.min, sorted[0]);
        prop_assert_eq!(f.q1, sorted_quantile(&sorted, 0.25));
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
        prop_assert_eq!(f.median, median);
        prop_assert_eq!(f.q3, sorted_quantile(&sorted, 0.75));
        prop_assert_eq!(f.max, *sorted.last().unwrap());
    }
}
