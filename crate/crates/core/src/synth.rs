//! Runs built from parameters instead of a testbed, in the exact file
//! layout the agent and load generator produce.

use crate::agent::{container_file, power_file, SessionInfo, HOST_CPU_FILE};
use crate::artifact::FileKind;
use crate::container::HOST_ID;
use crate::deploy::SutRef;
use crate::loadgen::{Outcome, RequestLog, RequestRecord};
use crate::metric::{self, to_csv_bytes, Sample, SampleSeries};
use crate::plan::TestPlan;
use crate::power::{CounterReading, DomainKind, EnergyDomain};
use crate::store::{Environment, RunMeta, RunRecord, RunStatus};

pub const SYNTHETIC_CONTAINER: &str = "0000synthetic";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRun {
    pub run_id: String,
    pub commit_id: String,
    pub plan: TestPlan,
    /// Load start on the monitoring timeline.
    pub load_offset_ms: u64,
    pub cpu_watts: f64,
    pub dram_watts: f64,
    pub host_cpu_percent: f64,
    /// Fraction of host utilization caused by the SUT container.
    pub container_share: f64,
    pub max_range_uj: u64,
    pub start_uj: [u64; 2],
    pub requests: Vec<RequestRecord>,
}

/// A closed-loop request schedule: each user repeats latency + think.
pub fn closed_loop_requests(users: usize, duration_ms: u64, latency_ms: f64, think_ms: u64) -> Vec<RequestRecord> {
    let mut out = Vec::new();
    for u in 0..users {
        let mut t = (u as u64 * 7) % (think_ms.max(1));
        let mut k = 0u64;
        while t < duration_ms {
            let latency = latency_ms + ((u as u64 + k) % 5) as f64 * 0.25;
            out.push(RequestRecord {
                endpoint: "login".into(),
                user_index: u,
                start_ms: t,
                latency_ms: latency,
                outcome: Outcome::Success,
            });
            t += latency.ceil() as u64 + think_ms;
            k += 1;
        }
    }
    out.sort_by_key(|r| (r.start_ms, r.user_index));
    out
}

impl SyntheticRun {
    pub fn new(run_id: impl Into<String>, commit_id: impl Into<String>, plan: TestPlan) -> Self {
        let requests = closed_loop_requests(plan.users, plan.duration_ms, 20.0, plan.think_time_ms.max(1));
        SyntheticRun {
            run_id: run_id.into(),
            commit_id: commit_id.into(),
            plan,
            load_offset_ms: 500,
            cpu_watts: 40.0,
            dram_watts: 3.0,
            host_cpu_percent: 40.0,
            container_share: 0.5,
            max_range_uj: 262_143_328_850,
            start_uj: [1_000_000, 2_000_000],
            requests,
        }
    }

    /// Tick timestamps from monitoring start until past the end of load.
    pub fn ticks(&self) -> Vec<u64> {
        let step = self.plan.sampling_interval_ms;
        let end = self.load_offset_ms + self.plan.duration_ms + step;
        (0..).map(|i| i * step).take_while(|&t| t <= end).collect()
    }

    pub fn counter_readings(&self, kind: DomainKind) -> Vec<CounterReading> {
        let (watts, start) = match kind {
            DomainKind::CpuPackage => (self.cpu_watts, self.start_uj[0]),
            DomainKind::Dram => (self.dram_watts, self.start_uj[1]),
        };
        self.ticks()
            .into_iter()
            .map(|t| {
                let uj = (watts * t as f64 * 1e3).round() as u64;
                CounterReading { timestamp_ms: t, raw_uj: (start + uj) % self.max_range_uj }
            })
            .collect()
    }

    pub fn session(&self) -> SessionInfo {
        SessionInfo {
            run_id: self.run_id.clone(),
            token: "synthetic".into(),
            anchor_wall_ms: 1_700_000_000_000,
            backend: "synthetic".into(),
            num_cpus: 4,
            domains: self
                .plan
                .monitored_domains
                .iter()
                .map(|&kind| EnergyDomain { kind, counter_path: "synthetic".into(), max_range_uj: self.max_range_uj })
                .collect(),
            warnings: Vec::new(),
            degraded: false,
            degraded_reasons: Vec::new(),
            stopped_at_ms: self.ticks().last().copied(),
        }
    }

    pub fn meta(&self) -> RunMeta {
        RunMeta {
            record: RunRecord {
                run_id: self.run_id.clone(),
                commit_id: self.commit_id.clone(),
                plan_id: self.plan.plan_id.clone(),
                plan_hash: self.plan.plan_hash(),
                repetition_index: 0,
                status: RunStatus::Valid,
                data_paths: Vec::new(),
                environment: Environment {
                    hostname: "testbed".into(),
                    os: "linux".into(),
                    arch: "x86_64".into(),
                    kernel: "6.1.0".into(),
                    num_cpus: 4,
                },
                wall_clock_anchor_ms: 1_700_000_000_000,
                pipeline_id: None,
            },
            plan: self.plan.clone(),
            sut: SutRef::new(self.commit_id.clone(), vec!["mock-sut:v1".into()]).expect("valid synthetic SUT"),
            session: Some(self.session()),
            load_offset_ms: Some(self.load_offset_ms),
            notes: Vec::new(),
        }
    }

    /// Host and container utilization series with memory.
    pub fn utilization(&self) -> (SampleSeries, SampleSeries, SampleSeries) {
        let ticks = self.ticks();
        let host = SampleSeries::new(&metric::CPU_UTILIZATION, HOST_ID)
            .with_samples(ticks.iter().map(|&t| Sample::new(t, self.host_cpu_percent)).collect());
        let cpu = SampleSeries::new(&metric::CPU_UTILIZATION, SYNTHETIC_CONTAINER).with_samples(
            ticks.iter().map(|&t| Sample::new(t, self.host_cpu_percent * self.container_share)).collect(),
        );
        let memory = SampleSeries::new(&metric::MEMORY_USAGE, SYNTHETIC_CONTAINER)
            .with_samples(ticks.iter().map(|&t| Sample::new(t, 64.0 * 1024.0 * 1024.0)).collect());
        (host, cpu, memory)
    }

    pub fn files(&self) -> Vec<(String, FileKind, Vec<u8>)> {
        let mut files = Vec::new();
        for &kind in &self.plan.monitored_domains {
            let series = SampleSeries::new(kind.counter_metric(), kind.as_str()).with_samples(
                self.counter_readings(kind).iter().map(|r| Sample::new(r.timestamp_ms, r.raw_uj as f64)).collect(),
            );
            files.push((power_file(kind.as_str()), FileKind::Power, to_csv_bytes([&series])));
        }
        let (host, cpu, memory) = self.utilization();
        files.push((container_file(SYNTHETIC_CONTAINER), FileKind::Container, to_csv_bytes([&memory, &cpu])));
        files.push((HOST_CPU_FILE.into(), FileKind::Container, to_csv_bytes([&host])));
        let log = RequestLog::new(self.requests.clone(), self.plan.warmup_ms, self.plan.duration_ms, 0);
        files.push((crate::store::REQUESTS_FILE.into(), FileKind::Requests, log.to_csv_bytes()));
        files.sort_by(|a, b| a.0.cmp(&b.0));
        files
    }
}
