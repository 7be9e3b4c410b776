//! Closed-loop HTTP load generation with per-request latency and failure
//! recording.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::wall_clock_ms;
use crate::metric::{self, standard_phases, Phase, PhaseMark, Sample, SampleSeries};

const REQUEST_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("target {url} unreachable: {msg}")]
    TargetDown { url: String, msg: String },
    #[error("invalid load parameters: {0}")]
    Params(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("request log line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operation {
    pub name: String,
    #[serde(default = "default_method")]
    pub method: String,
    pub path: String,
    /// Request body; `{user}`, `{pass}` and `{user_index}` are substituted.
    #[serde(default)]
    pub body: Option<String>,
    #[serde(default = "default_status")]
    pub expected_status: u16,
}

fn default_method() -> String {
    "GET".into()
}

fn default_status() -> u16 {
    200
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    pub user: String,
    pub pass: String,
}

fn default_probe() -> String {
    "/health".into()
}

/// Declarative workload: an operation list each virtual user cycles through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Delay after every operation.
    #[serde(default)]
    pub think_time_ms: u64,
    #[serde(default = "default_probe")]
    pub probe_path: String,
    #[serde(default, rename = "credentials")]
    pub credentials_pool: Vec<Credential>,
    #[serde(rename = "operation")]
    pub operations: Vec<Operation>,
}

impl Scenario {
    pub fn parse_toml(text: &str) -> Result<Self, LoadError> {
        let s: Scenario = toml::from_str(text).map_err(|e| LoadError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, LoadError> {
        let text = std::fs::read_to_string(path).map_err(|e| LoadError::Scenario(format!("{}: {e}", path.display())))?;
        Self::parse_toml(&text)
    }

    pub fn validate(&self) -> Result<(), LoadError> {
        if self.operations.is_empty() {
            return Err(LoadError::Scenario("at least one operation is required".into()));
        }
        for op in &self.operations {
            if op.name.is_empty() || op.name.contains(',') {
                return Err(LoadError::Scenario(format!("bad operation name `{}`", op.name)));
            }
            if !matches!(op.method.as_str(), "GET" | "POST" | "PUT" | "DELETE") {
                return Err(LoadError::Scenario(format!("unsupported method `{}`", op.method)));
            }
            if !op.path.starts_with('/') {
                return Err(LoadError::Scenario(format!("path `{}` must start with '/'", op.path)));
            }
        }
        Ok(())
    }

    fn render_body(&self, op: &Operation, user_index: usize, request_no: usize) -> Option<String> {
        let body = op.body.as_ref()?;
        let mut out = body.replace("{user_index}", &user_index.to_string());
        if !self.credentials_pool.is_empty() {
            let c = &self.credentials_pool[(user_index + request_no) % self.credentials_pool.len()];
            out = out.replace("{user}", &c.user).replace("{pass}", &c.pass);
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    /// Unexpected HTTP status.
    Status(u16),
    /// No HTTP response at all.
    Transport,
}

impl Outcome {
    pub fn is_success(&self) -> bool {
        matches!(self, Outcome::Success)
    }

    fn render(&self) -> String {
        match self {
            Outcome::Success => "success".into(),
            Outcome::Status(code) => format!("status_{code}"),
            Outcome::Transport => "transport".into(),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "success" => Some(Outcome::Success),
            "transport" => Some(Outcome::Transport),
            other => other.strip_prefix("status_")?.parse().ok().map(Outcome::Status),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub endpoint: String,
    pub user_index: usize,
    /// Milliseconds since load start.
    pub start_ms: u64,
    pub latency_ms: f64,
    pub outcome: Outcome,
}

/// All requests of one load run, sorted by start time, with phase marks in
/// load-relative time.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestLog {
    pub records: Vec<RequestRecord>,
    pub warmup_ms: u64,
    pub duration_ms: u64,
    pub phase_marks: Vec<PhaseMark>,
    /// Wall clock at load start, Unix milliseconds.
    pub start_wall_ms: u64,
}

impl RequestLog {
    pub fn new(records: Vec<RequestRecord>, warmup_ms: u64, duration_ms: u64, start_wall_ms: u64) -> Self {
        let mut records = records;
        records.sort_by(|a, b| (a.start_ms, a.user_index).cmp(&(b.start_ms, b.user_index)));
        RequestLog { records, warmup_ms, duration_ms, phase_marks: standard_phases(0, warmup_ms, duration_ms), start_wall_ms }
    }

    pub fn phase_of(&self, r: &RequestRecord) -> Phase {
        if r.start_ms < self.warmup_ms {
            Phase::Warmup
        } else {
            Phase::Measurement
        }
    }

    /// Completed after generation stopped; kept and counted by start time.
    pub fn is_overflow(&self, r: &RequestRecord) -> bool {
        r.start_ms as f64 + r.latency_ms > self.duration_ms as f64
    }

    pub fn measurement(&self) -> impl Iterator<Item = &RequestRecord> {
        self.records.iter().filter(|r| self.phase_of(r) == Phase::Measurement)
    }

    /// Writes `start_ms,endpoint,user,latency_ms,outcome` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<usize> {
        writeln!(out, "start_ms,endpoint,user,latency_ms,outcome")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{:.6},{}", r.start_ms, r.endpoint, r.user_index, r.latency_ms, r.outcome.render())?;
        }
        Ok(self.records.len())
    }

    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_csv<R: BufRead>(
        input: R,
        warmup_ms: u64,
        duration_ms: u64,
        start_wall_ms: u64,
    ) -> Result<Self, LoadError> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| LoadError::Csv { line: i + 1, msg: e.to_string() })?;
            if i == 0 {
                if line != "start_ms,endpoint,user,latency_ms,outcome" {
                    return Err(LoadError::Csv { line: 1, msg: format!("unexpected header `{line}`") });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let bad = || LoadError::Csv { line: i + 1, msg: format!("malformed row `{line}`") };
            let f: Vec<&str> = line.split(',').collect();
            let [start, endpoint, user, latency, outcome] = f[..] else { return Err(bad()) };
            records.push(RequestRecord {
                endpoint: endpoint.to_string(),
                user_index: user.parse().map_err(|_| bad())?,
                start_ms: start.parse().map_err(|_| bad())?,
                latency_ms: latency.parse().map_err(|_| bad())?,
                outcome: Outcome::parse(outcome).ok_or_else(bad)?,
            });
        }
        Ok(RequestLog::new(records, warmup_ms, duration_ms, start_wall_ms))
    }
}

/// Load shape of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadParams {
    pub users: usize,
    pub duration_ms: u64,
    pub warmup_ms: u64,
    pub think_time_ms: u64,
}

fn http_agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(REQUEST_TIMEOUT))
        .build()
        .into()
}

fn send(agent: &ureq::Agent, method: &str, url: &str, body: Option<String>) -> Result<u16, ureq::Error> {
    let mut resp = match (method, body) {
        ("GET", _) => agent.get(url).call()?,
        ("DELETE", _) => agent.delete(url).call()?,
        ("POST", Some(b)) => agent.post(url).header("Content-Type", "application/json").send(b)?,
        ("POST", None) => agent.post(url).send_empty()?,
        ("PUT", Some(b)) => agent.put(url).header("Content-Type", "application/json").send(b)?,
        (_, _) => agent.put(url).send_empty()?,
    };
    let status = resp.status().as_u16();
    // drain so the connection can be reused
    resp.body_mut().read_to_vec()?;
    Ok(status)
}

/// Sends one request to `base_url` + `probe_path`; any HTTP response counts
/// as reachable.
pub fn probe_target(base_url: &str, probe_path: &str) -> Result<(), LoadError> {
    let url = format!("{}{}", base_url.trim_end_matches('/'), probe_path);
    send(&http_agent(), "GET", &url, None)
        .map(|_| ())
        .map_err(|e| LoadError::TargetDown { url, msg: e.to_string() })
}

/// Runs `params.users` closed-loop virtual users against `base_url`. Each
/// user cycles through the operation list with one request outstanding,
/// sleeping the think time after every operation, and stops issuing at the
/// end of the duration. Requests still in flight then are drained and kept.
pub fn run_scenario(scenario: &Scenario, params: LoadParams, base_url: &str) -> Result<RequestLog, LoadError> {
    if params.users == 0 {
        return Err(LoadError::Params("users must be at least 1".into()));
    }
    if params.warmup_ms >= params.duration_ms {
        return Err(LoadError::Params(format!(
            "warm-up {} ms must be shorter than duration {} ms",
            params.warmup_ms, params.duration_ms
        )));
    }
    scenario.validate()?;
    probe_target(base_url, &scenario.probe_path)?;

    let base = base_url.trim_end_matches('/').to_string();
    let sink: Arc<Mutex<Vec<RequestRecord>>> = Arc::default();
    let start_wall_ms = wall_clock_ms();
    let start = Instant::now();
    let deadline = start + Duration::from_millis(params.duration_ms);
    let think = Duration::from_millis(params.think_time_ms);

    std::thread::scope(|scope| {
        for user in 0..params.users {
            let (sink, base) = (sink.clone(), &base);
            scope.spawn(move || {
                let agent = http_agent();
                let mut local = Vec::new();
                let mut request_no = 0usize;
                // spread users over one think interval
                let offset = think.mul_f64(user as f64 / params.users as f64);
                if start + offset < deadline {
                    std::thread::sleep((start + offset).saturating_duration_since(Instant::now()));
                }
                while Instant::now() < deadline {
                    let op = &scenario.operations[request_no % scenario.operations.len()];
                    let url = format!("{base}{}", op.path);
                    let body = scenario.render_body(op, user, request_no);
                    let sent = Instant::now();
                    let result = send(&agent, &op.method, &url, body);
                    let latency_ms = sent.elapsed().as_secs_f64() * 1e3;
                    let outcome = match result {
                        Ok(code) if code == op.expected_status => Outcome::Success,
                        Ok(code) => Outcome::Status(code),
                        Err(_) => Outcome::Transport,
                    };
                    local.push(RequestRecord {
                        endpoint: op.name.clone(),
                        user_index: user,
                        start_ms: sent.duration_since(start).as_millis() as u64,
                        latency_ms: latency_ms.max(f64::MIN_POSITIVE),
                        outcome,
                    });
                    request_no += 1;
                    let now = Instant::now();
                    if now + think >= deadline {
                        break;
                    }
                    std::thread::sleep(think);
                }
                sink.lock().unwrap().extend(local);
            });
        }
    });
    // the phase lasts the full duration even when users stopped early
    std::thread::sleep(deadline.saturating_duration_since(Instant::now()));

    let records = std::mem::take(&mut *sink.lock().unwrap());
    Ok(RequestLog::new(records, params.warmup_ms, params.duration_ms, start_wall_ms))
}

/// Successful requests per bucket of the measurement phase, in requests per
/// second, stamped at bucket start. Empty when the log has no requests.
pub fn throughput_series(log: &RequestLog, bucket_ms: u64) -> SampleSeries {
    let mut series = SampleSeries::new(&metric::THROUGHPUT, "all").with_phases(log.phase_marks.clone());
    if log.records.is_empty() || bucket_ms == 0 {
        return series;
    }
    let (start, end) = (log.warmup_ms, log.duration_ms);
    let n = (end - start).div_ceil(bucket_ms) as usize;
    let mut counts = vec![0u64; n];
    for r in log.measurement().filter(|r| r.outcome.is_success()) {
        if r.start_ms < end {
            counts[((r.start_ms - start) / bucket_ms) as usize] += 1;
        }
    }
    series.samples = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let b_start = start + i as u64 * bucket_ms;
            let width_s = ((b_start + bucket_ms).min(end) - b_start) as f64 / 1e3;
            Sample::new(b_start, c as f64 / width_s)
        })
        .collect();
    series
}
