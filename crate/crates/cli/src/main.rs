//! `joulegate`: run energy experiments, compare commits, render reports.
//!
//! Exit codes: 0 success or no regression, 1 regression, 2 execution
//! error, 3 incomparable inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use joulegate::agent::{Agent, AgentClient, AgentServer, HardwareBackend};
use joulegate::analytics::{
    aggregate_run, compare, distribution, export_plot_data, render_comparison, render_summary, ComparePolicy, Format,
    MetricKey, PlotKind, RunSummary, ThroughputStat, Verdict, VersionRow,
};
use joulegate::deploy::{Deployer, DockerDeployer, MockDeployer, SutRef};
use joulegate::orchestrator::{Orchestrator, OrchestratorError, COMMIT_ENV, PIPELINE_ENV};
use joulegate::plan::{TestPlan, DEFAULT_HEALTH_TIMEOUT_MS};
use joulegate::sim::SimulationEnv;
use joulegate::store::{RunManifest, RunStatus, RunStore};

const EXIT_REGRESSION: u8 = 1;
const EXIT_ERROR: u8 = 2;
const EXIT_INCOMPARABLE: u8 = 3;

#[derive(Parser)]
#[command(name = "joulegate", version, about = "Energy-aware performance regression testing for container APIs")]
struct Cli {
    /// Run store directory.
    #[arg(long, global = true, env = "JOULEGATE_STORE", default_value = "runs")]
    store: PathBuf,
    /// Use simulated power and container backends from this profile
    /// directory, with an in-process agent and mock deployer.
    #[arg(long, global = true, value_name = "PROFILE_DIR")]
    simulate: Option<PathBuf>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a test plan against one commit and persist its runs.
    Run(RunArgs),
    /// Compare two commits; exits 1 on regression.
    Compare(CompareArgs),
    /// Render a per-version table or plot data for one or more commits.
    Report(ReportArgs),
    /// List stored runs.
    List(ListArgs),
    /// Serve the monitoring agent in the foreground.
    Agent(AgentArgs),
    /// Write a simulation profile directory.
    SimInit(SimInitArgs),
    /// Archive stored runs as .tar.gz.
    Export(ExportArgs),
    /// Delete one stored run.
    Delete { run_id: String },
}

#[derive(Args)]
struct RunArgs {
    plan: PathBuf,
    #[arg(long, env = COMMIT_ENV)]
    commit: Option<String>,
    /// SUT image, overriding the plan's [deploy] images (repeatable).
    #[arg(long = "image")]
    images: Vec<String>,
    /// Agent address, overriding the plan's [deploy] agent.
    #[arg(long)]
    agent: Option<String>,
    #[arg(long)]
    repetitions: Option<u32>,
    #[arg(long)]
    cooldown_ms: Option<u64>,
    #[arg(long, env = PIPELINE_ENV)]
    pipeline_id: Option<String>,
}

#[derive(Args)]
struct Selection {
    #[arg(long)]
    plan_hash: Option<String>,
    #[arg(long, default_value = "markdown")]
    format: Format,
    /// Also write the output to this file.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    baseline: String,
    candidate: String,
    #[command(flatten)]
    sel: Selection,
    /// Relative change, in percent, beyond which a metric changes verdict.
    #[arg(long, default_value_t = joulegate::analytics::DEFAULT_THRESHOLD_PERCENT)]
    threshold: f64,
    #[arg(long, default_value_t = joulegate::analytics::DEFAULT_ALPHA)]
    alpha: f64,
    /// Metrics that decide the overall verdict (comma separated).
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    commits: Vec<String>,
    #[command(flatten)]
    sel: Selection,
    /// Statistic shown as M in the throughput column.
    #[arg(long, default_value = "mean", value_parser = ["mean", "median"])]
    throughput: String,
    /// Emit boxplot data of this kind instead of the table:
    /// response_time, cpu_utilization or power.
    #[arg(long)]
    plot: Option<PlotKind>,
}

#[derive(Args)]
struct ListArgs {
    #[arg(long)]
    commit: Option<String>,
    #[arg(long)]
    plan_hash: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AgentArgs {
    #[arg(long, default_value = "0.0.0.0:7070")]
    bind: String,
    #[arg(long, default_value = joulegate::power::DEFAULT_POWERCAP_ROOT)]
    powercap_root: PathBuf,
    #[arg(long, default_value = joulegate::container::DEFAULT_CGROUP_ROOT)]
    cgroup_root: PathBuf,
    #[arg(long, default_value = joulegate::container::DEFAULT_PROC_ROOT)]
    proc_root: PathBuf,
}

#[derive(Args)]
struct SimInitArgs {
    dir: PathBuf,
    /// Multiply every power figure by this factor.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

#[derive(Args)]
struct ExportArgs {
    out: PathBuf,
    #[arg(long)]
    commit: Option<String>,
    #[arg(long)]
    plan_hash: Option<String>,
}

/// Inputs that cannot be compared (exit 3).
#[derive(Debug)]
struct Incomparable(String);

impl std::fmt::Display for Incomparable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Incomparable {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).target(env_logger::Target::Stderr).init();
    match std::panic::catch_unwind(|| dispatch(&cli)) {
        Ok(Ok(code)) => ExitCode::from(code),
        Ok(Err(e)) if e.downcast_ref::<Incomparable>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INCOMPARABLE)
        }
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
        Err(_) => ExitCode::from(EXIT_ERROR),
    }
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Cmd::Run(a) => cmd_run(cli, a),
        Cmd::Compare(a) => cmd_compare(cli, a),
        Cmd::Report(a) => cmd_report(cli, a),
        Cmd::List(a) => cmd_list(cli, a),
        Cmd::Agent(a) => cmd_agent(cli, a),
        Cmd::SimInit(a) => {
            let env = SimulationEnv::builtin().scaled(a.scale)?;
            env.write_dir(&a.dir)?;
            println!("{}", a.dir.display());
            Ok(0)
        }
        Cmd::Export(a) => {
            let store = open_store(cli)?;
            let runs = store.list_runs(a.commit.as_deref(), a.plan_hash.as_deref())?;
            if runs.is_empty() {
                bail!("no runs match the selection");
            }
            let bytes = store.export(&runs, &a.out)?;
            println!("{} runs, {bytes} bytes -> {}", runs.len(), a.out.display());
            Ok(0)
        }
        Cmd::Delete { run_id } => {
            let m = open_store(cli)?.delete_run(run_id)?;
            println!("deleted {} ({}/{})", m.run_id, m.commit_id, m.plan_hash);
            Ok(0)
        }
    }
}

fn open_store(cli: &Cli) -> Result<RunStore> {
    RunStore::open(&cli.store).with_context(|| format!("opening store {}", cli.store.display()))
}

fn load_simulation(dir: &Path) -> Result<SimulationEnv> {
    SimulationEnv::load(dir).with_context(|| format!("loading simulation profile {}", dir.display()))
}

fn cmd_run(cli: &Cli, a: &RunArgs) -> Result<u8> {
    let mut plan = TestPlan::load(&a.plan).with_context(|| format!("loading plan {}", a.plan.display()))?;
    if let Some(r) = a.repetitions {
        plan.repetitions = r;
    }
    if let Some(c) = a.cooldown_ms {
        plan.cooldown_ms = c;
    }
    plan.validate()?;
    let commit = a.commit.clone().ok_or_else(|| anyhow!("no commit: pass --commit or set {COMMIT_ENV}"))?;
    let images = if a.images.is_empty() { plan.deploy.images.clone() } else { a.images.clone() };
    let mut sut = SutRef::new(commit, images)?;
    sut.deploy_spec = plan.deploy.settings.clone();
    let store = open_store(cli)?;

    // the in-process agent must outlive the orchestrator
    let (mut deployer, client, _server): (Box<dyn Deployer>, AgentClient, Option<AgentServer>) = match &cli.simulate {
        Some(dir) => {
            let env = load_simulation(dir)?;
            let deployer = MockDeployer::new(env.registry.clone());
            let server = AgentServer::spawn(Arc::new(Agent::new(env)), "127.0.0.1:0").context("starting agent")?;
            let client = AgentClient::new(server.addr().to_string());
            (Box::new(deployer), client, Some(server))
        }
        None => {
            let addr = a.agent.clone().or_else(|| plan.deploy.agent.clone()).ok_or_else(|| {
                anyhow!("no agent address: pass --agent or set `agent` in the plan's [deploy] section")
            })?;
            let client = AgentClient::new(addr);
            client.health().context("agent health check")?;
            let timeout = Duration::from_millis(plan.deploy.health_timeout_ms.unwrap_or(DEFAULT_HEALTH_TIMEOUT_MS));
            (Box::new(DockerDeployer::new(timeout)), client, None)
        }
    };
    let mut orch = Orchestrator::new(&store, deployer.as_mut(), client).with_pipeline_id(a.pipeline_id.clone());
    let records = match orch.execute_plan(&plan, &sut) {
        Ok(r) => r,
        Err(OrchestratorError::PlanFailed(records)) => {
            for r in &records {
                println!("{}\t{}", r.run_id, status_text(&r.status));
            }
            bail!("all {} repetitions were invalid", records.len());
        }
        Err(e) => return Err(e.into()),
    };
    for r in &records {
        println!("{}\t{}", r.run_id, status_text(&r.status));
    }
    eprintln!(
        "{} of {} runs valid for {} (plan {})",
        records.iter().filter(|r| r.status.is_valid()).count(),
        records.len(),
        sut.commit_id,
        plan.plan_hash()
    );
    Ok(0)
}

fn status_text(s: &RunStatus) -> String {
    match s {
        RunStatus::Valid => "valid".into(),
        RunStatus::Invalid { reason } => format!("invalid: {reason}"),
    }
}

/// Valid run summaries per commit, restricted to one plan hash shared by
/// every commit.
fn select(store: &RunStore, commits: &[String], plan_hash: Option<&str>) -> Result<(String, Vec<Vec<RunSummary>>)> {
    let mut per_commit: Vec<Vec<RunManifest>> = Vec::new();
    for c in commits {
        let runs: Vec<RunManifest> =
            store.list_runs(Some(c), plan_hash)?.into_iter().filter(|m| m.status.is_valid()).collect();
        if runs.is_empty() {
            match plan_hash {
                Some(h) if !store.list_runs(Some(c), None)?.is_empty() => {
                    return Err(Incomparable(format!("commit {c} has no valid runs under plan {h}")).into())
                }
                _ => bail!("no valid runs for commit {c}"),
            }
        }
        per_commit.push(runs);
    }
    let hash = match plan_hash {
        Some(h) => h.to_string(),
        None => {
            let sets: Vec<BTreeSet<&str>> =
                per_commit.iter().map(|runs| runs.iter().map(|m| m.plan_hash.as_str()).collect()).collect();
            let mut common = sets[0].clone();
            for s in &sets[1..] {
                common = common.intersection(s).copied().collect();
            }
            match common.len() {
                0 => {
                    let described: Vec<String> = commits
                        .iter()
                        .zip(&sets)
                        .map(|(c, s)| format!("{c}: {}", s.iter().copied().collect::<Vec<_>>().join(",")))
                        .collect();
                    return Err(Incomparable(format!("no plan shared by all commits ({})", described.join("; "))).into());
                }
                1 => common.into_iter().next().expect("one").to_string(),
                _ => {
                    // the plan of the most recent run among the shared ones
                    let latest = per_commit
                        .iter()
                        .flatten()
                        .filter(|m| common.contains(m.plan_hash.as_str()))
                        .max_by(|a, b| a.created_at.cmp(&b.created_at))
                        .expect("non-empty");
                    log::warn!("several shared plans; using the most recent ({}), pass --plan-hash to choose", latest.plan_hash);
                    latest.plan_hash.clone()
                }
            }
        }
    };
    let mut out = Vec::new();
    for runs in per_commit {
        let mut summaries = Vec::new();
        for m in runs.iter().filter(|m| m.plan_hash == hash) {
            let data = store.load_run(&m.run_id)?;
            summaries.push(aggregate_run(&data).with_context(|| format!("summarizing run {}", m.run_id))?);
        }
        out.push(summaries);
    }
    Ok((hash, out))
}

fn emit(bytes: &[u8], output: Option<&Path>) -> Result<()> {
    if let Some(p) = output {
        std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?;
    }
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(bytes)?;
    stdout.flush()?;
    Ok(())
}

fn cmd_compare(cli: &Cli, a: &CompareArgs) -> Result<u8> {
    let store = open_store(cli)?;
    let mut policy = ComparePolicy { threshold_percent: a.threshold, alpha: a.alpha, ..ComparePolicy::default() };
    if !a.metrics.is_empty() {
        policy.metrics = a
            .metrics
            .iter()
            .map(|m| MetricKey::parse(m).ok_or_else(|| anyhow!("unknown metric `{m}`")))
            .collect::<Result<_>>()?;
    }
    if !(a.threshold >= 0.0) || !(a.alpha > 0.0 && a.alpha < 1.0) {
        bail!("threshold must be non-negative and alpha in (0, 1)");
    }
    let (_, sides) = select(&store, &[a.baseline.clone(), a.candidate.clone()], a.sel.plan_hash.as_deref())?;
    let report = compare(&sides[0], &sides[1], &policy).map_err(|e| match e {
        joulegate::analytics::CompareError::IncomparableRuns(..) => anyhow::Error::new(Incomparable(e.to_string())),
        other => anyhow::Error::new(other),
    })?;
    emit(&render_comparison(&report, a.sel.format), a.sel.output.as_deref())?;
    Ok(if report.overall_verdict == Verdict::Regression { EXIT_REGRESSION } else { 0 })
}

fn cmd_report(cli: &Cli, a: &ReportArgs) -> Result<u8> {
    let store = open_store(cli)?;
    let (hash, sides) = select(&store, &a.commits, a.sel.plan_hash.as_deref())?;
    if let Some(kind) = a.plot {
        let mut versions = Vec::new();
        for c in &a.commits {
            let mut values = Vec::new();
            for m in store.list_runs(Some(c), Some(&hash))?.iter().filter(|m| m.status.is_valid()) {
                values.extend(distribution(&store.load_run(&m.run_id)?, kind));
            }
            versions.push((c.clone(), values));
        }
        let mut bytes = serde_json::to_vec_pretty(&export_plot_data(&versions, kind))?;
        bytes.push(b'\n');
        emit(&bytes, a.sel.output.as_deref())?;
        return Ok(0);
    }
    let rows: Vec<VersionRow> =
        a.commits.iter().zip(&sides).filter_map(|(c, runs)| VersionRow::from_runs(c.clone(), runs)).collect();
    let thr = if a.throughput == "median" { ThroughputStat::Median } else { ThroughputStat::Mean };
    emit(&render_summary(&rows, a.sel.format, thr), a.sel.output.as_deref())?;
    Ok(0)
}

fn cmd_list(cli: &Cli, a: &ListArgs) -> Result<u8> {
    let runs = open_store(cli)?.list_runs(a.commit.as_deref(), a.plan_hash.as_deref())?;
    if a.json {
        let mut bytes = serde_json::to_vec_pretty(&runs)?;
        bytes.push(b'\n');
        emit(&bytes, None)?;
        return Ok(0);
    }
    let mut per_commit: BTreeMap<&str, usize> = BTreeMap::new();
    for m in &runs {
        *per_commit.entry(&m.commit_id).or_default() += 1;
        println!("{}\t{}\t{}\t{}\t{}", m.created_at, m.commit_id, m.plan_hash, m.run_id, status_text(&m.status));
    }
    eprintln!("{} runs across {} commits", runs.len(), per_commit.len());
    Ok(0)
}

fn cmd_agent(cli: &Cli, a: &AgentArgs) -> Result<u8> {
    let agent = match &cli.simulate {
        Some(dir) => Agent::new(load_simulation(dir)?),
        None => Agent::new(HardwareBackend {
            powercap_root: a.powercap_root.clone(),
            cgroup_root: a.cgroup_root.clone(),
            proc_root: a.proc_root.clone(),
        }),
    };
    let server = AgentServer::spawn(Arc::new(agent), &a.bind).with_context(|| format!("binding {}", a.bind))?;
    println!("{}", server.addr());
    std::io::stdout().flush()?;
    server.wait();
    Ok(0)
}
