//! The per-commit experiment lifecycle: deploy, monitor, load, collect,
//! persist, tear down; repeated per the plan.

use std::time::Duration;

use thiserror::Error;

use crate::agent::{AgentClient, AgentError, MonitoringConfig, SessionInfo, HOST_CPU_FILE};
use crate::artifact::FileKind;
use crate::clock::wall_clock_ms;
use crate::deploy::{Deployer, SutRef};
use crate::loadgen::{run_scenario, LoadError, RequestLog};
use crate::plan::TestPlan;
use crate::store::{Environment, RunManifest, RunMeta, RunRecord, RunStatus, RunStore, StoreError, REQUESTS_FILE};

/// Time until the agent clock is half an interval past a sampling tick, so
/// phase boundaries fall between readings.
fn mid_interval_delay(anchor_wall_ms: u64, now_wall_ms: u64, interval_ms: u64) -> Duration {
    if interval_ms == 0 {
        return Duration::ZERO;
    }
    let phase = now_wall_ms.saturating_sub(anchor_wall_ms) % interval_ms;
    let target = interval_ms / 2;
    Duration::from_millis((target + interval_ms - phase) % interval_ms)
}

pub const COMMIT_ENV: &str = "CI_COMMIT_SHA";
pub const PIPELINE_ENV: &str = "CI_PIPELINE_ID";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("all {} repetitions were invalid", .0.len())]
    PlanFailed(Vec<RunRecord>),
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().map(|v| v.trim().to_string()).filter(|v| !v.is_empty())
}

/// Commit id from the CI environment.
pub fn commit_from_env() -> Option<String> {
    env_var(COMMIT_ENV)
}

pub fn pipeline_from_env() -> Option<String> {
    env_var(PIPELINE_ENV)
}

fn file_kind(name: &str) -> FileKind {
    if name.starts_with("power_") {
        FileKind::Power
    } else if name == HOST_CPU_FILE || name.starts_with("container_") {
        FileKind::Container
    } else {
        FileKind::Meta
    }
}

fn agent_reason(e: &AgentError) -> String {
    match e {
        AgentError::Lost(msg) => format!("agent_lost: {msg}"),
        AgentError::Protocol(msg) => format!("agent_protocol: {msg}"),
        AgentError::Remote { code, detail } => format!("agent_{}: {detail}", code.as_str()),
    }
}

pub struct Orchestrator<'a> {
    store: &'a RunStore,
    deployer: &'a mut dyn Deployer,
    agent: AgentClient,
    pipeline_id: Option<String>,
    environment: Environment,
}

/// Partial results of a run, filled in as the lifecycle advances.
struct Attempt {
    session: Option<SessionInfo>,
    log: Option<RequestLog>,
    files: Vec<(String, FileKind, Vec<u8>)>,
    notes: Vec<String>,
}

impl<'a> Orchestrator<'a> {
    pub fn new(store: &'a RunStore, deployer: &'a mut dyn Deployer, agent: AgentClient) -> Self {
        Orchestrator { store, deployer, agent, pipeline_id: pipeline_from_env(), environment: Environment::detect() }
    }

    pub fn with_pipeline_id(mut self, id: Option<String>) -> Self {
        self.pipeline_id = id;
        self
    }

    /// Runs the plan `repetitions` times, sequentially, with a fresh
    /// deployment each time and the plan's cool-down in between.
    pub fn execute_plan(&mut self, plan: &TestPlan, sut: &SutRef) -> Result<Vec<RunRecord>, OrchestratorError> {
        let mut records = Vec::with_capacity(plan.repetitions as usize);
        for rep in 0..plan.repetitions {
            if rep > 0 && plan.cooldown_ms > 0 {
                std::thread::sleep(Duration::from_millis(plan.cooldown_ms));
            }
            let record = self.execute_run(plan, sut, rep)?;
            match &record.status {
                RunStatus::Valid => log::info!("run {} ({}/{}) valid", record.run_id, rep + 1, plan.repetitions),
                RunStatus::Invalid { reason } => {
                    log::warn!("run {} ({}/{}) invalid: {reason}", record.run_id, rep + 1, plan.repetitions)
                }
            }
            records.push(record);
        }
        if records.iter().all(|r| !r.status.is_valid()) {
            return Err(OrchestratorError::PlanFailed(records));
        }
        Ok(records)
    }

    /// One repetition. Failures of the SUT, the agent or the load generator
    /// produce an invalid record; only store failures are errors.
    pub fn execute_run(&mut self, plan: &TestPlan, sut: &SutRef, repetition_index: u32) -> Result<RunRecord, OrchestratorError> {
        let run_id = uuid::Uuid::new_v4().to_string();
        let mut attempt = Attempt { session: None, log: None, files: Vec::new(), notes: Vec::new() };
        let outcome = self.lifecycle(&run_id, plan, sut, &mut attempt);
        if let Err(e) = self.deployer.teardown() {
            attempt.notes.push(format!("teardown failed: {e}"));
        }
        let left = self.deployer.running();
        if !left.is_empty() {
            attempt.notes.push(format!("containers left running after teardown: {}", left.join(", ")));
        }
        let status = match outcome {
            Ok(()) => RunStatus::Valid,
            Err(reason) => RunStatus::Invalid { reason },
        };
        attempt.notes.push(format!("think time {} ms applies after every operation", plan.think_time_ms));
        attempt.notes.push("run start anchored on the agent clock; driver/testbed clock skew is not corrected".into());

        let anchor = attempt.session.as_ref().map_or(0, |s| s.anchor_wall_ms);
        let load_offset_ms = match (&attempt.session, &attempt.log) {
            (Some(s), Some(l)) => Some(l.start_wall_ms.saturating_sub(s.anchor_wall_ms)),
            _ => None,
        };
        if let Some(l) = &attempt.log {
            attempt.files.push((REQUESTS_FILE.to_string(), FileKind::Requests, l.to_csv_bytes()));
        }
        // invalid runs keep their metadata only
        let files = if status.is_valid() { attempt.files } else { Vec::new() };
        let meta = RunMeta {
            record: RunRecord {
                run_id,
                commit_id: sut.commit_id.clone(),
                plan_id: plan.plan_id.clone(),
                plan_hash: plan.plan_hash(),
                repetition_index,
                status,
                data_paths: Vec::new(),
                environment: self.environment.clone(),
                wall_clock_anchor_ms: anchor,
                pipeline_id: self.pipeline_id.clone(),
            },
            plan: plan.clone(),
            sut: sut.clone(),
            session: attempt.session,
            load_offset_ms,
            notes: attempt.notes,
        };
        let manifest: RunManifest = self.store.persist_run(&meta, &files)?;
        let mut record = meta.record;
        record.data_paths = manifest.files.iter().map(|f| f.path.clone()).filter(|p| p != crate::store::META_FILE).collect();
        Ok(record)
    }

    fn lifecycle(&mut self, run_id: &str, plan: &TestPlan, sut: &SutRef, a: &mut Attempt) -> Result<(), String> {
        let deployment = self.deployer.deploy(sut).map_err(|e| format!("deploy: {e}"))?;
        let containers: Vec<String> = deployment
            .containers
            .iter()
            .filter(|c| plan.container_selector.selects(&c.service))
            .map(|c| c.container_id.clone())
            .collect();
        if containers.is_empty() {
            return Err("no_containers: the selector matched no deployed service".into());
        }
        let config = MonitoringConfig {
            domains: plan.monitored_domains.clone(),
            interval_ms: plan.sampling_interval_ms,
            containers,
        };
        let session = self.agent.start(run_id, &config).map_err(|e| agent_reason(&e))?;
        a.notes.extend(session.warnings.iter().cloned());
        std::thread::sleep(mid_interval_delay(session.anchor_wall_ms, wall_clock_ms(), plan.sampling_interval_ms));
        a.session = Some(session);

        let load = run_scenario(&plan.scenario, plan.load_params(), &deployment.base_url);
        // stop even when the load failed so the agent is free for the next run
        let stopped = self.agent.stop(run_id);
        let load_failure = match load {
            Ok(log) => {
                let failure = log.measurement().next().is_some()
                    && log.measurement().all(|r| r.outcome == crate::loadgen::Outcome::Transport);
                a.log = Some(log);
                failure.then(|| "target_down: every measured request failed in transport".to_string())
            }
            Err(LoadError::TargetDown { url, msg }) => Some(format!("target_down: {url}: {msg}")),
            Err(e) => Some(format!("loadgen: {e}")),
        };
        let stopped = stopped.map_err(|e| agent_reason(&e))?;
        let degraded = stopped.session.degraded;
        let reasons = stopped.session.degraded_reasons.join("; ");
        a.session = Some(stopped.session);
        if let Some(reason) = load_failure {
            return Err(reason);
        }
        if degraded {
            return Err(format!("degraded: {reasons}"));
        }
        let (files, _) = self.agent.fetch(run_id, &stopped.manifest).map_err(|e| agent_reason(&e))?;
        a.files = files.into_iter().map(|(name, bytes)| (name.clone(), file_kind(&name), bytes)).collect();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_starts_between_ticks() {
        let ms = |d: Duration| d.as_millis() as u64;
        assert_eq!(ms(mid_interval_delay(1000, 1000, 1000)), 500);
        assert_eq!(ms(mid_interval_delay(1000, 1500, 1000)), 0);
        assert_eq!(ms(mid_interval_delay(1000, 1501, 1000)), 999);
        assert_eq!(ms(mid_interval_delay(1000, 3250, 500)), 0);
        assert_eq!(ms(mid_interval_delay(5000, 1000, 1000)), 500);
        assert_eq!(mid_interval_delay(0, 7, 0), Duration::ZERO);
    }
}
