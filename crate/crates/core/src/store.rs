//! Append-only run storage: `<root>/<commit>/<plan_hash>/<run_id>/` with CSV
//! payloads, `meta.json`, and `manifest.json` written last. Runs are staged
//! under `<root>/.staging` and published by a single directory rename.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::SessionInfo;
use crate::artifact::{FileEntry, FileKind};
use crate::container::{ContainerSeries, HOST_ID};
use crate::deploy::SutRef;
use crate::loadgen::RequestLog;
use crate::metric::{self, standard_phases, PhaseMark, SampleSeries};
use crate::plan::TestPlan;
use crate::power::{CounterReading, DomainKind, EnergyDomain};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const META_FILE: &str = "meta.json";
pub const REQUESTS_FILE: &str = "requests.csv";
const STAGING_DIR: &str = ".staging";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("run {0} already exists")]
    DuplicateRun(String),
    #[error("run {0} not found")]
    NotFound(String),
    #[error("run {run_id} is corrupt: {reason}")]
    CorruptRun { run_id: String, reason: String },
    #[error("invalid run: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |e| StoreError::Io { path: path.display().to_string(), msg: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Valid,
    Invalid { reason: String },
}

impl RunStatus {
    pub fn is_valid(&self) -> bool {
        matches!(self, RunStatus::Valid)
    }
}

/// Host the run was measured on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub hostname: String,
    pub os: String,
    pub arch: String,
    pub kernel: String,
    pub num_cpus: u32,
}

impl Environment {
    pub fn detect() -> Self {
        let read = |p: &str| fs::read_to_string(p).map(|s| s.trim().to_string()).unwrap_or_default();
        Environment {
            hostname: read("/proc/sys/kernel/hostname"),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            kernel: read("/proc/sys/kernel/osrelease"),
            num_cpus: std::thread::available_parallelism().map(|n| n.get() as u32).unwrap_or(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub commit_id: String,
    pub plan_id: String,
    pub plan_hash: String,
    pub repetition_index: u32,
    pub status: RunStatus,
    /// Data files relative to the run directory.
    pub data_paths: Vec<String>,
    pub environment: Environment,
    /// Agent wall clock at monitoring t=0, Unix milliseconds; 0 when
    /// monitoring never started.
    pub wall_clock_anchor_ms: u64,
    pub pipeline_id: Option<String>,
}

/// Everything about a run that is not sample data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub record: RunRecord,
    pub plan: TestPlan,
    pub sut: SutRef,
    pub session: Option<SessionInfo>,
    /// Load start on the monitoring timeline.
    pub load_offset_ms: Option<u64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub commit_id: String,
    pub plan_hash: String,
    pub status: RunStatus,
    pub created_at: String,
    pub files: Vec<FileEntry>,
}

/// A loaded run with series on the monitoring timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub manifest: RunManifest,
    pub meta: RunMeta,
    pub power: BTreeMap<DomainKind, (EnergyDomain, Vec<CounterReading>)>,
    pub containers: Vec<ContainerSeries>,
    pub host_cpu: Option<SampleSeries>,
    /// Requests on the load timeline (0 = load start).
    pub requests: Option<RequestLog>,
}

impl RunData {
    /// Warm-up and measurement marks on the monitoring timeline.
    pub fn phase_marks(&self) -> Option<Vec<PhaseMark>> {
        let offset = self.meta.load_offset_ms?;
        Some(standard_phases(offset, self.meta.plan.warmup_ms, self.meta.plan.duration_ms))
    }
}

/// A run written to staging but not yet visible. Dropping it discards it.
#[derive(Debug)]
pub struct StagedRun {
    staging: Option<PathBuf>,
    target: PathBuf,
    manifest: RunManifest,
}

impl StagedRun {
    pub fn publish(mut self) -> Result<RunManifest, StoreError> {
        let staging = self.staging.take().expect("not yet published");
        let parent = self.target.parent().expect("run dir has parents");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        if self.target.exists() {
            let _ = fs::remove_dir_all(&staging);
            return Err(StoreError::DuplicateRun(self.manifest.run_id.clone()));
        }
        if let Err(e) = fs::rename(&staging, &self.target) {
            let _ = fs::remove_dir_all(&staging);
            return Err(io_err(&self.target)(e));
        }
        Ok(self.manifest.clone())
    }
}

impl Drop for StagedRun {
    fn drop(&mut self) {
        if let Some(s) = self.staging.take() {
            let _ = fs::remove_dir_all(s);
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    /// Opens (creating if needed) a store and discards staging leftovers of
    /// interrupted writes.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let staging = root.join(STAGING_DIR);
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
        }
        Ok(RunStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, m: &RunManifest) -> PathBuf {
        self.root.join(&m.commit_id).join(&m.plan_hash).join(&m.run_id)
    }

    /// Writes data files, `meta.json` and finally `manifest.json` into a
    /// staging directory.
    pub fn stage(&self, meta: &RunMeta, files: &[(String, FileKind, Vec<u8>)]) -> Result<StagedRun, StoreError> {
        let r = &meta.record;
        for (what, v) in [("run id", &r.run_id), ("commit id", &r.commit_id), ("plan hash", &r.plan_hash)] {
            if v.is_empty() || v.starts_with('.') || v.contains(['/', '\\']) {
                return Err(StoreError::Invalid(format!("{what} `{v}` cannot name a directory")));
            }
        }
        if self.locate(&r.run_id)?.is_some() {
            return Err(StoreError::DuplicateRun(r.run_id.clone()));
        }
        let mut meta = meta.clone();
        meta.record.data_paths = files.iter().map(|(p, _, _)| p.clone()).collect();

        let staging_root = self.root.join(STAGING_DIR);
        let staging = staging_root.join(format!("{}.{}", r.run_id, uuid::Uuid::new_v4().simple()));
        fs::create_dir_all(&staging).map_err(io_err(&staging))?;
        let mut staged = StagedRun {
            staging: Some(staging.clone()),
            target: self.root.join(&r.commit_id).join(&r.plan_hash).join(&r.run_id),
            manifest: RunManifest {
                run_id: r.run_id.clone(),
                commit_id: r.commit_id.clone(),
                plan_hash: r.plan_hash.clone(),
                status: r.status.clone(),
                created_at: chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.6fZ").to_string(),
                files: Vec::new(),
            },
        };
        let meta_bytes = serde_json::to_vec_pretty(&meta).map_err(|e| StoreError::Invalid(e.to_string()))?;
        let all = files.iter().map(|(p, k, d)| (p.as_str(), *k, d.as_slice())).chain([(META_FILE, FileKind::Meta, &meta_bytes[..])]);
        for (name, kind, data) in all {
            if name.contains(['/', '\\']) || name == MANIFEST_FILE || name.starts_with('.') {
                return Err(StoreError::Invalid(format!("bad data file name `{name}`")));
            }
            write_synced(&staging.join(name), data)?;
            staged.manifest.files.push(FileEntry::describe(name, kind, data));
        }
        let manifest = serde_json::to_vec_pretty(&staged.manifest).map_err(|e| StoreError::Invalid(e.to_string()))?;
        write_synced(&staging.join(MANIFEST_FILE), &manifest)?;
        Ok(staged)
    }

    pub fn persist_run(&self, meta: &RunMeta, files: &[(String, FileKind, Vec<u8>)]) -> Result<RunManifest, StoreError> {
        self.stage(meta, files)?.publish()
    }

    fn locate(&self, run_id: &str) -> Result<Option<PathBuf>, StoreError> {
        for commit in subdirs(&self.root)? {
            for plan in subdirs(&commit)? {
                let dir = plan.join(run_id);
                if dir.join(MANIFEST_FILE).is_file() {
                    return Ok(Some(dir));
                }
            }
        }
        Ok(None)
    }

    fn read_manifest(dir: &Path) -> Result<RunManifest, StoreError> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptRun {
            run_id: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            reason: format!("manifest: {e}"),
        })
    }

    /// Published runs matching the filters, oldest first.
    pub fn list_runs(&self, commit_id: Option<&str>, plan_hash: Option<&str>) -> Result<Vec<RunManifest>, StoreError> {
        let mut out = Vec::new();
        for commit in subdirs(&self.root)? {
            for plan in subdirs(&commit)? {
                for run in subdirs(&plan)? {
                    if !run.join(MANIFEST_FILE).is_file() {
                        continue;
                    }
                    let m = Self::read_manifest(&run)?;
                    if commit_id.is_some_and(|c| c != m.commit_id) || plan_hash.is_some_and(|h| h != m.plan_hash) {
                        continue;
                    }
                    out.push(m);
                }
            }
        }
        out.sort_by(|a, b| (&a.created_at, &a.run_id).cmp(&(&b.created_at, &b.run_id)));
        Ok(out)
    }

    /// Reads every file, verifies checksums and rebuilds the series.
    pub fn load_run(&self, run_id: &str) -> Result<RunData, StoreError> {
        let dir = self.locate(run_id)?.ok_or_else(|| StoreError::NotFound(run_id.to_string()))?;
        let manifest = Self::read_manifest(&dir)?;
        let corrupt = |reason: String| StoreError::CorruptRun { run_id: run_id.to_string(), reason };
        let mut contents = BTreeMap::new();
        for entry in &manifest.files {
            let path = dir.join(&entry.path);
            let data = fs::read(&path).map_err(|e| corrupt(format!("{}: {e}", entry.path)))?;
            if !entry.matches(&data) {
                return Err(corrupt(format!("{} does not match its checksum", entry.path)));
            }
            contents.insert(entry.path.clone(), (entry.kind, data));
        }
        let meta_bytes = &contents.get(META_FILE).ok_or_else(|| corrupt("meta.json missing".into()))?.1;
        let meta: RunMeta = serde_json::from_slice(meta_bytes).map_err(|e| corrupt(format!("meta.json: {e}")))?;

        let marks = meta.load_offset_ms.map(|o| standard_phases(o, meta.plan.warmup_ms, meta.plan.duration_ms));
        let domains: Vec<EnergyDomain> = meta.session.as_ref().map(|s| s.domains.clone()).unwrap_or_default();
        let mut data = RunData {
            manifest: manifest.clone(),
            meta: meta.clone(),
            power: BTreeMap::new(),
            containers: Vec::new(),
            host_cpu: None,
            requests: None,
        };
        for (name, (kind, bytes)) in &contents {
            let parse = || metric::read_csv(&bytes[..]).map_err(|e| corrupt(format!("{name}: {e}")));
            match kind {
                FileKind::Meta => {}
                FileKind::Requests => {
                    data.requests = Some(
                        RequestLog::read_csv(&bytes[..], meta.plan.warmup_ms, meta.plan.duration_ms, 0)
                            .map_err(|e| corrupt(format!("{name}: {e}")))?,
                    );
                }
                FileKind::Power => {
                    for series in parse()? {
                        let kind = DomainKind::from_counter_metric(series.descriptor.name)
                            .ok_or_else(|| corrupt(format!("{name}: unexpected metric {}", series.descriptor.name)))?;
                        let domain = domains
                            .iter()
                            .find(|d| d.kind == kind)
                            .cloned()
                            .ok_or_else(|| corrupt(format!("{name}: no session domain for {kind}")))?;
                        let readings = series
                            .samples
                            .iter()
                            .map(|s| CounterReading { timestamp_ms: s.timestamp_ms, raw_uj: s.value as u64 })
                            .collect();
                        data.power.insert(kind, (domain, readings));
                    }
                }
                FileKind::Container => {
                    let mut memory = None;
                    let mut cpu = None;
                    let mut scope = None;
                    for mut series in parse()? {
                        if let Some(m) = &marks {
                            series.phase_marks = m.clone();
                        }
                        scope = Some(series.scope_id.clone());
                        match series.descriptor.name {
                            n if n == metric::MEMORY_USAGE.name => memory = Some(series),
                            n if n == metric::CPU_UTILIZATION.name => cpu = Some(series),
                            other => return Err(corrupt(format!("{name}: unexpected metric {other}"))),
                        }
                    }
                    match (scope.as_deref(), memory, cpu) {
                        (Some(HOST_ID), None, Some(cpu)) => data.host_cpu = Some(cpu),
                        (Some(id), memory, cpu) => data.containers.push(ContainerSeries {
                            container_id: id.to_string(),
                            memory: memory.unwrap_or_else(|| SampleSeries::new(&metric::MEMORY_USAGE, id)),
                            cpu: cpu.unwrap_or_else(|| SampleSeries::new(&metric::CPU_UTILIZATION, id)),
                        }),
                        (None, _, _) => {}
                    }
                }
            }
        }
        if let Some(r) = &mut data.requests {
            r.start_wall_ms = meta.record.wall_clock_anchor_ms + meta.load_offset_ms.unwrap_or(0);
        }
        Ok(data)
    }

    /// Removes a published run. Deletion is never automatic.
    pub fn delete_run(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        let dir = self.locate(run_id)?.ok_or_else(|| StoreError::NotFound(run_id.to_string()))?;
        let manifest = Self::read_manifest(&dir)?;
        // unpublish first so a half-deleted run is never listed
        let trash = self.root.join(STAGING_DIR).join(format!("deleted.{run_id}"));
        fs::create_dir_all(self.root.join(STAGING_DIR)).map_err(io_err(&self.root))?;
        fs::rename(&dir, &trash).map_err(io_err(&dir))?;
        fs::remove_dir_all(&trash).map_err(io_err(&trash))?;
        for parent in [dir.parent(), dir.parent().and_then(Path::parent)].into_iter().flatten() {
            let _ = fs::remove_dir(parent);
        }
        Ok(manifest)
    }

    /// Writes the given runs as one gzip-compressed tar archive.
    pub fn export(&self, runs: &[RunManifest], out: &Path) -> Result<u64, StoreError> {
        let file = fs::File::create(out).map_err(io_err(out))?;
        let gz = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        let mut tar = tar::Builder::new(gz);
        for m in runs {
            let dir = self.run_dir(m);
            let prefix = format!("{}/{}/{}", m.commit_id, m.plan_hash, m.run_id);
            let mut names: Vec<String> = m.files.iter().map(|f| f.path.clone()).collect();
            names.push(MANIFEST_FILE.into());
            for name in names {
                let data = fs::read(dir.join(&name)).map_err(io_err(&dir))?;
                let mut header = tar::Header::new_ustar();
                header.set_size(data.len() as u64);
                header.set_mode(0o644);
                header.set_mtime(0);
                tar.append_data(&mut header, format!("{prefix}/{name}"), data.as_slice()).map_err(io_err(out))?;
            }
        }
        let gz = tar.into_inner().map_err(io_err(out))?;
        let file = gz.finish().map_err(io_err(out))?;
        Ok(file.metadata().map_err(io_err(out))?.len())
    }
}

fn write_synced(path: &Path, data: &[u8]) -> Result<(), StoreError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(data).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(io_err(dir)(e)),
    };
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        if entry.file_type().map_err(io_err(dir))?.is_dir() && !name.to_string_lossy().starts_with('.') {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}
