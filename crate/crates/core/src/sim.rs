//! Simulated testbed: in-process container registry and the scripted
//! profile directory that replaces every hardware-facing backend.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{ContainerStat, MonitorError, ScriptedStats, StatsSource};
use crate::power::{ActivityMeter, DomainKind, PowerProfile, ProbeError, SimulatedEnergy};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error("simulation config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Live counters of one simulated container.
#[derive(Debug, Default)]
pub struct MockContainer {
    pub id: String,
    alive: AtomicBool,
    work_units: AtomicU64,
    cpu_usage_usec: AtomicU64,
    memory_bytes: AtomicU64,
}

impl MockContainer {
    pub fn add_work(&self, units: u64, cpu_usec: u64) {
        self.work_units.fetch_add(units, Ordering::Relaxed);
        self.cpu_usage_usec.fetch_add(cpu_usec, Ordering::Relaxed);
    }

    pub fn set_memory(&self, bytes: u64) {
        self.memory_bytes.store(bytes, Ordering::Relaxed);
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::Acquire)
    }

    pub fn work_units(&self) -> u64 {
        self.work_units.load(Ordering::Relaxed)
    }

    pub fn cpu_usage_usec(&self) -> u64 {
        self.cpu_usage_usec.load(Ordering::Relaxed)
    }
}

/// Registry of simulated containers on the local testbed.
#[derive(Debug, Default)]
pub struct SimRegistry {
    containers: Mutex<BTreeMap<String, Arc<MockContainer>>>,
    retired_work: AtomicU64,
    retired_cpu_usec: AtomicU64,
}

impl SimRegistry {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Registers a fresh container with a generated id.
    pub fn create(&self, base_memory_bytes: u64) -> Arc<MockContainer> {
        let id = uuid::Uuid::new_v4().simple().to_string()[..12].to_string();
        let c = Arc::new(MockContainer { id: id.clone(), alive: AtomicBool::new(true), ..Default::default() });
        c.set_memory(base_memory_bytes);
        self.containers.lock().unwrap().insert(id, c.clone());
        c
    }

    pub fn remove(&self, id: &str) -> bool {
        let Some(c) = self.containers.lock().unwrap().remove(id) else {
            return false;
        };
        c.alive.store(false, Ordering::Release);
        self.retired_work.fetch_add(c.work_units(), Ordering::Relaxed);
        self.retired_cpu_usec.fetch_add(c.cpu_usage_usec(), Ordering::Relaxed);
        true
    }

    pub fn get(&self, id: &str) -> Option<Arc<MockContainer>> {
        self.containers.lock().unwrap().get(id).cloned()
    }

    pub fn ids(&self) -> Vec<String> {
        self.containers.lock().unwrap().keys().cloned().collect()
    }

    /// Busy CPU time of all containers ever registered.
    pub fn total_cpu_usec(&self) -> u64 {
        let live: u64 = self.containers.lock().unwrap().values().map(|c| c.cpu_usage_usec()).sum();
        live + self.retired_cpu_usec.load(Ordering::Relaxed)
    }
}

impl ActivityMeter for SimRegistry {
    fn work_units(&self) -> u64 {
        let live: u64 = self.containers.lock().unwrap().values().map(|c| c.work_units()).sum();
        live + self.retired_work.load(Ordering::Relaxed)
    }
}

/// Stats source reading the live registry. Host busy time is the busy time
/// of all simulated containers.
#[derive(Debug, Clone)]
pub struct RegistryStats {
    registry: Arc<SimRegistry>,
    num_cpus: u32,
}

impl RegistryStats {
    pub fn new(registry: Arc<SimRegistry>, num_cpus: u32) -> Self {
        RegistryStats { registry, num_cpus: num_cpus.max(1) }
    }
}

impl StatsSource for RegistryStats {
    fn num_cpus(&self) -> u32 {
        self.num_cpus
    }

    fn container_stat(&mut self, id: &str, now_ms: u64) -> Result<Option<ContainerStat>, MonitorError> {
        Ok(self.registry.get(id).filter(|c| c.is_alive()).map(|c| ContainerStat {
            timestamp_ms: now_ms,
            memory_bytes: c.memory_bytes.load(Ordering::Relaxed),
            cpu_usage_usec: c.cpu_usage_usec(),
        }))
    }

    fn host_busy_usec(&mut self, _now_ms: u64) -> Result<u64, MonitorError> {
        Ok(self.registry.total_cpu_usec())
    }
}

/// Tunables of a simulation profile directory (`simulation.toml`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSettings {
    /// CPU package energy per unit of work performed by simulated containers.
    pub cpu_joules_per_work_unit: f64,
    pub dram_joules_per_work_unit: f64,
    pub max_range_uj: u64,
    pub initial_counter_uj: u64,
    /// Host CPU count used for utilization; 0 means the real count.
    pub num_cpus: u32,
}

/// Idle CPU package power of the built-in profile.
pub const DEFAULT_CPU_IDLE_WATTS: f64 = 7.5;
pub const DEFAULT_DRAM_WATTS: f64 = 0.29;

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            cpu_joules_per_work_unit: 1.35e-4,
            dram_joules_per_work_unit: 0.0,
            max_range_uj: 262_143_328_850,
            initial_counter_uj: 0,
            num_cpus: 0,
        }
    }
}

pub const CPU_PROFILE_FILE: &str = "cpu_package.csv";
pub const DRAM_PROFILE_FILE: &str = "dram.csv";
pub const SETTINGS_FILE: &str = "simulation.toml";
pub const CONTAINERS_FILE: &str = "containers.csv";

/// Everything needed to run the pipeline without RAPL or a container runtime.
#[derive(Debug, Clone)]
pub struct SimulationEnv {
    pub cpu_profile: PowerProfile,
    pub dram_profile: Option<PowerProfile>,
    pub settings: SimulationSettings,
    pub containers_script: Option<ScriptedStats>,
    pub registry: Arc<SimRegistry>,
}

impl Default for SimulationEnv {
    fn default() -> Self {
        Self::builtin()
    }
}

impl SimulationEnv {
    /// Constant idle power plus work-coupled CPU energy.
    pub fn builtin() -> Self {
        SimulationEnv {
            cpu_profile: PowerProfile::constant(DEFAULT_CPU_IDLE_WATTS),
            dram_profile: Some(PowerProfile::constant(DEFAULT_DRAM_WATTS)),
            settings: SimulationSettings::default(),
            containers_script: None,
            registry: SimRegistry::new(),
        }
    }

    /// Loads a profile directory. `cpu_package.csv` is required; `dram.csv`,
    /// `simulation.toml` and `containers.csv` are optional.
    pub fn load(dir: &Path) -> Result<Self, SimError> {
        let cpu_profile = PowerProfile::load(&dir.join(CPU_PROFILE_FILE))?;
        let dram_path = dir.join(DRAM_PROFILE_FILE);
        let dram_profile = if dram_path.exists() { Some(PowerProfile::load(&dram_path)?) } else { None };
        let settings_path = dir.join(SETTINGS_FILE);
        let settings = if settings_path.exists() {
            let text = std::fs::read_to_string(&settings_path)
                .map_err(|e| SimError::Io { path: settings_path.display().to_string(), source: e })?;
            toml::from_str(&text).map_err(|e| SimError::Config(format!("{}: {e}", settings_path.display())))?
        } else {
            SimulationSettings::default()
        };
        if settings.max_range_uj == 0 {
            return Err(SimError::Config("max_range_uj must be positive".into()));
        }
        let mut env = SimulationEnv { cpu_profile, dram_profile, settings, containers_script: None, registry: SimRegistry::new() };
        let script_path = dir.join(CONTAINERS_FILE);
        if script_path.exists() {
            env.containers_script = Some(ScriptedStats::load(&script_path, env.num_cpus())?);
        }
        Ok(env)
    }

    /// Writes this environment as a profile directory.
    pub fn write_dir(&self, dir: &Path) -> Result<(), SimError> {
        let write = |path: &Path, contents: &str| {
            std::fs::write(path, contents).map_err(|e| SimError::Io { path: path.display().to_string(), source: e })
        };
        std::fs::create_dir_all(dir).map_err(|e| SimError::Io { path: dir.display().to_string(), source: e })?;
        write(&dir.join(CPU_PROFILE_FILE), &self.cpu_profile.to_csv())?;
        if let Some(d) = &self.dram_profile {
            write(&dir.join(DRAM_PROFILE_FILE), &d.to_csv())?;
        }
        let text = toml::to_string(&self.settings).map_err(|e| SimError::Config(e.to_string()))?;
        write(&dir.join(SETTINGS_FILE), &text)?;
        Ok(())
    }

    /// Same environment with every scripted watt and per-work energy
    /// multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, SimError> {
        let mut s = self.clone();
        s.cpu_profile = self.cpu_profile.scaled(factor)?;
        s.dram_profile = self.dram_profile.as_ref().map(|p| p.scaled(factor)).transpose()?;
        s.settings.cpu_joules_per_work_unit *= factor;
        s.settings.dram_joules_per_work_unit *= factor;
        Ok(s)
    }

    /// Same scripted traces but without per-work coupling.
    pub fn uncoupled(mut self) -> Self {
        self.settings.cpu_joules_per_work_unit = 0.0;
        self.settings.dram_joules_per_work_unit = 0.0;
        self
    }

    pub fn num_cpus(&self) -> u32 {
        if self.settings.num_cpus > 0 {
            self.settings.num_cpus
        } else {
            std::thread::available_parallelism().map(|n| n.get() as u32).unwrap_or(1)
        }
    }

    /// Fresh energy source for one monitoring session, counting from the
    /// registry's current activity.
    pub fn energy_source(&self) -> SimulatedEnergy {
        let mut sim = SimulatedEnergy::new()
            .with_profile(DomainKind::CpuPackage, self.cpu_profile.clone())
            .with_range(self.settings.max_range_uj, self.settings.initial_counter_uj)
            .with_coupling(DomainKind::CpuPackage, self.settings.cpu_joules_per_work_unit)
            .with_coupling(DomainKind::Dram, self.settings.dram_joules_per_work_unit)
            .with_activity(self.registry.clone());
        if let Some(d) = &self.dram_profile {
            sim = sim.with_profile(DomainKind::Dram, d.clone());
        }
        sim
    }

    pub fn stats_source(&self) -> Box<dyn StatsSource> {
        match &self.containers_script {
            Some(s) => Box::new(s.clone()),
            None => Box::new(RegistryStats::new(self.registry.clone(), self.num_cpus())),
        }
    }
}
