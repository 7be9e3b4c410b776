use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::{DomainKind, EnergyDomain, EnergySource, ProbeError};

/// RAPL-like default counter range for the simulated backend.
const SIM_MAX_RANGE_UJ: u64 = 262_143_328_850;

/// Scripted `(t_ms, watts)` profile, linearly interpolated between points
/// and held constant outside them.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerProfile {
    points: Vec<(u64, f64)>,
    /// Energy in joules from t=0 up to each point.
    cumulative_j: Vec<f64>,
}

impl PowerProfile {
    pub fn new(points: Vec<(u64, f64)>) -> Result<Self, ProbeError> {
        if points.is_empty() {
            return Err(ProbeError::Profile("profile has no points".into()));
        }
        if points.iter().any(|&(_, w)| !w.is_finite() || w < 0.0) {
            return Err(ProbeError::Profile("watts must be finite and non-negative".into()));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(ProbeError::Profile("times must be strictly increasing".into()));
        }
        let mut cumulative_j = Vec::with_capacity(points.len());
        let (t0, w0) = points[0];
        let mut acc = w0 * t0 as f64 / 1e3;
        cumulative_j.push(acc);
        for w in points.windows(2) {
            let (ta, pa) = w[0];
            let (tb, pb) = w[1];
            acc += (pa + pb) / 2.0 * (tb - ta) as f64 / 1e3;
            cumulative_j.push(acc);
        }
        Ok(PowerProfile { points, cumulative_j })
    }

    pub fn constant(watts: f64) -> Self {
        PowerProfile::new(vec![(0, watts)]).expect("valid constant profile")
    }

    /// Parses the `t_ms,watts` CSV format (header row required).
    pub fn parse_csv(text: &str) -> Result<Self, ProbeError> {
        let mut lines = text.lines();
        match lines.next().map(str::trim) {
            Some("t_ms,watts") => {}
            other => return Err(ProbeError::Profile(format!("expected header `t_ms,watts`, got {other:?}"))),
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || ProbeError::Profile(format!("line {}: `{line}`", i + 2));
            let (t, w) = line.split_once(',').ok_or_else(bad)?;
            points.push((t.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?));
        }
        PowerProfile::new(points)
    }

    pub fn load(path: &Path) -> Result<Self, ProbeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProbeError::Profile(format!("{}: {e}", path.display())))?;
        Self::parse_csv(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_ms,watts\n");
        for (t, w) in &self.points {
            s.push_str(&format!("{t},{w}\n"));
        }
        s
    }

    /// Every watt value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, ProbeError> {
        PowerProfile::new(self.points.iter().map(|&(t, w)| (t, w * factor)).collect())
    }

    pub fn watts_at(&self, t_ms: u64) -> f64 {
        match self.points.partition_point(|&(t, _)| t <= t_ms) {
            0 => self.points[0].1,
            i if i == self.points.len() => self.points[i - 1].1,
            i => {
                let (ta, pa) = self.points[i - 1];
                let (tb, pb) = self.points[i];
                pa + (pb - pa) * (t_ms - ta) as f64 / (tb - ta) as f64
            }
        }
    }

    /// Energy from t=0 to `t_ms`, in joules.
    pub fn energy_j(&self, t_ms: u64) -> f64 {
        let (t0, w0) = self.points[0];
        if t_ms <= t0 {
            return w0 * t_ms as f64 / 1e3;
        }
        let i = self.points.partition_point(|&(t, _)| t <= t_ms) - 1;
        let (ta, pa) = self.points[i];
        let pt = self.watts_at(t_ms);
        self.cumulative_j[i] + (pa + pt) / 2.0 * (t_ms - ta) as f64 / 1e3
    }
}

/// Live work counter of a simulated workload, used to couple simulated
/// energy to the amount of work the system under test performs.
pub trait ActivityMeter: Send + Sync {
    fn work_units(&self) -> u64;
}

/// Simulated energy counters: each domain integrates its scripted profile
/// plus an optional per-work-unit energy term, wrapping like a hardware
/// counter.
#[derive(Clone)]
pub struct SimulatedEnergy {
    profiles: BTreeMap<DomainKind, PowerProfile>,
    joules_per_unit: BTreeMap<DomainKind, f64>,
    activity: Option<(Arc<dyn ActivityMeter>, u64)>,
    max_range_uj: u64,
    initial_uj: u64,
}

impl std::fmt::Debug for SimulatedEnergy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimulatedEnergy")
            .field("profiles", &self.profiles)
            .field("joules_per_unit", &self.joules_per_unit)
            .field("coupled", &self.activity.is_some())
            .field("max_range_uj", &self.max_range_uj)
            .field("initial_uj", &self.initial_uj)
            .finish()
    }
}

impl Default for SimulatedEnergy {
    fn default() -> Self {
        Self::new()
    }
}

impl SimulatedEnergy {
    pub fn new() -> Self {
        SimulatedEnergy {
            profiles: BTreeMap::new(),
            joules_per_unit: BTreeMap::new(),
            activity: None,
            max_range_uj: SIM_MAX_RANGE_UJ,
            initial_uj: 0,
        }
    }

    pub fn constant(cpu_watts: f64, dram_watts: f64) -> Self {
        Self::new()
            .with_profile(DomainKind::CpuPackage, PowerProfile::constant(cpu_watts))
            .with_profile(DomainKind::Dram, PowerProfile::constant(dram_watts))
    }

    pub fn with_profile(mut self, kind: DomainKind, profile: PowerProfile) -> Self {
        self.profiles.insert(kind, profile);
        self
    }

    pub fn with_coupling(mut self, kind: DomainKind, joules_per_unit: f64) -> Self {
        self.joules_per_unit.insert(kind, joules_per_unit);
        self
    }

    /// Counts work from the meter's current value onwards.
    pub fn with_activity(mut self, meter: Arc<dyn ActivityMeter>) -> Self {
        let base = meter.work_units();
        self.activity = Some((meter, base));
        self
    }

    pub fn with_range(mut self, max_range_uj: u64, initial_uj: u64) -> Self {
        assert!(max_range_uj > 0);
        self.max_range_uj = max_range_uj;
        self.initial_uj = initial_uj % max_range_uj;
        self
    }

    pub fn has_profile(&self, kind: DomainKind) -> bool {
        self.profiles.contains_key(&kind)
    }

    /// Unwrapped energy in µJ consumed by `kind` up to `now_ms`.
    pub fn energy_uj(&self, kind: DomainKind, now_ms: u64) -> Option<u64> {
        let profile = self.profiles.get(&kind)?;
        let mut joules = profile.energy_j(now_ms);
        if let (Some((meter, base)), Some(per_unit)) = (&self.activity, self.joules_per_unit.get(&kind)) {
            joules += meter.work_units().saturating_sub(*base) as f64 * per_unit;
        }
        Some((joules * 1e6).floor() as u64)
    }
}

impl EnergySource for SimulatedEnergy {
    fn domain(&mut self, kind: DomainKind) -> Result<(EnergyDomain, Vec<String>), ProbeError> {
        if !self.profiles.contains_key(&kind) {
            return Err(ProbeError::Unavailable(format!("no simulated profile for {kind}")));
        }
        Ok((
            EnergyDomain { kind, counter_path: format!("sim:{kind}"), max_range_uj: self.max_range_uj },
            Vec::new(),
        ))
    }

    fn read(&mut self, domain: &EnergyDomain, now_ms: u64) -> Result<u64, ProbeError> {
        let uj = self
            .energy_uj(domain.kind, now_ms)
            .ok_or_else(|| ProbeError::Unavailable(format!("no simulated profile for {}", domain.kind)))?;
        Ok(((self.initial_uj as u128 + uj as u128) % self.max_range_uj as u128) as u64)
    }
}
