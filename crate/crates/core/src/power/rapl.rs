//! Powercap sysfs backend: `<root>/intel-rapl:N[:M]/{name,energy_uj,max_energy_range_uj}`.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use super::{DomainKind, EnergyDomain, EnergySource, ProbeError, FALLBACK_MAX_RANGE_UJ};

pub const DEFAULT_POWERCAP_ROOT: &str = "/sys/class/powercap";

#[derive(Debug, Clone)]
pub struct RaplSysfs {
    root: PathBuf,
    fallback_max_range_uj: u64,
}

impl Default for RaplSysfs {
    fn default() -> Self {
        Self::new(DEFAULT_POWERCAP_ROOT)
    }
}

impl RaplSysfs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RaplSysfs { root: root.into(), fallback_max_range_uj: FALLBACK_MAX_RANGE_UJ }
    }

    pub fn with_fallback_range(mut self, max_range_uj: u64) -> Self {
        self.fallback_max_range_uj = max_range_uj;
        self
    }

    /// Zone directories whose `name` matches `kind`, in sorted order.
    fn zones(&self, kind: DomainKind) -> Result<Vec<PathBuf>, ProbeError> {
        let entries = fs::read_dir(&self.root)
            .map_err(|e| ProbeError::Unavailable(format!("{}: {e}", self.root.display())))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| {
                p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("intel-rapl:"))
            })
            .filter(|p| {
                let name = fs::read_to_string(p.join("name")).unwrap_or_default();
                let name = name.trim();
                match kind {
                    DomainKind::CpuPackage => name.starts_with("package"),
                    DomainKind::Dram => name == "dram",
                }
            })
            .collect();
        found.sort();
        Ok(found)
    }
}

fn read_u64(path: &Path) -> Result<u64, ProbeError> {
    let text = fs::read_to_string(path).map_err(|e| {
        let why = if e.kind() == ErrorKind::PermissionDenied { "permission denied" } else { "unreadable" };
        ProbeError::Unavailable(format!("{}: {why} ({e})", path.display()))
    })?;
    text.trim()
        .parse()
        .map_err(|_| ProbeError::Unavailable(format!("{}: not an integer", path.display())))
}

impl EnergySource for RaplSysfs {
    fn domain(&mut self, kind: DomainKind) -> Result<(EnergyDomain, Vec<String>), ProbeError> {
        let zones = self.zones(kind)?;
        let Some(zone) = zones.first() else {
            return Err(ProbeError::Unavailable(format!("no RAPL {kind} zone under {}", self.root.display())));
        };
        let mut warnings = Vec::new();
        if zones.len() > 1 {
            warnings.push(format!("{} {kind} zones present, measuring {} only", zones.len(), zone.display()));
        }
        // probe readability now so a missing permission fails at start
        read_u64(&zone.join("energy_uj"))?;
        let max_range_uj = match read_u64(&zone.join("max_energy_range_uj")) {
            Ok(v) if v > 0 => v,
            _ => {
                warnings.push(format!(
                    "{}: max_energy_range_uj unavailable, assuming {} uJ",
                    zone.display(),
                    self.fallback_max_range_uj
                ));
                self.fallback_max_range_uj
            }
        };
        Ok((EnergyDomain { kind, counter_path: zone.display().to_string(), max_range_uj }, warnings))
    }

    fn read(&mut self, domain: &EnergyDomain, _now_ms: u64) -> Result<u64, ProbeError> {
        read_u64(&Path::new(&domain.counter_path).join("energy_uj"))
    }
}
