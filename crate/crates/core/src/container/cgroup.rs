//! Control-group v2 backend: `memory.current` and `cpu.stat` per container,
//! `/proc/stat` for the host.

use std::collections::HashMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use super::{ContainerStat, MonitorError, StatsSource, HOST_ID};

pub const DEFAULT_CGROUP_ROOT: &str = "/sys/fs/cgroup";
pub const DEFAULT_PROC_ROOT: &str = "/proc";

const RUNTIME_PREFIXES: [&str; 4] = ["docker-", "cri-containerd-", "crio-", "libpod-"];
const RUNTIME_PARENTS: [&str; 3] = ["docker", "containerd", "libpod_parent"];

#[derive(Debug, Clone)]
pub struct CgroupV2 {
    cgroup_root: PathBuf,
    proc_root: PathBuf,
    num_cpus: u32,
    located: HashMap<String, PathBuf>,
}

impl Default for CgroupV2 {
    fn default() -> Self {
        Self::new(DEFAULT_CGROUP_ROOT, DEFAULT_PROC_ROOT)
    }
}

impl CgroupV2 {
    pub fn new(cgroup_root: impl Into<PathBuf>, proc_root: impl Into<PathBuf>) -> Self {
        let proc_root = proc_root.into();
        let num_cpus = count_cpus(&proc_root).unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get() as u32).unwrap_or(1)
        });
        CgroupV2 { cgroup_root: cgroup_root.into(), proc_root, num_cpus, located: HashMap::new() }
    }

    /// Finds the control-group directory of a container by id or id prefix.
    pub fn locate(&mut self, container_id: &str) -> Option<PathBuf> {
        if let Some(p) = self.located.get(container_id) {
            return Some(p.clone());
        }
        if container_id.is_empty() {
            return None;
        }
        let candidates = [
            self.cgroup_root.join("system.slice").join(format!("docker-{container_id}.scope")),
            self.cgroup_root.join("docker").join(container_id),
        ];
        let found = candidates
            .into_iter()
            .find(|p| p.is_dir())
            .or_else(|| search(&self.cgroup_root, container_id, 4))?;
        self.located.insert(container_id.to_string(), found.clone());
        Some(found)
    }
}

fn search(dir: &Path, needle: &str, depth: usize) -> Option<PathBuf> {
    if depth == 0 {
        return None;
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).ok()?.filter_map(Result::ok).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    entries.sort();
    for p in &entries {
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.contains(needle)) {
            return Some(p.clone());
        }
    }
    entries.iter().find_map(|p| search(p, needle, depth - 1))
}

fn count_cpus(proc_root: &Path) -> Option<u32> {
    let stat = fs::read_to_string(proc_root.join("stat")).ok()?;
    let n = stat
        .lines()
        .filter(|l| l.starts_with("cpu") && l.as_bytes().get(3).is_some_and(u8::is_ascii_digit))
        .count() as u32;
    (n > 0).then_some(n)
}

fn clock_ticks_per_sec() -> u64 {
    // SAFETY: sysconf has no preconditions
    let hz = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if hz > 0 {
        hz as u64
    } else {
        100
    }
}

/// Busy time summed over all CPUs from the aggregate `cpu` line of
/// `/proc/stat`, excluding idle and iowait.
fn parse_proc_stat_busy(text: &str, ticks_per_sec: u64) -> Option<u64> {
    let line = text.lines().find(|l| l.starts_with("cpu "))?;
    let fields: Vec<u64> = line.split_whitespace().skip(1).filter_map(|f| f.parse().ok()).collect();
    if fields.len() < 4 {
        return None;
    }
    let get = |i: usize| fields.get(i).copied().unwrap_or(0);
    // user nice system idle iowait irq softirq steal
    let busy = get(0) + get(1) + get(2) + get(5) + get(6) + get(7);
    Some(busy * 1_000_000 / ticks_per_sec)
}

fn read_trimmed(path: &Path) -> std::io::Result<String> {
    fs::read_to_string(path).map(|s| s.trim().to_string())
}

fn parse_usage_usec(cpu_stat: &str) -> Option<u64> {
    cpu_stat.lines().find_map(|l| l.strip_prefix("usage_usec ")).and_then(|v| v.trim().parse().ok())
}

impl StatsSource for CgroupV2 {
    fn num_cpus(&self) -> u32 {
        self.num_cpus
    }

    fn container_stat(&mut self, container_id: &str, now_ms: u64) -> Result<Option<ContainerStat>, MonitorError> {
        let Some(dir) = self.locate(container_id) else {
            return Ok(None);
        };
        let read = |file: &str| match read_trimmed(&dir.join(file)) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(MonitorError::Unavailable(format!("{}: {e}", dir.join(file).display()))),
        };
        let (Some(mem), Some(cpu)) = (read("memory.current")?, read("cpu.stat")?) else {
            self.located.remove(container_id);
            return Ok(None);
        };
        let memory_bytes = mem.parse().map_err(|_| MonitorError::Unavailable(format!("bad memory.current `{mem}`")))?;
        let cpu_usage_usec =
            parse_usage_usec(&cpu).ok_or_else(|| MonitorError::Unavailable("cpu.stat without usage_usec".into()))?;
        Ok(Some(ContainerStat { timestamp_ms: now_ms, memory_bytes, cpu_usage_usec }))
    }

    fn host_busy_usec(&mut self, _now_ms: u64) -> Result<u64, MonitorError> {
        let path = self.proc_root.join("stat");
        let text = fs::read_to_string(&path).map_err(|e| MonitorError::Unavailable(format!("{}: {e}", path.display())))?;
        parse_proc_stat_busy(&text, clock_ticks_per_sec())
            .ok_or_else(|| MonitorError::Unavailable(format!("{}: no aggregate cpu line", path.display())))
    }
}

/// Extracts the container id from the contents of `/proc/<pid>/cgroup`, or
/// returns `host` for processes outside any container.
pub fn parse_cgroup_container(content: &str) -> String {
    for line in content.lines() {
        let path = line.rsplit_once(':').map(|(_, p)| p).unwrap_or(line);
        let segments: Vec<&str> = path.split('/').filter(|s| !s.is_empty()).collect();
        for (i, seg) in segments.iter().enumerate() {
            let trimmed = seg.strip_suffix(".scope").unwrap_or(seg);
            if let Some(id) = RUNTIME_PREFIXES.iter().find_map(|p| trimmed.strip_prefix(p)) {
                if !id.is_empty() {
                    return id.to_string();
                }
            }
            if i > 0 && RUNTIME_PARENTS.contains(&segments[i - 1]) {
                return trimmed.to_string();
            }
            if trimmed.len() == 64 && trimmed.bytes().all(|b| b.is_ascii_hexdigit()) {
                return trimmed.to_string();
            }
        }
    }
    HOST_ID.to_string()
}

/// Maps a process to the container it runs in, via its control-group path.
pub fn resolve_container_of_process(pid: u32, proc_root: &Path) -> Result<String, MonitorError> {
    let path = proc_root.join(pid.to_string()).join("cgroup");
    match fs::read_to_string(&path) {
        Ok(content) => Ok(parse_cgroup_container(&content)),
        Err(e) if matches!(e.kind(), ErrorKind::NotFound | ErrorKind::InvalidInput) => Err(MonitorError::StaleProcess(pid)),
        Err(e) => Err(MonitorError::Unavailable(format!("{}: {e}", path.display()))),
    }
}
