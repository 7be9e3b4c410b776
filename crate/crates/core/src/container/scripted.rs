use std::collections::BTreeMap;
use std::path::Path;

use super::{ContainerStat, MonitorError, StatsSource, HOST_ID};

/// Replays scripted container counters from the CSV format
/// `t_ms,container_id,memory_bytes,cpu_usage_usec`.
///
/// CPU usage is interpolated linearly between rows and memory is held from
/// the latest row; both hold their last value after the script ends. Rows
/// with container id `host` script host busy time; without them host busy
/// time is the sum over all scripted containers.
#[derive(Debug, Clone)]
pub struct ScriptedStats {
    rows: BTreeMap<String, Vec<(u64, u64, u64)>>,
    num_cpus: u32,
}

impl ScriptedStats {
    pub fn parse(text: &str, num_cpus: u32) -> Result<Self, MonitorError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("t_ms,container_id,memory_bytes,cpu_usage_usec") {
            return Err(MonitorError::Script("missing header `t_ms,container_id,memory_bytes,cpu_usage_usec`".into()));
        }
        let mut rows: BTreeMap<String, Vec<(u64, u64, u64)>> = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || MonitorError::Script(format!("line {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let [t, id, mem, cpu] = f[..] else { return Err(bad()) };
            let t: u64 = t.parse().map_err(|_| bad())?;
            let mem: u64 = mem.parse().map_err(|_| bad())?;
            let cpu: u64 = cpu.parse().map_err(|_| bad())?;
            let list = rows.entry(id.to_string()).or_default();
            if let Some(&(pt, _, pc)) = list.last() {
                if t <= pt || cpu < pc {
                    return Err(MonitorError::Script(format!("line {}: time or cpu usage went backwards", i + 2)));
                }
            }
            list.push((t, mem, cpu));
        }
        Ok(ScriptedStats { rows, num_cpus: num_cpus.max(1) })
    }

    pub fn load(path: &Path, num_cpus: u32) -> Result<Self, MonitorError> {
        let text = std::fs::read_to_string(path).map_err(|e| MonitorError::Script(format!("{}: {e}", path.display())))?;
        Self::parse(&text, num_cpus)
    }

    /// Container ids present in the script, excluding `host`.
    pub fn container_ids(&self) -> Vec<String> {
        self.rows.keys().filter(|k| *k != HOST_ID).cloned().collect()
    }

    fn at(rows: &[(u64, u64, u64)], now: u64) -> (u64, u64) {
        match rows.partition_point(|r| r.0 <= now) {
            0 => (rows[0].1, rows[0].2),
            i if i == rows.len() => (rows[i - 1].1, rows[i - 1].2),
            i => {
                let (ta, ma, ca) = rows[i - 1];
                let (tb, _, cb) = rows[i];
                let cpu = ca + ((cb - ca) as u128 * (now - ta) as u128 / (tb - ta) as u128) as u64;
                (ma, cpu)
            }
        }
    }
}

impl StatsSource for ScriptedStats {
    fn num_cpus(&self) -> u32 {
        self.num_cpus
    }

    fn container_stat(&mut self, id: &str, now_ms: u64) -> Result<Option<ContainerStat>, MonitorError> {
        Ok(self.rows.get(id).map(|rows| {
            let (memory_bytes, cpu_usage_usec) = Self::at(rows, now_ms);
            ContainerStat { timestamp_ms: now_ms, memory_bytes, cpu_usage_usec }
        }))
    }

    fn host_busy_usec(&mut self, now_ms: u64) -> Result<u64, MonitorError> {
        if let Some(rows) = self.rows.get(HOST_ID) {
            return Ok(Self::at(rows, now_ms).1);
        }
        Ok(self.rows.values().map(|r| Self::at(r, now_ms).1).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_usage_and_sums_host() {
        let mut s = ScriptedStats::parse(
            "t_ms,container_id,memory_bytes,cpu_usage_usec\n0,a,10,0\n1000,a,20,1000\n0,b,5,0\n",
            2,
        )
        .unwrap();
        assert_eq!(s.container_stat("a", 500).unwrap().unwrap().cpu_usage_usec, 500);
        assert_eq!(s.container_stat("a", 500).unwrap().unwrap().memory_bytes, 10);
        assert_eq!(s.container_stat("a", 9000).unwrap().unwrap().memory_bytes, 20);
        assert_eq!(s.host_busy_usec(2000).unwrap(), 1000);
        assert!(s.container_stat("zzz", 0).unwrap().is_none());
        assert_eq!(s.container_ids(), ["a", "b"]);
    }

    #[test]
    fn rejects_backwards_rows() {
        let e = ScriptedStats::parse("t_ms,container_id,memory_bytes,cpu_usage_usec\n5,a,1,10\n6,a,1,9\n", 1);
        assert!(e.is_err());
    }
}
