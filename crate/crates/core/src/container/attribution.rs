use std::collections::BTreeMap;

use serde::Serialize;

use super::MonitorError;
use crate::numeric::Scalar;

/// Allowed excess of summed container shares over host utilization, in
/// percentage points, caused by the two being read at slightly different
/// instants.
pub const SHARE_SKEW_PERCENT: f64 = 0.5;

/// CPU utilization of the host and of each container over one tick.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CpuShareSnapshot<T> {
    pub timestamp_ms: u64,
    pub host_cpu_percent: T,
    pub per_container_percent: BTreeMap<String, T>,
}

impl<T: Scalar> CpuShareSnapshot<T> {
    pub fn new(timestamp_ms: u64, host_cpu_percent: T) -> Self {
        CpuShareSnapshot { timestamp_ms, host_cpu_percent, per_container_percent: BTreeMap::new() }
    }

    pub fn with_share(mut self, id: impl Into<String>, percent: T) -> Self {
        self.per_container_percent.insert(id.into(), percent);
        self
    }

    pub fn container_total(&self) -> T {
        self.per_container_percent.values().fold(T::zero(), |a, &b| a + b)
    }

    /// True when container shares do not exceed host utilization by more
    /// than the skew allowance.
    pub fn is_consistent(&self) -> bool {
        self.container_total() <= self.host_cpu_percent + T::lit(SHARE_SKEW_PERCENT)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attribution<T> {
    pub per_container: BTreeMap<String, T>,
    /// Idle and unmonitored power, reported under the host id.
    pub residual: T,
}

impl<T: Scalar> Attribution<T> {
    pub fn total(&self) -> T {
        self.per_container.values().fold(self.residual, |a, &b| a + b)
    }
}

/// Splits host power across containers in proportion to their share of the
/// measured host CPU utilization; what is left over is the residual.
///
/// When skew makes the container shares add up to more than the host value,
/// their sum is used as the denominator so the residual never goes negative.
pub fn attribute_power<T: Scalar>(host_power_watts: T, snapshot: &CpuShareSnapshot<T>) -> Result<Attribution<T>, MonitorError> {
    if !(host_power_watts >= T::zero()) {
        return Err(MonitorError::Unavailable(format!("invalid host power {host_power_watts:?}")));
    }
    let shares_total = snapshot.container_total();
    if snapshot.host_cpu_percent <= T::zero() {
        if shares_total > T::zero() {
            return Err(MonitorError::Attribution(shares_total.to_f64_lossy()));
        }
        let per_container = snapshot.per_container_percent.keys().map(|k| (k.clone(), T::zero())).collect();
        return Ok(Attribution { per_container, residual: host_power_watts });
    }
    let denominator = if shares_total > snapshot.host_cpu_percent { shares_total } else { snapshot.host_cpu_percent };
    let per_container: BTreeMap<String, T> = snapshot
        .per_container_percent
        .iter()
        .map(|(id, &share)| (id.clone(), host_power_watts * (share.max(T::zero()) / denominator)))
        .collect();
    let attributed = per_container.values().fold(T::zero(), |a, &b| a + b);
    Ok(Attribution { per_container, residual: host_power_watts - attributed })
}
