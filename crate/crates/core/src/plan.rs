//! Test plans: `configuration.ini`-style files with `[plan]`, `[scenario]`,
//! `[monitoring]` and `[deploy]` sections.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::sha256_hex;
use crate::loadgen::{LoadParams, Scenario};
use crate::power::{DomainKind, MIN_INTERVAL_MS};

pub const DEFAULT_REPETITIONS: u32 = 1;
pub const DEFAULT_INTERVAL_MS: u64 = 1000;
pub const DEFAULT_COOLDOWN_MS: u64 = 5000;
pub const DEFAULT_HEALTH_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("malformed plan: {0}")]
    Syntax(String),
    #[error("missing mandatory key `{0}`")]
    Missing(&'static str),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("scenario: {0}")]
    Scenario(String),
}

/// Which SUT containers the agent monitors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerSelector {
    /// Every container of the deployment.
    All,
    /// Containers whose service name is listed.
    Services(Vec<String>),
}

impl ContainerSelector {
    pub fn selects(&self, service: &str) -> bool {
        match self {
            ContainerSelector::All => true,
            ContainerSelector::Services(names) => names.iter().any(|n| n == service),
        }
    }
}

/// A fully resolved test plan. Everything that shapes the measurement is
/// here and enters the plan hash; where the SUT comes from does not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPlan {
    pub plan_id: String,
    pub users: usize,
    pub duration_ms: u64,
    pub warmup_ms: u64,
    pub think_time_ms: u64,
    pub repetitions: u32,
    pub sampling_interval_ms: u64,
    pub monitored_domains: Vec<DomainKind>,
    pub container_selector: ContainerSelector,
    pub scenario: Scenario,
    /// Where the scenario was read from; not part of the hash.
    pub scenario_ref: PathBuf,
    pub cooldown_ms: u64,
    pub deploy: DeploySection,
}

/// The hashed part of a plan.
#[derive(Serialize)]
struct Hashed<'a> {
    plan_id: &'a str,
    users: usize,
    duration_ms: u64,
    warmup_ms: u64,
    think_time_ms: u64,
    sampling_interval_ms: u64,
    monitored_domains: &'a [DomainKind],
    container_selector: &'a ContainerSelector,
    scenario: &'a Scenario,
}

/// `[deploy]` defaults; the command line may supply the SUT instead.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploySection {
    pub images: Vec<String>,
    pub agent: Option<String>,
    pub health_timeout_ms: Option<u64>,
    /// Remaining keys, passed to the deployer as service settings.
    pub settings: BTreeMap<String, String>,
}

impl TestPlan {
    /// Digest of the canonical serialization, 16 hex digits.
    pub fn plan_hash(&self) -> String {
        let view = Hashed {
            plan_id: &self.plan_id,
            users: self.users,
            duration_ms: self.duration_ms,
            warmup_ms: self.warmup_ms,
            think_time_ms: self.think_time_ms,
            sampling_interval_ms: self.sampling_interval_ms,
            monitored_domains: &self.monitored_domains,
            container_selector: &self.container_selector,
            scenario: &self.scenario,
        };
        let canonical = serde_json::to_vec(&view).expect("plan serializes");
        sha256_hex(&canonical)[..16].to_string()
    }

    pub fn load_params(&self) -> LoadParams {
        LoadParams {
            users: self.users,
            duration_ms: self.duration_ms,
            warmup_ms: self.warmup_ms,
            think_time_ms: self.think_time_ms,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, msg: String| Err(ConfigError::Invalid { key: key.into(), msg });
        if self.plan_id.is_empty() || self.plan_id.contains(['/', '\\']) {
            return invalid("plan.id", format!("`{}` is not a usable identifier", self.plan_id));
        }
        if self.users == 0 {
            return invalid("plan.users", "must be at least 1".into());
        }
        if self.warmup_ms >= self.duration_ms {
            return invalid("plan.warmup_ms", format!("{} must be below duration_ms {}", self.warmup_ms, self.duration_ms));
        }
        if self.repetitions == 0 {
            return invalid("plan.repetitions", "must be at least 1".into());
        }
        if self.sampling_interval_ms < MIN_INTERVAL_MS {
            return invalid("monitoring.interval_ms", format!("must be at least {MIN_INTERVAL_MS}"));
        }
        if self.monitored_domains.is_empty() {
            return invalid("monitoring.domains", "at least one domain is required".into());
        }
        self.scenario.validate().map_err(|e| ConfigError::Scenario(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let default_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plan");
        Self::parse(&text, base, default_id)
    }

    /// Parses plan text; relative scenario paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path, default_id: &str) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut keys = Keys::new(&ini)?;

        let plan_id = keys.take("plan", "id").unwrap_or_else(|| default_id.to_string());
        let users = keys.parse("plan", "users")?.ok_or(ConfigError::Missing("plan.users"))?;
        let duration_ms = keys.parse("plan", "duration_ms")?.ok_or(ConfigError::Missing("plan.duration_ms"))?;
        let warmup_ms = keys.parse("plan", "warmup_ms")?.unwrap_or(0);
        let plan_think: Option<u64> = keys.parse("plan", "think_time_ms")?;
        let repetitions = keys.parse("plan", "repetitions")?.unwrap_or(DEFAULT_REPETITIONS);
        let cooldown_ms = keys.parse("plan", "cooldown_ms")?.unwrap_or(DEFAULT_COOLDOWN_MS);

        let scenario_path = keys.take("scenario", "path").ok_or(ConfigError::Missing("scenario.path"))?;
        let scenario_ref = base_dir.join(&scenario_path);
        let scenario = Scenario::load(&scenario_ref).map_err(|e| ConfigError::Scenario(e.to_string()))?;
        let scenario_think: Option<u64> = keys.parse("scenario", "think_time_ms")?;

        let sampling_interval_ms = keys.parse("monitoring", "interval_ms")?.unwrap_or(DEFAULT_INTERVAL_MS);
        let monitored_domains = match keys.take("monitoring", "domains") {
            None => DomainKind::ALL.to_vec(),
            Some(list) => split_list(&list)
                .map(|d| DomainKind::from_str(d).map_err(|msg| ConfigError::Invalid { key: "monitoring.domains".into(), msg }))
                .collect::<Result<Vec<_>, _>>()?,
        };
        let container_selector = match keys.take("monitoring", "containers").as_deref().map(str::trim) {
            None | Some("all") | Some("*") => ContainerSelector::All,
            Some(list) => ContainerSelector::Services(split_list(list).map(String::from).collect()),
        };

        let deploy = DeploySection {
            images: keys.take("deploy", "images").map(|l| split_list(&l).map(String::from).collect()).unwrap_or_default(),
            agent: keys.take("deploy", "agent"),
            health_timeout_ms: keys.parse("deploy", "health_timeout_ms")?,
            settings: keys.rest("deploy"),
        };
        keys.finish()?;

        let think_time_ms = plan_think.or(scenario_think).unwrap_or(scenario.think_time_ms);
        let plan = TestPlan {
            plan_id,
            users,
            duration_ms,
            warmup_ms,
            think_time_ms,
            repetitions,
            sampling_interval_ms,
            monitored_domains,
            container_selector,
            scenario,
            scenario_ref,
            cooldown_ms,
            deploy,
        };
        plan.validate()?;
        Ok(plan)
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}

/// Key lookup that remembers which keys were consumed, so leftovers can be
/// reported as typos.
struct Keys {
    entries: BTreeMap<(String, String), String>,
}

const SECTIONS: [&str; 4] = ["plan", "scenario", "monitoring", "deploy"];

impl Keys {
    fn new(ini: &Ini) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            if !SECTIONS.contains(&section) {
                if props.is_empty() {
                    continue;
                }
                return Err(ConfigError::Unknown(if section.is_empty() {
                    props.iter().next().map(|(k, _)| k.to_string()).unwrap_or_default()
                } else {
                    format!("[{section}]")
                }));
            }
            for (k, v) in props.iter() {
                entries.insert((section.to_string(), k.trim().to_string()), v.trim().to_string());
            }
        }
        Ok(Keys { entries })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.entries.remove(&(section.to_string(), key.to_string()))
    }

    fn parse<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.take(section, key)
            .map(|v| {
                v.replace('_', "")
                    .parse()
                    .map_err(|e: T::Err| ConfigError::Invalid { key: format!("{section}.{key}"), msg: format!("`{v}`: {e}") })
            })
            .transpose()
    }

    fn rest(&mut self, section: &str) -> BTreeMap<String, String> {
        let keys: Vec<_> = self.entries.keys().filter(|(s, _)| s == section).cloned().collect();
        keys.into_iter().map(|k| { let v = self.entries.remove(&k).unwrap(); (k.1, v) }).collect()
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_keys().next() {
            Some((s, k)) => Err(ConfigError::Unknown(format!("{s}.{k}"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENARIO: &str = "think_time_ms = 750\n[[operation]]\nname = \"login\"\nmethod = \"POST\"\npath = \"/login\"\nbody = '{\"user\":\"{user}\",\"pass\":\"{pass}\"}'\n";

    fn dir_with_scenario() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("login.toml"), SCENARIO).unwrap();
        dir
    }

    const FULL_SCALE: &str = "[plan]\nid = jwt\nusers = 10\nduration_ms = 100000\nwarmup_ms = 10000\nrepetitions = 3\n\n[scenario]\npath = login.toml\n\n[monitoring]\ninterval_ms = 1000\ndomains = cpu_package, dram\n\n[deploy]\nimages = mock-sut:v1\n";

    #[test]
    fn full_scale_setup_resolves_with_defaults() {
        let dir = dir_with_scenario();
        let p = TestPlan::parse(FULL_SCALE, dir.path(), "x").unwrap();
        assert_eq!((p.users, p.duration_ms, p.warmup_ms, p.sampling_interval_ms), (10, 100_000, 10_000, 1000));
        assert_eq!(p.think_time_ms, 750);
        assert_eq!(p.cooldown_ms, DEFAULT_COOLDOWN_MS);
        assert_eq!(p.container_selector, ContainerSelector::All);
        assert_eq!(p.deploy.images, vec!["mock-sut:v1"]);
        assert_eq!(p.plan_hash(), TestPlan::parse(FULL_SCALE, dir.path(), "x").unwrap().plan_hash());
    }

    #[test]
    fn hash_ignores_deploy_but_not_load_shape() {
        let dir = dir_with_scenario();
        let a = TestPlan::parse(FULL_SCALE, dir.path(), "x").unwrap();
        let b = TestPlan::parse(&FULL_SCALE.replace("mock-sut:v1", "mock-sut:v3"), dir.path(), "x").unwrap();
        let c = TestPlan::parse(&FULL_SCALE.replace("users = 10", "users = 11"), dir.path(), "x").unwrap();
        assert_eq!(a.plan_hash(), b.plan_hash());
        assert_ne!(a.plan_hash(), c.plan_hash());
        assert_eq!(a.plan_hash().len(), 16);
    }

    #[test]
    fn errors_name_the_key() {
        let dir = dir_with_scenario();
        let err = |t: &str| TestPlan::parse(t, dir.path(), "x").unwrap_err().to_string();
        assert!(err(&FULL_SCALE.replace("warmup_ms = 10000", "warmup_ms = 100000")).contains("plan.warmup_ms"));
        assert!(err(&FULL_SCALE.replace("users = 10\n", "")).contains("plan.users"));
        assert!(err(&FULL_SCALE.replace("interval_ms = 1000", "interval_ms = 50")).contains("monitoring.interval_ms"));
        assert!(err(&FULL_SCALE.replace("repetitions = 3", "repetitions = 0")).contains("plan.repetitions"));
        assert!(err(&FULL_SCALE.replace("users = 10", "users = ten")).contains("plan.users"));
        assert!(err(&FULL_SCALE.replace("users = 10", "users = 10\nusres = 3")).contains("plan.usres"));
        assert!(err(&FULL_SCALE.replace("login.toml", "missing.toml")).contains("scenario"));
    }

    #[test]
    fn plan_think_time_overrides_scenario() {
        let dir = dir_with_scenario();
        let p = TestPlan::parse(&FULL_SCALE.replace("repetitions = 3", "think_time_ms = 80"), dir.path(), "x").unwrap();
        assert_eq!(p.think_time_ms, 80);
        assert_eq!(p.repetitions, 1);
    }
}
